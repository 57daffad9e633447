"""Toy dual-stream joint-attention velocity network with a hand-written backward pass.

The main stream patchifies the noisy latent concatenated with the person
grid along channels; the garment stream patchifies the garment grid.  Each
block projects both streams with their own weights, runs one softmax
attention over the concatenated token sequence, and applies a per-stream
feed-forward.  Every sub-layer is modulated (shift, scale, gate) by a time
embedding.  The main stream decodes to a velocity, the garment stream to a
reconstruction of the garment latent.

Parameter count, with D = token_dim, M = mlp_ratio*D, F = time_features,
P = channels*patch_size**2, N = number of patches, L = depth::

    time MLP        F*D + D + D*D + D
    input maps      (2P*D + D) + (P*D + D)
    positions       2*N*D                       (only with pos_embed)
    per block       2 * (6D*D + 6D + 3D*D + 3D + D*D + D + D*M + M + M*D + D)
    final layers    2 * (2D*D + 2D + D*P + P)

:func:`count_params` evaluates this formula.
"""
import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels as K
from .errors import ConfigError, DomainError, IncompatibleArtifact, NumericError, ShapeError

STREAMS = ("x", "g")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    height: int = 16
    width: int = 16
    patch_size: int = 4
    token_dim: int = 64
    heads: int = 4
    depth: int = 3
    mlp_ratio: int = 4
    time_features: int = 32
    pos_embed: bool = False
    gate_init: float = 0.05
    uncond_mode: str = "zero-garment"

    def validate(self):
        if self.token_dim % self.heads:
            raise ConfigError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(f"grid {self.height}x{self.width} not divisible by patch {self.patch_size}")
        if self.time_features % 2:
            raise ConfigError("time_features must be even")
        if min(self.channels, self.token_dim, self.depth, self.patch_size) < 1:
            raise ConfigError("sizes must be positive")
        if self.uncond_mode != "zero-garment":
            raise ConfigError(f"unsupported uncond_mode {self.uncond_mode!r}")
        return self

    @property
    def grid_shape(self):
        return (self.channels, self.height, self.width)

    @property
    def n_tokens(self):
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def patch_dim(self):
        return self.channels * self.patch_size ** 2


def count_params(cfg):
    D, M, F = cfg.token_dim, cfg.mlp_ratio * cfg.token_dim, cfg.time_features
    P, N, L = cfg.patch_dim, cfg.n_tokens, cfg.depth
    total = F * D + D + D * D + D
    total += (2 * P * D + D) + (P * D + D)
    if cfg.pos_embed:
        total += 2 * N * D
    total += L * 2 * (6 * D * D + 6 * D + 3 * D * D + 3 * D + D * D + D + D * M + M + M * D + D)
    total += 2 * (2 * D * D + 2 * D + D * P + P)
    return total


def param_shapes(cfg):
    """Ordered (name, shape) list; this order is the checkpoint blob order."""
    D, M, F = cfg.token_dim, cfg.mlp_ratio * cfg.token_dim, cfg.time_features
    P, N = cfg.patch_dim, cfg.n_tokens
    out = [("time.w1", (F, D)), ("time.b1", (D,)), ("time.w2", (D, D)), ("time.b2", (D,))]
    for s, pin in (("x", 2 * P), ("g", P)):
        out += [(f"{s}.in_w", (pin, D)), (f"{s}.in_b", (D,))]
        if cfg.pos_embed:
            out.append((f"{s}.pos", (N, D)))
    for l in range(cfg.depth):
        for s in STREAMS:
            p = f"blk{l}.{s}."
            out += [(p + "mod_w", (D, 6 * D)), (p + "mod_b", (6 * D,)),
                    (p + "qkv_w", (D, 3 * D)), (p + "qkv_b", (3 * D,)),
                    (p + "out_w", (D, D)), (p + "out_b", (D,)),
                    (p + "ff1_w", (D, M)), (p + "ff1_b", (M,)),
                    (p + "ff2_w", (M, D)), (p + "ff2_b", (D,))]
    for s in STREAMS:
        p = f"final.{s}."
        out += [(p + "mod_w", (D, 2 * D)), (p + "mod_b", (2 * D,)),
                (p + "out_w", (D, P)), (p + "out_b", (P,))]
    return out


# --- layout helpers -------------------------------------------------------

def patchify(x, p):
    b, c, h, w = x.shape
    t = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(t.reshape(b, (h // p) * (w // p), c * p * p))


def unpatchify(tok, c, h, w, p):
    b = tok.shape[0]
    t = tok.reshape(b, h // p, w // p, c, p, p).transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(t.reshape(b, c, h, w))


def time_features(t, n):
    half = n // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    arg = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.cos(arg), np.sin(arg)], axis=1)


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def _ln(x):
    shp = x.shape
    y, rstd = K.layernorm_fwd(np.ascontiguousarray(x.reshape(-1, shp[-1])))
    return y.reshape(shp), rstd


def _ln_bwd(dy, y, rstd):
    shp = dy.shape
    d = K.layernorm_bwd(np.ascontiguousarray(dy.reshape(-1, shp[-1])),
                        np.ascontiguousarray(y.reshape(-1, shp[-1])), rstd)
    return d.reshape(shp)


def _lin_grad(grads, name, a, d_out):
    """Accumulate weight/bias grads of ``a @ W + b`` given the output cotangent."""
    din = a.shape[-1]
    grads[name + "_w"] += a.reshape(-1, din).T @ d_out.reshape(-1, d_out.shape[-1])
    grads[name + "_b"] += d_out.reshape(-1, d_out.shape[-1]).sum(axis=0)


@dataclass
class ForwardOutput:
    velocity: np.ndarray     # (B, C, H, W)
    garment_out: np.ndarray  # (B, C, H, W)
    taps: dict = None        # block index -> main-stream tokens (B, N, D)


class VelocityModel:
    def __init__(self, config, params, seed=0):
        self.config = config.validate()
        self.params = params
        self.seed = seed

    @classmethod
    def init(cls, config=None, seed=0):
        cfg = (config or ModelConfig()).validate()
        rng = np.random.default_rng([seed, 7919])
        D = cfg.token_dim
        params = {}
        for name, shape in param_shapes(cfg):
            kind = name.rsplit(".", 1)[1]
            if kind.endswith("_b") or kind in ("b1", "b2"):
                v = np.zeros(shape)
                if kind == "mod_b" and not name.startswith("final"):
                    v[2 * D:3 * D] = cfg.gate_init
                    v[5 * D:6 * D] = cfg.gate_init
            elif kind == "mod_w":
                v = rng.normal(0.0, 0.02 / np.sqrt(shape[0]), shape)
            elif kind == "pos":
                v = rng.normal(0.0, 0.1, shape)
            elif name.startswith("final") and kind == "out_w":
                v = rng.normal(0.0, 0.1 / np.sqrt(shape[0]), shape)
            else:
                v = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            params[name] = v
        return cls(cfg, params, seed)

    def copy(self):
        return VelocityModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed)

    @property
    def n_params(self):
        return sum(v.size for v in self.params.values())

    def zeros_like_params(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def flat(self):
        return np.concatenate([self.params[k].ravel() for k, _ in param_shapes(self.config)])

    def set_flat(self, vec):
        i = 0
        for k, shape in param_shapes(self.config):
            n = int(np.prod(shape))
            self.params[k] = np.asarray(vec[i:i + n], dtype=np.float64).reshape(shape).copy()
            i += n
        if i != len(vec):
            raise ShapeError(f"parameter vector has {len(vec)} entries, model needs {i}")

    # --- forward --------------------------------------------------------

    def _check_inputs(self, x_t, person, garment, t):
        shape = self.config.grid_shape
        arrs = []
        for name, a in (("x_t", x_t), ("person", person), ("garment", garment)):
            a = np.asarray(a, dtype=np.float64)
            if a.shape == shape:
                a = a[None]
            if a.ndim != 4 or a.shape[1:] != shape:
                raise ShapeError(f"{name} has shape {a.shape}, model expects (B,) + {shape}")
            arrs.append(a)
        b = arrs[0].shape[0]
        if any(a.shape[0] != b for a in arrs):
            raise ShapeError("batch sizes of x_t, person and garment differ")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)).copy()
        if np.any(t < 0.0) or np.any(t >= 1.0):
            raise DomainError(f"network time outside [0, 1): {t}")
        return arrs, t

    def forward(self, x_t, person, garment, t, taps=(), keep_cache=False):
        """Velocity and garment reconstruction for a batch (or a single grid triple).

        Returns ``(ForwardOutput, cache)`` when ``keep_cache`` is set; the cache
        feeds :meth:`backward`.
        """
        cfg, P = self.config, self.params
        (x_t, person, garment), t = self._check_inputs(x_t, person, garment, t)
        B, C, H, W = x_t.shape
        D, nh, p = cfg.token_dim, cfg.heads, cfg.patch_size
        hd = D // nh
        N = cfg.n_tokens
        cache = {"t": t, "B": B}

        feat = time_features(t, cfg.time_features)
        e1 = feat @ P["time.w1"] + P["time.b1"]
        a1 = _silu(e1)
        temb = a1 @ P["time.w2"] + P["time.b2"]
        cvec = _silu(temb)
        cache.update(feat=feat, e1=e1, a1=a1, temb=temb, cvec=cvec)

        tok = {"x": patchify(np.concatenate([x_t, person], axis=1), p), "g": patchify(garment, p)}
        h = {}
        for s in STREAMS:
            h[s] = tok[s] @ P[f"{s}.in_w"] + P[f"{s}.in_b"]
            if cfg.pos_embed:
                h[s] = h[s] + P[f"{s}.pos"][None]
        cache["tok"] = tok
        tapped = {}
        blocks = []
        for l in range(cfg.depth):
            bc = {s: {} for s in STREAMS}
            qkv = {}
            for s in STREAMS:
                pre = f"blk{l}.{s}."
                c = bc[s]
                m = cvec @ P[pre + "mod_w"] + P[pre + "mod_b"]
                c["mod"] = m = m.reshape(B, 6, D)
                c["n1"], c["r1"] = _ln(h[s])
                c["a"] = c["n1"] * (1.0 + m[:, 1, None]) + m[:, 0, None]
                qkv[s] = c["a"] @ P[pre + "qkv_w"] + P[pre + "qkv_b"]
            joint = np.concatenate([qkv["x"], qkv["g"]], axis=1)  # (B, 2N, 3D)
            q, k, v = (joint[..., i * D:(i + 1) * D].reshape(B, 2 * N, nh, hd).transpose(0, 2, 1, 3)
                       for i in range(3))
            scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(hd)
            probs = K.softmax_fwd(np.ascontiguousarray(scores.reshape(-1, 2 * N))).reshape(scores.shape)
            o = (probs @ v).transpose(0, 2, 1, 3).reshape(B, 2 * N, D)
            att_cache = {"q": q, "k": k, "v": v, "probs": probs}
            o_s = {"x": o[:, :N], "g": o[:, N:]}
            for s in STREAMS:
                pre = f"blk{l}.{s}."
                c, m = bc[s], bc[s]["mod"]
                c["o"] = np.ascontiguousarray(o_s[s])
                c["att"] = c["o"] @ P[pre + "out_w"] + P[pre + "out_b"]
                h_mid = h[s] + m[:, 2, None] * c["att"]
                c["n2"], c["r2"] = _ln(h_mid)
                c["b"] = c["n2"] * (1.0 + m[:, 4, None]) + m[:, 3, None]
                c["u"] = c["b"] @ P[pre + "ff1_w"] + P[pre + "ff1_b"]
                shp = c["u"].shape
                z, sg = K.gelu_fwd(np.ascontiguousarray(c["u"].reshape(-1, shp[-1])))
                c["z"], c["sg"] = z.reshape(shp), sg
                c["f"] = c["z"] @ P[pre + "ff2_w"] + P[pre + "ff2_b"]
                h[s] = h_mid + m[:, 5, None] * c["f"]
                if not np.all(np.isfinite(h[s])):
                    raise NumericError(f"non-finite activations in block {l}, stream {s}")
            blocks.append((bc, att_cache))
            if l in taps:
                tapped[l] = h["x"].copy()
        cache["blocks"] = blocks

        outs = {}
        cache["final"] = {}
        for s in STREAMS:
            pre = f"final.{s}."
            m = (cvec @ P[pre + "mod_w"] + P[pre + "mod_b"]).reshape(B, 2, D)
            n, r = _ln(h[s])
            a = n * (1.0 + m[:, 1, None]) + m[:, 0, None]
            outs[s] = a @ P[pre + "out_w"] + P[pre + "out_b"]
            cache["final"][s] = {"mod": m, "n": n, "r": r, "a": a}
        out = ForwardOutput(unpatchify(outs["x"], C, H, W, p), unpatchify(outs["g"], C, H, W, p),
                            tapped if taps else None)
        return (out, cache) if keep_cache else out

    def __call__(self, x_t, person, garment, t):
        return self.forward(x_t, person, garment, t)

    def unconditional(self, x_t, person, t):
        """The guidance-free branch: the garment condition replaced by the zero grid."""
        person = np.asarray(person, dtype=np.float64)
        return self.forward(x_t, person, np.zeros_like(person), t)

    # --- backward -------------------------------------------------------

    def backward(self, cache, d_velocity=None, d_garment_out=None, d_taps=None):
        """Gradients of a scalar loss given cotangents of the forward outputs.

        An output whose cotangent is ``None`` contributes nothing: this is
        how a stop-gradient on that output is expressed.  Returns
        ``(param_grads, input_grads)``; input grads are keyed ``x_t``,
        ``person`` and ``garment``.
        """
        cfg, P = self.config, self.params
        B = cache["B"]
        C, H, W = cfg.grid_shape
        D, nh, p, N = cfg.token_dim, cfg.heads, cfg.patch_size, cfg.n_tokens
        hd = D // nh
        grads = self.zeros_like_params()
        d_taps = d_taps or {}

        d_out = {}
        for s, d in (("x", d_velocity), ("g", d_garment_out)):
            if d is None:
                d_out[s] = np.zeros((B, N, cfg.patch_dim))
            else:
                d = np.asarray(d, dtype=np.float64)
                if d.shape == cfg.grid_shape:
                    d = d[None]
                if d.shape != (B,) + cfg.grid_shape:
                    raise ShapeError(f"cotangent shape {d.shape} does not match output {(B,) + cfg.grid_shape}")
                d_out[s] = patchify(d, p)

        dc = np.zeros((B, D))
        dh_ = {}
        for s in STREAMS:
            pre = f"final.{s}."
            fc = cache["final"][s]
            m = fc["mod"]
            _lin_grad(grads, pre + "out", fc["a"], d_out[s])
            da = d_out[s] @ P[pre + "out_w"].T
            dm = np.stack([da.sum(axis=1), (da * fc["n"]).sum(axis=1)], axis=1).reshape(B, 2 * D)
            grads[pre + "mod_w"] += cache["cvec"].T @ dm
            grads[pre + "mod_b"] += dm.sum(axis=0)
            dc += dm @ P[pre + "mod_w"].T
            dh_[s] = _ln_bwd(da * (1.0 + m[:, 1, None]), fc["n"], fc["r"])

        for l in reversed(range(cfg.depth)):
            bc, ac = cache["blocks"][l]
            if l in d_taps and d_taps[l] is not None:
                dh_["x"] = dh_["x"] + d_taps[l]
            d_o = {}
            dmods = {}
            for s in STREAMS:
                pre = f"blk{l}.{s}."
                c, m = bc[s], bc[s]["mod"]
                dm = np.zeros((B, 6, D))
                g_h = dh_[s]
                dm[:, 5] = (g_h * c["f"]).sum(axis=1)
                df = g_h * m[:, 5, None]
                _lin_grad(grads, pre + "ff2", c["z"], df)
                dz = df @ P[pre + "ff2_w"].T
                shp = dz.shape
                du = K.gelu_bwd(np.ascontiguousarray(dz.reshape(-1, shp[-1])),
                                np.ascontiguousarray(c["u"].reshape(-1, shp[-1])), c["sg"]).reshape(shp)
                _lin_grad(grads, pre + "ff1", c["b"], du)
                db = du @ P[pre + "ff1_w"].T
                dm[:, 3] = db.sum(axis=1)
                dm[:, 4] = (db * c["n2"]).sum(axis=1)
                dh_mid = g_h + _ln_bwd(db * (1.0 + m[:, 4, None]), c["n2"], c["r2"])
                dm[:, 2] = (dh_mid * c["att"]).sum(axis=1)
                datt = dh_mid * m[:, 2, None]
                _lin_grad(grads, pre + "out", c["o"], datt)
                d_o[s] = datt @ P[pre + "out_w"].T
                dh_[s] = dh_mid
                dmods[s] = dm
            dO = np.concatenate([d_o["x"], d_o["g"]], axis=1).reshape(B, 2 * N, nh, hd).transpose(0, 2, 1, 3)
            q, k, v, probs = ac["q"], ac["k"], ac["v"], ac["probs"]
            dP = dO @ v.transpose(0, 1, 3, 2)
            dV = probs.transpose(0, 1, 3, 2) @ dO
            dS = K.softmax_bwd(np.ascontiguousarray(dP.reshape(-1, 2 * N)),
                               np.ascontiguousarray(probs.reshape(-1, 2 * N))).reshape(dP.shape) / np.sqrt(hd)
            dQ = dS @ k
            dK = dS.transpose(0, 1, 3, 2) @ q
            djoint = np.concatenate([a.transpose(0, 2, 1, 3).reshape(B, 2 * N, D) for a in (dQ, dK, dV)], axis=2)
            dqkv = {"x": djoint[:, :N], "g": djoint[:, N:]}
            for s in STREAMS:
                pre = f"blk{l}.{s}."
                c, m, dm = bc[s], bc[s]["mod"], dmods[s]
                _lin_grad(grads, pre + "qkv", c["a"], dqkv[s])
                da = dqkv[s] @ P[pre + "qkv_w"].T
                dm[:, 0] = da.sum(axis=1)
                dm[:, 1] = (da * c["n1"]).sum(axis=1)
                dh_[s] = dh_[s] + _ln_bwd(da * (1.0 + m[:, 1, None]), c["n1"], c["r1"])
                dm = dm.reshape(B, 6 * D)
                grads[pre + "mod_w"] += cache["cvec"].T @ dm
                grads[pre + "mod_b"] += dm.sum(axis=0)
                dc += dm @ P[pre + "mod_w"].T

        d_tok = {}
        for s in STREAMS:
            _lin_grad(grads, f"{s}.in", cache["tok"][s], dh_[s])
            if cfg.pos_embed:
                grads[f"{s}.pos"] += dh_[s].sum(axis=0)
            d_tok[s] = dh_[s] @ P[f"{s}.in_w"].T

        dtemb = dc * _silu_grad(cache["temb"])
        grads["time.w2"] += cache["a1"].T @ dtemb
        grads["time.b2"] += dtemb.sum(axis=0)
        de1 = (dtemb @ P["time.w2"].T) * _silu_grad(cache["e1"])
        grads["time.w1"] += cache["feat"].T @ de1
        grads["time.b1"] += de1.sum(axis=0)

        dmain = unpatchify(d_tok["x"], 2 * C, H, W, p)
        inputs = {"x_t": dmain[:, :C], "person": dmain[:, C:],
                  "garment": unpatchify(d_tok["g"], C, H, W, p)}
        return grads, inputs

    # --- persistence ----------------------------------------------------

    def save(self, path, step=0, extra=None):
        """Checkpoint: 8-byte little-endian header length, JSON header, float64 blob."""
        blob = self.flat().astype("<f8").tobytes()
        header = {
            "format": "straightflow-checkpoint/1",
            "config": asdict(self.config),
            "seed": int(self.seed),
            "step": int(step),
            "params": [[k, list(s)] for k, s in param_shapes(self.config)],
            "sha256": hashlib.sha256(blob).hexdigest(),
        }
        if extra:
            header["extra"] = extra
        hb = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(hb)))
            fh.write(hb)
            fh.write(blob)

    @classmethod
    def load(cls, path, expect_config=None):
        with open(path, "rb") as fh:
            (n,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(n))
            blob = fh.read()
        cfg = ModelConfig(**header["config"])
        if expect_config is not None and cfg != expect_config:
            raise IncompatibleCheckpoint(f"{path}: checkpoint config {cfg} != expected {expect_config}")
        if [[k, list(s)] for k, s in param_shapes(cfg)] != header["params"]:
            raise IncompatibleCheckpoint(f"{path}: parameter layout does not match config")
        if hashlib.sha256(blob).hexdigest() != header["sha256"]:
            raise IncompatibleCheckpoint(f"{path}: parameter blob checksum mismatch")
        m = cls(cfg, {}, header["seed"])
        m.set_flat(np.frombuffer(blob, dtype="<f8"))
        m.header = header
        return m


class IncompatibleCheckpoint(IncompatibleArtifact):
    pass
