"""Stage-2 one-step distillation with an adversarial term on teacher features.

The student starts as a copy of the teacher and is trained to map noise to
the teacher's multi-step sample in a single Euler step.  Its clean
prediction and the teacher target are both re-noised and passed through the
frozen teacher; hidden tokens tapped at evenly spaced blocks are scored by
small convolutional heads.
"""
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DomainError, NumericError
from ..evalkit import sample
from ..flowcore import ot_interpolate
from ..synthdata import stack
from ..velonet import VelocityModel
from .optim import AdamW
from .stage1 import TrainingDiverged, eval_metrics, stream

DISTILL, PSEUDO, RENOISE, HEADS, ROBUST = 11, 12, 13, 14, 15
LEAK = 0.2


@dataclass(frozen=True)
class DistillConfig:
    teacher_steps: int = 30
    recon_weight: float = 1.0
    adv_weight: float = 0.001
    blocks_sampled: int = 2
    lr: float = 1e-4
    disc_lr: float = 1e-4
    weight_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    t_lo: float = 0.1
    t_hi: float = 0.9
    head_width: int = 32
    gradient_penalty: bool = False
    gp_weight: float = 1.0
    rematch: bool = True
    pairs_per_instance: int = 1
    eval_every: int = 5

    def validate(self, teacher_config=None):
        if min(self.teacher_steps, self.epochs, self.batch_size, self.head_width, self.pairs_per_instance) < 1:
            raise ConfigError("teacher_steps, epochs, batch_size, head_width and pairs_per_instance must be positive")
        if not self.recon_weight > 0 or self.adv_weight < 0 or self.gp_weight < 0:
            raise ConfigError("need recon_weight > 0, adv_weight >= 0 and gp_weight >= 0")
        if self.lr <= 0 or self.disc_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.t_lo <= self.t_hi < 1.0:
            raise ConfigError(f"need 0 <= t_lo <= t_hi < 1, got ({self.t_lo}, {self.t_hi})")
        if self.blocks_sampled < 1:
            raise ConfigError("blocks_sampled must be at least 1")
        if teacher_config is not None and self.blocks_sampled > teacher_config.depth:
            raise ConfigError(f"blocks_sampled={self.blocks_sampled} exceeds teacher depth {teacher_config.depth}")
        return self


def tap_blocks(depth, k):
    """``k`` evenly spaced block indices, always including the last block."""
    if not 1 <= k <= depth:
        raise ConfigError(f"cannot sample {k} of {depth} blocks")
    if k == 1:
        return (depth - 1,)
    return tuple(int(round(i)) for i in np.linspace(0, depth - 1, k))


# --- discriminator heads ----------------------------------------------------

def _im2col(x):
    """(B, h, w, C) maps to (B, h*w, 9*C) 3x3 patches with zero padding."""
    B, h, w, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.stack([xp[:, i:i + h, j:j + w] for i in range(3) for j in range(3)], axis=3)
    return cols.reshape(B, h * w, 9 * C)


def _col2im(cols, h, w):
    B = cols.shape[0]
    C = cols.shape[2] // 9
    c = cols.reshape(B, h, w, 9, C)
    xp = np.zeros((B, h + 2, w + 2, C))
    for k in range(9):
        i, j = divmod(k, 3)
        xp[:, i:i + h, j:j + w] += c[:, :, :, k]
    return xp[:, 1:h + 1, 1:w + 1]


class DiscHead:
    """3x3 convolution, leaky ReLU, 1x1 convolution to one channel, spatial mean."""

    def __init__(self, channels, grid_hw, width, rng):
        self.h, self.w = grid_hw
        self.params = {
            "w1": rng.normal(0.0, 1.0 / math.sqrt(9 * channels), (9 * channels, width)),
            "b1": np.zeros(width),
            "w2": rng.normal(0.0, 1.0 / math.sqrt(width), (width,)),
            "b2": np.zeros(1),
        }

    def _map(self, tokens):
        return tokens.reshape(len(tokens), self.h, self.w, -1)

    def forward(self, tokens):
        P = self.params
        cols = _im2col(self._map(tokens))
        z = cols @ P["w1"] + P["b1"]
        a = np.where(z > 0, z, LEAK * z)
        score = (a @ P["w2"]).mean(axis=1) + P["b2"][0]
        return score, (cols, z, a)

    def backward(self, cache, d_score):
        """Parameter grads and token cotangent for per-sample score cotangents."""
        P = self.params
        cols, z, a = cache
        S = z.shape[1]
        da = d_score[:, None, None] * P["w2"][None, None, :] / S
        dz = da * np.where(z > 0, 1.0, LEAK)
        grads = {
            "w2": np.einsum("b,bsk->k", d_score, a) / S,
            "b2": np.array([d_score.sum()]),
            "w1": cols.reshape(-1, cols.shape[2]).T @ dz.reshape(-1, dz.shape[2]),
            "b1": dz.sum(axis=(0, 1)),
        }
        d_tok = _col2im(dz @ P["w1"].T, self.h, self.w)
        return grads, d_tok.reshape(len(d_tok), self.h * self.w, -1)

    def penalty(self, cache):
        """Mean squared norm of d score / d tokens and its parameter gradients.

        The leaky-ReLU slope pattern is piecewise constant, so it is held
        fixed when differentiating the penalty.
        """
        P = self.params
        cols, z, _ = cache
        B, S, _ = z.shape
        m = np.where(z > 0, 1.0, LEAK)
        G = m * P["w2"][None, None, :] / S
        g = _col2im(G @ P["w1"].T, self.h, self.w)
        value = float((g * g).sum() / B)
        V = _im2col(2.0 * g / B)
        grads = {
            "w1": V.reshape(-1, V.shape[2]).T @ G.reshape(-1, G.shape[2]),
            "w2": ((V @ P["w1"]) * m).sum(axis=(0, 1)) / S,
            "b1": np.zeros_like(P["b1"]),
            "b2": np.zeros_like(P["b2"]),
        }
        return value, grads


def hinge_d_loss(real, fake):
    """Discriminator hinge loss and its score cotangents."""
    n = len(real)
    loss = float(np.mean(np.maximum(0.0, 1.0 - real)) + np.mean(np.maximum(0.0, 1.0 + fake)))
    d_real = -(real < 1.0).astype(float) / n
    d_fake = (fake > -1.0).astype(float) / n
    return loss, d_real, d_fake


def generator_loss(fake):
    """Generator term ``-mean D(fake)`` and its score cotangent."""
    return float(-np.mean(fake)), np.full(len(fake), -1.0 / len(fake))


# --- pseudo targets ---------------------------------------------------------

def generate_pseudo_targets(teacher, persons, garments, steps=30, seed=0, cfg_scale=None):
    """Teacher samples for each (person, garment) pair.

    Returns ``(noise, targets)``; the noise is the sampler's starting point,
    so each target is the teacher's image of that noise.
    """
    persons = np.asarray(persons, dtype=np.float64)
    garments = np.asarray(garments, dtype=np.float64)
    if len(persons) != len(garments) or len(persons) == 0:
        raise DomainError("need equally many persons and garments, at least one")
    eps = stream(seed, PSEUDO).standard_normal(persons.shape)
    return eps, sample(teacher, persons, garments, eps, steps, cfg_scale)


def match_pairs(dataset, seed, rematch=True, repeats=1):
    """Persons and garments of a dataset, with garments randomly re-paired.

    With ``repeats > 1`` every person appears that many times, each time
    with an independent re-pairing.
    """
    persons, garments, _, _ = stack(dataset.instances)
    if not rematch:
        return np.concatenate([persons] * repeats), np.concatenate([garments] * repeats)
    n = len(garments)
    perms = [stream(seed, DISTILL, 0).permutation(n)]
    perms += [stream(seed, DISTILL, 0, k).permutation(n) for k in range(1, repeats)]
    return np.concatenate([persons] * repeats), np.concatenate([garments[q] for q in perms])


# --- training ---------------------------------------------------------------

@dataclass
class DistillResult:
    student: VelocityModel
    log: list
    heads: list
    teacher_stable: bool
    checkpoints: list = field(default_factory=list)


def _param_digest(model):
    return hashlib.sha256(model.flat().tobytes()).hexdigest()


def _adv_scores(teacher, heads, blocks, x1, eps, t, persons, garments, keep_cache):
    x_t = ot_interpolate(x1, eps, t)
    if keep_cache:
        out, cache = teacher.forward(x_t, persons, garments, t, taps=blocks, keep_cache=True)
    else:
        out, cache = teacher.forward(x_t, persons, garments, t, taps=blocks), None
    scores, head_caches = np.zeros(len(x1)), []
    for head, b in zip(heads, blocks):
        s, hc = head.forward(out.taps[b])
        scores += s
        head_caches.append(hc)
    return scores, head_caches, cache


def distill_ladd(teacher, cfg, data, eval_data=None, pseudo=None, keep_checkpoints=False):
    """One-step student distilled from ``teacher`` on pairs drawn from ``data``.

    ``pseudo`` may supply precomputed ``(persons, garments, noise, targets)``.
    The teacher is never updated; ``teacher_stable`` records that its
    parameters are bit-identical after training.
    """
    cfg.validate(teacher.config)
    digest = _param_digest(teacher)
    if pseudo is None:
        persons, garments = match_pairs(data, cfg.seed, cfg.rematch, cfg.pairs_per_instance)
        eps0, targets = generate_pseudo_targets(teacher, persons, garments, cfg.teacher_steps, cfg.seed)
    else:
        persons, garments, eps0, targets = pseudo
    n = len(persons)
    if n == 0:
        raise ConfigError("distillation data is empty")
    mc = teacher.config
    blocks = tap_blocks(mc.depth, cfg.blocks_sampled)
    hw = (mc.height // mc.patch_size, mc.width // mc.patch_size)
    hrng = stream(cfg.seed, HEADS)
    heads = [DiscHead(mc.token_dim, hw, cfg.head_width, hrng) for _ in blocks]
    student = teacher.copy()
    opt = AdamW(student.params, weight_decay=cfg.weight_decay)
    dopts = [AdamW(h.params, 0.5, 0.999, weight_decay=0.0) for h in heads]
    use_adv = cfg.adv_weight > 0
    steps_per_epoch = max(1, n // cfg.batch_size)
    result = DistillResult(student, [], heads, True)

    def step(idx, rng):
        b = len(idx)
        p, g, e, real = persons[idx], garments[idx], eps0[idx], targets[idx]
        t = rng.uniform(cfg.t_lo, cfg.t_hi, size=b)
        e_real, e_fake = rng.standard_normal((2,) + real.shape)
        out, scache = student.forward(e, p, g, np.zeros(b), keep_cache=True)
        fake = e + out.velocity
        d_loss = g_loss = gp = 0.0
        if use_adv:
            # discriminator step on the current fake
            sr, hr, _ = _adv_scores(teacher, heads, blocks, real, e_real, t, p, g, False)
            sf, hf, _ = _adv_scores(teacher, heads, blocks, fake, e_fake, t, p, g, False)
            d_loss, dr, df = hinge_d_loss(sr, sf)
            for head, dopt, cr, cf in zip(heads, dopts, hr, hf):
                gr, _ = head.backward(cr, dr)
                gf, _ = head.backward(cf, df)
                hg = {k: gr[k] + gf[k] for k in gr}
                if cfg.gradient_penalty:
                    val, pg = head.penalty(cr)
                    gp += val
                    for k in hg:
                        hg[k] += cfg.gp_weight * pg[k]
                dopt.step(head.params, hg, cfg.disc_lr)
            if not math.isfinite(d_loss + gp):
                raise NumericError("non-finite discriminator loss")

        recon = float(np.mean((fake - real) ** 2))
        d_fake = cfg.recon_weight * 2.0 * (fake - real) / fake.size
        if use_adv:
            # generator step through the frozen teacher
            sf, hf, tcache = _adv_scores(teacher, heads, blocks, fake, e_fake, t, p, g, True)
            g_loss, dsf = generator_loss(sf)
            d_taps = {blk: head.backward(cf, dsf)[1] for head, blk, cf in zip(heads, blocks, hf)}
            _, dins = teacher.backward(tcache, None, None, d_taps)
            d_fake = d_fake + cfg.adv_weight * dins["x_t"] * t[:, None, None, None]
        if not math.isfinite(cfg.recon_weight * recon + cfg.adv_weight * g_loss):
            raise NumericError("non-finite generator loss")
        grads, _ = student.backward(scache, d_velocity=d_fake)
        opt.step(student.params, grads, cfg.lr)
        return recon, d_loss, g_loss, gp

    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, DISTILL, 1, epoch).permutation(n)
        last_good = student.copy()
        sums = np.zeros(4)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            try:
                sums += step(idx, stream(cfg.seed, RENOISE, epoch, s))
            except NumericError as err:
                raise TrainingDiverged(f"epoch {epoch}, step {s}: {err}", last_good) from err

        row = {"epoch": epoch + 1}
        row.update(zip(("recon", "d_loss", "g_loss", "gp"), (sums / steps_per_epoch).tolist()))
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            if eval_data is not None:
                row["endpoint_1"], row["energy_1"] = eval_metrics(student, eval_data, 1, cfg.seed + 1)
            if keep_checkpoints:
                result.checkpoints.append((epoch + 1, student.copy()))
        result.log.append(row)

    result.teacher_stable = _param_digest(teacher) == digest
    return result


def _robust_noise(n, shape, seed, k):
    return stream(seed, ROBUST, k).standard_normal((n,) + tuple(shape))


def noise_robustness(model, persons, garments, n_seeds=5, seed=0, steps=1, cfg_scale=None):
    """Spread of one-step outputs across noise draws, relative to garment changes.

    For each instance, ``n_seeds`` noises give ``n_seeds`` outputs; the
    dispersion is their mean pairwise Euclidean distance, averaged over
    instances.  The reference is the mean distance between outputs for
    the same person and noise but the garment of the next instance.
    Returns ``(dispersion, cross_garment, ratio)``; one seed gives zero.
    """
    persons = np.asarray(persons, dtype=np.float64)
    garments = np.asarray(garments, dtype=np.float64)
    if persons.ndim == 3:
        persons, garments = persons[None], garments[None]
    n = len(persons)
    if n_seeds < 1:
        raise DomainError("n_seeds must be at least 1")
    shape = persons.shape[1:]
    outs = np.empty((n_seeds, n) + shape)
    for k in range(n_seeds):
        outs[k] = sample(model, persons, garments, _robust_noise(n, shape, seed, k), steps, cfg_scale)
    flat = outs.reshape(n_seeds, n, -1)
    if n_seeds == 1:
        disp = 0.0
    else:
        pair = [np.linalg.norm(flat[a] - flat[b], axis=1) for a in range(n_seeds) for b in range(a + 1, n_seeds)]
        disp = float(np.mean(pair))
    if n < 2:
        return disp, float("nan"), float("nan")
    other = sample(model, persons, np.roll(garments, -1, axis=0), _robust_noise(n, shape, seed, 0), steps, cfg_scale)
    cross = float(np.mean(np.linalg.norm(flat[0] - other.reshape(n, -1), axis=1)))
    return disp, cross, (disp / cross if cross > 0 else float("nan"))
