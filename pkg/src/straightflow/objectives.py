"""Stage-1 training losses, guidance combination and timestep-pair sampling.

All losses use mean reduction over every element of the batch.  Loss
functions return the scalar value and, where a model is involved, the
parameter gradients from one backward pass.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .flowcore import ot_interpolate, target_velocity
from .grid import check_same_shape

T_HI = 1.0 - 1e-6
FIXED_GAP = 0.1  # 100 of 1000 discrete steps


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1   # garment preservation
    beta: float = 0.05   # self-consistency

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise DomainError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class TimestepPair:
    t1: float
    t2: float

    def __post_init__(self):
        if not 0.0 <= self.t1 <= self.t2 < 1.0:
            raise DomainError(f"need 0 <= t1 <= t2 < 1, got ({self.t1}, {self.t2})")


def _draw_times(rng, size, dist):
    if dist == "uniform":
        return rng.uniform(0.0, T_HI, size=size)
    if dist == "logit-normal":
        return np.minimum(1.0 / (1.0 + np.exp(-rng.standard_normal(size))), T_HI * (1 - 1e-16))
    raise DomainError(f"unknown time distribution {dist!r}")


def sample_pairs(rng, n, mode="free", gap=FIXED_GAP, dist="uniform"):
    """``n`` timestep pairs as two arrays ``(t1, t2)`` with ``t1 <= t2``.

    ``free`` draws two independent times and sorts them; ``fixed`` draws
    ``t1`` and sets ``t2 = t1 + gap``.
    """
    if mode == "free":
        t = np.sort(_draw_times(rng, (n, 2), dist), axis=1)
        return t[:, 0], t[:, 1]
    if mode == "fixed":
        if dist != "uniform":
            raise DomainError("fixed-interval pairs use uniform times")
        t1 = rng.uniform(0.0, T_HI - gap, size=n)
        return t1, t1 + gap
    raise DomainError(f"unknown pair mode {mode!r}")


def sample_pair(rng, mode="free", gap=FIXED_GAP, dist="uniform"):
    t1, t2 = sample_pairs(rng, 1, mode, gap, dist)
    return TimestepPair(float(t1[0]), float(t2[0]))


def sample_pair_fixed(rng, gap=FIXED_GAP):
    return sample_pair(rng, "fixed", gap)


def _mse(a, b):
    check_same_shape(a, b, "loss operands")
    d = np.asarray(a) - np.asarray(b)
    return float(np.mean(d * d))


def _mse_grad(a, b, weight=1.0):
    return weight * 2.0 * (np.asarray(a) - np.asarray(b)) / np.size(a)


def loss_fm(model, person, garment, y, eps, t):
    """Flow-matching regression of the predicted velocity onto ``y - eps``."""
    x_t = ot_interpolate(y, eps, t)
    out, cache = model.forward(x_t, person, garment, t, keep_cache=True)
    u = target_velocity(y, eps).reshape(out.velocity.shape)
    grads, _ = model.backward(cache, d_velocity=_mse_grad(out.velocity, u))
    return _mse(out.velocity, u), grads


def loss_garment(out, garment_in):
    """Mean squared error between the garment branch output and its input latent."""
    g = np.asarray(garment_in, dtype=np.float64).reshape(np.shape(out.garment_out))
    return _mse(out.garment_out, g)


def loss_consistency(v1, v2, use_stopgrad=True):
    """Returns ``(value, d_v1, d_v2)``; ``d_v2`` is ``None`` under stop-gradient."""
    val = _mse(v1, v2)
    d1 = _mse_grad(v1, v2)
    return val, d1, (None if use_stopgrad else -d1)


def cfg_velocity(v_cond, v_uncond, scale):
    check_same_shape(v_cond, v_uncond, "guidance velocities")
    return np.asarray(v_uncond) + scale * (np.asarray(v_cond) - np.asarray(v_uncond))


@dataclass
class LossBreakdown:
    total: float
    fm: float
    garment: float
    consistency: float


def _batch(a):
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == 3 else a


def loss_total(model, person, garment, y, eps, t1, t2, weights=LossWeights(), use_stopgrad=True,
               order=(0, 1)):
    """Combined objective over one timestep pair sharing the same ``(y, eps)``.

    Both timesteps run as one stacked forward pass followed by one backward
    pass.  ``order`` permutes how the two halves are stacked; the result
    does not depend on it.
    """
    person, garment, y, eps = (_batch(a) for a in (person, garment, y, eps))
    B = len(y)
    t1 = np.broadcast_to(np.asarray(t1, dtype=np.float64), (B,))
    t2 = np.broadcast_to(np.asarray(t2, dtype=np.float64), (B,))
    if np.any(t1 > t2):
        raise DomainError("t1 must not exceed t2")
    ts = (t1, t2)
    xs = [ot_interpolate(y, eps, t) for t in ts]
    first, second = order
    out, cache = model.forward(np.concatenate([xs[first], xs[second]]),
                               np.concatenate([person, person]),
                               np.concatenate([garment, garment]),
                               np.concatenate([ts[first], ts[second]]), keep_cache=True)
    halves = {first: slice(0, B), second: slice(B, 2 * B)}
    v = [out.velocity[halves[i]] for i in (0, 1)]
    g = [out.garment_out[halves[i]] for i in (0, 1)]
    u = y - eps
    fm = _mse(v[0], u) + _mse(v[1], u)
    lg = _mse(g[0], garment) + _mse(g[1], garment)
    lc, dc1, dc2 = loss_consistency(v[0], v[1], use_stopgrad)
    total = fm + weights.alpha * lg + weights.beta * lc

    dv = [_mse_grad(v[i], u) for i in (0, 1)]
    dv[0] = dv[0] + weights.beta * dc1
    if dc2 is not None:
        dv[1] = dv[1] + weights.beta * dc2
    dg = [_mse_grad(g[i], garment, weights.alpha) for i in (0, 1)]
    d_vel = np.empty_like(out.velocity)
    d_gar = np.empty_like(out.garment_out)
    for i in (0, 1):
        d_vel[halves[i]] = dv[i]
        d_gar[halves[i]] = dg[i]
    grads, _ = model.backward(cache, d_velocity=d_vel, d_garment_out=d_gar)
    return LossBreakdown(total, fm, lg, lc), grads


def model_field(model, person, garment, cfg_scale=None):
    """Velocity field ``f(x, t, cond)`` of a model for fixed conditions.

    With ``cfg_scale`` set, conditional and zero-garment predictions are
    evaluated in one stacked pass and combined by classifier-free guidance.
    """
    person, garment = _batch(person), _batch(garment)

    def field(x, t, cond=None):
        single = np.ndim(x) == 3
        xb = _batch(x)
        if cfg_scale is None:
            v = model.forward(xb, person, garment, t).velocity
        else:
            B = len(xb)
            both = model.forward(np.concatenate([xb, xb]), np.concatenate([person, person]),
                                 np.concatenate([garment, np.zeros_like(garment)]), t).velocity
            v = cfg_velocity(both[:B], both[B:], cfg_scale)
        return v[0] if single else v

    return field
