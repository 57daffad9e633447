"""Closed-form velocity fields for point-mass and finite-mixture targets.

With a standard-normal source and the straight path x_t = t*y + (1-t)*eps,
a point-mass target gives the straight field (y - x)/(1-t).  A finite
mixture gives the marginal field, a posterior-weighted average of the
per-component straight fields, which is curved in general.

Fields accept either a single grid or a leading batch axis.
"""
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, NumericError, ShapeError
from .flowcore import chord_deviation, euler_sample
from .grid import T_MAX


def _check_t(t):
    if not 0.0 <= t < T_MAX:
        raise DomainError(f"velocity undefined at t={t}")


def _batched(x, shape):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == shape:
        return x[None], False
    if x.shape[1:] == shape:
        return x, True
    raise ShapeError(f"state shape {x.shape} incompatible with target {shape}")


@dataclass(frozen=True)
class DeltaField:
    target: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.target)):
            raise NumericError("delta target must be finite")

    def __call__(self, x, t, cond=None):
        return delta_velocity(self, x, t)


@dataclass(frozen=True)
class MixtureField:
    weights: np.ndarray   # (R,)
    targets: np.ndarray   # (R, *shape)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or len(w) != len(self.targets) or len(w) == 0:
            raise ShapeError("one weight per component required")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("mixture weights must be positive and sum to 1")

    @classmethod
    def uniform(cls, targets):
        targets = np.asarray(targets, dtype=np.float64)
        return cls(np.full(len(targets), 1.0 / len(targets)), targets)

    @property
    def shape(self):
        return self.targets.shape[1:]

    def __call__(self, x, t, cond=None):
        return mixture_velocity(self, x, t)


def delta_velocity(f, x, t):
    _check_t(t)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != f.target.shape and x.shape[1:] != f.target.shape:
        raise ShapeError(f"state shape {x.shape} incompatible with target {f.target.shape}")
    return (f.target - x) / (1.0 - t)


def mixture_posterior(f, x, t):
    """p(component | x_t = x), shape (R,) or (B, R) for batched ``x``."""
    _check_t(t)
    xb, batched = _batched(x, f.shape)
    r = len(f.weights)
    diff = xb[:, None] - t * f.targets[None]
    sq = np.sum(diff.reshape(len(xb), r, -1) ** 2, axis=2)
    logits = np.log(f.weights)[None] - sq / (2.0 * (1.0 - t) ** 2)
    norm = logsumexp(logits, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise NumericError("posterior log-weights all -inf")
    post = np.exp(logits - norm)
    return post if batched else post[0]


def mixture_velocity(f, x, t):
    xb, batched = _batched(x, f.shape)
    post = mixture_posterior(f, xb, t)
    mean_target = np.tensordot(post, f.targets, axes=(1, 0))
    v = (mean_target - xb) / (1.0 - t)
    return v if batched else v[0]


@dataclass
class TheoremReport:
    max_endpoint_discrepancy: float
    max_chord_deviation: float
    passed: bool
    tol: float = 1e-9

    def to_dict(self):
        return {
            "max_endpoint_discrepancy": self.max_endpoint_discrepancy,
            "max_chord_deviation": self.max_chord_deviation,
            "pass": self.passed,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def _rel(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - b) / scale)


def verify_theorem1(target, eps_samples, step_counts, field=None, tol=1e-9):
    """Check that Euler sampling reaches the same endpoint for every step count.

    ``field`` defaults to the point-mass field toward ``target``; passing a
    :class:`MixtureField` runs the same harness on a marginal field.
    """
    if len(eps_samples) == 0 or len(step_counts) == 0:
        raise ValueError("need at least one noise sample and one step count")
    if field is None:
        field = DeltaField(np.asarray(target, dtype=np.float64))
    worst_end = 0.0
    worst_chord = 0.0
    for eps in eps_samples:
        finals = []
        for k in step_counts:
            traj = euler_sample(field, eps, None, k)
            finals.append(traj.final)
            worst_chord = max(worst_chord, chord_deviation(traj))
        for i in range(len(finals)):
            for j in range(i + 1, len(finals)):
                worst_end = max(worst_end, _rel(finals[i], finals[j]))
    return TheoremReport(worst_end, worst_chord,
                         bool(worst_end < tol and worst_chord < tol), tol)
