"""Optimal-transport conditional path, Euler sampling and straightness metrics.

Time runs from t=0 (pure noise) to t=1 (data). Velocities are only ever
evaluated on [0, 1); the uniform Euler grid stops one step short of t=1.
"""
import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTrajectoryError, DomainError, NumericError, ShapeError
from .grid import T_MAX, check_same_shape


def ot_interpolate(y, eps, t):
    """Point on the straight path from ``eps`` (t=0) to ``y`` (t=1)."""
    y = np.asarray(y, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    check_same_shape(y, eps, "target and noise")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"interpolation time outside [0, 1]: {t}")
    if t.ndim == 1 and y.ndim > 1:
        # one time per leading-axis sample
        t = t.reshape((-1,) + (1,) * (y.ndim - 1))
    return t * y + (1.0 - t) * eps


def target_velocity(y, eps):
    """Constant velocity of the straight path, ``y - eps``."""
    y = np.asarray(y, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    check_same_shape(y, eps, "target and noise")
    return y - eps


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray   # (K+1,)
    states: np.ndarray  # (K+1, *state_shape)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        if times.ndim != 1 or len(times) < 2:
            raise ShapeError("trajectory needs at least two time points")
        if len(self.states) != len(times):
            raise ShapeError("one state per time point required")
        if times[0] != 0.0 or times[-1] != 1.0 or np.any(np.diff(times) <= 0):
            raise DomainError("trajectory times must increase strictly from 0 to 1")

    @property
    def final(self):
        return self.states[-1]

    def __len__(self):
        return len(self.times)

    def select(self, i):
        """Per-sample trajectory from a batched one (states shaped (K+1, B, ...))."""
        return Trajectory(self.times, self.states[:, i])


def euler_sample(field, eps, cond=None, steps=1):
    """Integrate ``field(x, t, cond)`` from ``eps`` at t=0 to t=1 on a uniform grid."""
    if int(steps) != steps or steps < 1:
        raise DomainError(f"steps must be a positive integer, got {steps}")
    steps = int(steps)
    x = np.array(eps, dtype=np.float64)
    times = np.arange(steps + 1, dtype=np.float64) / steps
    states = np.empty((steps + 1,) + x.shape)
    states[0] = x
    for k in range(steps):
        t = times[k]
        if t >= T_MAX:
            raise DomainError(f"velocity requested at t={t}")
        v = np.asarray(field(x, t, cond), dtype=np.float64)
        if v.shape != x.shape:
            raise ShapeError(f"field returned {v.shape}, state is {x.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite velocity at step {k} (t={t})")
        x = x + (times[k + 1] - t) * v
        states[k + 1] = x
    return Trajectory(times, states)


def _flat_states(traj):
    return traj.states.reshape(len(traj.times), -1)


def chord_deviation(traj):
    """Largest distance from a trajectory point to its chord, relative to chord length."""
    xs = _flat_states(traj)
    t = traj.times
    if len(t) <= 2:
        return 0.0
    chord = xs[-1] - xs[0]
    length = np.linalg.norm(chord)
    on_chord = xs[0] + t[1:-1, None] * chord
    dist = np.linalg.norm(xs[1:-1] - on_chord, axis=1)
    if length == 0.0:
        if np.all(dist == 0.0):
            return 0.0
        raise DegenerateTrajectoryError("zero-length chord with off-chord interior points")
    return float(dist.max() / length)


def velocity_dispersion(traj):
    """Mean squared deviation of segment velocities from the chord velocity.

    Normalized by the squared chord length; a zero-length chord is reported
    unnormalized.
    """
    xs = _flat_states(traj)
    t = traj.times
    seg_v = np.diff(xs, axis=0) / np.diff(t)[:, None]
    chord_v = (xs[-1] - xs[0]) / (t[-1] - t[0])
    dev = np.sum((seg_v - chord_v) ** 2, axis=1).mean()
    norm2 = float(chord_v @ chord_v)
    return float(dev / norm2) if norm2 > 0.0 else float(dev)


def write_trajectory_csv(traj, path):
    """One row per point: ``t`` followed by the flattened state."""
    xs = _flat_states(traj)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i}" for i in range(xs.shape[1])])
        for t, row in zip(traj.times, xs):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_trajectory_csv(path, state_shape=None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    data = np.array([[float(v) for v in r] for r in rows])
    states = data[:, 1:]
    if state_shape is not None:
        states = states.reshape((len(data),) + tuple(state_shape))
    return Trajectory(data[:, 0], states)
