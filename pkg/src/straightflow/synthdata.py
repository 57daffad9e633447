"""Procedural toy try-on task with an exact compositing oracle.

Every grid is a deterministic function of integer seeds.  A person grid has
a smooth background, an identity mark on the last channel and its own
clothing inside a fixed rectangular box.  ``compose`` dresses a person in a
garment and adds one of ``R`` zero-mean "wrinkle" residuals, so the target
given (person, garment) is an exact uniform R-point distribution.
"""
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, IncompatibleArtifact, ShapeError

DEFAULT_SHAPE = (3, 16, 16)
DEFAULT_R = 4
DEFAULT_SCALE = 0.05
BANK_SEED = 20240611
COLOR_MAX = 0.9

_PERSON, _GARMENT, _BANK, _INSTANCE, _TRIPLE = 1, 2, 3, 4, 5


def _rng(*key):
    return np.random.default_rng([int(k) & 0xFFFFFFFFFFFFFFFF for k in key])


def garment_box(shape):
    """Row and column slices of the garment region; a global constant of the task."""
    _, h, w = shape
    return slice(h // 4, h - h // 4), slice(w // 4, w - w // 4)


def garment_mask(shape):
    m = np.zeros(shape, dtype=bool)
    rows, cols = garment_box(shape)
    m[:, rows, cols] = True
    return m


def _smooth_field(rng, h, w, n_waves=3, max_freq=1.5):
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    out = np.zeros((h, w))
    for _ in range(n_waves):
        fy, fx = rng.uniform(-max_freq, max_freq, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return out / n_waves


def _pattern(rng, shape):
    c, h, w = shape
    rows, cols = garment_box(shape)
    bh, bw = rows.stop - rows.start, cols.stop - cols.start
    kind = rng.integers(3)
    period = int(rng.integers(2, 5))
    phase = int(rng.integers(period))
    colors = rng.uniform(-COLOR_MAX, COLOR_MAX, size=(2, c))
    ii, jj = np.mgrid[0:bh, 0:bw]
    if kind == 0:
        sel = ((ii + phase) // period) % 2
    elif kind == 1:
        sel = ((jj + phase) // period) % 2
    else:
        sel = (((ii + phase) // period) + (jj // period)) % 2
    out = np.zeros(shape)
    out[:, rows, cols] = np.where(sel[None] == 0, colors[0][:, None, None], colors[1][:, None, None])
    return out


def gen_garment(seed, shape=DEFAULT_SHAPE):
    """Stripe or checker pattern filling the garment box; zero elsewhere."""
    return _pattern(_rng(_GARMENT, seed), tuple(shape))


def gen_person(seed, shape=DEFAULT_SHAPE):
    """Background, identity mark and the person's own clothing in the garment box."""
    shape = tuple(shape)
    c, h, w = shape
    rng = _rng(_PERSON, seed)
    grid = np.stack([0.5 * _smooth_field(rng, h, w) for _ in range(c)])
    mask = garment_mask(shape)
    ident = 0.3 * np.sign(rng.standard_normal((h, w)))
    grid[-1] = np.where(mask[-1], grid[-1], grid[-1] + ident)
    own = _pattern(rng, shape)
    grid = np.where(mask, own, grid)
    return np.clip(grid, -1.0, 1.0)


@dataclass(frozen=True)
class ResidualBank:
    """R fixed wrinkle patterns, zero outside the box and zero-mean inside it."""

    patterns: np.ndarray  # (R, C, H, W), max |value| = 1
    scale: float

    @property
    def count(self):
        return len(self.patterns)

    @classmethod
    def build(cls, shape=DEFAULT_SHAPE, R=DEFAULT_R, scale=DEFAULT_SCALE, seed=BANK_SEED):
        if R < 1:
            raise ConfigError(f"residual count must be positive, got {R}")
        if scale < 0:
            raise ConfigError(f"residual scale must be nonnegative, got {scale}")
        shape = tuple(shape)
        c = shape[0]
        rows, cols = garment_box(shape)
        bh, bw = rows.stop - rows.start, cols.stop - cols.start
        rng = _rng(_BANK, seed)
        pats = np.zeros((R,) + shape)
        for r in range(R):
            for ch in range(c):
                p = _smooth_field(rng, bh, bw, n_waves=4, max_freq=2.5)
                pats[r, ch, rows, cols] = p - p.mean()
            peak = np.abs(pats[r]).max()
            if peak > 0:
                pats[r] /= peak
        return cls(pats, float(scale))


def compose(person, garment, residual_index, bank):
    """Oracle try-on: ``person`` with its box replaced by ``garment`` plus one residual."""
    if not 0 <= residual_index < bank.count:
        raise DomainError(f"residual index {residual_index} outside [0, {bank.count})")
    person = np.asarray(person, dtype=np.float64)
    if person.shape != np.shape(garment) or person.shape != bank.patterns.shape[1:]:
        raise ShapeError("person, garment and residual bank shapes differ")
    mask = garment_mask(person.shape)
    dressed = np.clip(garment + bank.scale * bank.patterns[residual_index], -1.0, 1.0)
    return np.where(mask, dressed, person)


def oracle_composites(person, garment, bank):
    """All R valid targets for one (person, garment) condition, shape (R, C, H, W)."""
    return np.stack([compose(person, garment, j, bank) for j in range(bank.count)])


@dataclass(frozen=True)
class TryOnInstance:
    person: np.ndarray
    garment: np.ndarray
    residual_index: int
    target: np.ndarray
    rng_seed: int
    person_seed: int = 0
    garment_seed: int = 0


@dataclass(frozen=True)
class MaskFreeTriple:
    person_wearing_g1: np.ndarray
    garment_g2: np.ndarray
    person_wearing_g2: np.ndarray
    identity_seed: int = 0


def _seed_pair(rng):
    return int(rng.integers(2**62)), int(rng.integers(2**62))


def gen_dataset(n, shape=DEFAULT_SHAPE, R=DEFAULT_R, scale=DEFAULT_SCALE, seed=0, bank=None):
    if n < 1:
        raise ConfigError(f"dataset size must be positive, got {n}")
    shape = tuple(shape)
    bank = bank or ResidualBank.build(shape, R, scale)
    out = []
    for i in range(n):
        rng = _rng(_INSTANCE, seed, i)
        ps, gs = _seed_pair(rng)
        j = int(rng.integers(bank.count))
        person, garment = gen_person(ps, shape), gen_garment(gs, shape)
        out.append(TryOnInstance(person, garment, j, compose(person, garment, j, bank),
                                 rng_seed=int(seed) * 1_000_003 + i, person_seed=ps, garment_seed=gs))
    return out


def gen_triples(n, shape=DEFAULT_SHAPE, R=DEFAULT_R, scale=DEFAULT_SCALE, seed=0, bank=None):
    """Two dressings of one identity plus the second garment, with exact ground truth."""
    if n < 1:
        raise ConfigError(f"triple count must be positive, got {n}")
    shape = tuple(shape)
    bank = bank or ResidualBank.build(shape, R, scale)
    out = []
    for i in range(n):
        rng = _rng(_TRIPLE, seed, i)
        ident, g1 = _seed_pair(rng)
        g2 = g1
        while g2 == g1:
            g2 = int(rng.integers(2**62))
        j1, j2 = (int(v) for v in rng.integers(bank.count, size=2))
        person = gen_person(ident, shape)
        garment2 = gen_garment(g2, shape)
        out.append(MaskFreeTriple(compose(person, gen_garment(g1, shape), j1, bank), garment2,
                                  compose(person, garment2, j2, bank), ident))
    return out


def triples_to_instances(triples, bank):
    """Mask-free training view: the first dressing is the person input."""
    out = []
    for k, tr in enumerate(triples):
        comps = oracle_composites(tr.person_wearing_g1, tr.garment_g2, bank)
        j = int(np.argmin(np.sum((comps - tr.person_wearing_g2) ** 2, axis=(1, 2, 3))))
        out.append(TryOnInstance(tr.person_wearing_g1, tr.garment_g2, j, tr.person_wearing_g2,
                                 rng_seed=k, person_seed=tr.identity_seed))
    return out


def stack(instances):
    """Arrays (persons, garments, targets, residual_indices) over a list of instances."""
    return (np.stack([x.person for x in instances]),
            np.stack([x.garment for x in instances]),
            np.stack([x.target for x in instances]),
            np.array([x.residual_index for x in instances]))


@dataclass
class Dataset:
    instances: list
    shape: tuple
    R: int
    scale: float
    seed: int
    bank: ResidualBank = field(repr=False, default=None)

    @classmethod
    def generate(cls, n, shape=DEFAULT_SHAPE, R=DEFAULT_R, scale=DEFAULT_SCALE, seed=0):
        bank = ResidualBank.build(shape, R, scale)
        return cls(gen_dataset(n, shape, R, scale, seed, bank), tuple(shape), R, scale, seed, bank)

    def __len__(self):
        return len(self.instances)

    def arrays(self):
        return stack(self.instances)


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def save_dataset(ds, directory):
    """Write ``manifest.json`` and ``grids.f64`` (person, garment, target per instance)."""
    os.makedirs(directory, exist_ok=True)
    persons, garments, targets, idx = ds.arrays()
    blob = np.stack([persons, garments, targets], axis=1).astype("<f8").tobytes()
    with open(os.path.join(directory, "grids.f64"), "wb") as fh:
        fh.write(blob)
    manifest = {
        "shape": list(ds.shape), "R": ds.R, "scale": ds.scale, "seed": ds.seed,
        "n": len(ds), "layout": ["person", "garment", "target"],
        "residual_index": [int(j) for j in idx],
        "person_seed": [int(x.person_seed) for x in ds.instances],
        "garment_seed": [int(x.garment_seed) for x in ds.instances],
        "checksum": _sha256(blob),
    }
    tmp = os.path.join(directory, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(directory, "manifest.json"))
    return manifest


def load_dataset(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        m = json.load(fh)
    with open(os.path.join(directory, "grids.f64"), "rb") as fh:
        blob = fh.read()
    if _sha256(blob) != m["checksum"]:
        raise IncompatibleArtifact(f"dataset checksum mismatch in {directory}")
    shape = tuple(m["shape"])
    arr = np.frombuffer(blob, dtype="<f8").reshape((m["n"], 3) + shape)
    bank = ResidualBank.build(shape, m["R"], m["scale"])
    inst = [TryOnInstance(arr[i, 0].copy(), arr[i, 1].copy(), m["residual_index"][i],
                          arr[i, 2].copy(), rng_seed=int(m["seed"]) * 1_000_003 + i,
                          person_seed=m["person_seed"][i], garment_seed=m["garment_seed"][i])
            for i in range(m["n"])]
    return Dataset(inst, shape, m["R"], m["scale"], m["seed"], bank)
