"""Acceptance checks, one pass/fail line per criterion.

Under pytest the lines are printed in the terminal summary; running this
file directly prints them as each check finishes::

    python tests/test_acceptance.py

The toy training runs behind criteria 5-9 take a little over an hour on one
CPU core the first time.  Trained checkpoints and their evaluations are
cached under ``$STRAIGHTFLOW_CACHE`` (default ``.acceptance_cache`` in the
repository) keyed by configuration and the source of the modules that
influence them, so later runs reuse them.
"""
import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from straightflow import _kernels
from straightflow.analytic import DeltaField, MixtureField, mixture_velocity, verify_theorem1
from straightflow.cli import main as cli_main
from straightflow.evalkit import energy_distance, straightness_summary
from straightflow.flowcore import euler_sample
from straightflow.objectives import LossWeights, loss_total
from straightflow.synthdata import Dataset, gen_dataset, oracle_composites, stack
from straightflow.trainkit import (
    DistillConfig, TrainConfig, distill_ladd, epoch_within, eval_metrics, noise_robustness, train_stage1,
)
from straightflow.trainkit.ablation import evaluate_checkpoints
from straightflow.velonet import ModelConfig, VelocityModel

sys.path.insert(0, str(Path(__file__).parent))
from gradcheck import SMALL, fd_grads, group_errors, perturbed_model  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
SRC = ROOT / "src" / "straightflow"
CACHE = Path(os.environ.get("STRAIGHTFLOW_CACHE", ROOT / ".acceptance_cache"))
RESULTS = {}

GRID = (3, 8, 8)
SEEDS = (0, 1, 2)
BASE = TrainConfig(model=ModelConfig(height=8, width=8, patch_size=2, token_dim=48, pos_embed=True),
                   epochs=150, batch_size=32, eval_every=10,
                   warmup_epochs=5, plateau_epochs=75, decay_epochs=45)
VARIANTS = {
    "noUT": BASE,                                    # pure conditional transport; "ours" in criterion 6
    "UT": replace(BASE, uncond_ratio=0.2),
    "nosg": replace(BASE, stopgrad=False),
    "fixed": replace(BASE, pair_mode="fixed"),
}
DISTILL = DistillConfig(teacher_steps=30, epochs=120, lr=1e-4, disc_lr=1e-4, adv_weight=0.001, seed=0)
EVAL_SEED = 1
CFG_SCALE = 2.0


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    return ok


def summary_lines():
    return [f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {d}" for n, (ok, d) in sorted(RESULTS.items())]


# --- cached toy runs -----------------------------------------------------------

def _source_digest(*names):
    h = hashlib.sha256(_kernels.BACKEND.encode())
    for name in names:
        h.update((SRC / name).read_bytes())
    return h.hexdigest()


TRAIN_SRC = ("velonet.py", "_kernels.py", "objectives.py", "flowcore.py", "grid.py", "synthdata.py",
             "trainkit/stage1.py", "trainkit/optim.py")
EVAL_SRC = TRAIN_SRC + ("evalkit.py", "trainkit/ablation.py")


def _key(*parts):
    return hashlib.sha256(repr(parts).encode()).hexdigest()[:20]


_DATA = {}


def datasets():
    if not _DATA:
        _DATA["train"] = Dataset.generate(512, GRID, seed=1)
        _DATA["eval"] = Dataset.generate(256, GRID, seed=999)
    return _DATA["train"], _DATA["eval"]


def trained(variant, seed):
    """(log, [(epoch, model)], seconds) for one Stage-1 run, from cache when possible."""
    cfg = replace(VARIANTS[variant], seed=seed)
    d = CACHE / f"stage1-{variant}-{seed}-{_key(cfg, _source_digest(*TRAIN_SRC))}"
    meta = d / "run.json"
    if meta.exists():
        info = json.loads(meta.read_text())
        ckpts = [(e, VelocityModel.load(d / f"epoch{e}.ckpt", cfg.model)) for e in info["epochs"]]
        return info["log"], ckpts, info["seconds"]
    train, _ = datasets()
    start = time.perf_counter()
    res = train_stage1(cfg, train, None, keep_checkpoints=True)
    seconds = time.perf_counter() - start
    d.mkdir(parents=True, exist_ok=True)
    for e, m in res.checkpoints:
        m.save(d / f"epoch{e}.ckpt", step=e)
    meta.write_text(json.dumps({"log": res.log, "epochs": [e for e, _ in res.checkpoints], "seconds": seconds}))
    return res.log, res.checkpoints, seconds


def _cached_json(name, key, compute):
    p = CACHE / f"{name}-{key}.json"
    if p.exists():
        return json.loads(p.read_text())
    out = compute()
    CACHE.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(out))
    return out


def curves(variant, seed):
    """Per-checkpoint endpoint error and energy distance in the four inference settings."""
    def compute():
        _, ckpts, _ = trained(variant, seed)
        return evaluate_checkpoints(ckpts, datasets()[1], CFG_SCALE, EVAL_SEED)
    return _cached_json(f"curves-{variant}-{seed}",
                        _key(replace(VARIANTS[variant], seed=seed), _source_digest(*EVAL_SRC)), compute)


def final_model(variant, seed):
    return trained(variant, seed)[1][-1][1]


def seed_curve(variant, cfg, steps, metric):
    rows = [[r for r in curves(variant, s) if r["cfg"] == cfg and r["steps"] == steps] for s in SEEDS]
    epochs = np.array([r["epoch"] for r in rows[0]])
    return epochs, np.mean([[r[metric] for r in rs] for rs in rows], axis=0)


def final_cell(variant, cfg, steps, metric):
    return float(seed_curve(variant, cfg, steps, metric)[1][-1])


# --- criteria -------------------------------------------------------------------

def test_c01_theorem_exactness():
    inst = gen_dataset(1, (3, 16, 16), seed=0)[0]
    eps = np.random.default_rng(1).standard_normal((16, 3, 16, 16))
    start = time.perf_counter()
    rep = verify_theorem1(inst.target, eps, [1, 2, 5, 30])
    dt = time.perf_counter() - start
    ok = rep.max_endpoint_discrepancy < 1e-9 and rep.max_chord_deviation < 1e-9 and dt < 1.0
    record(1, ok, f"endpoint {rep.max_endpoint_discrepancy:.2e}, chord {rep.max_chord_deviation:.2e} "
                  f"(< 1e-9), {dt:.3f}s (< 1 s)")
    assert ok


def test_c02_marginal_curvature():
    rng = np.random.default_rng(2)
    d = rng.standard_normal((3, 16, 16))
    d *= 2.0 / np.linalg.norm(d)                  # components separated by 4
    mix = MixtureField.uniform(np.stack([d, -d]))
    start = time.perf_counter()
    big, worst_delta, n = 0, 0.0, 20
    for k in range(n):
        eps = np.random.default_rng([2, k]).standard_normal(d.shape)
        one = euler_sample(mix, eps, steps=1).final
        ref = euler_sample(mix, eps, steps=1000).final
        big += np.linalg.norm(one - ref) / max(np.linalg.norm(one), np.linalg.norm(ref)) > 0.1
        rep = verify_theorem1(d, eps[None], [1, 1000])
        worst_delta = max(worst_delta, rep.max_endpoint_discrepancy)
    dt = time.perf_counter() - start
    ok = big / n >= 0.9 and worst_delta < 1e-9 and dt < 10
    record(2, ok, f"mixture 1-vs-1000-step discrepancy > 0.1 for {big}/{n} seeds (>= 90%), "
                  f"delta {worst_delta:.2e} (< 1e-9), {dt:.1f}s (< 10 s)")
    assert ok


def _terms(model, p, g, y, e, t1, t2):
    """Forward-only (fm, garment, consistency) for finite differences."""
    o1 = model.forward(t1[:, None, None, None] * y + (1 - t1[:, None, None, None]) * e, p, g, t1)
    o2 = model.forward(t2[:, None, None, None] * y + (1 - t2[:, None, None, None]) * e, p, g, t2)
    u = y - e
    mse = lambda a, b: float(np.mean((a - b) ** 2))
    return (mse(o1.velocity, u) + mse(o2.velocity, u), mse(o1.garment_out, g) + mse(o2.garment_out, g),
            mse(o1.velocity, o2.velocity), o2.velocity)


def test_c03_gradients():
    model = perturbed_model()
    r = np.random.default_rng(3)
    shape = (2,) + SMALL.grid_shape
    p, g, y = (r.uniform(-1, 1, shape) for _ in range(3))
    e = r.standard_normal(shape)
    t1, t2 = np.array([0.15, 0.4]), np.array([0.55, 0.85])
    start = time.perf_counter()

    def grads(alpha, beta, sg=True):
        return loss_total(model, p, g, y, e, t1, t2, LossWeights(alpha, beta), use_stopgrad=sg)[1]

    base = grads(0.0, 0.0)
    diff = lambda a: {k: a[k] - base[k] for k in a}
    v2_frozen = _terms(model, p, g, y, e, t1, t2)[3]
    t1_in = t1[:, None, None, None] * y + (1 - t1[:, None, None, None]) * e
    checks = {
        "L_fm": (base, lambda m: _terms(m, p, g, y, e, t1, t2)[0]),
        "L_g": (diff(grads(1.0, 0.0)), lambda m: _terms(m, p, g, y, e, t1, t2)[1]),
        "L_cons/nosg": (diff(grads(0.0, 1.0, False)), lambda m: _terms(m, p, g, y, e, t1, t2)[2]),
        "L_cons/sg": (diff(grads(0.0, 1.0, True)),
                      lambda m: float(np.mean((m.forward(t1_in, p, g, t1).velocity - v2_frozen) ** 2))),
    }
    worst = {}
    for name, (analytic, fn) in checks.items():
        worst[name] = max(group_errors(analytic, fd_grads(model, fn)).values())
    dt = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and dt < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(3, ok, f"worst per-group relative error {detail} (< 1e-4) over {len(base)} groups, {dt:.0f}s (< 2 min)")
    assert ok


class _Recorder:
    def __init__(self, model):
        self.model, self.seen = model, []

    def forward(self, *a, **k):
        return self.model.forward(*a, **k)

    def backward(self, cache, d_velocity=None, d_garment_out=None, d_taps=None):
        self.seen.append((d_velocity, d_garment_out))
        return self.model.backward(cache, d_velocity, d_garment_out, d_taps)


def test_c04_stopgrad_contract():
    model = perturbed_model()
    r = np.random.default_rng(4)
    shape = (3,) + SMALL.grid_shape
    p, g, y, e = (r.uniform(-1, 1, shape) for _ in range(4))
    t1, t2 = np.array([0.1, 0.3, 0.5]), np.array([0.2, 0.7, 0.9])
    rec, const = _Recorder(model), _Recorder(model)
    _, g_sg = loss_total(rec, p, g, y, e, t1, t2, LossWeights(0.1, 0.05), use_stopgrad=True)
    # the constant-t2 run: the consistency term is absent from the t2 half by construction
    _, g_0 = loss_total(const, p, g, y, e, t1, t2, LossWeights(0.1, 0.0), use_stopgrad=True)
    d_vel, d_gar = rec.seen[0]
    t2_equal = np.array_equal(d_vel[3:], const.seen[0][0][3:])
    t1_differs = not np.array_equal(d_vel[:3], const.seen[0][0][:3])
    # replaying the recorded cotangents reproduces the parameter gradients bit for bit
    x = np.concatenate([t1[:, None, None, None] * y + (1 - t1[:, None, None, None]) * e,
                        t2[:, None, None, None] * y + (1 - t2[:, None, None, None]) * e])
    _, cache = model.forward(x, np.concatenate([p, p]), np.concatenate([g, g]), np.concatenate([t1, t2]),
                             keep_cache=True)
    replay, _ = model.backward(cache, d_vel, d_gar)
    replay_equal = all(np.array_equal(replay[k], g_sg[k]) for k in g_sg)
    ok = t2_equal and t1_differs and replay_equal
    record(4, ok, f"t2 cotangent bit-equal to consistency-free run: {t2_equal}; t1 carries the term: {t1_differs}; "
                  f"gradients bit-equal on replay: {replay_equal}")
    assert ok


def test_c05_guidance_ordering():
    d = {}
    for v in ("UT", "noUT"):
        for c in ("CFG", "noCFG"):
            for m in ("endpoint", "energy"):
                d[v, c, m] = final_cell(v, c, 1, m)
    a = all(d[v, "noCFG", m] < d[v, "CFG", m] for v in ("UT", "noUT") for m in ("endpoint", "energy"))
    b = all(d["noUT", "noCFG", m] < d["UT", "noCFG", m] for m in ("endpoint", "energy"))
    e1 = epoch_within(*seed_curve("noUT", "noCFG", 1, "endpoint"))
    e30 = epoch_within(*seed_curve("noUT", "noCFG", 30, "endpoint"))
    c = e30 < e1
    ed1 = epoch_within(*seed_curve("noUT", "noCFG", 1, "energy"))
    ed30 = epoch_within(*seed_curve("noUT", "noCFG", 30, "energy"))
    longest = max(trained(v, s)[2] for v in ("UT", "noUT") for s in SEEDS)
    ok = a and b and c and longest <= 900
    f = lambda v, c_, m: f"{d[v, c_, m]:.4f}"
    record(5, ok, f"(a) {a}: 1-step noCFG/CFG endpoint UT {f('UT', 'noCFG', 'endpoint')}/{f('UT', 'CFG', 'endpoint')} "
                  f"noUT {f('noUT', 'noCFG', 'endpoint')}/{f('noUT', 'CFG', 'endpoint')}, energy UT "
                  f"{f('UT', 'noCFG', 'energy')}/{f('UT', 'CFG', 'energy')} noUT {f('noUT', 'noCFG', 'energy')}/"
                  f"{f('noUT', 'CFG', 'energy')}; (b) {b}; (c) {c}: endpoint within 5% of best at epoch "
                  f"{e30} (30-step) vs {e1} (1-step) [energy: {ed30} vs {ed1}]; longest run {longest:.0f}s (<= 900 s)")
    assert ok


def test_c06_pairing_ordering():
    _, ev = datasets()
    errs = {v: [eval_metrics(final_model(v, s), ev, 1, EVAL_SEED)[0] for s in SEEDS]
            for v in ("noUT", "nosg", "fixed")}
    strict = [errs["noUT"][i] < errs["nosg"][i] < errs["fixed"][i] for i in range(len(SEEDS))]
    mean = {v: float(np.mean(x)) for v, x in errs.items()}
    mean_ok = mean["noUT"] < mean["nosg"] < mean["fixed"]
    ok = sum(strict) >= 2 and mean_ok
    per = "; ".join(f"seed {s}: " + "/".join(f"{errs[v][i]:.4f}" for v in ("noUT", "nosg", "fixed"))
                    for i, s in enumerate(SEEDS))
    record(6, ok, f"1-step endpoint ours/no-stopgrad/fixed-interval {per}; mean {mean['noUT']:.4f}/"
                  f"{mean['nosg']:.4f}/{mean['fixed']:.4f}; strict in {sum(strict)}/3 seeds, on mean: {mean_ok}")
    assert ok


def test_c07_straightening():
    _, ev = datasets()
    sub = Dataset(ev.instances[:64], ev.shape, ev.R, ev.scale, ev.seed, ev.bank)

    def chord(variant, seed, which):
        key = _key(variant, seed, which, _source_digest(*EVAL_SRC), "chord")

        def compute():
            ckpts = trained(variant, seed)[1]
            epoch, m = ckpts[which]
            return [epoch, straightness_summary(m, sub, 30, EVAL_SEED)[0]]
        return _cached_json("chord", key, compute)

    first = [chord("noUT", s, 0) for s in SEEDS]
    last = [chord("noUT", s, -1) for s in SEEDS]
    ratio = np.mean([b[1] for b in last]) / np.mean([a[1] for a in first])
    ok = ratio < 0.5
    per = ", ".join(f"{a[1]:.4f}->{b[1]:.4f}" for a, b in zip(first, last))
    record(7, ok, f"mean chord deviation of 30-step trajectories, epoch {first[0][0]} -> {last[0][0]}: {per}; "
                  f"seed-mean ratio {ratio:.3f} (< 0.5)")
    assert ok


def distilled():
    teacher = final_model("noUT", 0)
    key = _key(DISTILL, teacher.flat().tobytes().hex()[:64], _source_digest(*TRAIN_SRC, "trainkit/distill.py"))
    path = CACHE / f"student-{key}.ckpt"
    if path.exists():
        return teacher, VelocityModel.load(path, teacher.config)
    train, _ = datasets()
    res = distill_ladd(teacher, DISTILL, train)
    assert res.teacher_stable
    CACHE.mkdir(parents=True, exist_ok=True)
    res.student.save(path, step=DISTILL.epochs)
    return teacher, res.student


def test_c08_distillation_gain():
    _, ev = datasets()
    teacher, student = distilled()
    t1_end, t1_ed = eval_metrics(teacher, ev, 1, EVAL_SEED)
    _, t30_ed = eval_metrics(teacher, ev, 30, EVAL_SEED)
    s_end, s_ed = eval_metrics(student, ev, 1, EVAL_SEED)
    ok = s_end <= t1_end and s_ed <= 1.1 * t30_ed
    record(8, ok, f"student 1-step endpoint {s_end:.4f} vs teacher 1-step {t1_end:.4f} (<=); student 1-step energy "
                  f"{s_ed:.4f} vs 1.1 x teacher 30-step {1.1 * t30_ed:.4f} (<=); teacher 1-step energy {t1_ed:.4f}")
    assert ok


def test_c09_noise_robustness():
    _, ev = datasets()
    _, student = distilled()
    p, g, _, _ = stack(ev.instances[:64])
    disp, cross, ratio = noise_robustness(student, p, g, n_seeds=5, seed=EVAL_SEED)
    ok = ratio < 0.2
    record(9, ok, f"mean pairwise distance over 5 noises {disp:.4f}, cross-garment {cross:.4f}, "
                  f"ratio {ratio:.3f} (< 0.2) over 64 instances")
    assert ok


TINY_INI = """
[data]
n = 16
[eval]
n = 8
steps = 1,3
[model]
patch_size = 4
token_dim = 8
heads = 2
depth = 2
time_features = 8
[train]
epochs = 1
batch_size = 8
[ablation]
seeds = 0
[distill]
epochs = 1
batch_size = 8
teacher_steps = 3
teacher = train/model.ckpt
robustness_instances = 4
"""


def test_c10_determinism(monkeypatch):
    runs = [["verify-theorem"], ["gen-data"], ["train"], ["ablate"], ["distill"],
            ["eval", "--checkpoint", "train/model.ckpt"],
            ["sample", "--checkpoint", "train/model.ckpt", "--steps", "4"]]
    hashes = []
    for rep in range(2):
        with tempfile.TemporaryDirectory() as tmp:
            monkeypatch.setenv("STRAIGHTFLOW_OUT", tmp)
            ini = Path(tmp) / "tiny.ini"
            ini.write_text(TINY_INI)
            hs = []
            for args in runs:
                full = args if args[0] == "verify-theorem" else [args[0], "--config", str(ini), *args[1:]]
                assert cli_main(full) == 0, full
                hs.append(json.loads((Path(tmp) / args[0] / "manifest.json").read_text())["hash"])
            hashes.append(hs)
    same = [a == b for a, b in zip(*hashes)]
    ok = all(same)
    record(10, ok, f"manifest hashes equal across two runs for {sum(same)}/{len(runs)} subcommands "
                   f"({', '.join(r[0] for r in runs)})")
    assert ok


def _direct_mixture_velocity(targets, x, t):
    """Posterior-weighted delta velocities from explicit Gaussian log densities."""
    logd = np.array([-np.sum((x - t * y) ** 2) / (2 * (1 - t) ** 2) for y in targets])
    w = np.exp(logd - logd.max())
    w /= w.sum()
    return sum(wi * (y - x) / (1 - t) for wi, y in zip(w, targets))


def brute_energy(a, b):
    dist = lambda u, v: float(np.sqrt(np.sum((u - v) ** 2)))
    cross = sum(dist(x, y) for x in a for y in b) / (len(a) * len(b))
    aa = sum(dist(x, y) for x in a for y in a) / len(a) ** 2
    bb = sum(dist(x, y) for x in b for y in b) / len(b) ** 2
    return 2 * cross - aa - bb


def test_c11_oracle_consistency():
    ds = Dataset.generate(6, (3, 16, 16), seed=11)
    r = np.random.default_rng(11)
    worst_v = 0.0
    for inst in ds.instances:
        comps = oracle_composites(inst.person, inst.garment, ds.bank)
        field = MixtureField.uniform(comps)
        for t in (0.0, 0.3, 0.7, 0.95):
            x = t * comps[r.integers(len(comps))] + (1 - t) * r.standard_normal(comps.shape[1:])
            worst_v = max(worst_v, float(np.abs(mixture_velocity(field, x, t)
                                                - _direct_mixture_velocity(comps, x, t)).max()))
    worst_e = 0.0
    for _ in range(20):
        a, b = r.standard_normal((5, 3, 4, 4)), r.normal(0.2, 1.1, (5, 3, 4, 4))
        worst_e = max(worst_e, abs(energy_distance(a, b) - brute_energy(a, b)))
    ok = worst_v < 1e-12 and worst_e < 1e-10
    record(11, ok, f"mixture velocity vs direct {worst_v:.1e} (< 1e-12); energy distance vs double loop "
                   f"{worst_e:.1e} (< 1e-10)")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
