"""Eight-cell ablation: unconditional training x guidance at inference x step count."""
import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .stage1 import eval_metrics, train_stage1

UT_RATIO = 0.2
CELLS = [(a, b, k) for a in ("UT", "noUT") for b in ("CFG", "noCFG") for k in (1, 30)]


def cell_label(a, b, k):
    return f"C_{{{a},{b}}}^{{{k}}}"


@dataclass
class AblationResult:
    curves: list   # dict rows: seed, train, cfg, steps, epoch, endpoint, energy
    table: list    # dict rows, one per cell, final-checkpoint metrics averaged over seeds
    runs: dict = field(default_factory=dict)  # (train, seed) -> TrainResult

    def curve(self, train, cfg, steps, metric, seed=None):
        rows = [r for r in self.curves if r["train"] == train and r["cfg"] == cfg
                and r["steps"] == steps and (seed is None or r["seed"] == seed)]
        epochs = sorted({r["epoch"] for r in rows})
        vals = [np.mean([r[metric] for r in rows if r["epoch"] == e]) for e in epochs]
        return np.array(epochs), np.array(vals)

    def cell(self, train, cfg, steps):
        return next(r for r in self.table if (r["train"], r["cfg"], r["steps"]) == (train, cfg, steps))

    def write_table(self, path):
        cols = ["cell", "train", "cfg", "steps", "endpoint", "energy", "n_seeds"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, cols)
            w.writeheader()
            for r in self.table:
                w.writerow({k: r[k] for k in cols})

    def write_curves(self, path):
        cols = ["seed", "train", "cfg", "steps", "epoch", "endpoint", "energy"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, cols)
            w.writeheader()
            for r in self.curves:
                w.writerow({k: r[k] for k in cols})


def evaluate_checkpoints(checkpoints, eval_data, cfg_scale, eval_seed, steps=(1, 30)):
    """Rows of (epoch, cfg flag, steps, endpoint, energy) for each retained checkpoint."""
    rows = []
    for epoch, model in checkpoints:
        for b, scale in (("CFG", cfg_scale), ("noCFG", None)):
            for k in steps:
                mse, ed = eval_metrics(model, eval_data, k, eval_seed, scale)
                rows.append({"epoch": epoch, "cfg": b, "steps": k, "endpoint": mse, "energy": ed})
    return rows


def run_ablation_grid(base_cfg, data, eval_data, seeds=(0,), runs=None):
    """Train UT (ratio 0.2) and noUT models per seed and score every checkpoint.

    ``runs`` may supply already-trained results keyed by ``(train, seed)``.
    """
    runs = dict(runs or {})
    curves = []
    for seed in seeds:
        for a, ratio in (("UT", UT_RATIO), ("noUT", 0.0)):
            cfg = replace(base_cfg, uncond_ratio=ratio, seed=seed)
            if (a, seed) not in runs:
                runs[(a, seed)] = train_stage1(cfg, data, None, keep_checkpoints=True)
            for r in evaluate_checkpoints(runs[(a, seed)].checkpoints, eval_data,
                                          base_cfg.cfg_scale, base_cfg.seed + 1):
                curves.append(dict(r, seed=seed, train=a))
    table = []
    for a, b, k in CELLS:
        finals = []
        for seed in seeds:
            rows = [r for r in curves if (r["train"], r["cfg"], r["steps"], r["seed"]) == (a, b, k, seed)]
            finals.append(max(rows, key=lambda r: r["epoch"]))
        table.append({"cell": cell_label(a, b, k), "train": a, "cfg": b, "steps": k,
                      "endpoint": float(np.mean([r["endpoint"] for r in finals])),
                      "energy": float(np.mean([r["energy"] for r in finals])),
                      "n_seeds": len(seeds)})
    return AblationResult(curves, table, runs)


def epoch_within(epochs, values, frac=0.05):
    """First epoch whose value is within ``frac`` of the best (lowest) value."""
    best = values.min()
    return int(epochs[np.argmax(values <= best * (1.0 + frac))])
