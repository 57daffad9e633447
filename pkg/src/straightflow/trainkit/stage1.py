"""Stage-1 path-straightening trainer."""
import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from ..errors import ConfigError, NumericError
from ..evalkit import energy_distance, eval_noise, nearest_composite_errors, sample
from ..objectives import FIXED_GAP, LossWeights, loss_total, sample_pairs
from ..synthdata import stack
from ..velonet import ModelConfig, VelocityModel
from .optim import AdamW, Schedule

log = logging.getLogger(__name__)

# named random streams
DATA, NOISE, DROPOUT, INIT, EVAL = 1, 2, 3, 4, 5


def stream(seed, name, *key):
    return np.random.default_rng([int(seed), name, *key])


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig(pos_embed=True)
    alpha: float = 0.1
    beta: float = 0.05
    uncond_ratio: float = 0.0
    use_cfg_at_inference: bool = False
    cfg_scale: float = 2.0
    inference_steps: int = 30
    epochs: int = 60
    batch_size: int = 32
    lr_peak: float = 1e-3
    lr_floor: float = 1e-4
    warmup_epochs: float = 2.0
    plateau_epochs: float = 20.0
    decay_epochs: float = 18.0
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    pair_mode: str = "free"
    pair_gap: float = FIXED_GAP
    time_dist: str = "uniform"
    stopgrad: bool = True
    eval_every: int = 5
    eval_steps: tuple = (1, 30)

    def validate(self):
        if not 0.0 <= self.uncond_ratio <= 1.0:
            raise ConfigError(f"uncond_ratio must lie in [0, 1], got {self.uncond_ratio}")
        if self.lr_peak <= 0 or self.lr_floor <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.inference_steps < 1:
            raise ConfigError("epochs, batch_size and inference_steps must be positive")
        if self.pair_mode not in ("free", "fixed"):
            raise ConfigError(f"pair_mode must be 'free' or 'fixed', got {self.pair_mode!r}")
        LossWeights(self.alpha, self.beta)
        self.model.validate()
        return self

    @property
    def weights(self):
        return LossWeights(self.alpha, self.beta)

    @property
    def schedule(self):
        return Schedule(self.lr_peak, self.lr_floor, self.warmup_epochs,
                        self.plateau_epochs, self.decay_epochs)

    @property
    def inference_cfg_scale(self):
        return self.cfg_scale if self.use_cfg_at_inference else None


class TrainingDiverged(NumericError):
    def __init__(self, msg, last_good):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainResult:
    model: VelocityModel
    log: list
    checkpoints: list = field(default_factory=list)  # (epoch, VelocityModel)
    dropped: int = 0
    seen: int = 0


def eval_metrics(model, eval_data, steps, seed, cfg_scale=None):
    """Endpoint MSE and energy distance to the oracle targets for one sampling setting."""
    persons, garments, targets, _ = stack(eval_data.instances)
    eps = eval_noise(len(persons), persons.shape[1:], seed)
    outs = sample(model, persons, garments, eps, steps, cfg_scale)
    full, _ = nearest_composite_errors(outs, persons, garments, eval_data.bank)
    return float(full.mean()), energy_distance(outs, targets)


def train_stage1(cfg, data, eval_data=None, keep_checkpoints=False, init=None):
    """Train a velocity model with the combined straightening objective.

    ``data`` is a dataset (``.instances``).  Every ``eval_every`` epochs and
    at the end, the model is scored on ``eval_data`` at each of
    ``eval_steps`` and, with ``keep_checkpoints``, a copy is retained.
    """
    cfg.validate()
    inst = data.instances
    if not inst:
        raise ConfigError("training data is empty")
    persons, garments, targets, _ = stack(inst)
    n = len(inst)
    model = init.copy() if init is not None else VelocityModel.init(cfg.model, cfg.seed)
    opt = AdamW(model.params, cfg.adam_beta1, cfg.adam_beta2, weight_decay=cfg.weight_decay)
    sched = cfg.schedule
    weights = cfg.weights
    steps_per_epoch = max(1, n // cfg.batch_size)
    result = TrainResult(model, [])
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, DATA, epoch).permutation(n)
        last_good = model.copy()
        sums = np.zeros(4)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            b = len(idx)
            rng = stream(cfg.seed, NOISE, epoch, s)
            eps = rng.standard_normal((b,) + persons.shape[1:])
            t1, t2 = sample_pairs(rng, b, cfg.pair_mode, cfg.pair_gap, cfg.time_dist)
            g = garments[idx]
            if cfg.uncond_ratio > 0:
                drop = stream(cfg.seed, DROPOUT, epoch, s).uniform(size=b) < cfg.uncond_ratio
                if drop.any():
                    g = np.where(drop[:, None, None, None], 0.0, g)
                result.dropped += int(drop.sum())
            result.seen += b
            try:
                loss, grads = loss_total(model, persons[idx], g, targets[idx], eps, t1, t2, weights, cfg.stopgrad)
            except NumericError as e:
                raise TrainingDiverged(f"epoch {epoch}, step {s}: {e}", last_good) from e
            if not math.isfinite(loss.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {s}", last_good)
            lr = sched(epoch + s / steps_per_epoch)
            opt.step(model.params, grads, lr)
            sums += (loss.total, loss.fm, loss.garment, loss.consistency)
        row = {"epoch": epoch + 1, "lr": sched(epoch + 1)}
        row.update(zip(("loss", "fm", "garment", "consistency"), (sums / steps_per_epoch).tolist()))
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            if eval_data is not None:
                for k in cfg.eval_steps:
                    mse, ed = eval_metrics(model, eval_data, k, cfg.seed + 1, cfg.inference_cfg_scale)
                    row[f"endpoint_{k}"] = mse
                    row[f"energy_{k}"] = ed
            if keep_checkpoints:
                result.checkpoints.append((epoch + 1, model.copy()))
        log.info("epoch %s", row)
        result.log.append(row)
    return result
