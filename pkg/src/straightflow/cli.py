"""Command-line entry point: ``straightflow <subcommand> [options]``.

Runs are configured by an INI file (``--config``) whose sections mirror
the library's config objects; ``--set section.key=value`` and a few
shortcut flags override single keys.  Unknown sections or keys are errors.
Outputs go to ``$STRAIGHTFLOW_OUT/<out>`` (default ``./runs/<subcommand>``)
together with a ``manifest.json`` whose ``hash`` covers the resolved
config, the input artifacts and every output file.

Exit codes: 0 success, 1 theorem check failed, 2 configuration or usage
error, 3 missing artifact, 4 incompatible artifact, 5 numeric failure.
"""
import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .analytic import MixtureField, verify_theorem1
from .errors import ConfigError, DomainError, IncompatibleArtifact, NumericError, ShapeError
from .evalkit import eval_noise, evaluate, sample_trajectories
from .flowcore import write_trajectory_csv
from .synthdata import (
    Dataset, ResidualBank, gen_dataset, gen_triples, load_dataset, save_dataset, stack,
    triples_to_instances,
)
from .trainkit import (
    DistillConfig, TrainConfig, distill_ladd, eval_metrics, noise_robustness, run_ablation_grid, train_stage1,
)
from .velonet import ModelConfig, VelocityModel

log = logging.getLogger("straightflow")

OUT_ENV = "STRAIGHTFLOW_OUT"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING, EXIT_INCOMPATIBLE, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5


class MissingArtifact(FileNotFoundError):
    pass


# --- configuration ----------------------------------------------------------

def _fields(cls, skip=()):
    return {f.name: f.default for f in fields(cls) if f.name not in skip}


# section -> key -> default; types follow the defaults
SCHEMA = {
    "data": {"n": 512, "channels": 3, "height": 8, "width": 8, "residuals": 4, "scale": 0.05,
             "seed": 1, "kind": "instances", "path": ""},
    "eval": {"n": 128, "seed": 999, "noise_seed": 1, "steps": (1, 30), "cfg_scale": 0.0},
    "model": _fields(ModelConfig, skip=("channels", "height", "width")),
    "train": _fields(TrainConfig, skip=("model", "eval_steps")),
    "ablation": {"seeds": (0,)},
    "distill": dict(_fields(DistillConfig), teacher="", robustness_instances=64, robustness_seeds=5),
}
SCHEMA["model"].update(patch_size=2, token_dim=48, pos_embed=True)


def _parse(value, default, where):
    try:
        if isinstance(default, bool):
            v = value.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, tuple):
            return tuple(int(x) for x in value.replace(" ", "").split(",") if x)
        return type(default)(value)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {type(default).__name__}") from None


def load_config(path=None, overrides=()):
    """Resolved config as ``{section: {key: value}}`` with defaults filled in."""
    cfg = {s: dict(keys) for s, keys in SCHEMA.items()}
    items = []
    if path:
        if not os.path.exists(path):
            raise MissingArtifact(path)
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for sec in cp.sections():
            items += [(sec, k, v) for k, v in cp.items(sec)]
    for ov in overrides:
        key, sep, value = ov.partition("=")
        sec, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {ov!r} is not of the form section.key=value")
        items.append((sec, name, value.strip()))
    for sec, key, value in items:
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section [{sec}]")
        if key not in SCHEMA[sec]:
            raise ConfigError(f"unknown key {key!r} in section [{sec}]")
        cfg[sec][key] = _parse(value, SCHEMA[sec][key], f"[{sec}] {key}")
    return cfg


def model_config(cfg):
    d = cfg["data"]
    mc = ModelConfig(channels=d["channels"], height=d["height"], width=d["width"], **cfg["model"])
    try:
        mc.validate()
    except ConfigError as e:
        raise ConfigError(f"[model] does not fit the [data] grid: {e}") from None
    return mc


def train_config(cfg):
    return TrainConfig(model=model_config(cfg), eval_steps=cfg["eval"]["steps"], **cfg["train"]).validate()


def distill_config(cfg):
    known = _fields(DistillConfig)
    return DistillConfig(**{k: v for k, v in cfg["distill"].items() if k in known}).validate(model_config(cfg))


def _cfg_scale(cfg):
    s = cfg["eval"]["cfg_scale"]
    return s if s > 0 else None


# --- artifacts ----------------------------------------------------------------

def out_root():
    return os.environ.get(OUT_ENV, "runs")


def resolve(path):
    return path if os.path.isabs(path) else os.path.join(out_root(), path)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list).encode()


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    inputs: dict          # artifact name -> sha256
    outputs: dict         # file name -> sha256
    output_dir: str
    duration_s: float = 0.0

    @property
    def input_hash(self):
        return hashlib.sha256(_canonical([self.subcommand, self.config, self.inputs])).hexdigest()

    @property
    def hash(self):
        """Content hash; independent of where and how long the run took."""
        return hashlib.sha256(_canonical([self.subcommand, self.config, self.inputs, self.outputs])).hexdigest()

    def to_dict(self):
        return dict(asdict(self), input_hash=self.input_hash, hash=self.hash)

    def write(self, path):
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=list)
        os.replace(tmp, path)


def load_data(cfg, section="data"):
    d = cfg["data"]
    if section == "data" and d["path"]:
        p = resolve(d["path"])
        if not os.path.exists(os.path.join(p, "manifest.json")):
            raise MissingArtifact(os.path.join(p, "manifest.json"))
        ds = load_dataset(p)
        if ds.shape != (d["channels"], d["height"], d["width"]):
            raise IncompatibleArtifact(f"{p}: dataset shape {ds.shape} does not match the [data] grid")
        return ds
    shape = (d["channels"], d["height"], d["width"])
    n, seed = (d["n"], d["seed"]) if section == "data" else (cfg["eval"]["n"], cfg["eval"]["seed"])
    if d["kind"] == "triples" and section == "data":
        bank = ResidualBank.build(shape, d["residuals"], d["scale"])
        inst = triples_to_instances(gen_triples(n, shape, d["residuals"], d["scale"], seed, bank), bank)
        return Dataset(inst, shape, d["residuals"], d["scale"], seed, bank)
    if d["kind"] not in ("instances", "triples"):
        raise ConfigError(f"[data] kind must be 'instances' or 'triples', got {d['kind']!r}")
    return Dataset.generate(n, shape, d["residuals"], d["scale"], seed)


def load_checkpoint(path, cfg):
    p = resolve(path)
    if not os.path.exists(p):
        raise MissingArtifact(p)
    return VelocityModel.load(p, expect_config=model_config(cfg)), file_sha256(p)


def _write_csv(path, rows):
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


# --- subcommands --------------------------------------------------------------

def cmd_gen_data(cfg, args, out):
    model_config(cfg)   # the grid must be usable by the configured model
    ds = load_data(cfg)
    m = save_dataset(ds, os.path.join(out, "dataset"))
    _write_json(os.path.join(out, "summary.json"), {"n": m["n"], "checksum": m["checksum"]})
    return {}


def cmd_train(cfg, args, out):
    tc = train_config(cfg)
    data, ev = load_data(cfg), load_data(cfg, "eval")
    res = train_stage1(tc, data, ev)
    res.model.save(os.path.join(out, "model.ckpt"), step=tc.epochs)
    _write_csv(os.path.join(out, "metrics.csv"), res.log)
    return {"dataset": _dataset_id(data)}


def cmd_ablate(cfg, args, out):
    tc = train_config(cfg)
    data, ev = load_data(cfg), load_data(cfg, "eval")
    res = run_ablation_grid(tc, data, ev, seeds=cfg["ablation"]["seeds"])
    res.write_table(os.path.join(out, "table.csv"))
    res.write_curves(os.path.join(out, "curves.csv"))
    return {"dataset": _dataset_id(data)}


def cmd_distill(cfg, args, out):
    dc = distill_config(cfg)
    if not cfg["distill"]["teacher"]:
        raise ConfigError("[distill] teacher must name a checkpoint")
    teacher, digest = load_checkpoint(cfg["distill"]["teacher"], cfg)
    data, ev = load_data(cfg), load_data(cfg, "eval")
    res = distill_ladd(teacher, dc, data, ev)
    res.student.save(os.path.join(out, "student.ckpt"), step=dc.epochs)
    _write_csv(os.path.join(out, "distill_log.csv"), res.log)
    seed = cfg["eval"]["noise_seed"]
    report = {"teacher_stable": res.teacher_stable}
    for name, model, k in (("teacher", teacher, 1), ("teacher", teacher, 30), ("student", res.student, 1)):
        report[f"{name}_endpoint_{k}"], report[f"{name}_energy_{k}"] = eval_metrics(model, ev, k, seed)
    persons, garments, _, _ = stack(ev.instances[:cfg["distill"]["robustness_instances"]])
    disp, cross, ratio = noise_robustness(res.student, persons, garments, cfg["distill"]["robustness_seeds"], seed)
    report.update(dispersion=disp, cross_garment=cross, dispersion_ratio=ratio)
    _write_json(os.path.join(out, "report.json"), report)
    return {"teacher": digest, "dataset": _dataset_id(data)}


def cmd_eval(cfg, args, out):
    model, digest = load_checkpoint(args.checkpoint, cfg)
    ev = load_data(cfg, "eval")
    reports = {str(k): json.loads(evaluate(model, ev, k, cfg["eval"]["noise_seed"], _cfg_scale(cfg)).to_json())
               for k in cfg["eval"]["steps"]}
    _write_json(os.path.join(out, "report.json"), reports)
    return {"checkpoint": digest}


def cmd_sample(cfg, args, out):
    model, digest = load_checkpoint(args.checkpoint, cfg)
    ev = load_data(cfg, "eval")
    if not 0 <= args.index < len(ev):
        raise ConfigError(f"--index {args.index} outside the eval set of {len(ev)}")
    persons, garments, _, _ = stack(ev.instances[args.index:args.index + 1])
    eps = eval_noise(1, persons.shape[1:], args.noise_seed)
    traj = sample_trajectories(model, persons, garments, eps, args.steps, _cfg_scale(cfg))
    one = traj.select(0)
    write_trajectory_csv(one, os.path.join(out, "trajectory.csv"))
    final = one.final
    with open(os.path.join(out, "final.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "row"] + [f"c{j}" for j in range(final.shape[2])])
        for c in range(final.shape[0]):
            for i in range(final.shape[1]):
                w.writerow([c, i] + [repr(float(v)) for v in final[c, i]])
    return {"checkpoint": digest}


def cmd_verify_theorem(cfg, args, out):
    shape = (3, 16, 16)
    inst = gen_dataset(2, shape, seed=args.seed)
    rng = np.random.default_rng([args.seed, 0x7468])
    eps = rng.standard_normal((args.samples,) + shape)
    target = inst[0].target
    field = None
    if args.mixture:
        field = MixtureField.uniform(np.stack([target, inst[1].target]))
    start = time.perf_counter()
    rep = verify_theorem1(target, eps, args.steps, field=field)
    d = rep.to_dict()
    d.update(mode="mixture" if args.mixture else "delta", steps=list(args.steps), samples=args.samples,
             seed=args.seed)
    _write_json(os.path.join(out, "report.json"), d)
    log.info("verify-theorem %s in %.3fs", "PASS" if rep.passed else "FAIL", time.perf_counter() - start)
    print(json.dumps(d, sort_keys=True))
    args.exit_code = EXIT_OK if (rep.passed or args.mixture) else EXIT_FAIL
    return {}


def _dataset_id(ds):
    persons, garments, targets, _ = ds.arrays()
    return hashlib.sha256(np.stack([persons, garments, targets], axis=1).astype("<f8").tobytes()).hexdigest()


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "verify-theorem": cmd_verify_theorem,
}


def _steps_list(s):
    try:
        v = [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad step list {s!r}") from None
    if not v or any(k < 1 for k in v):
        raise argparse.ArgumentTypeError("step counts must be positive integers")
    return v


def _positive(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {s}")
    return v


def build_parser():
    ap = argparse.ArgumentParser(prog="straightflow", description="Straight conditional-transport flow matching.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", help="output directory under $%s (default: the subcommand name)" % OUT_ENV)
        if name == "verify-theorem":
            p.add_argument("--steps", type=_steps_list, default=[1, 2, 5, 30])
            p.add_argument("--samples", type=_positive, default=16)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--mixture", action="store_true", help="run the harness on a two-component mixture")
            continue
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--seed", type=int, help="shortcut for train.seed and distill.seed")
        p.add_argument("--alpha", type=float, help="shortcut for train.alpha")
        p.add_argument("--beta", type=float, help="shortcut for train.beta")
        p.add_argument("--epochs", type=int, help="shortcut for train.epochs (distill.epochs for distill)")
        if name in ("eval", "sample"):
            p.add_argument("--checkpoint", required=True)
        if name == "sample":
            p.add_argument("--steps", type=_positive, default=1)
            p.add_argument("--index", type=int, default=0)
            p.add_argument("--noise-seed", type=int, default=0)
    return ap


def _overrides(args):
    ov = list(getattr(args, "set", []))
    if getattr(args, "seed", None) is not None and args.command != "verify-theorem":
        ov += [f"train.seed={args.seed}", f"distill.seed={args.seed}"]
    for k in ("alpha", "beta"):
        if getattr(args, k, None) is not None:
            ov.append(f"train.{k}={getattr(args, k)}")
    if getattr(args, "epochs", None) is not None:
        ov.append(f"{'distill' if args.command == 'distill' else 'train'}.epochs={args.epochs}")
    return ov


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    args.exit_code = EXIT_OK
    if args.command == "verify-theorem":
        cfg = {}
        resolved = {"steps": args.steps, "samples": args.samples, "seed": args.seed, "mixture": args.mixture}
    else:
        cfg = load_config(args.config, _overrides(args))
        resolved = cfg
        if args.command in ("eval", "sample"):
            resolved = dict(cfg, cli={"checkpoint": args.checkpoint,
                                      **({"steps": args.steps, "index": args.index, "noise_seed": args.noise_seed}
                                         if args.command == "sample" else {})})
    out = resolve(args.out or args.command)
    os.makedirs(out, exist_ok=True)
    start = time.perf_counter()
    inputs = COMMANDS[args.command](cfg, args, out)
    outputs = {}
    for root, _, files in os.walk(out):
        for f in sorted(files):
            if root == out and f.startswith("manifest.json"):
                continue
            p = os.path.join(root, f)
            outputs[os.path.relpath(p, out)] = file_sha256(p)
    man = RunManifest(args.command, resolved, inputs, dict(sorted(outputs.items())), out,
                      round(time.perf_counter() - start, 3))
    man.write(os.path.join(out, "manifest.json"))
    log.info("%s done: %s (hash %s)", args.command, out, man.hash[:12])
    return args.exit_code


def main(argv=None):
    try:
        return run(argv)
    except FileNotFoundError as e:
        print(f"straightflow: missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except IncompatibleArtifact as e:
        print(f"straightflow: incompatible artifact: {e}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (ConfigError, DomainError, ShapeError) as e:
        print(f"straightflow: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"straightflow: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
