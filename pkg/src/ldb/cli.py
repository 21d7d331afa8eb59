"""
Command-line entry point.

    ldb train     --config run.json [--baseline] [--out DIR]
    ldb gradcheck --preset mlp-8 [--seed N]
    ldb sweep     --axis s --values 1,2,4,8 [--config run.json]
    ldb bench     [--config run.json]

Exit codes: 0 success, 1 gradient check failed, 2 invalid configuration,
3 training diverged, 4 I/O error.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, fields

from . import bench, data
from .errors import ConfigError, DataError, DivergedError, FormatError
from .gradcheck import TOLERANCE, check_preset
from .network import PRESETS, build_preset
from .scheduler import LdbConfig
from .trainer import train, train_baseline

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("ldb")


@dataclass
class RunConfig:
    # LayerDropBack
    p: float = 0.3
    s: int = 2
    kappa: float = 2.0
    lr: float = 0.02
    batch: int = 128
    keep_head: int = 4
    keep_tail: int = 1
    momentum: float = 0.9
    weight_decay: float = 0.0
    per_step_selection: bool = False
    # model and schedule
    preset: str = "mlp-8"
    width: int = 64
    epochs: int = 30
    schedule: str = "cosine"
    # dataset: "blobs", "idx" or "csv"
    dataset: str = "blobs"
    n: int = 2000
    classes: int = 4
    dim: int = 32
    sigma: float = 0.5
    center_scale: float = 3.0
    images: str = ""
    labels: str = ""
    csv: str = ""
    # optional per-channel standardization, comma-separated values
    norm_mean: str = ""
    norm_std: str = ""
    # seeds
    seed_data: int = 0
    seed_init: int = 1
    seed_select: int = 2
    # output
    out: str = "runs/ldb"
    checkpoint_every: int = 0
    # timing experiments
    repeats: int = 5
    bench_steps: int = 30

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {}
        for key, value in d.items():
            kwargs[key] = _coerce(key, known[key].type, value)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self):
        return dataclasses.asdict(self)

    def ldb_config(self):
        return LdbConfig(p=self.p, s=self.s, kappa=self.kappa, base_lr=self.lr, base_batch=self.batch,
                         keep_head=self.keep_head, keep_tail=self.keep_tail,
                         selection_seed=self.seed_select, momentum=self.momentum,
                         weight_decay=self.weight_decay, per_step_selection=self.per_step_selection)

    def validate(self):
        self.ldb_config()
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {', '.join(PRESETS)}, got {self.preset!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.dataset not in ("blobs", "idx", "csv"):
            raise ConfigError(f"dataset must be 'blobs', 'idx' or 'csv', got {self.dataset!r}")
        if self.dataset == "idx" and not (self.images and self.labels):
            raise ConfigError("dataset 'idx' needs both 'images' and 'labels' paths")
        if self.dataset == "csv" and not self.csv:
            raise ConfigError("dataset 'csv' needs a 'csv' path")
        for name in ("epochs", "width", "n", "classes", "dim", "repeats"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.bench_steps < 30:
            raise ConfigError(f"bench_steps must be >= 30, got {self.bench_steps}")
        if bool(self.norm_mean) != bool(self.norm_std):
            raise ConfigError("norm_mean and norm_std must be given together")
        _floats("norm_mean", self.norm_mean)
        _floats("norm_std", self.norm_std)
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        for name in ("seed_data", "seed_init", "seed_select"):
            if not 0 <= getattr(self, name) < 2**64:
                raise ConfigError(f"{name} must be a 64-bit unsigned integer")


def _floats(key, text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from None


def _coerce(key, typ, value):
    typ = {"float": float, "int": int, "str": str, "bool": bool}.get(typ, typ)
    if typ is bool:
        if isinstance(value, bool):
            return value
    elif typ is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif typ is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif isinstance(value, typ):
        return value
    raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")


def load_config(path, overrides=None):
    raw = {}
    if path:
        try:
            with open(path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        nested = [k for k, v in raw.items() if isinstance(v, (dict, list))]
        if nested:
            raise ConfigError(f"{path}: config must be flat, nested value(s) at {', '.join(nested)}")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(raw)


def load_dataset(cfg):
    if cfg.dataset == "blobs":
        ds = data.synth_blobs(cfg.n, cfg.classes, cfg.dim, cfg.sigma, cfg.seed_data, cfg.center_scale)
    elif cfg.dataset == "idx":
        ds = data.load_idx_images(cfg.images, cfg.labels, seed=cfg.seed_data)
    else:
        ds = data.load_csv(cfg.csv, seed=cfg.seed_data)
    if cfg.norm_mean:
        ds = data.standardize(ds, _floats("norm_mean", cfg.norm_mean), _floats("norm_std", cfg.norm_std))
    return ds


def make_net_factory(cfg, ds):
    def make():
        return build_preset(cfg.preset, ds.sample_shape, ds.classes, cfg.width, cfg.seed_init)
    return make


def _write_effective_config(cfg, out):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
        f.write("\n")


def _print_epoch(label):
    def cb(r):
        print(f"[{label}] epoch {r.epoch:3d} {r.mode:8s} lr={r.lr:.4g} batch={r.batch} "
              f"loss={r.train_loss:.4f} val_acc={r.val_acc:.4f} train_ms={r.ms_train:.1f}", flush=True)
    return cb


def cmd_train(args):
    cfg = load_config(args.config, _overrides(args))
    ds = load_dataset(cfg)
    make_net = make_net_factory(cfg, ds)
    _write_effective_config(cfg, cfg.out)
    ckpt_dir = os.path.join(cfg.out, "checkpoints") if cfg.checkpoint_every else None
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    report = train(make_net(), ds, cfg.ldb_config(), cfg.epochs, cfg.schedule,
                   checkpoint_dir=ckpt_dir, checkpoint_every=cfg.checkpoint_every,
                   on_epoch=_print_epoch("ldb"))
    base = None
    if args.baseline:
        base = train_baseline(make_net(), ds, cfg.lr, cfg.batch, cfg.epochs, cfg.schedule,
                              cfg.momentum, cfg.weight_decay, checkpoint_dir=ckpt_dir,
                              checkpoint_every=cfg.checkpoint_every, on_epoch=_print_epoch("baseline"))
    bench.emit_report(report, cfg.out, baseline=base)
    print(f"ldb: final val_acc={report.final_val_accuracy:.4f} train_ms={report.total_wall_ms:.1f}")
    if base is not None:
        sp = bench.speedup(report.total_wall_ms, base.total_wall_ms)
        print(f"baseline: final val_acc={base.final_val_accuracy:.4f} "
              f"train_ms={base.total_wall_ms:.1f} speedup={sp:.4f}")
    return EXIT_OK


def cmd_gradcheck(args):
    result = check_preset(args.preset, seed=args.seed)
    print(f"{result.preset}: {result.checked_sets} selected sets, worst relative error "
          f"{result.worst_error:.3e} at layer {result.worst_layer} (selected {list(result.worst_set)}); "
          f"unselected layers with nonzero gradient: {result.unselected_nonzero}")
    ok = result.passed(TOLERANCE)
    print("PASS" if ok else f"FAIL (tolerance {TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_GRADCHECK


def _parse_values(text, axis):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be a comma-separated list of numbers, got {text!r}") from None
    if not vals:
        raise ConfigError("--values is empty")
    if axis == "s":
        if any(not v.is_integer() or v < 1 for v in vals):
            raise ConfigError("sampling-rate values must be integers >= 1")
        return [int(v) for v in vals]
    if any(not 0 < v <= 1 for v in vals):
        raise ConfigError("p must be in (0,1] for every drop-rate value")
    return vals


def cmd_sweep(args):
    cfg = load_config(args.config, _overrides(args))
    values = _parse_values(args.values, args.axis)
    ds = load_dataset(cfg)
    make_net = make_net_factory(cfg, ds)
    _write_effective_config(cfg, cfg.out)
    fn = bench.sweep_drop_rate if args.axis == "p" else bench.sweep_sampling_rate
    result = fn(values, cfg.ldb_config(), make_net, ds, cfg.epochs, cfg.schedule, cfg.repeats)
    bench.emit_report(result, cfg.out)
    b = result.baseline
    print(f"baseline: val_acc={b.final_val_accuracy:.4f} train_ms={b.wall_ms:.1f}")
    for a in result.arms:
        status = "FAILED" if a.failed else f"val_acc={a.final_val_accuracy:.4f} speedup={a.speedup:+.4f}"
        flag = " [equivalence arm]" if a.equivalence else ""
        print(f"{args.axis}={a.value}: {status}{flag}")
    return EXIT_DIVERGED if result.any_failed else EXIT_OK


def cmd_bench(args):
    cfg = load_config(args.config, _overrides(args))
    ds = load_dataset(cfg)
    net = make_net_factory(cfg, ds)()
    res = bench.bench_phases(net, ds, cfg.ldb_config(), cfg.bench_steps, cfg.repeats)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "bench.json")
    with open(path, "w") as f:
        json.dump(res, f, indent=2)
        f.write("\n")
    for arm in ("full", "drop"):
        r = res[arm]
        shares = " ".join(f"{k}={v:.3f}" for k, v in r["shares"].items())
        print(f"{arm}: {shares} backward={r['backward_share']:.3f} "
              f"median_step_ms={r['median_step_ms']:.3f} selected={r['selected']}")
    return EXIT_OK


def _overrides(args):
    return {
        "out": getattr(args, "out", None),
        "epochs": getattr(args, "epochs", None),
        "preset": getattr(args, "preset", None),
        "seed_data": getattr(args, "seed_data", None),
        "seed_init": getattr(args, "seed_init", None),
        "seed_select": getattr(args, "seed_select", None),
    }


def build_parser():
    parser = argparse.ArgumentParser(prog="ldb", description="LayerDropBack training engine")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="flat JSON run configuration")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--epochs", type=int)
        p.add_argument("--preset", choices=PRESETS)
        p.add_argument("--seed-data", type=int, dest="seed_data")
        p.add_argument("--seed-init", type=int, dest="seed_init")
        p.add_argument("--seed-select", type=int, dest="seed_select")

    p = sub.add_parser("train", help="train with LayerDropBack")
    common(p)
    p.add_argument("--baseline", action="store_true", help="also train the plain SGD arm")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of the selective backward pass")
    p.add_argument("--preset", choices=PRESETS, default="mlp-8")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="drop-rate or sampling-rate sweep")
    common(p)
    p.add_argument("--axis", choices=("p", "s"), required=True)
    p.add_argument("--values", required=True, metavar="CSV-LIST")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="forward/backward phase split")
    common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, DataError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
