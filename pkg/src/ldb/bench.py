"""
Timing experiments and report files.

* :func:`measure_phase_split` times forward / backward-dX / backward-dW /
  update over a fixed number of steps and reports each phase's share.
* :func:`sweep_drop_rate` and :func:`sweep_sampling_rate` train one arm per
  hyperparameter value plus a single baseline arm, repeating every arm and
  taking medians over repetitions. Within a repetition all arms advance
  in lockstep, one epoch each in rotating order, so slow drift in machine
  speed is shared by every arm instead of landing on whichever ran last.
  An arm's speedup is the median over repetitions of its speedup against
  the baseline run of the same repetition.
* :func:`emit_report` writes CSV and JSON files for a train report or sweep.

Speedup is always ``1 - t_ldb / t_baseline`` over total training wall time
with validation excluded.
"""

import csv
import gc
import json
import logging
import os
import statistics
import time
from dataclasses import dataclass, field, asdict

from .data import batches
from .errors import DivergedError
from .network import cross_entropy_loss
from .scheduler import EpochPlan, LdbConfig, Mode, plan_epoch
from .timing import PhaseTimer
from .trainer import OptimizerState, Trainer, TrainReport, apply_update, baseline_config

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
REPORT_COLUMNS = ("epoch", "mode", "lr", "batch", "train_loss", "val_acc",
                  "ms_fwd", "ms_bwd_dx", "ms_bwd_dw", "ms_upd")
TRAIN_PHASES = ("forward", "backward_dx", "backward_dw", "update")


def speedup(ldb_ms, baseline_ms):
    return 1.0 - ldb_ms / baseline_ms


@dataclass
class PhaseSplit:
    shares: dict
    ms: dict
    step_ms: list
    steps: int
    batch: int
    selected: list

    @property
    def backward_share(self):
        return self.shares["backward_dx"] + self.shares["backward_dw"]

    @property
    def median_step_ms(self):
        return statistics.median(self.step_ms)


def measure_phase_split(net, ds, steps=30, batch=128, selected=None, lr=0.01, warmup=5):
    """Time ``steps`` training steps on a copy of ``net``.

    The first ``warmup`` steps are run but not accumulated. ``selected``
    restricts weight-gradient computation and updates as in a Drop epoch
    (default: every layer). Returns a :class:`PhaseSplit` whose shares are
    fractions of forward + backward_dx + backward_dw + update.
    """
    if steps < 30:
        raise ValueError(f"need at least 30 steps, got {steps}")
    net = net.clone()
    selected = frozenset(net.param_layer_ids if selected is None else selected)
    plan = EpochPlan(0, Mode.STANDARD, lr, batch, selected)
    opt = OptimizerState(net, momentum=0.9)

    def stream():
        epoch = 0
        while True:
            for xb, yb in batches(ds, "train", batch, epoch):
                if len(yb) == batch:
                    yield xb, yb
            epoch += 1

    timer = PhaseTimer()
    step_ms = []
    data = stream()
    for i in range(warmup + steps):
        if i == warmup:
            timer.reset()
        xb, yb = next(data)
        t0 = time.perf_counter_ns()
        with timer.phase("forward"):
            _, grad = cross_entropy_loss(net.forward(xb), yb)
        net.backward_selective(grad, selected, timer)
        with timer.phase("update"):
            apply_update(net, plan, opt)
        if i >= warmup:
            step_ms.append((time.perf_counter_ns() - t0) / 1e6)
    total = sum(timer.ns[p] for p in TRAIN_PHASES)
    shares = {p: timer.ns[p] / total for p in TRAIN_PHASES}
    ms = {p: timer.ms(p) for p in TRAIN_PHASES}
    return PhaseSplit(shares, ms, step_ms, steps, batch, sorted(selected))


def bench_phases(net, ds, cfg, steps=30, repeats=5):
    """Median phase shares and step times, full backward vs one Drop selection.

    Both arms use the base batch size so that step times differ only by the
    skipped weight-gradient work. The Drop selection is the one the scheduler
    draws for epoch ``cfg.s``, the first Drop epoch.
    """
    drop_plan = plan_epoch(cfg.s, net.param_layer_ids, cfg, cfg.base_lr)
    full_runs, drop_runs = [], []
    for _ in range(repeats):
        full_runs.append(measure_phase_split(net, ds, steps, cfg.base_batch, None, cfg.base_lr))
        drop_runs.append(measure_phase_split(net, ds, steps, cfg.base_batch, drop_plan.selected, cfg.base_lr))

    def med(runs):
        return {
            "shares": {p: statistics.median(r.shares[p] for r in runs) for p in TRAIN_PHASES},
            "backward_share": statistics.median(r.backward_share for r in runs),
            "median_step_ms": statistics.median(r.median_step_ms for r in runs),
            "selected": runs[0].selected,
        }

    return {"schema_version": SCHEMA_VERSION, "repeats": repeats, "steps": steps,
            "batch": cfg.base_batch, "full": med(full_runs), "drop": med(drop_runs)}


@dataclass
class SweepEntry:
    value: object
    final_val_accuracy: float = float("nan")
    wall_ms: float = float("nan")
    speedup: float = float("nan")
    failed: bool = False
    equivalence: bool = False
    wall_samples: list = field(default_factory=list)
    speedup_samples: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    val_accs: list = field(default_factory=list)
    error: str = ""


@dataclass
class SweepResult:
    axis: str
    epochs: int
    baseline: SweepEntry
    arms: list

    @property
    def any_failed(self):
        return self.baseline.failed or any(a.failed for a in self.arms)

    def arm(self, value):
        for a in self.arms:
            if a.value == value:
                return a
        raise KeyError(value)

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "axis": self.axis, "epochs": self.epochs,
                "baseline": asdict(self.baseline), "arms": [asdict(a) for a in self.arms]}


def _sweep(axis, values, cfg, make_net, ds, epochs, schedule, repeats, arm_config, is_equivalence):
    baseline = SweepEntry(value=None)
    arms = [SweepEntry(value=v, equivalence=is_equivalence(v)) for v in values]
    entries = [baseline] + arms
    configs = [baseline_config(cfg.base_lr, cfg.base_batch, cfg.momentum, cfg.weight_decay)]
    configs += [arm_config(v) for v in values]

    def trainers():
        return [Trainer(make_net(), ds, c, epochs, schedule, force_standard=(i == 0),
                        label="baseline" if i == 0 else f"{axis}={entries[i].value}")
                for i, c in enumerate(configs)]

    # untimed warm-up epochs bring caches and the allocator to steady state
    warm = Trainer(make_net(), ds, configs[0], epochs, schedule, force_standard=True)
    try:
        for _ in range(min(2, epochs)):
            warm.run_epoch()
    except DivergedError:
        pass  # the timed repetitions record the failure

    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for rep in range(repeats):
            runs = trainers()
            for e in range(epochs):
                # rotate the arm order so no arm always runs first
                k = (e + rep) % len(runs)
                for i in list(range(k, len(runs))) + list(range(k)):
                    if entries[i].failed:
                        continue
                    try:
                        runs[i].run_epoch()
                    except DivergedError as err:
                        log.warning("arm %s diverged: %s", entries[i].value, err)
                        entries[i].failed = True
                        entries[i].error = str(err)
            for entry, t in zip(entries, runs):
                if entry.failed:
                    continue
                entry.wall_samples.append(t.report.total_wall_ms)
                if rep == 0:
                    entry.final_val_accuracy = t.report.final_val_accuracy
                    entry.losses = [r.train_loss for r in t.report.records]
                    entry.val_accs = [r.val_acc for r in t.report.records]
    finally:
        if gc_was_enabled:
            gc.enable()

    for entry in entries:
        if entry.wall_samples and not entry.failed:
            entry.wall_ms = statistics.median(entry.wall_samples)
    baseline.speedup = 0.0
    for entry in arms:
        if not entry.failed and not baseline.failed:
            # pair each repetition with the baseline run of the same repetition
            entry.speedup_samples = [speedup(a, b) for a, b in zip(entry.wall_samples, baseline.wall_samples)]
            entry.speedup = statistics.median(entry.speedup_samples)
    return SweepResult(axis, epochs, baseline, arms)


def sweep_drop_rate(values, cfg, make_net, ds, epochs, schedule="cosine", repeats=5):
    """One arm per ``p`` in ``values``; all other settings from ``cfg``.

    The ``p = 1`` arm runs with ``kappa = 1`` so that it is the degenerate
    configuration equivalent to plain SGD, and is flagged as such.
    """
    for v in values:
        if not 0 < v <= 1:
            raise ValueError(f"drop-rate values must lie in (0,1], got {v}")

    def arm_config(p):
        kappa = 1.0 if p == 1.0 else cfg.kappa
        return LdbConfig(**{**cfg.to_dict(), "p": p, "kappa": kappa})

    return _sweep("p", values, cfg, make_net, ds, epochs, schedule, repeats, arm_config,
                  lambda p: p == 1.0)


def sweep_sampling_rate(values, cfg, make_net, ds, epochs, schedule="cosine", repeats=5):
    """One arm per sampling rate ``s`` in ``values``.

    Arms with ``s > epochs`` never reach a Drop epoch and are flagged as
    equivalent to the baseline.
    """
    for v in values:
        if int(v) != v or v < 1:
            raise ValueError(f"sampling-rate values must be integers >= 1, got {v}")

    def arm_config(s):
        return LdbConfig(**{**cfg.to_dict(), "s": int(s)})

    return _sweep("s", [int(v) for v in values], cfg, make_net, ds, epochs, schedule, repeats,
                  arm_config, lambda s: s > epochs)


def _write_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, default=str)
        f.write("\n")


def write_report_csv(report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_COLUMNS)
        for r in report.records:
            w.writerow([repr(v) if isinstance(v, float) else v
                        for v in (getattr(r, c) for c in REPORT_COLUMNS)])


def read_report_csv(path):
    """Parse a file written by :func:`write_report_csv` into row dicts."""
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            out.append({k: (row[k] if k == "mode" else int(row[k]) if k in ("epoch", "batch")
                            else float(row[k])) for k in REPORT_COLUMNS})
    return out


def emit_report(obj, path, baseline=None):
    """Write a :class:`TrainReport` or :class:`SweepResult` into directory ``path``.

    Train report: ``report.csv``, ``summary.json``, ``loss_curve.csv``; if
    ``baseline`` (another TrainReport) is given its files go to
    ``baseline/`` and ``comparison.json`` records the speedup.
    Sweep: ``sweep.csv``, ``sweep.json``, ``loss_curves.csv``.
    Returns the list of files written.
    """
    try:
        os.makedirs(path, exist_ok=True)
        if isinstance(obj, TrainReport):
            return _emit_train(obj, path, baseline)
        if isinstance(obj, SweepResult):
            return _emit_sweep(obj, path)
    except OSError as e:
        raise OSError(e.errno, f"cannot write report to {path}: {e.strerror}") from e
    raise TypeError(f"cannot emit {type(obj).__name__}")


def _emit_train(report, path, baseline):
    os.makedirs(path, exist_ok=True)
    files = [os.path.join(path, n) for n in ("report.csv", "summary.json", "loss_curve.csv")]
    write_report_csv(report, files[0])
    _write_json({"schema_version": SCHEMA_VERSION, **report.to_dict()}, files[1])
    with open(files[2], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("epoch", "train_loss", "val_acc"))
        for r in report.records:
            w.writerow((r.epoch, repr(r.train_loss), repr(r.val_acc)))
    if baseline is not None:
        files += _emit_train(baseline, os.path.join(path, "baseline"), None)
        cmp_path = os.path.join(path, "comparison.json")
        _write_json({
            "schema_version": SCHEMA_VERSION,
            "ldb_total_wall_ms": report.total_wall_ms,
            "baseline_total_wall_ms": baseline.total_wall_ms,
            "speedup": speedup(report.total_wall_ms, baseline.total_wall_ms),
            "ldb_final_val_accuracy": report.final_val_accuracy,
            "baseline_final_val_accuracy": baseline.final_val_accuracy,
        }, cmp_path)
        files.append(cmp_path)
    return files


def _emit_sweep(sweep, path):
    csv_path = os.path.join(path, "sweep.csv")
    json_path = os.path.join(path, "sweep.json")
    curves_path = os.path.join(path, "loss_curves.csv")
    rows = [sweep.baseline] + sweep.arms
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("arm", sweep.axis, "val_acc", "wall_ms", "speedup", "failed", "equivalence"))
        for e in rows:
            name = "baseline" if e is sweep.baseline else f"{sweep.axis}={e.value}"
            w.writerow((name, "" if e.value is None else e.value, repr(e.final_val_accuracy),
                        repr(e.wall_ms), repr(e.speedup), int(e.failed), int(e.equivalence)))
    _write_json(sweep.to_dict(), json_path)
    with open(curves_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("arm", "epoch", "train_loss", "val_acc"))
        for e in rows:
            name = "baseline" if e is sweep.baseline else f"{sweep.axis}={e.value}"
            for i, (loss, acc) in enumerate(zip(e.losses, e.val_accs)):
                w.writerow((name, i, repr(loss), repr(acc)))
    return [csv_path, json_path, curves_path]
