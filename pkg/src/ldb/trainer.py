"""
Training loop: momentum SGD with LayerDropBack epoch alternation.

Epochs are numbered 1..E, so a run of E epochs with sampling rate s
contains exactly floor(E/s) Drop epochs. Per epoch the trainer resolves an :class:`~ldb.scheduler.EpochPlan`, runs
mini-batches of the plan's batch size, backpropagates weight gradients for
the plan's selected layers only, and updates only those layers. Weights and
momentum buffers of unselected layers are left bit-identical.
"""

import logging
import math
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import batches, prefetch
from .errors import DivergedError, ShapeError
from .network import cross_entropy_loss, save_checkpoint
from .scheduler import EpochPlan, LdbConfig, Mode, plan_epoch, scheduled_lr, select_layers, selection_stream
from .timing import PhaseTimer

log = logging.getLogger(__name__)


class OptimizerState:
    """Momentum buffers, one ``(weights, bias)`` pair per parameterized layer."""

    def __init__(self, net, momentum=0.9, weight_decay=0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {l.id: (np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.param_layers}


def apply_update(net, plan, opt):
    """SGD-with-momentum step restricted to ``plan.selected``.

    For each selected layer: ``v <- mu*v - lr*g; w <- w + v``. Layers outside
    the selection are not touched at all, velocity included.
    """
    mu, lr, wd = opt.momentum, plan.lr, opt.weight_decay
    for lid in sorted(plan.selected):
        layer = net.layers[lid]
        vw, vb = opt.velocity[lid]
        if vw.shape != layer.weights.shape or layer.weight_grad.shape != layer.weights.shape:
            raise AssertionError(f"layer {lid}: parameter/gradient/velocity shape drift")
        if wd:
            # decoupled decay, selected layers only
            layer.weights *= 1.0 - lr * wd
        vw *= mu
        vw -= lr * layer.weight_grad
        vb *= mu
        vb -= lr * layer.bias_grad
        layer.weights += vw
        layer.bias += vb


def evaluate(net, ds, split="val", batch_size=512):
    """Fraction of samples in ``split`` whose argmax logit equals the label."""
    x, y = ds.split(split)
    if len(y) == 0:
        raise ValueError(f"split {split!r} is empty")
    correct = 0
    for start in range(0, len(y), batch_size):
        logits = net.forward(x[start:start + batch_size])
        correct += int((logits.argmax(axis=1) == y[start:start + batch_size]).sum())
    net.clear_cache()
    return correct / len(y)


@dataclass
class EpochRecord:
    epoch: int
    mode: str
    lr: float
    batch: int
    train_loss: float
    val_acc: float
    ms_fwd: float
    ms_bwd_dx: float
    ms_bwd_dw: float
    ms_upd: float
    ms_train: float = 0.0
    ms_eval: float = 0.0
    steps: int = 0
    selected: list = field(default_factory=list)


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    label: str = "ldb"

    @property
    def epochs(self):
        return len(self.records)

    @property
    def best_val_accuracy(self):
        return max((r.val_acc for r in self.records), default=float("nan"))

    @property
    def final_val_accuracy(self):
        return self.records[-1].val_acc if self.records else float("nan")

    @property
    def total_wall_ms(self):
        """Training wall time over all epochs, validation excluded."""
        return sum(r.ms_train for r in self.records)

    def summary(self):
        return {
            "label": self.label,
            "epochs": self.epochs,
            "best_val_accuracy": self.best_val_accuracy,
            "final_val_accuracy": self.final_val_accuracy,
            "total_wall_ms": self.total_wall_ms,
            "total_eval_ms": sum(r.ms_eval for r in self.records),
            "drop_epochs": sum(r.mode == str(Mode.DROP) for r in self.records),
        }

    def to_dict(self):
        return {"summary": self.summary(), "records": [asdict(r) for r in self.records]}


class Trainer:
    """Epoch-at-a-time driver of the training loop.

    :func:`train` and :func:`train_baseline` run it to completion; sweeps
    advance several trainers in lockstep so that their timings see the same
    machine conditions. With ``force_standard`` every epoch is a standard
    SGD epoch regardless of ``cfg``.
    """

    def __init__(self, net, ds, cfg, epochs, schedule="cosine", force_standard=False, label="ldb",
                 checkpoint_dir=None, checkpoint_every=0, on_epoch=None, timer=None):
        if len(ds.train_idx) == 0:
            raise ValueError("training split is empty")
        if net.output_shape != (ds.classes,):
            raise ShapeError(f"network output {net.output_shape} does not match {ds.classes} classes")
        self.net = net
        self.ds = ds
        self.cfg = cfg
        self.epochs = epochs
        self.schedule = schedule
        self.force_standard = force_standard
        self.checkpoint_dir = checkpoint_dir
        self.checkpoint_every = checkpoint_every
        self.on_epoch = on_epoch
        self.timer = timer or PhaseTimer()
        self.opt = OptimizerState(net, cfg.momentum, cfg.weight_decay)
        self.report = TrainReport(label=label)
        self.epoch = 0  # epochs completed

    @property
    def done(self):
        return self.epoch >= self.epochs

    def plan(self, e):
        """Plan for epoch ``e`` in 1..E; the schedule sees progress ``(e-1)/E``."""
        lr = scheduled_lr(self.cfg.base_lr, e - 1, self.epochs, self.schedule)
        if self.force_standard:
            return EpochPlan(e, Mode.STANDARD, lr, self.cfg.base_batch, frozenset(self.net.param_layer_ids))
        return plan_epoch(e, self.net.param_layer_ids, self.cfg, lr)

    def run_epoch(self):
        net, cfg, timer, e = self.net, self.cfg, self.timer, self.epoch + 1
        plan = self.plan(e)
        snap = timer.snapshot()
        loss_sum, seen, steps = 0.0, 0, 0
        t0 = time.perf_counter_ns()
        for xb, yb in prefetch(batches(self.ds, "train", plan.batch, e)):
            step_plan = plan
            if plan.mode is Mode.DROP and cfg.per_step_selection:
                sel = select_layers(net.param_layer_ids, cfg, selection_stream(cfg, e, steps))
                step_plan = EpochPlan(e, plan.mode, plan.lr, plan.batch, sel)
            with timer.phase("forward"):
                logits = net.forward(xb)
                loss, grad = cross_entropy_loss(logits, yb)
            if not math.isfinite(loss):
                raise DivergedError(e, steps, loss)
            net.backward_selective(grad, step_plan.selected, timer)
            with timer.phase("update"):
                apply_update(net, step_plan, self.opt)
            loss_sum += loss * len(yb)
            seen += len(yb)
            steps += 1
        ms_train = (time.perf_counter_ns() - t0) / 1e6
        phase_ms = timer.since(snap)

        with timer.phase("eval"):
            val_acc = evaluate(net, self.ds, "val") if len(self.ds.val_idx) else float("nan")
        rec = EpochRecord(
            epoch=e, mode=str(plan.mode), lr=plan.lr, batch=plan.batch,
            train_loss=loss_sum / seen, val_acc=val_acc,
            ms_fwd=phase_ms["forward"], ms_bwd_dx=phase_ms["backward_dx"],
            ms_bwd_dw=phase_ms["backward_dw"], ms_upd=phase_ms["update"],
            ms_train=ms_train, ms_eval=timer.since(snap)["eval"], steps=steps,
            selected=sorted(plan.selected),
        )
        self.report.records.append(rec)
        self.epoch += 1
        log.debug("epoch %d %s lr=%.4g batch=%d loss=%.4f val=%.4f", e, plan.mode, plan.lr,
                  plan.batch, rec.train_loss, val_acc)
        if self.on_epoch is not None:
            self.on_epoch(rec)
        if self.checkpoint_dir and self.checkpoint_every and e % self.checkpoint_every == 0:
            save_checkpoint(net, os.path.join(self.checkpoint_dir, f"{self.report.label}_epoch{e:03d}.ckpt"))
        return rec

    def run(self):
        while not self.done:
            self.run_epoch()
        return self.report


def baseline_config(base_lr, batch, momentum=0.9, weight_decay=0.0):
    return LdbConfig(p=1.0, s=1, kappa=1.0, base_lr=base_lr, base_batch=batch,
                     momentum=momentum, weight_decay=weight_decay)


def train(net, ds, cfg, epochs, schedule="cosine", **kwargs):
    """Train ``net`` in place with LayerDropBack and return the per-epoch report.

    Keyword args: ``checkpoint_dir`` and ``checkpoint_every`` (save every k
    epochs), ``on_epoch`` (callback receiving each :class:`EpochRecord`),
    ``timer`` (a shared :class:`PhaseTimer`), ``label``.
    """
    kwargs.setdefault("label", "ldb")
    return Trainer(net, ds, cfg, epochs, schedule, **kwargs).run()


def train_baseline(net, ds, base_lr, batch, epochs, schedule="cosine", momentum=0.9,
                   weight_decay=0.0, **kwargs):
    """Plain mini-batch SGD with momentum: every epoch is a standard epoch."""
    cfg = baseline_config(base_lr, batch, momentum, weight_decay)
    kwargs.setdefault("label", "baseline")
    return Trainer(net, ds, cfg, epochs, schedule, force_standard=True, **kwargs).run()
