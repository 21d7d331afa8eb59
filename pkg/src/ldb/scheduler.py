"""
Per-epoch decisions of LayerDropBack.

* :func:`mode_for_epoch` alternates standard SGD epochs with Drop epochs:
  epoch ``e`` is a Drop epoch iff ``e % s == 0 and e > 0``.
* :func:`select_layers` keeps the first ``keep_head`` and last ``keep_tail``
  parameterized layers and includes every other layer ``l`` iff a fresh
  uniform draw ``u_l < p``. ``p`` is therefore the probability that a
  droppable layer IS updated, even though it is usually called the drop rate.
* :func:`adjust_hyperparams` scales the learning rate by ``1/p`` and the batch
  size by ``kappa`` on Drop epochs.
"""

import enum
import logging
import math
from dataclasses import dataclass, field, asdict

from .errors import ConfigError
from .tensor import RngStream

log = logging.getLogger(__name__)

# stream tag for selection draws; data and init use other tags
SELECT_STREAM = 3


class Mode(enum.Enum):
    STANDARD = "standard"
    DROP = "drop"

    def __str__(self):
        return self.value


@dataclass
class LdbConfig:
    p: float = 0.3
    s: int = 2
    kappa: float = 2.0
    base_lr: float = 0.1
    base_batch: int = 128
    keep_head: int = 4
    keep_tail: int = 1
    selection_seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    # re-draw S at every step of a Drop epoch instead of once per epoch
    per_step_selection: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.p <= 1.0:
            raise ConfigError(f"p must be in (0,1], got {self.p}")
        if int(self.s) != self.s or self.s < 1:
            raise ConfigError(f"s must be an integer >= 1, got {self.s}")
        if self.kappa < 1:
            raise ConfigError(f"kappa must be >= 1, got {self.kappa}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if int(self.base_batch) != self.base_batch or self.base_batch < 1:
            raise ConfigError(f"base_batch must be a positive integer, got {self.base_batch}")
        if self.keep_head < 0 or self.keep_tail < 0:
            raise ConfigError("keep_head and keep_tail must be >= 0")
        if not 0 <= self.selection_seed < 2**64:
            raise ConfigError(f"selection_seed must be a 64-bit unsigned integer, got {self.selection_seed}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        self.s = int(self.s)
        self.base_batch = int(self.base_batch)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class EpochPlan:
    epoch: int
    mode: Mode
    lr: float
    batch: int
    selected: frozenset = field(default_factory=frozenset)


def mode_for_epoch(e, s):
    if e < 0 or s < 1:
        raise ValueError(f"need e >= 0 and s >= 1, got e={e}, s={s}")
    return Mode.DROP if e > 0 and e % s == 0 else Mode.STANDARD


def excluded_ids(param_ids, cfg):
    """Ids that are always selected: the first keep_head and last keep_tail."""
    ids = list(param_ids)
    head = ids[:cfg.keep_head]
    tail = ids[len(ids) - cfg.keep_tail:] if cfg.keep_tail else []
    return set(head) | set(tail)


def selection_stream(cfg, epoch, step=None):
    tag = (SELECT_STREAM, epoch) if step is None else (SELECT_STREAM, epoch, step)
    return RngStream(cfg.selection_seed, tag)


def select_layers(param_ids, cfg, rng):
    """Draw the set S of layers whose weights are updated this Drop epoch.

    One uniform is drawn per droppable layer, in forward order; excluded
    layers consume no draws. If every droppable draw fails and no layer is
    excluded, the layer with the smallest draw is kept so that S is never
    empty.
    """
    ids = list(param_ids)
    if not ids:
        raise ConfigError("network has no parameterized layers")
    keep = excluded_ids(ids, cfg)
    droppable = [i for i in ids if i not in keep]
    if not droppable:
        log.warning("exclusions cover all %d parameterized layers; every layer is selected", len(ids))
        return frozenset(ids)
    u = rng.uniform(len(droppable))
    chosen = {lid for lid, ul in zip(droppable, u) if ul < cfg.p}
    if not keep and not chosen:
        chosen = {droppable[int(u.argmin())]}
    return frozenset(keep | chosen)


def adjust_hyperparams(mode, scheduled_lr, cfg):
    if not scheduled_lr > 0:
        raise ValueError(f"scheduled_lr must be > 0, got {scheduled_lr}")
    if mode is Mode.DROP:
        # round half up
        return scheduled_lr / cfg.p, int(math.floor(cfg.kappa * cfg.base_batch + 0.5))
    return scheduled_lr, cfg.base_batch


def scheduled_lr(base_lr, epoch, epochs, schedule="cosine"):
    """Learning rate for ``epoch`` before any Drop-epoch scaling."""
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
    raise ConfigError(f"unknown schedule {schedule!r}; expected 'cosine' or 'constant'")


def plan_epoch(e, param_ids, cfg, lr, rng=None):
    """Resolve mode, (lr, batch) and S for epoch ``e``.

    ``param_ids`` may also be a network (its ``param_layer_ids`` are used).
    ``rng`` defaults to the epoch's own selection stream, so the plan
    depends only on (cfg, e).
    """
    param_ids = list(getattr(param_ids, "param_layer_ids", param_ids))
    mode = mode_for_epoch(e, cfg.s)
    lr_e, batch = adjust_hyperparams(mode, lr, cfg)
    if mode is Mode.DROP:
        selected = select_layers(param_ids, cfg, rng if rng is not None else selection_stream(cfg, e))
    else:
        selected = frozenset(param_ids)
    return EpochPlan(e, mode, lr_e, batch, selected)
