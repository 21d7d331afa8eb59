"""
Central finite-difference check of the selective backward pass.

The numerical gradient of each parameter element is
``(L(w + h) - L(w - h)) / 2h`` with the mean cross-entropy as ``L``; it uses
only forward passes, so it is independent of the hand-written backward.
"""

from dataclasses import dataclass

import numpy as np

from .network import build_preset, cross_entropy_loss
from .tensor import RngStream

STEP = 1e-5
TOLERANCE = 1e-4
# denominators below this are treated as this value, so gradients that are
# zero up to rounding compare on an absolute scale
REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor=REL_FLOOR):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def _loss(net, x, y):
    return cross_entropy_loss(net.forward(x), y)[0]


def numeric_grads(net, x, y, layer_id, step=STEP):
    """Finite-difference (weight_grad, bias_grad) of one layer."""
    layer = net.layers[layer_id]
    out = []
    for name in ("weights", "bias"):
        param = getattr(layer, name)
        g = np.zeros_like(param)
        flat, gflat = param.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _loss(net, x, y)
            flat[i] = orig - step
            down = _loss(net, x, y)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        out.append(g)
    net.clear_cache()
    return tuple(out)


def analytic_grads(net, x, y, selected):
    _, grad = cross_entropy_loss(net.forward(x), y)
    net.backward_selective(grad, selected)
    return {l.id: (l.weight_grad.copy(), l.bias_grad.copy()) for l in net.param_layers}


def random_selected_sets(param_ids, count, rng):
    """``count`` random subsets of ``param_ids`` (each layer kept with prob 1/2)."""
    sets = []
    for _ in range(count):
        u = rng.uniform(len(param_ids))
        sets.append(frozenset(lid for lid, ul in zip(param_ids, u) if ul < 0.5))
    return sets


@dataclass
class GradcheckResult:
    preset: str
    worst_error: float
    worst_layer: int
    worst_set: tuple
    unselected_nonzero: int
    checked_sets: int

    def passed(self, tol=TOLERANCE):
        return self.worst_error <= tol and self.unselected_nonzero == 0


# small inputs so that every parameter element can be perturbed
GRADCHECK_SHAPES = {"mlp-8": (12,), "cnn-small": (1, 6, 6), "resnet-toy": (10,)}


def check_preset(preset, seed=0, n_sets=10, batch=6, classes=3, width=6, step=STEP):
    """Compare selective-backward gradients against finite differences.

    For each of ``n_sets`` random selected sets, selected layers must match
    the numerical gradient and unselected layers must hold exact zeros.
    """
    shape = GRADCHECK_SHAPES[preset]
    net = build_preset(preset, shape, classes, width=width, seed=seed)
    rng = RngStream(seed, (99,))
    x = rng.normal((batch,) + shape)
    y = (np.arange(batch) % classes).astype(np.int64)
    numeric = {lid: numeric_grads(net, x, y, lid, step) for lid in net.param_layer_ids}

    worst = (0.0, -1, ())
    nonzero = 0
    sets = random_selected_sets(net.param_layer_ids, n_sets, rng)
    for sel in sets:
        grads = analytic_grads(net, x, y, sel)
        for lid, (gw, gb) in grads.items():
            if lid in sel:
                err = max(relative_error(gw, numeric[lid][0]), relative_error(gb, numeric[lid][1]))
                if err >= worst[0]:
                    worst = (err, lid, tuple(sorted(sel)))
            elif np.any(gw != 0) or np.any(gb != 0):
                nonzero += 1
    return GradcheckResult(preset, worst[0], worst[1], worst[2], nonzero, len(sets))

