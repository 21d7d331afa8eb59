"""
Dense float64 arithmetic and seeded random streams.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Elementwise arithmetic, reductions and argmax are numpy's own; this module
adds the shape-checked kernels the layers rely on (matrix product and 2-D
cross-correlation with its two gradients) plus :class:`RngStream`.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtri

from .errors import ShapeError

DTYPE = np.float64


def as_tensor(data, shape=None):
    """Copy ``data`` into a contiguous float64 array, optionally reshaped."""
    t = np.array(data, dtype=DTYPE, order="C", copy=True)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        if any(d <= 0 for d in shape) or int(np.prod(shape)) != t.size:
            raise ShapeError(f"cannot view {t.size} elements as shape {shape}")
        t = t.reshape(shape)
    return t


def all_finite(t):
    return bool(np.isfinite(t).all())


def matmul(a, b):
    """Rank-2 matrix product with an explicit shape check."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _windows(x, kh, kw, stride, padding):
    # (N, C, Ho, Wo, kh, kw) strided view of the padded input
    v = sliding_window_view(_pad(x, padding), (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation.

    x: (N, C, H, W); w: (O, C, kh, kw); b: (O,) or None.
    Returns (N, O, Ho, Wo).
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    kh, kw = w.shape[2:]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    cols = _windows(x, kh, kw, stride, padding)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv2d_grad_weight(x, grad_out, kernel_shape, stride=1, padding=0):
    """Gradient of :func:`conv2d` w.r.t. the kernel; shape ``(O, C, kh, kw)``."""
    kh, kw = kernel_shape
    cols = _windows(x, kh, kw, stride, padding)
    return np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))


def conv2d_grad_input(grad_out, w, input_shape, stride=1, padding=0):
    """Gradient of :func:`conv2d` w.r.t. its input; shape ``input_shape``."""
    n, c, h, wd = input_shape
    kh, kw = w.shape[2:]
    ho, wo = grad_out.shape[2:]
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(grad_out, w[:, :, i, j], axes=([1], [0]))  # (N, Ho, Wo, C)
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp)


class RngStream:
    """Seekable counter-based uniform stream.

    The Philox key is derived from ``seed`` and a ``stream`` tag tuple, so
    streams with different tags (data shuffling, init, layer selection, ...)
    never share draws. ``position`` counts float64 draws consumed; a stream
    rebuilt from ``state()`` continues the identical sequence.
    """

    _WORDS_PER_BLOCK = 4  # Philox4x64 emits four 64-bit words per counter value

    def __init__(self, seed, stream=(), position=0):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        self.position = 0
        key = np.random.SeedSequence(self.seed, spawn_key=self.stream).generate_state(2, np.uint64)
        block, rest = divmod(int(position), self._WORDS_PER_BLOCK)
        self._gen = np.random.Generator(np.random.Philox(key=key, counter=block))
        if rest:
            self._gen.random(rest)
        self.position = int(position)

    def spawn(self, *tag):
        """Independent child stream keyed by this stream's tags plus ``tag``."""
        return RngStream(self.seed, self.stream + tuple(tag))

    def state(self):
        return {"seed": self.seed, "stream": list(self.stream), "position": self.position}

    @classmethod
    def from_state(cls, state):
        return cls(state["seed"], state["stream"], state["position"])

    def uniform(self, n):
        """``n`` draws from U[0, 1) as a float64 array."""
        if n < 0:
            raise ValueError("n must be >= 0")
        out = self._gen.random(n)
        self.position += n
        return out

    def uniform_range(self, low, high, shape):
        n = int(np.prod(shape))
        return (low + (high - low) * self.uniform(n)).reshape(shape)

    def normal(self, shape):
        """Standard normal draws by inverse CDF, one uniform per value."""
        n = int(np.prod(shape))
        # uniforms are k * 2**-53; the half-step offset keeps the argument in (0, 1)
        return ndtri(self.uniform(n) + 2.0**-54).reshape(shape)

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")
