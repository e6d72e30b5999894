"""Reverse-mode automatic differentiation over 2D scalar fields.

A :class:`Tape` records primitive operations eagerly (forward values are
computed and cached immediately) and :func:`backward` sweeps the tape in
reverse to accumulate adjoints.  Only the handful of primitives needed by the
unrolled flow estimator and the attack losses are supported; there is no
broadcasting beyond ``field op scalar-constant``.

Example::

    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    loss = (x * x).sum()
    (grad,) = backward(loss, tape, [x])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "OP_KINDS",
    "Node",
    "ShapeError",
    "Tape",
    "backward",
    "bilinear_sample",
    "conv_replicate",
    "record",
    "resample_matrix",
]


class ShapeError(ValueError):
    """An operation received inputs whose shapes do not conform."""


@dataclass(frozen=True)
class Node:
    id: int
    tape: "Tape" = field(repr=False, compare=False)

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tape.values[self.id].shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.requires_grad[self.id]

    # Arithmetic sugar; every operator maps onto exactly one recorded primitive.
    def __add__(self, other):
        return record("add", [self, _as_node(self.tape, other, self.shape)])

    __radd__ = __add__

    def __sub__(self, other):
        return record("sub", [self, _as_node(self.tape, other, self.shape)])

    def __rsub__(self, other):
        return record("sub", [_as_node(self.tape, other, self.shape), self])

    def __mul__(self, other):
        if np.isscalar(other):
            return record("scalar_mul", [self], c=float(other))
        return record("pointwise_mul", [self, _as_node(self.tape, other, self.shape)])

    __rmul__ = __mul__

    def __neg__(self):
        return record("scalar_mul", [self], c=-1.0)

    def __abs__(self):
        return record("abs", [self])

    def sum(self):
        return record("sum_reduce", [self])


def _as_node(tape: "Tape", x, shape=()) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("cannot mix nodes from different tapes")
        return x
    if np.isscalar(x):
        # Python scalars are expanded to a constant field of the partner's shape.
        return tape.constant(np.full(shape, float(x)))
    return tape.constant(x)


@dataclass
class _Entry:
    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict
    cache: object


class Tape:
    """Linear record of primitive evaluations.

    Entries are appended in evaluation order, so inputs always precede the
    output that consumes them.  A tape has a single writer.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.requires_grad: list[bool] = []
        self.entries: list[_Entry] = []

    def __len__(self):
        return len(self.values)

    def _new(self, value: np.ndarray, requires_grad: bool) -> Node:
        self.values.append(value)
        self.requires_grad.append(requires_grad)
        return Node(len(self.values) - 1, self)

    def leaf(self, value) -> Node:
        """Register a differentiable input field."""
        arr = _to_field(value)
        return self._new(arr, True)

    def constant(self, value) -> Node:
        """Register a non-differentiable input (no adjoint is accumulated)."""
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("constant contains non-finite values")
        return self._new(arr, False)


def _to_field(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim not in (0, 2):
        raise ShapeError(f"fields must be 2D or scalar, got shape {arr.shape}")
    if arr.ndim == 2 and min(arr.shape) < 1:
        raise ShapeError(f"empty field of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# numeric kernels shared with non-taped code paths
# ---------------------------------------------------------------------------


def conv_replicate(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate ``x`` with an odd-sized ``kernel`` using replicate padding."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    h, w = x.shape
    padded = np.pad(x, ((ph, ph), (pw, pw)), mode="edge")
    out = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            k = kernel[i, j]
            if k != 0.0:
                out += k * padded[i : i + h, j : j + w]
    return out


def _conv_replicate_adjoint(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    h, w = g.shape
    gp = np.zeros((h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            k = kernel[i, j]
            if k != 0.0:
                gp[i : i + h, j : j + w] += k * g
    # Fold the replicated border back onto the edge rows/columns.
    if ph:
        gp[ph, :] += gp[:ph, :].sum(axis=0)
        gp[ph + h - 1, :] += gp[ph + h :, :].sum(axis=0)
    if pw:
        gp[:, pw] += gp[:, :pw].sum(axis=1)
        gp[:, pw + w - 1] += gp[:, pw + w :].sum(axis=1)
    return gp[ph : ph + h, pw : pw + w].copy()


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear-interpolation matrix mapping ``n_in`` samples to ``n_out``.

    Pixel centres are aligned (half-pixel convention); source coordinates are
    clamped to the valid range.
    """
    a = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(int), max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - t)
    np.add.at(a, (rows, i1), t)
    return a


def _sample_setup(h: int, w: int, u: np.ndarray, v: np.ndarray):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = xx + u
    ys = yy + v
    xc = np.clip(xs, 0.0, w - 1)
    yc = np.clip(ys, 0.0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xc - x0
    wy = yc - y0
    inside_x = (xs >= 0.0) & (xs <= w - 1)
    inside_y = (ys >= 0.0) & (ys <= h - 1)
    return x0, x1, y0, y1, wx, wy, inside_x, inside_y


def bilinear_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Backward warp: ``out[y, x] = img(x + u, y + v)`` with border clamping."""
    h, w = img.shape
    x0, x1, y0, y1, wx, wy, _, _ = _sample_setup(h, w, u, v)
    return (
        (1 - wy) * ((1 - wx) * img[y0, x0] + wx * img[y0, x1])
        + wy * ((1 - wx) * img[y1, x0] + wx * img[y1, x1])
    )


# ---------------------------------------------------------------------------
# primitive registry: forward(values, attrs) -> (out, cache)
#                     adjoint(g, values, out, cache, attrs) -> grads per input
# ---------------------------------------------------------------------------


def _same_shape(op, vals):
    shapes = [v.shape for v in vals]
    if any(s != shapes[0] for s in shapes):
        raise ShapeError(f"{op}: input shapes {shapes} do not match")


def _field_only(op, vals):
    for v in vals:
        if v.ndim != 2:
            raise ShapeError(f"{op}: expected 2D field, got shape {v.shape}")


def _fwd_add(vals, attrs):
    _same_shape("add", vals)
    return vals[0] + vals[1], None


def _fwd_sub(vals, attrs):
    _same_shape("sub", vals)
    return vals[0] - vals[1], None


def _fwd_mul(vals, attrs):
    _same_shape("pointwise_mul", vals)
    return vals[0] * vals[1], None


def _fwd_reciprocal(vals, attrs):
    x = vals[0]
    if np.any(x == 0.0):
        raise ValueError("reciprocal: input contains zeros")
    return 1.0 / x, None


def _fwd_masked_sum(vals, attrs):
    x = vals[0]
    mask = attrs["mask"]
    if mask.shape != x.shape:
        raise ShapeError(f"masked_sum_reduce: mask shape {mask.shape} != input shape {x.shape}")
    return np.asarray(x[mask].sum()), None


def _fwd_conv(vals, attrs):
    _field_only("conv_fixed_kernel", vals)
    k = attrs["kernel"]
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ShapeError(f"conv_fixed_kernel: kernel must be 2D with odd sides, got {k.shape}")
    return conv_replicate(vals[0], k), None


def _fwd_warp(vals, attrs):
    _field_only("bilinear_warp", vals)
    _same_shape("bilinear_warp", vals)
    img, u, v = vals
    h, w = img.shape
    setup = _sample_setup(h, w, u, v)
    x0, x1, y0, y1, wx, wy, _, _ = setup
    out = (1 - wy) * ((1 - wx) * img[y0, x0] + wx * img[y0, x1]) + wy * (
        (1 - wx) * img[y1, x0] + wx * img[y1, x1]
    )
    return out, setup


def _adj_warp(g, vals, out, cache, attrs):
    img = vals[0]
    x0, x1, y0, y1, wx, wy, inside_x, inside_y = cache
    g_img = np.zeros_like(img)
    np.add.at(g_img, (y0, x0), g * (1 - wy) * (1 - wx))
    np.add.at(g_img, (y0, x1), g * (1 - wy) * wx)
    np.add.at(g_img, (y1, x0), g * wy * (1 - wx))
    np.add.at(g_img, (y1, x1), g * wy * wx)
    d_dx = (1 - wy) * (img[y0, x1] - img[y0, x0]) + wy * (img[y1, x1] - img[y1, x0])
    d_dy = (1 - wx) * (img[y1, x0] - img[y0, x0]) + wx * (img[y1, x1] - img[y0, x1])
    # Clamped coordinates do not move the sample.
    g_u = np.where(inside_x, g * d_dx, 0.0)
    g_v = np.where(inside_y, g * d_dy, 0.0)
    return [g_img, g_u, g_v]


def _fwd_resample(op):
    def fwd(vals, attrs):
        _field_only(op, vals)
        h, w = vals[0].shape
        oh, ow = attrs["shape"]
        if oh < 1 or ow < 1:
            raise ShapeError(f"{op}: invalid output shape {(oh, ow)}")
        ay = resample_matrix(h, oh)
        ax = resample_matrix(w, ow)
        return ay @ vals[0] @ ax.T, (ay, ax)

    return fwd


def _fwd_clamp(vals, attrs):
    x = vals[0]
    return np.clip(x, attrs["lo"], attrs["hi"]), None


_FORWARD: dict[str, Callable] = {
    "add": _fwd_add,
    "sub": _fwd_sub,
    "pointwise_mul": _fwd_mul,
    "scalar_mul": lambda vals, attrs: (attrs["c"] * vals[0], None),
    "abs": lambda vals, attrs: (np.abs(vals[0]), None),
    "square": lambda vals, attrs: (vals[0] * vals[0], None),
    "reciprocal": _fwd_reciprocal,
    "sum_reduce": lambda vals, attrs: (np.asarray(vals[0].sum()), None),
    "masked_sum_reduce": _fwd_masked_sum,
    "conv_fixed_kernel": _fwd_conv,
    "bilinear_warp": _fwd_warp,
    "downsample2": _fwd_resample("downsample2"),
    "upsample2": _fwd_resample("upsample2"),
    "clamp_stopgrad": _fwd_clamp,
}

_ADJOINT: dict[str, Callable] = {
    "add": lambda g, vals, out, cache, attrs: [g, g],
    "sub": lambda g, vals, out, cache, attrs: [g, -g],
    "pointwise_mul": lambda g, vals, out, cache, attrs: [g * vals[1], g * vals[0]],
    "scalar_mul": lambda g, vals, out, cache, attrs: [attrs["c"] * g],
    "abs": lambda g, vals, out, cache, attrs: [g * np.sign(vals[0])],
    "square": lambda g, vals, out, cache, attrs: [2.0 * vals[0] * g],
    "reciprocal": lambda g, vals, out, cache, attrs: [-g * out * out],
    "sum_reduce": lambda g, vals, out, cache, attrs: [np.full(vals[0].shape, float(g))],
    "masked_sum_reduce": lambda g, vals, out, cache, attrs: [
        np.where(attrs["mask"], float(g), 0.0)
    ],
    "conv_fixed_kernel": lambda g, vals, out, cache, attrs: [
        _conv_replicate_adjoint(g, attrs["kernel"])
    ],
    "bilinear_warp": _adj_warp,
    "downsample2": lambda g, vals, out, cache, attrs: [cache[0].T @ g @ cache[1]],
    "upsample2": lambda g, vals, out, cache, attrs: [cache[0].T @ g @ cache[1]],
    "clamp_stopgrad": lambda g, vals, out, cache, attrs: [
        np.where((vals[0] >= attrs["lo"]) & (vals[0] <= attrs["hi"]), g, 0.0)
    ],
}

OP_KINDS = frozenset(_FORWARD)

_ARITY = {
    "add": 2,
    "sub": 2,
    "pointwise_mul": 2,
    "bilinear_warp": 3,
}


def record(op_kind: str, inputs: Sequence[Node], **attrs) -> Node:
    """Evaluate ``op_kind`` on ``inputs`` and append it to their tape.

    Attributes carry the fixed, non-differentiable parameters of an op:
    ``c`` for scalar_mul, ``mask`` for masked_sum_reduce, ``kernel`` for
    conv_fixed_kernel, ``shape`` for the resampling ops, ``lo``/``hi`` for
    clamp_stopgrad.
    """
    if op_kind not in _FORWARD:
        raise ValueError(f"unknown op kind {op_kind!r}")
    if not inputs:
        raise ValueError(f"{op_kind}: no inputs")
    arity = _ARITY.get(op_kind, 1)
    if len(inputs) != arity:
        raise ValueError(f"{op_kind}: expected {arity} inputs, got {len(inputs)}")
    tape = inputs[0].tape
    if any(n.tape is not tape for n in inputs):
        raise ValueError(f"{op_kind}: inputs belong to different tapes")
    if "kernel" in attrs:
        attrs["kernel"] = np.asarray(attrs["kernel"], dtype=np.float64)
    if "mask" in attrs:
        attrs["mask"] = np.asarray(attrs["mask"], dtype=bool)
    vals = [tape.values[n.id] for n in inputs]
    out, cache = _FORWARD[op_kind](vals, attrs)
    needs = any(tape.requires_grad[n.id] for n in inputs)
    node = tape._new(out, needs)
    if needs:
        tape.entries.append(_Entry(op_kind, tuple(n.id for n in inputs), node.id, attrs, cache))
    return node


def backward(loss: Node, tape: Tape, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Return d(loss)/d(node) for every node in ``wrt``.

    Nodes that ``loss`` does not depend on get a zero gradient.
    """
    if loss.tape is not tape:
        raise ValueError("loss node does not belong to this tape")
    if loss.value.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    for n in wrt:
        if n.tape is not tape or n.id >= len(tape):
            raise ValueError(f"node {n.id} is not on this tape")
    adj: list[np.ndarray | None] = [None] * len(tape)
    adj[loss.id] = np.asarray(1.0)
    for entry in reversed(tape.entries):
        if entry.output > loss.id:
            continue
        g = adj[entry.output]
        if g is None:
            continue
        vals = [tape.values[i] for i in entry.inputs]
        grads = _ADJOINT[entry.op](g, vals, tape.values[entry.output], entry.cache, entry.attrs)
        for i, gi in zip(entry.inputs, grads):
            if not tape.requires_grad[i]:
                continue
            adj[i] = gi if adj[i] is None else adj[i] + gi
    return [
        np.zeros(n.shape) if adj[n.id] is None else np.array(adj[n.id], dtype=np.float64)
        for n in wrt
    ]
