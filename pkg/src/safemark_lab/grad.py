"""Reverse-mode differentiation over a closed vocabulary of array primitives.

Values are float64 numpy arrays. Images use the layout ``(H, W, C)`` or a
batched ``(N, H, W, C)``; the spatial primitives accept either.

A :class:`Tape` records every primitive in execution order. Parameters enter
the tape as slices of a :class:`ParamVector`; :func:`backward` returns the
gradient with the same layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import special

KINDS = (
    "add",
    "sub",
    "scalar-mul",
    "elementwise-mul",
    "conv2d-same",
    "per-channel-affine",
    "bilinear-upsample",
    "sigmoid",
    "clamp01",
    "hinge",
    "inner-product",
    "sum",
    "mean",
    "abs",
    "square",
)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.shape and int(np.prod(self.shape)) != self.length:
            raise ValueError(f"segment {self.name!r}: shape {self.shape} does not hold {self.length} values")


@dataclass
class ParamVector:
    """Flat parameter storage with named, disjoint, covering segments."""

    values: np.ndarray
    layout: list[Segment] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        pos = 0
        for seg in sorted(self.layout, key=lambda s: s.offset):
            if seg.offset != pos:
                raise ValueError(f"layout gap or overlap at offset {pos} (segment {seg.name!r})")
            pos += seg.length
        if pos != self.values.size:
            raise ValueError(f"layout covers {pos} values but vector holds {self.values.size}")
        names = [s.name for s in self.layout]
        if len(set(names)) != len(names):
            raise ValueError("duplicate segment names")

    @classmethod
    def from_segments(cls, arrays: dict[str, np.ndarray]) -> ParamVector:
        layout, chunks, off = [], [], 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            layout.append(Segment(name, off, arr.size, tuple(arr.shape)))
            chunks.append(arr.ravel())
            off += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    def segment(self, name: str) -> Segment:
        for seg in self.layout:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def get(self, name: str) -> np.ndarray:
        seg = self.segment(name)
        view = self.values[seg.offset : seg.offset + seg.length]
        return view.reshape(seg.shape) if seg.shape else view

    def names(self) -> list[str]:
        return [s.name for s in self.layout]

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), list(self.layout))

    def with_values(self, values: np.ndarray) -> ParamVector:
        return ParamVector(np.array(values, dtype=np.float64), list(self.layout))

    def zeros_like(self) -> ParamVector:
        return self.with_values(np.zeros_like(self.values))

    def to_json(self) -> dict:
        return {
            "layout": [{"name": s.name, "offset": s.offset, "len": s.length} for s in self.layout],
            "values": [float(v) for v in self.values],
        }

    @classmethod
    def from_json(cls, doc: dict, shapes: dict[str, tuple[int, ...]] | None = None) -> ParamVector:
        shapes = shapes or {}
        layout = [
            Segment(e["name"], int(e["offset"]), int(e["len"]), tuple(shapes.get(e["name"], ())))
            for e in doc["layout"]
        ]
        return cls(np.array(doc["values"], dtype=np.float64), layout)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path, shapes: dict[str, tuple[int, ...]] | None = None) -> ParamVector:
        return cls.from_json(json.loads(Path(path).read_text()), shapes)


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: Tape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, _lift(self.tape, other))

    def __radd__(self, other):
        return add(_lift(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _lift(self.tape, other))

    def __rsub__(self, other):
        return sub(_lift(self.tape, other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return elementwise_mul(self, _lift(self.tape, other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.shape})"


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


@dataclass
class _Node:
    kind: str
    parents: tuple[int, ...]
    # maps the output gradient to one gradient per parent
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None
    # (param vector id, segment) for leaves bound to parameters
    binding: tuple[int, Segment] | None = None


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []
        self._params: dict[int, ParamVector] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, kind, parents, vjp, value, binding=None) -> Var:
        for p in parents:
            if p >= len(self.nodes):
                raise RuntimeError("tape order violated")
        self.nodes.append(_Node(kind, tuple(parents), vjp, binding))
        value = np.asarray(value, dtype=np.float64)
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value)

    def const(self, value) -> Var:
        return self._push("const", (), None, np.array(value, dtype=np.float64))

    def param(self, params: ParamVector, name: str) -> Var:
        """Bind one segment of ``params`` as a differentiable leaf."""
        self._params[id(params)] = params
        seg = params.segment(name)
        return self._push("param", (), None, params.get(name).copy(), (id(params), seg))

    def params(self) -> list[ParamVector]:
        return list(self._params.values())


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Var, b: Var) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Var, b: Var) -> Var:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return a.tape._push("add", (a.index, b.index), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), a.value + b.value)


def sub(a: Var, b: Var) -> Var:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return a.tape._push("sub", (a.index, b.index), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), a.value - b.value)


def scalar_mul(a: Var, s: float) -> Var:
    s = float(s)
    return a.tape._push("scalar-mul", (a.index,), lambda g: (g * s,), a.value * s)


def elementwise_mul(a: Var, b: Var) -> Var:
    _broadcast_shape("elementwise-mul", a, b)
    av, bv = a.value, b.value
    return a.tape._push(
        "elementwise-mul",
        (a.index, b.index),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        av * bv,
    )


def _as4d(kind: str, x: np.ndarray) -> np.ndarray:
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise ShapeError(f"{kind}: expected (H,W,C) or (N,H,W,C), got shape {x.shape}")


def _edge_index(n: int, pad: int) -> np.ndarray:
    return np.clip(np.arange(-pad, n + pad), 0, n - 1)


def conv2d_same(x: Var, kernel: Var) -> Var:
    """Depthwise 2-D correlation with a (C, k, k) kernel, odd k, edge-replicated borders."""
    xv = _as4d("conv2d-same", x.value)
    kv = kernel.value
    n, h, w, c = xv.shape
    if kv.ndim != 3 or kv.shape[0] != c or kv.shape[1] != kv.shape[2] or kv.shape[1] % 2 == 0:
        raise ShapeError(f"conv2d-same: kernel shape {kv.shape} incompatible with input {x.shape} (need (C,k,k), k odd)")
    k = kv.shape[1]
    p = k // 2
    ri, ci = _edge_index(h, p), _edge_index(w, p)
    xp = xv[:, ri][:, :, ci]
    out = np.zeros_like(xv)
    for u in range(k):
        for v in range(k):
            out += xp[:, u : u + h, v : v + w, :] * kv[:, u, v]

    def vjp(g):
        g4 = g.reshape(out.shape)
        gk = np.empty_like(kv)
        gxp = np.zeros_like(xp)
        for u in range(k):
            for v in range(k):
                gk[:, u, v] = np.einsum("nijc,nijc->c", g4, xp[:, u : u + h, v : v + w, :])
                gxp[:, u : u + h, v : v + w, :] += g4 * kv[:, u, v]
        gx = np.zeros((n, h, w + 2 * p, c))
        np.add.at(gx, (slice(None), ri), gxp)
        gx2 = np.zeros_like(xv)
        np.add.at(gx2, (slice(None), slice(None), ci), gx)
        return gx2.reshape(x.shape), gk

    return x.tape._push("conv2d-same", (x.index, kernel.index), vjp, out.reshape(x.shape))


def per_channel_affine(x: Var, gain: Var, bias: Var) -> Var:
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"per-channel-affine: gain {gain.shape} / bias {bias.shape} vs channels {c}")
    xv, gv = x.value, gain.value
    axes = tuple(range(xv.ndim - 1))

    def vjp(g):
        return g * gv, (g * xv).sum(axis=axes), g.sum(axis=axes)

    return x.tape._push("per-channel-affine", (x.index, gain.index, bias.index), vjp, xv * gv + bias.value)


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Interpolation weights, align-corners false, edge replication."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def bilinear_upsample(x: Var, size: tuple[int, int]) -> Var:
    if x.value.ndim not in (3, 4):
        raise ShapeError(f"bilinear-upsample: expected (h,w,C) or (N,h,w,C), got {x.shape}")
    h_in, w_in = x.shape[-3], x.shape[-2]
    mh, mw = bilinear_matrix(size[0], h_in), bilinear_matrix(size[1], w_in)
    out = np.einsum("Hh,...hwc,Ww->...HWc", mh, x.value, mw)
    return x.tape._push(
        "bilinear-upsample", (x.index,), lambda g: (np.einsum("Hh,...HWc,Ww->...hwc", mh, g, mw),), out
    )


def sigmoid(x: Var) -> Var:
    s = special.expit(x.value)
    return x.tape._push("sigmoid", (x.index,), lambda g: (g * s * (1 - s),), s)


def clamp01(x: Var) -> Var:
    xv = x.value
    inside = (xv > 0) & (xv < 1)
    return x.tape._push("clamp01", (x.index,), lambda g: (g * inside,), np.clip(xv, 0.0, 1.0))


def hinge(x: Var) -> Var:
    """max(0, x); subgradient 0 at x = 0."""
    xv = x.value
    return x.tape._push("hinge", (x.index,), lambda g: (g * (xv > 0),), np.maximum(xv, 0.0))


def inner_product(x: Var, patterns: np.ndarray | Var) -> Var:
    """Contract the trailing dims of ``x`` against each row of ``patterns``.

    ``patterns`` has shape ``(K, *x.shape[-d:])``; the result has shape
    ``x.shape[:-d] + (K,)``. With 1-D inputs of equal length this is the
    ordinary dot product returning a scalar.
    """
    tape = x.tape
    p = patterns if isinstance(patterns, Var) else tape.const(patterns)
    xv, pv = x.value, p.value
    if xv.ndim == 1 and pv.ndim == 1:
        if xv.shape != pv.shape:
            raise ShapeError(f"inner-product: shapes {xv.shape} and {pv.shape}")
        return tape._push("inner-product", (x.index, p.index), lambda g: (g * pv, g * xv), float(xv @ pv))
    d = pv.ndim - 1
    if d < 1 or xv.shape[-d:] != pv.shape[1:]:
        raise ShapeError(f"inner-product: input {xv.shape} vs patterns {pv.shape}")
    lead = xv.shape[:-d]
    xf = xv.reshape(-1, int(np.prod(pv.shape[1:])))
    pf = pv.reshape(pv.shape[0], -1)
    out = (xf @ pf.T).reshape(lead + (pv.shape[0],))

    def vjp(g):
        gf = g.reshape(-1, pv.shape[0])
        return (gf @ pf).reshape(xv.shape), (gf.T @ xf).reshape(pv.shape)

    return tape._push("inner-product", (x.index, p.index), vjp, out)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Var, axis=None, keepdims: bool = False) -> Var:
    axes = _norm_axis(axis, x.value.ndim)
    shape = x.shape
    out = x.value.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape._push("sum", (x.index,), vjp, out)


def mean(x: Var, axis=None, keepdims: bool = False) -> Var:
    axes = _norm_axis(axis, x.value.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape
    out = x.value.mean(axis=axes, keepdims=keepdims) if axes else x.value.copy()

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return x.tape._push("mean", (x.index,), vjp, out)


def abs_(x: Var) -> Var:
    xv = x.value
    return x.tape._push("abs", (x.index,), lambda g: (g * np.sign(xv),), np.abs(xv))


def square(x: Var) -> Var:
    xv = x.value
    return x.tape._push("square", (x.index,), lambda g: (2.0 * g * xv,), xv * xv)


_DISPATCH = {
    "add": lambda ins, kw: add(*ins),
    "sub": lambda ins, kw: sub(*ins),
    "scalar-mul": lambda ins, kw: scalar_mul(ins[0], kw["scale"]),
    "elementwise-mul": lambda ins, kw: elementwise_mul(*ins),
    "conv2d-same": lambda ins, kw: conv2d_same(*ins),
    "per-channel-affine": lambda ins, kw: per_channel_affine(*ins),
    "bilinear-upsample": lambda ins, kw: bilinear_upsample(ins[0], kw["size"]),
    "sigmoid": lambda ins, kw: sigmoid(ins[0]),
    "clamp01": lambda ins, kw: clamp01(ins[0]),
    "hinge": lambda ins, kw: hinge(ins[0]),
    "inner-product": lambda ins, kw: inner_product(*ins),
    "sum": lambda ins, kw: sum_(ins[0], kw.get("axis"), kw.get("keepdims", False)),
    "mean": lambda ins, kw: mean(ins[0], kw.get("axis"), kw.get("keepdims", False)),
    "abs": lambda ins, kw: abs_(ins[0]),
    "square": lambda ins, kw: square(ins[0]),
}


def forward_op(kind: str, inputs: Sequence[Var], **params) -> Var:
    """Apply primitive ``kind`` by name; see :data:`KINDS`."""
    if kind not in _DISPATCH:
        raise ValueError(f"unknown primitive {kind!r}")
    return _DISPATCH[kind](list(inputs), params)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, seed: Var, params: ParamVector | None = None) -> ParamVector:
    """Gradient of the scalar ``seed`` with respect to a bound parameter vector.

    When ``params`` is omitted the tape must have exactly one bound vector.
    Segments never touched by the seed get zero gradient.
    """
    if seed.tape is not tape:
        raise ValueError("seed does not belong to this tape")
    if seed.value.size != 1:
        raise ValueError(f"backward needs a scalar seed, got shape {seed.shape}")
    if params is None:
        bound = tape.params()
        if len(bound) != 1:
            raise ValueError(f"tape binds {len(bound)} parameter vectors; pass one explicitly")
        params = bound[0]
    grads = node_gradients(tape, seed)
    out = np.zeros_like(params.values)
    for i, node in enumerate(tape.nodes[: seed.index + 1]):
        if node.binding is None or grads[i] is None:
            continue
        pid, seg = node.binding
        if pid == id(params):
            out[seg.offset : seg.offset + seg.length] += grads[i].ravel()
    return params.with_values(out)


def node_gradients(tape: Tape, seed: Var) -> list[np.ndarray | None]:
    """Adjoint of every node up to ``seed``; each node is visited once, in reverse."""
    grads: list[np.ndarray | None] = [None] * (seed.index + 1)
    grads[seed.index] = np.ones_like(seed.value)
    for i in range(seed.index, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            pg = np.asarray(pg, dtype=np.float64).reshape(tape.values[parent].shape)
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg
    return grads


def grad_wrt(tape: Tape, seed: Var, var: Var) -> np.ndarray:
    """Adjoint of an arbitrary recorded value (constants included)."""
    g = node_gradients(tape, seed)[var.index]
    return np.zeros_like(var.value) if g is None else g


def finite_difference_gradient(
    f: Callable[[ParamVector], float], theta: ParamVector, step: float = 1e-5
) -> ParamVector:
    """Central differences, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = theta.values
    out = np.zeros_like(base)
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[i] += step
        minus[i] -= step
        out[i] = (f(theta.with_values(plus)) - f(theta.with_values(minus))) / (2 * step)
    return theta.with_values(out)
