"""Tape-based reverse-mode automatic differentiation with double backprop.

Values created from a :class:`Tape` record the primitive that produced them.
:func:`gradient` walks the tape backwards; with ``create_graph=True`` the
vector-Jacobian products are themselves built from recorded primitives, so
the returned gradients can be differentiated again. That is what the
relevance penalty needs: it is a function of an input gradient and has to be
differentiated with respect to the network parameters.

Conventions
-----------
* float64 everywhere.
* ``relu'(0) = 0``; second derivatives of ``relu`` and ``abs`` are zero.
* A leaf that the target does not depend on gets a zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class UnsupportedOpError(RuntimeError):
    """A primitive was asked for a derivative it does not provide."""


@dataclass(frozen=True)
class Primitive:
    name: str
    impl: Callable[..., np.ndarray]
    vjp: Callable | None
    # False: vjp is computed on raw arrays and cannot be differentiated again.
    higher_order: bool = True


class Value:
    """A node of a computation tape (or a free-standing constant)."""

    __slots__ = ("data", "tape", "prim", "parents", "attrs", "requires_grad", "role", "index")
    __array_priority__ = 100

    def __init__(self, data, tape=None, prim=None, parents=(), attrs=None,
                 requires_grad=False, role="const"):
        self.data = data
        self.tape = tape
        self.prim = prim
        self.parents = parents
        self.attrs = attrs or {}
        self.requires_grad = requires_grad
        self.role = role
        self.index = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        what = self.prim.name if self.prim is not None else self.role
        return f"Value({what}, shape={self.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Tape:
    """Ordered record of every node derived from this tape's leaves."""

    nodes: list = field(default_factory=list)
    recording: bool = True

    def _append(self, v):
        v.index = len(self.nodes)
        self.nodes.append(v)
        return v

    def param(self, data):
        """Leaf that gradients are taken with respect to (a trainable array)."""
        return self._append(Value(_as_array(data), self, role="param", requires_grad=True))

    def input(self, data, requires_grad=True):
        """Leaf holding data such as a batch of spectra."""
        return self._append(Value(_as_array(data), self, role="input",
                                  requires_grad=requires_grad))

    def forward(self, bindings=None, outputs=()):
        """Recompute every derived node in tape order.

        ``bindings`` maps leaf Values to replacement arrays; unbound leaves keep
        their current data. Returns the data of ``outputs``.
        """
        bindings = bindings or {}
        for leaf, arr in bindings.items():
            if leaf.tape is not self or leaf.prim is not None:
                raise ValueError(f"{leaf!r} is not a leaf of this tape")
            arr = _as_array(arr)
            if arr.shape != leaf.shape:
                raise ShapeError(f"binding for leaf {leaf.index} has shape {arr.shape}, "
                                 f"expected {leaf.shape}")
            leaf.data = arr
        for node in self.nodes:
            if node.prim is not None:
                node.data = _run(node.prim, [p.data for p in node.parents], node.attrs, node.index)
        return [o.data for o in outputs]


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _run(prim, arrays, attrs, where=None):
    try:
        out = prim.impl(*arrays, **attrs)
    except ShapeError:
        raise
    except ValueError as exc:
        shapes = ", ".join(str(a.shape) for a in arrays)
        loc = f" (node {where})" if where is not None else ""
        raise ShapeError(f"{prim.name}{loc}: incompatible operand shapes {shapes}: {exc}") from exc
    return np.asarray(out, dtype=np.float64)


def constant(data):
    """Wrap an array as a constant that never receives gradients."""
    if isinstance(data, Value):
        return Value(data.data)
    return Value(_as_array(data))


def apply(prim, *inputs, **attrs):
    vals = [x if isinstance(x, Value) else Value(_as_array(x)) for x in inputs]
    tape = None
    for v in vals:
        if v.tape is not None:
            if tape is not None and v.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = v.tape
    data = _run(prim, [v.data for v in vals], attrs)
    if tape is None or not tape.recording:
        return Value(data)
    out = Value(data, tape, prim, tuple(vals), attrs,
                requires_grad=any(v.requires_grad for v in vals), role="derived")
    return tape._append(out)


def stop_gradient(x):
    """Same data, detached from the tape."""
    return Value(x.data) if isinstance(x, Value) else constant(x)


# ---------------------------------------------------------------- primitives


def _vjp_add(g, out, a, b, need):
    return (sum_to(g, a.shape) if need[0] else None,
            sum_to(g, b.shape) if need[1] else None)


def _vjp_sub(g, out, a, b, need):
    return (sum_to(g, a.shape) if need[0] else None,
            sum_to(neg(g), b.shape) if need[1] else None)


def _vjp_mul(g, out, a, b, need):
    return (sum_to(mul(g, b), a.shape) if need[0] else None,
            sum_to(mul(g, a), b.shape) if need[1] else None)


def _vjp_div(g, out, a, b, need):
    ga = sum_to(div(g, b), a.shape) if need[0] else None
    gb = sum_to(neg(mul(g, div(out, b))), b.shape) if need[1] else None
    return ga, gb


def _impl_sum_to(a, shape):
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"cannot reduce {a.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1)
    r = a.sum(axis=axes, keepdims=True)
    return r.reshape(shape)


def _impl_sum(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims)


def _vjp_sum(g, out, a, need, axis=None, keepdims=False):
    if not keepdims:
        if axis is None:
            kshape = (1,) * a.ndim
        else:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
        g = reshape(g, kshape)
    return (broadcast_to(g, a.shape),)


def _impl_relu(a):
    return np.maximum(a, 0.0)


def _impl_clamp_min(a, lo):
    return np.maximum(a, lo)


def _impl_max(a, axis=None, keepdims=False):
    return np.max(a, axis=axis, keepdims=keepdims)


def _vjp_max(g, out, a, need, axis=None, keepdims=False):
    # First maximal entry receives the gradient.
    m = np.max(a.data, axis=axis, keepdims=True)
    hit = a.data == m
    first = np.cumsum(hit, axis=axis if axis is not None else None)
    if axis is None:
        mask = (hit.ravel() & (first == 1)).reshape(a.shape)
    else:
        mask = hit & (first == 1)
    gb = _vjp_sum(g, out, a, need, axis=axis, keepdims=keepdims)[0]
    return (mul(gb, constant(mask.astype(np.float64))),)


def _impl_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: expected (m,k)@(k,n), got {a.shape}@{b.shape}")
    return a @ b


def _vjp_matmul(g, out, a, b, need):
    return (matmul(g, transpose(b)) if need[0] else None,
            matmul(transpose(a), g) if need[1] else None)


def _impl_transpose(a, axes=None):
    return np.ascontiguousarray(np.transpose(a, axes))


def _vjp_transpose(g, out, a, need, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return (transpose(g, inv),)


def _impl_conv1d(x, K, pad):
    if x.ndim != 3 or K.ndim != 3 or x.shape[1] != K.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {K.shape}")
    if x.shape[2] + 2 * pad - K.shape[2] + 1 < 1:
        raise ShapeError(f"conv1d: input length {x.shape[2]} too short for kernel {K.shape}")
    return kernels.conv1d_forward(x, K, pad)


def _vjp_conv1d(g, out, x, K, need, pad):
    gx = conv1d_input_grad(g, K, pad, x.shape[2]) if need[0] else None
    gK = conv1d_kernel_grad(x, g, K.shape[2], pad) if need[1] else None
    return gx, gK


def _impl_conv1d_input_grad(g, K, pad, n):
    return kernels.conv1d_input_grad(g, K, pad, n)


def _vjp_conv1d_input_grad(gg, out, g, K, need, pad, n):
    dg = conv1d(gg, K, pad) if need[0] else None
    dK = conv1d_kernel_grad(gg, g, K.shape[2], pad) if need[1] else None
    return dg, dK


def _impl_conv1d_kernel_grad(x, g, w, pad):
    return kernels.conv1d_kernel_grad(x, g, w, pad)


def _vjp_conv1d_kernel_grad(gK, out, x, g, need, w, pad):
    dx = conv1d_input_grad(g, gK, pad, x.shape[2]) if need[0] else None
    dg = conv1d(x, gK, pad) if need[1] else None
    return dx, dg


def _impl_lc(x, W, stride):
    if x.ndim != 3 or W.ndim != 4 or x.shape[1] != W.shape[2]:
        raise ShapeError(f"locally_connected: input {x.shape} incompatible with weights {W.shape}")
    L, w = W.shape[0], W.shape[3]
    if (L - 1) * stride + w > x.shape[2]:
        raise ShapeError(f"locally_connected: {L} windows of width {w} at stride {stride} "
                         f"exceed input length {x.shape[2]}")
    return kernels.lc_forward(x, W, stride)


def _vjp_lc(g, out, x, W, need, stride):
    gx = lc_input_grad(g, W, stride, x.shape[2]) if need[0] else None
    gW = lc_weight_grad(x, g, W.shape[3], stride) if need[1] else None
    return gx, gW


def _impl_lc_input_grad(g, W, stride, n):
    return kernels.lc_input_grad(g, W, stride, n)


def _vjp_lc_input_grad(gg, out, g, W, need, stride, n):
    dg = locally_connected(gg, W, stride) if need[0] else None
    dW = lc_weight_grad(gg, g, W.shape[3], stride) if need[1] else None
    return dg, dW


def _impl_lc_weight_grad(x, g, w, stride):
    return kernels.lc_weight_grad(x, g, w, stride)


def _vjp_lc_weight_grad(gW, out, x, g, need, w, stride):
    dx = lc_input_grad(g, gW, stride, x.shape[2]) if need[0] else None
    dg = locally_connected(x, gW, stride) if need[1] else None
    return dx, dg


def _mask_vjp(pred):
    def vjp(g, out, a, need, **attrs):
        return (mul(g, constant(pred(a.data, **attrs).astype(np.float64))),)
    return vjp


P_ADD = Primitive("add", np.add, _vjp_add)
P_SUB = Primitive("sub", np.subtract, _vjp_sub)
P_MUL = Primitive("mul", np.multiply, _vjp_mul)
P_DIV = Primitive("div", np.divide, _vjp_div)
P_NEG = Primitive("neg", np.negative, lambda g, out, a, need: (neg(g),))
P_EXP = Primitive("exp", np.exp, lambda g, out, a, need: (mul(g, out),))
P_LOG = Primitive("log", np.log, lambda g, out, a, need: (div(g, a),))
P_SQUARE = Primitive("square", np.square, lambda g, out, a, need: (mul(g, mul(a, 2.0)),))
P_TANH = Primitive("tanh", np.tanh,
                   lambda g, out, a, need: (mul(g, sub(1.0, square(out))),))
P_RELU = Primitive("relu", _impl_relu, _mask_vjp(lambda a: a > 0))
P_ABS = Primitive("abs", np.abs, lambda g, out, a, need: (mul(g, constant(np.sign(a.data))),))
P_CLAMP_MIN = Primitive("clamp_min", _impl_clamp_min, _mask_vjp(lambda a, lo: a > lo))
P_SUM = Primitive("sum", _impl_sum, _vjp_sum)
P_MAX = Primitive("max", _impl_max, _vjp_max)
P_SUM_TO = Primitive("sum_to", _impl_sum_to,
                     lambda g, out, a, need, shape: (broadcast_to(g, a.shape),))
P_BROADCAST = Primitive("broadcast_to", lambda a, shape: np.broadcast_to(a, shape).copy(),
                        lambda g, out, a, need, shape: (sum_to(g, a.shape),))
P_RESHAPE = Primitive("reshape", lambda a, shape: np.reshape(a, shape),
                      lambda g, out, a, need, shape: (reshape(g, a.shape),))
P_TRANSPOSE = Primitive("transpose", _impl_transpose, _vjp_transpose)
P_MATMUL = Primitive("matmul", _impl_matmul, _vjp_matmul)
P_CONV1D = Primitive("conv1d", _impl_conv1d, _vjp_conv1d)
P_CONV1D_IG = Primitive("conv1d_input_grad", _impl_conv1d_input_grad, _vjp_conv1d_input_grad)
P_CONV1D_KG = Primitive("conv1d_kernel_grad", _impl_conv1d_kernel_grad, _vjp_conv1d_kernel_grad)
P_LC = Primitive("locally_connected", _impl_lc, _vjp_lc)
P_LC_IG = Primitive("lc_input_grad", _impl_lc_input_grad, _vjp_lc_input_grad)
P_LC_WG = Primitive("lc_weight_grad", _impl_lc_weight_grad, _vjp_lc_weight_grad)


def add(a, b):
    return apply(P_ADD, a, b)


def sub(a, b):
    return apply(P_SUB, a, b)


def mul(a, b):
    return apply(P_MUL, a, b)


def div(a, b):
    return apply(P_DIV, a, b)


def neg(a):
    return apply(P_NEG, a)


def exp(a):
    return apply(P_EXP, a)


def log(a):
    return apply(P_LOG, a)


def square(a):
    return apply(P_SQUARE, a)


def tanh(a):
    return apply(P_TANH, a)


def relu(a):
    return apply(P_RELU, a)


def vabs(a):
    return apply(P_ABS, a)


def clamp_min(a, lo):
    return apply(P_CLAMP_MIN, a, lo=float(lo))


def vsum(a, axis=None, keepdims=False):
    return apply(P_SUM, a, axis=axis, keepdims=keepdims)


def vmax(a, axis=None, keepdims=False):
    return apply(P_MAX, a, axis=axis, keepdims=keepdims)


def sum_to(a, shape):
    shape = tuple(shape)
    if isinstance(a, Value) and a.shape == shape:
        return a
    return apply(P_SUM_TO, a, shape=shape)


def broadcast_to(a, shape):
    shape = tuple(shape)
    if isinstance(a, Value) and a.shape == shape:
        return a
    return apply(P_BROADCAST, a, shape=shape)


def reshape(a, shape):
    return apply(P_RESHAPE, a, shape=tuple(shape))


def transpose(a, axes=None):
    return apply(P_TRANSPOSE, a, axes=None if axes is None else tuple(int(i) for i in axes))


def matmul(a, b):
    return apply(P_MATMUL, a, b)


def conv1d(x, K, pad):
    return apply(P_CONV1D, x, K, pad=int(pad))


def conv1d_input_grad(g, K, pad, n):
    return apply(P_CONV1D_IG, g, K, pad=int(pad), n=int(n))


def conv1d_kernel_grad(x, g, w, pad):
    return apply(P_CONV1D_KG, x, g, w=int(w), pad=int(pad))


def locally_connected(x, W, stride):
    return apply(P_LC, x, W, stride=int(stride))


def lc_input_grad(g, W, stride, n):
    return apply(P_LC_IG, g, W, stride=int(stride), n=int(n))


def lc_weight_grad(x, g, w, stride):
    return apply(P_LC_WG, x, g, w=int(w), stride=int(stride))


def softmax(z, axis=-1):
    """Numerically safe softmax; the shift is detached (softmax is shift-invariant)."""
    shift = stop_gradient(vmax(stop_gradient(z), axis=axis, keepdims=True))
    e = exp(sub(z, shift))
    return div(e, vsum(e, axis=axis, keepdims=True))


def log_softmax(z, axis=-1):
    shift = stop_gradient(vmax(stop_gradient(z), axis=axis, keepdims=True))
    zs = sub(z, shift)
    return sub(zs, log(vsum(exp(zs), axis=axis, keepdims=True)))


# ---------------------------------------------------------------- gradients


def gradient(target, wrt: Sequence[Value], create_graph=False):
    """Gradients of a scalar ``target`` with respect to each Value in ``wrt``.

    With ``create_graph=True`` the results are tape nodes and can be
    differentiated again; otherwise they are constants.
    """
    if not isinstance(target, Value):
        raise TypeError("target must be a Value")
    if target.shape != ():
        raise ShapeError(f"gradient target must be a scalar, got shape {target.shape}")
    wrt = list(wrt)
    zeros = [constant(np.zeros(w.shape)) for w in wrt]
    tape = target.tape
    if tape is None or target.index < 0 or not target.requires_grad:
        return zeros
    for w in wrt:
        if w.tape is not tape:
            raise ValueError("wrt Value does not belong to the target's tape")

    stop = target.index + 1
    nodes = tape.nodes[:stop]
    wanted = {w.index for w in wrt}
    # needed[i]: node i depends on some wrt leaf.
    needed = np.zeros(stop, dtype=bool)
    for node in nodes:
        if node.index in wanted:
            needed[node.index] = True
        elif node.prim is not None:
            for p in node.parents:
                if p.index >= 0 and p.tape is tape and needed[p.index]:
                    needed[node.index] = True
                    break
    if not needed[target.index]:
        return zeros

    grads = {target.index: constant(np.ones(()))}
    prev = tape.recording
    tape.recording = bool(create_graph)
    try:
        for node in reversed(nodes):
            g = grads.get(node.index)
            if g is None or node.prim is None:
                continue
            if node.index not in wanted:
                del grads[node.index]
            need = tuple(p.tape is tape and p.index >= 0 and bool(needed[p.index])
                         for p in node.parents)
            if not any(need):
                continue
            prim = node.prim
            if prim.vjp is None:
                raise UnsupportedOpError(f"primitive {prim.name!r} has no derivative")
            if create_graph and not prim.higher_order:
                raise UnsupportedOpError(
                    f"primitive {prim.name!r} has no registered second derivative")
            pgrads = prim.vjp(g, node, *node.parents, need=need, **node.attrs)
            for p, pg, nd in zip(node.parents, pgrads, need):
                if not nd or pg is None:
                    continue
                old = grads.get(p.index)
                grads[p.index] = pg if old is None else add(old, pg)
    finally:
        tape.recording = prev
    out = []
    for w, z in zip(wrt, zeros):
        g = grads.get(w.index)
        out.append(z if g is None else g)
    return out


# ---------------------------------------------------------------- checking


@dataclass
class FDResult:
    max_rel_error: float
    rel_errors: np.ndarray
    numeric: np.ndarray
    excluded: np.ndarray  # flat indices judged to sit on a kink

    def fraction_within(self, tol):
        ok = np.ones(self.rel_errors.size, dtype=bool)
        ok[self.excluded] = False
        if not ok.any():
            return 1.0
        return float(np.mean(self.rel_errors[ok] < tol))


def finite_difference_check(func, point, analytic, step=1e-5, eps_abs=1e-8,
                            kink_tol=1e-3):
    """Compare ``analytic`` against central differences of ``func`` at ``point``.

    A coordinate is excluded when its forward and backward one-sided
    differences disagree by more than ``kink_tol`` relative to their size
    (the function is not differentiable within one step). The reported error
    per coordinate is ``|analytic - central| / (|analytic| + eps_abs)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.size != point.size:
        raise ShapeError(f"analytic gradient has {analytic.size} entries, point has {point.size}")

    def f(p):
        v = float(func(p.reshape(point.shape)))
        if not np.isfinite(v):
            raise FloatingPointError("function value is not finite")
        return v

    flat = point.ravel()
    f0 = f(flat)
    numeric = np.empty(flat.size)
    excluded = []
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f(flat)
        flat[i] = old - step
        fm = f(flat)
        flat[i] = old
        numeric[i] = (fp - fm) / (2 * step)
        fwd = (fp - f0) / step
        bwd = (f0 - fm) / step
        if abs(fwd - bwd) > kink_tol * (abs(fwd) + abs(bwd)) + 1e-9 * (abs(f0) + 1.0) / step:
            excluded.append(i)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + eps_abs)
    excluded = np.array(excluded, dtype=np.int64)
    keep = np.ones(flat.size, dtype=bool)
    keep[excluded] = False
    max_rel = float(rel[keep].max()) if keep.any() else 0.0
    return FDResult(max_rel, rel, numeric, excluded)
