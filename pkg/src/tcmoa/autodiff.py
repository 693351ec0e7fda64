"""Dense float64 tensors with reverse-mode automatic differentiation.

Covers exactly the primitive set the fusion stack needs: elementwise
arithmetic, matmul, 3x3/NxN same-convolution, the nonlinearities used by
routing and losses, axis reductions, layer normalization, and the
shape/layout ops (concat, split, reshape, axis swap, cyclic roll,
channel-group averaging, boolean gather).

Gradients follow subgradient conventions for the piecewise ops: max/min
route the gradient to the selected element (ties to the first operand),
abs uses sign(x) with sign(0)=0, and sign() itself is treated as a
constant (zero gradient).
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor",
    "GradMap",
    "ShapeError",
    "UnknownPrimitiveError",
    "apply_primitive",
    "backward",
    "finite_difference_check",
    "no_grad",
    "tensor",
    "param",
    "sigmoid",
    "gelu",
    "softplus",
    "softmax",
    "absolute",
    "sign",
    "maximum",
    "minimum",
    "matmul",
    "conv2d",
    "layer_norm",
    "concat",
    "split",
    "roll2d",
    "transpose2d",
    "grouped_average",
    "gather_by_mask",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_node_ids = itertools.count(1)


class ShapeError(ValueError):
    """Input shapes do not conform for a primitive."""


class UnknownPrimitiveError(ValueError):
    """Primitive kind is not part of the closure."""


class NonScalarLossError(ValueError):
    """backward() was asked to differentiate a non-scalar."""


class _GradState:
    enabled = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _GradState.enabled
        _GradState.enabled = False
        return self

    def __exit__(self, *exc):
        _GradState.enabled = self._prev
        return False


class Tensor:
    """A contiguous float64 array plus optional autodiff bookkeeping.

    ``_parents`` / ``_backward`` are only populated when the tensor was
    produced by a recorded primitive; leaves carry just ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _grad_tracked(self) -> bool:
        return self.requires_grad or self._backward is not None

    # -- sugar -------------------------------------------------------------

    def __add__(self, other):
        return apply_primitive("add", (self, other))

    __radd__ = __add__

    def __sub__(self, other):
        return apply_primitive("sub", (self, other))

    def __rsub__(self, other):
        return apply_primitive("sub", (other, self))

    def __mul__(self, other):
        return apply_primitive("mul", (self, other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return apply_primitive("div", (self, other))

    def __rtruediv__(self, other):
        return apply_primitive("div", (other, self))

    def __matmul__(self, other):
        return apply_primitive("matmul", (self, other))

    def __neg__(self):
        return apply_primitive("mul", (self, -1.0))

    def sum(self, axis=None):
        return apply_primitive("sum", (self,), axis=axis)

    def mean(self, axis=None):
        return apply_primitive("mean", (self,), axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", (self,), shape=shape)

    def swapaxes(self, a: int, b: int):
        return apply_primitive("transpose2d", (self,), axes=(a, b))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(data) -> Tensor:
    """Constant tensor (no gradient)."""
    return Tensor(data)


def param(data) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class GradMap:
    """Gradients of one backward pass, keyed by leaf ``node_id``.

    Leaves that were not reached by the pass read as zero gradients of the
    leaf's own shape.
    """

    def __init__(self, entries: dict[int, np.ndarray]):
        self._entries = entries

    def __contains__(self, leaf: Tensor) -> bool:
        return leaf.node_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def grad(self, leaf: Tensor) -> Tensor:
        if not leaf.requires_grad:
            raise ValueError("gradient queried for a non-differentiated tensor")
        g = self._entries.get(leaf.node_id)
        if g is None:
            return Tensor(np.zeros(leaf.shape))
        return Tensor(g)

    def items(self):
        return self._entries.items()


# ---------------------------------------------------------------------------
# primitive implementations
#
# Each returns (out_data, parents, backward) where backward maps the output
# gradient to per-parent gradients (None for non-differentiable slots).
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _ew_add(a: Tensor, b: Tensor):
    _check_broadcast("add", a.data, b.data)
    out = a.data + b.data
    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return out, (a, b), bwd


def _ew_sub(a: Tensor, b: Tensor):
    _check_broadcast("sub", a.data, b.data)
    out = a.data - b.data
    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    return out, (a, b), bwd


def _ew_mul(a: Tensor, b: Tensor):
    _check_broadcast("mul", a.data, b.data)
    out = a.data * b.data
    ad, bd = a.data, b.data
    def bwd(g):
        return (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape))
    return out, (a, b), bwd


def _ew_div(a: Tensor, b: Tensor):
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data
    ad, bd = a.data, b.data
    def bwd(g):
        ga = _unbroadcast(g / bd, a.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), b.shape)
        return (ga, gb)
    return out, (a, b), bwd


def _maximum(a: Tensor, b: Tensor):
    _check_broadcast("max", a.data, b.data)
    pick_a = a.data >= b.data  # ties route to the first operand
    out = np.where(pick_a, a.data, b.data)
    def bwd(g):
        return (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape))
    return out, (a, b), bwd


def _minimum(a: Tensor, b: Tensor):
    _check_broadcast("min", a.data, b.data)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    def bwd(g):
        return (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape))
    return out, (a, b), bwd


def _matmul(a: Tensor, b: Tensor):
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner axes differ, {ad.shape} @ {bd.shape}")
    if ad.ndim == bd.ndim:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise ShapeError(f"matmul: batch prefixes differ, {ad.shape} @ {bd.shape}")
        out = np.matmul(ad, bd)
        def bwd(g):
            ga = np.matmul(g, bd.swapaxes(-1, -2))
            gb = np.matmul(ad.swapaxes(-1, -2), g)
            return (ga, gb)
        return out, (a, b), bwd
    if bd.ndim == 2:
        out = np.matmul(ad, bd)
        k, n = bd.shape
        def bwd(g):
            ga = np.matmul(g, bd.T)
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return (ga, gb)
        return out, (a, b), bwd
    raise ShapeError(f"matmul: unsupported rank combination {ad.shape} @ {bd.shape}")


def _conv2d(inputs: Sequence[Tensor], padding: str):
    x = inputs[0]
    w = inputs[1]
    bias = inputs[2] if len(inputs) > 2 else None
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 4:
        raise ShapeError(f"conv2d: expected HxWxCin input and khxkwxCinxCout kernel, got {xd.shape}, {wd.shape}")
    kh, kw, cin, cout = wd.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if xd.shape[2] != cin:
        raise ShapeError(f"conv2d: input channels {xd.shape[2]} != kernel channels {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    h, wid = xd.shape[:2]
    ph, pw = kh // 2, kw // 2

    if padding == "zero":
        xp = np.pad(xd, ((ph, ph), (pw, pw), (0, 0)))
        rows = cols_idx = None
    elif padding == "replicate":
        rows = np.clip(np.arange(-ph, h + ph), 0, h - 1)
        cols_idx = np.clip(np.arange(-pw, wid + pw), 0, wid - 1)
        xp = xd[rows[:, None], cols_idx[None, :]]
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")

    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h * wid, kh * kw * cin)
    wmat = wd.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(h, wid, cout)

    need_x = x._grad_tracked()
    need_w = w._grad_tracked()
    need_b = bias is not None and bias._grad_tracked()

    def bwd(g):
        gflat = g.reshape(h * wid, cout)
        gw = (cols.T @ gflat).reshape(kh, kw, cin, cout) if need_w else None
        gx = None
        if need_x:
            if padding == "zero":
                # gx = full correlation of g with the spatially flipped kernel
                gp = np.pad(g, ((ph, ph), (pw, pw), (0, 0)))
                gwin = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(0, 1))
                gcols = np.ascontiguousarray(gwin.transpose(0, 1, 3, 4, 2)).reshape(h * wid, kh * kw * cout)
                wflip = wd[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
                gx = (gcols @ wflip).reshape(h, wid, cin)
            else:
                gcols = (gflat @ wmat.T).reshape(h, wid, kh, kw, cin)
                gxp = np.zeros_like(xp)
                for u in range(kh):
                    for v in range(kw):
                        gxp[u:u + h, v:v + wid] += gcols[:, :, u, v, :]
                gx = np.zeros_like(xd)
                np.add.at(gx, (rows[:, None], cols_idx[None, :]), gxp)
        if bias is not None:
            return (gx, gw, g.sum(axis=(0, 1)) if need_b else None)
        return (gx, gw)
    return out, tuple(inputs), bwd


def _softmax(x: Tensor):
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    out = e / e.sum(axis=-1, keepdims=True)
    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)
    return out, (x,), bwd


def _sigmoid(x: Tensor):
    out = expit(x.data)
    def bwd(g):
        return (g * out * (1.0 - out),)
    return out, (x,), bwd


def _gelu(x: Tensor):
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf
    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)
    return out, (x,), bwd


def _softplus(x: Tensor):
    out = np.logaddexp(0.0, x.data)
    s = expit(x.data)
    def bwd(g):
        return (g * s,)
    return out, (x,), bwd


def _abs(x: Tensor):
    out = np.abs(x.data)
    s = np.sign(x.data)
    def bwd(g):
        return (g * s,)
    return out, (x,), bwd


def _sign(x: Tensor):
    out = np.sign(x.data)
    def bwd(g):
        return (np.zeros_like(x.data),)
    return out, (x,), bwd


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _sum(x: Tensor, axis):
    axes = _norm_axis(axis, x.data.ndim)
    out = x.data.sum(axis=axes)
    shape = x.shape
    def bwd(g):
        expanded = np.expand_dims(g, axes) if g.ndim else g
        return (np.broadcast_to(expanded, shape).copy(),)
    return out, (x,), bwd


def _mean(x: Tensor, axis):
    axes = _norm_axis(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = x.data.mean(axis=axes)
    shape = x.shape
    def bwd(g):
        expanded = np.expand_dims(g, axes) if g.ndim else g
        return (np.broadcast_to(expanded, shape) / count,)
    return out, (x,), bwd


def _layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float):
    xd = x.data
    c = xd.shape[-1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"layernorm: scale/shift must be ({c},), got {scale.shape}, {shift.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * scale.data + shift.data
    red = tuple(range(xd.ndim - 1))
    def bwd(g):
        gshift = g.sum(axis=red) if red else g
        gscale = (g * xhat).sum(axis=red) if red else g * xhat
        gh = g * scale.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx, gscale, gshift)
    return out, (x, scale, shift), bwd


def _concat(inputs: Sequence[Tensor], axis: int):
    datas = [t.data for t in inputs]
    base = list(datas[0].shape)
    ax = axis % len(base)
    for d in datas[1:]:
        other = list(d.shape)
        if len(other) != len(base) or any(i != ax and other[i] != base[i] for i in range(len(base))):
            raise ShapeError(f"concat: axis {ax} shapes incompatible: {[t.shape for t in inputs]}")
    out = np.concatenate(datas, axis=ax)
    sizes = [d.shape[ax] for d in datas]
    def bwd(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=ax)
        return tuple(pieces)
    return out, tuple(inputs), bwd


def _reshape(x: Tensor, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    def bwd(g):
        return (g.reshape(src),)
    return out, (x,), bwd


def _transpose2d(x: Tensor, axes):
    a, b = axes
    out = x.data.swapaxes(a, b)
    def bwd(g):
        return (g.swapaxes(a, b),)
    return out, (x,), bwd


def _roll2d(x: Tensor, shift, axes):
    out = np.roll(x.data, shift, axis=axes)
    neg = tuple(-s for s in shift)
    def bwd(g):
        return (np.roll(g, neg, axis=axes),)
    return out, (x,), bwd


def _grouped_average(x: Tensor, group_size: int):
    c = x.shape[-1]
    if c % group_size:
        raise ShapeError(f"grouped-average: last axis {c} not divisible by group {group_size}")
    n = c // group_size
    out = x.data.reshape(x.shape[:-1] + (n, group_size)).mean(axis=-1)
    shape = x.shape
    def bwd(g):
        return (np.repeat(g, group_size, axis=-1).reshape(shape) / group_size,)
    return out, (x,), bwd


def _gather_by_mask(x: Tensor, mask):
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape:
        raise ShapeError(f"gather-by-mask: mask {m.shape} != input {x.shape}")
    out = x.data[m]
    shape = x.shape
    def bwd(g):
        gx = np.zeros(shape)
        gx[m] = g
        return (gx,)
    return out, (x,), bwd


def apply_primitive(kind: str, inputs, **attrs) -> Tensor | list[Tensor]:
    """Run one primitive, recording it for backward when any input is tracked.

    ``split`` returns a list of tensors; everything else returns one tensor.
    """
    ins = tuple(_as_tensor(t) for t in (inputs if isinstance(inputs, (tuple, list)) else (inputs,)))

    if kind == "split":
        return _apply_split(ins[0], **attrs)

    if kind in ("add", "sub", "mul", "div", "max", "min"):
        fn = {"add": _ew_add, "sub": _ew_sub, "mul": _ew_mul,
              "div": _ew_div, "max": _maximum, "min": _minimum}[kind]
        out, parents, bwd = fn(ins[0], ins[1])
    elif kind == "matmul":
        out, parents, bwd = _matmul(ins[0], ins[1])
    elif kind == "conv2d":
        out, parents, bwd = _conv2d(ins, attrs.get("padding", "zero"))
    elif kind == "softmax":
        out, parents, bwd = _softmax(ins[0])
    elif kind == "sigmoid":
        out, parents, bwd = _sigmoid(ins[0])
    elif kind == "gelu":
        out, parents, bwd = _gelu(ins[0])
    elif kind == "softplus":
        out, parents, bwd = _softplus(ins[0])
    elif kind == "abs":
        out, parents, bwd = _abs(ins[0])
    elif kind == "sign":
        out, parents, bwd = _sign(ins[0])
    elif kind == "sum":
        out, parents, bwd = _sum(ins[0], attrs.get("axis"))
    elif kind == "mean":
        out, parents, bwd = _mean(ins[0], attrs.get("axis"))
    elif kind == "layernorm":
        out, parents, bwd = _layer_norm(ins[0], ins[1], ins[2], attrs.get("eps", 1e-5))
    elif kind == "concat":
        out, parents, bwd = _concat(ins, attrs["axis"])
    elif kind == "reshape":
        out, parents, bwd = _reshape(ins[0], attrs["shape"])
    elif kind == "transpose2d":
        out, parents, bwd = _transpose2d(ins[0], attrs.get("axes", (-2, -1)))
    elif kind == "roll2d":
        out, parents, bwd = _roll2d(ins[0], attrs["shift"], attrs.get("axes", (0, 1)))
    elif kind == "grouped-average":
        out, parents, bwd = _grouped_average(ins[0], attrs["group_size"])
    elif kind == "gather-by-mask":
        out, parents, bwd = _gather_by_mask(ins[0], attrs["mask"])
    else:
        raise UnknownPrimitiveError(f"unknown primitive kind {kind!r}")

    result = Tensor(out)
    if _GradState.enabled and any(p._grad_tracked() for p in parents):
        result._parents = parents
        result._backward = bwd
        result.node_id = next(_node_ids)
    return result


def _apply_split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    ax = axis % x.data.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis {ax} of {x.shape}")
    offs = np.cumsum([0] + list(sizes))
    outs = []
    for i, s in enumerate(sizes):
        sl = [slice(None)] * x.data.ndim
        sl[ax] = slice(offs[i], offs[i + 1])
        piece = x.data[tuple(sl)].copy()
        t = Tensor(piece)
        if _GradState.enabled and x._grad_tracked():
            lo = int(offs[i])
            shape = x.shape
            def bwd(g, lo=lo, s=s):
                gx = np.zeros(shape)
                sl2 = [slice(None)] * len(shape)
                sl2[ax] = slice(lo, lo + s)
                gx[tuple(sl2)] = g
                return (gx,)
            t._parents = (x,)
            t._backward = bwd
            t.node_id = next(_node_ids)
        outs.append(t)
    return outs


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, free_graph: bool = True) -> GradMap:
    """Accumulate d(loss)/d(leaf) for every reachable requires_grad leaf.

    The recorded applications are released afterwards unless ``free_graph``
    is False; a fresh forward pass is needed for another backward.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")

    # iterative topological order over the recorded DAG
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p._backward is not None:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    if loss.requires_grad and loss._backward is None:
        leaf_grads[loss.node_id] = np.ones_like(loss.data)

    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            if p._backward is not None:
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
            elif p.requires_grad:
                acc = leaf_grads.get(p.node_id)
                leaf_grads[p.node_id] = pg.copy() if acc is None else acc + pg
        if free_graph:
            node._parents = ()
            node._backward = None

    return GradMap(leaf_grads)


def finite_difference_check(
    f: Callable[..., Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between backward() and central finite differences.

    ``f`` is called as ``f(*params)`` and must return a scalar Tensor and be
    deterministic. Relative error per coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    loss = f(*params)
    gm = backward(loss)
    worst = 0.0
    for p in params:
        analytic = gm.grad(p).data
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(f(*params).data)
            flat[i] = orig - epsilon
            f_minus = float(f(*params).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", (x,))


def gelu(x: Tensor) -> Tensor:
    return apply_primitive("gelu", (x,))


def softplus(x: Tensor) -> Tensor:
    return apply_primitive("softplus", (x,))


def softmax(x: Tensor) -> Tensor:
    return apply_primitive("softmax", (x,))


def absolute(x: Tensor) -> Tensor:
    return apply_primitive("abs", (x,))


def sign(x: Tensor) -> Tensor:
    return apply_primitive("sign", (x,))


def maximum(a, b) -> Tensor:
    return apply_primitive("max", (a, b))


def minimum(a, b) -> Tensor:
    return apply_primitive("min", (a, b))


def matmul(a, b) -> Tensor:
    return apply_primitive("matmul", (a, b))


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, padding: str = "zero") -> Tensor:
    ins = (x, w) if bias is None else (x, w, bias)
    return apply_primitive("conv2d", ins, padding=padding)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    return apply_primitive("layernorm", (x, scale, shift), eps=eps)


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    return apply_primitive("concat", tuple(tensors), axis=axis)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    return apply_primitive("split", (x,), sizes=tuple(sizes), axis=axis)


def roll2d(x: Tensor, shift: tuple[int, int], axes: tuple[int, int] = (0, 1)) -> Tensor:
    return apply_primitive("roll2d", (x,), shift=tuple(shift), axes=tuple(axes))


def transpose2d(x: Tensor, axes: tuple[int, int] = (-2, -1)) -> Tensor:
    return apply_primitive("transpose2d", (x,), axes=tuple(axes))


def grouped_average(x: Tensor, group_size: int) -> Tensor:
    return apply_primitive("grouped-average", (x,), group_size=group_size)


def gather_by_mask(x: Tensor, mask) -> Tensor:
    return apply_primitive("gather-by-mask", (x,), mask=mask)
