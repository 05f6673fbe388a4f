"""Dense tensors with reverse-mode automatic differentiation.

Values are plain numpy arrays (float64 by default, float32 behind
``set_default_dtype`` for fast builds). Each operation records its parents
and a backward closure on the output tensor; ``Tensor.backward`` walks the
tape in reverse topological order exactly once and accumulates gradients
into every ``requires_grad`` tensor it reaches. The tape is released after
the walk; higher-order derivatives are out of scope.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Shape, axis, or extent mismatch between operands."""


class NumericError(ArithmeticError):
    """Non-finite values where finite input is required."""


class GraphError(RuntimeError):
    """Misuse of the autodiff tape (e.g. backward on a non-scalar)."""


_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the value dtype (float64 for test builds, float32 for speed)."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``data`` is row-major and immutable by convention once the tensor is
    created. ``grad`` stays ``None`` until a backward pass reaches the
    tensor; a tensor with ``requires_grad=False`` never accumulates one.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- basic protocol ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    # -- backward ----------------------------------------------------------

    def backward(self) -> None:
        """Populate grads of every reachable requires_grad tensor.

        Only defined for scalar outputs. Frees the tape afterwards so saved
        activations can be collected.
        """
        if self.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            gout = grads.pop(id(node), None)
            if gout is None:
                continue
            if node.grad is None:
                node.grad = gout.copy()
            else:
                node.grad = node.grad + gout
            if node._backward is None:
                continue
            parent_grads = node._backward(gout)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = g if acc is None else acc + g
        for node in order:
            node._parents = ()
            node._backward = None

    def zero_grad(self) -> None:
        self.grad = None


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative DFS post-order over the recorded tape."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if idx < len(node._parents):
            stack.append((node, idx + 1))
            stack.append((node._parents[idx], 0))
        else:
            order.append(node)
    return order


def first_nonfinite(root: Tensor) -> str | None:
    """Op id of the earliest tape node holding a non-finite value, if any."""
    for node in _topo_order(root):
        if not np.all(np.isfinite(node.data)):
            return node.op
    return None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, op=op,
                  _parents=tuple(parents), _backward=backward if req else None)


# -- pointwise -------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; operands must share a shape or one must be scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pointwise(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _shrink(g, a.shape), _shrink(g, b.shape)

    return _make(out, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    """Hadamard product; operands must share a shape or one must be scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pointwise(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _shrink(g * b.data, a.shape), _shrink(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def _check_pointwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is scalar")


def _shrink(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # collapse the scalar-vs-tensor broadcast back onto the scalar operand
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python constant (not a tape node)."""
    a = _as_tensor(a)
    factor = float(factor)
    out = a.data * factor

    def backward(g):
        return (g * factor,)

    return _make(out, (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    """max(0, x); subgradient at 0 is 0."""
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split form avoids overflow in exp for large |x|
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward, "sigmoid")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along an existing axis; remaining extents must match."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of zero tensors")
    rank = tensors[0].ndim
    if not 0 <= axis < rank:
        raise DimensionError(f"concat axis {axis} out of range for rank {rank}")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != rank or base[:axis] != other[:axis] or base[axis + 1:] != other[axis + 1:]:
            raise DimensionError(f"concat: shape {t.shape} incompatible with {tensors[0].shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward, "concat")


# -- structural ------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for rank {a.ndim}")
    inv = tuple(int(i) for i in np.argsort(axes))
    out = np.transpose(a.data, axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), backward, "transpose")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Replicate along new leading axes or size-1 axes; backward sums them."""
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: {a.shape} -> {shape}: {exc}") from None
    lead = len(shape) - a.ndim
    summed = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1
    )

    def backward(g):
        return (np.sum(g, axis=summed).reshape(a.shape) if summed else g.reshape(a.shape),)

    return _make(np.ascontiguousarray(out), (a,), backward, "broadcast_to")


def reduce_sum(a: Tensor, axis: int | tuple | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(out, (a,), backward, "reduce_sum")


def reduce_mean(a: Tensor, axis: int | tuple | None = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else (
        math.prod(a.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,)))
    )
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- contraction -----------------------------------------------------------


def _parse_contract_spec(spec: str) -> tuple[str, str, str]:
    if "->" not in spec or spec.count(",") != 1:
        raise DimensionError(f"contract spec {spec!r} must look like 'ab,bc->ac'")
    lhs, out = spec.split("->")
    la, lb = lhs.split(",")
    for part in (la, lb, out):
        if not part.isalpha() and part != "":
            raise DimensionError(f"contract spec {spec!r} contains non-letter axis labels")
    for name, part in (("left", la), ("right", lb), ("output", out)):
        if len(set(part)) != len(part):
            raise DimensionError(f"contract spec {spec!r}: repeated label in {name} operand")
    for label in la:
        if label not in out and label not in lb:
            raise DimensionError(f"contract spec {spec!r}: left label '{label}' is neither paired nor kept")
    for label in lb:
        if label not in out and label not in la:
            raise DimensionError(f"contract spec {spec!r}: right label '{label}' is neither paired nor kept")
    for label in out:
        if label not in la and label not in lb:
            raise DimensionError(f"contract spec {spec!r}: output label '{label}' missing from inputs")
    return la, lb, out


def contract(a: Tensor, b: Tensor, spec: str) -> Tensor:
    """Pairwise Einstein summation, e.g. ``contract(m, v, "ij,j->i")``.

    Labels shared by both operands and absent from the output are summed;
    labels kept in the output survive. Paired axes must agree in extent.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    la, lb, out_labels = _parse_contract_spec(spec)
    if len(la) != a.ndim:
        raise DimensionError(f"contract: left operand rank {a.ndim} != spec '{la}'")
    if len(lb) != b.ndim:
        raise DimensionError(f"contract: right operand rank {b.ndim} != spec '{lb}'")
    for label in set(la) & set(lb):
        ia, ib = la.index(label), lb.index(label)
        if a.shape[ia] != b.shape[ib]:
            raise DimensionError(
                f"contract: paired axis '{label}' differs: axis {ia} of left operand "
                f"(extent {a.shape[ia]}) vs axis {ib} of right operand (extent {b.shape[ib]})"
            )
    out = np.einsum(spec, a.data, b.data)

    def backward(g):
        ga = np.einsum(f"{out_labels},{lb}->{la}", g, b.data)
        gb = np.einsum(f"{out_labels},{la}->{lb}", g, a.data)
        return ga, gb

    return _make(out, (a, b), backward, "contract")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, a convenience over ``contract``."""
    return contract(a, b, "ij,jk->ik")


# -- softmax ---------------------------------------------------------------


def softmax_axis(x: Tensor, axis: int, temperature: float = 1.0) -> Tensor:
    """Stable softmax along one axis with max-subtraction.

    Output is nonnegative and sums to 1 along ``axis``; adding a constant
    along the axis leaves it unchanged.
    """
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax over non-finite input")
    z = x.data / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _make(out, (x,), backward, "softmax")


# -- convolution -----------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Same-padded 2-D convolution, ``x``: [C_in,H,W], ``kernel``: [C_out,C_in,k,k].

    Zero padding, kernel size 1 or 3; spatial extents are preserved.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] and [O,C,k,k], got {x.shape} and {kernel.shape}")
    cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin != cin_k:
        raise DimensionError(f"conv2d: input channels {cin} != kernel channels {cin_k}")
    if kh != kw or kh not in (1, 3):
        raise DimensionError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    pad = kh // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # [C,H,W,kh,kw]
    out = np.einsum("ocij,chwij->ohw", kernel.data, win)

    def backward(g):
        gk = np.einsum("ohw,chwij->ocij", g, win)
        gp = np.pad(g, ((0, 0), (pad, pad), (pad, pad)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(1, 2))
        kflip = kernel.data[:, :, ::-1, ::-1]
        gx = np.einsum("ocij,ohwij->chw", kflip, gwin)
        return gx, gk

    return _make(out, (x, kernel), backward, "conv2d")


# -- bilinear resize -------------------------------------------------------


def _resize_grid(n_in: int, n_out: int):
    if n_out < 1:
        raise DimensionError(f"resize target extent must be >= 1, got {n_out}")
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear interpolation, ``x``: [C,h,w] -> [C,out_h,out_w]."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"bilinear_resize expects [C,h,w], got {x.shape}")
    c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"resize target {out_h}x{out_w} must be >= 1 in both extents")
    ylo, yhi, fy = _resize_grid(h, out_h)
    xlo, xhi, fx = _resize_grid(w, out_w)
    fy = fy[:, None]
    fx = fx[None, :]
    d = x.data
    # lerp form keeps constant inputs and grid corners bit-exact
    a = d[:, ylo[:, None], xlo[None, :]]
    b = d[:, ylo[:, None], xhi[None, :]]
    c = d[:, yhi[:, None], xlo[None, :]]
    e = d[:, yhi[:, None], xhi[None, :]]
    top = a + fx * (b - a)
    bot = c + fx * (e - c)
    out = top + fy * (bot - top)

    def backward(g):
        gx = np.zeros_like(d)
        yl = np.broadcast_to(ylo[:, None], (out_h, out_w))
        yh = np.broadcast_to(yhi[:, None], (out_h, out_w))
        xl = np.broadcast_to(xlo[None, :], (out_h, out_w))
        xh = np.broadcast_to(xhi[None, :], (out_h, out_w))
        for ys, xs, wgt in ((yl, xl, (1 - fy) * (1 - fx)), (yl, xh, (1 - fy) * fx),
                            (yh, xl, fy * (1 - fx)), (yh, xh, fy * fx)):
            np.add.at(gx, (slice(None), ys, xs), g * wgt)
        return (gx,)

    return _make(out, (x,), backward, "bilinear_resize")


# -- cross entropy ---------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_id: int = 255,
                  class_axis: int = -1) -> Tensor:
    """Mean per-pixel cross-entropy of softmax over the class axis.

    ``labels`` holds integer class ids shaped like the non-class axes;
    ``ignore_id`` pixels are skipped. Returns 0 when every pixel is ignored.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    axis = class_axis % logits.ndim
    k = logits.shape[axis]
    moved = np.moveaxis(logits.data, axis, -1)
    if labels.shape != moved.shape[:-1]:
        raise DimensionError(f"labels shape {labels.shape} != logit pixels {moved.shape[:-1]}")
    valid = labels != ignore_id
    if np.any((labels < 0) & valid) or np.any((labels >= k) & valid):
        bad = tuple(int(i) for i in np.argwhere(((labels < 0) | (labels >= k)) & valid)[0])
        raise ValueError(f"label {int(labels[bad])} out of range [0,{k}) at pixel {bad}")
    n_valid = int(np.sum(valid))
    if n_valid == 0:
        return Tensor(0.0)
    z = moved - np.max(moved, axis=-1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(z), axis=-1))
    picked = np.take_along_axis(z, np.where(valid, labels, 0)[..., None], axis=-1)[..., 0]
    loss = np.sum((logsumexp - picked) * valid) / n_valid

    def backward(g):
        soft = np.exp(z - logsumexp[..., None])
        onehot = np.zeros_like(soft)
        flat = np.where(valid, labels, 0).reshape(-1)
        onehot.reshape(-1, k)[np.arange(flat.size), flat] = 1.0
        gm = (soft - onehot) * valid[..., None] / n_valid
        return (np.moveaxis(gm * g, -1, axis),)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")


# -- gradient checking -----------------------------------------------------


def grad_check(f: Callable[..., Tensor], x: Tensor | Iterable[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must return a scalar tensor when called on ``x`` (a tensor or a
    sequence of tensors). The error is |analytic - numeric| / max(1, |numeric|)
    maximised over every coordinate of every input.
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    for t in tensors:
        t.zero_grad()
        if not t.data.flags["C_CONTIGUOUS"]:
            t.data = np.ascontiguousarray(t.data)
    loss = f(*tensors)
    if loss.size != 1:
        raise GraphError("grad_check target must be scalar")
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: non-finite loss")
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    for t, an in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(*tensors).item()
            flat[i] = orig - eps
            fm = f(*tensors).item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError("grad_check: non-finite evaluation near x")
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(an_flat[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
