"""Dense tensors with reverse-mode automatic differentiation.

Every value flowing through the model is a :class:`Tensor` wrapping a numpy
array. Operations record their parents and a backward closure; calling
:func:`backward` on a scalar walks the resulting graph in reverse topological
order and accumulates gradients into the leaves that require them.

Conventions:
    * convolutions are cross-correlations (no kernel flip), NCHW layout;
    * elementwise binary ops accept exactly matching shapes or a scalar;
    * tensors are never mutated by ops; only ``grad`` of leaves is written.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Contract violation on tensor shapes or op arguments."""


class GradientCheckError(ArithmeticError):
    """Non-finite value met while checking gradients."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    """A leaf tensor enrolled in differentiation."""
    return Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=True, name=name)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results are plain constants."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# --------------------------------------------------------------------------
# graph traversal


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients add to whatever the leaves already hold, so two calls without
    ``zero_grad`` in between sum their contributions.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("backward called on a non-finite loss")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# elementwise


def _check_binary(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    mask = x > 0
    y = np.where(mask, x, x * slope)
    return _make(y, (a,), lambda g: (np.where(mask, g, g * slope),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),))


# --------------------------------------------------------------------------
# reductions and shape ops


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis of size {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), back)


def chunk(a: Tensor, n: int, axis: int = 1) -> list[Tensor]:
    size = a.shape[axis]
    if size % n:
        raise ShapeError(f"chunk: axis of size {size} not divisible into {n}")
    step = size // n
    return [narrow(a, axis, i * step, step) for i in range(n)]


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), back)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def frobenius_norm(a: Tensor) -> Tensor:
    """Frobenius norm over the last two axes; gradient taken as 0 at the origin."""
    x = a.data
    n = np.sqrt((x * x).sum(axis=(-2, -1)))

    def back(g):
        safe = np.where(n > 0, n, 1.0)
        unit = np.where((n > 0)[..., None, None], x / safe[..., None, None], 0.0)
        return (g[..., None, None] * unit,)

    return _make(n, (a,), back)


# --------------------------------------------------------------------------
# convolution


def _same_pad(k: int) -> int:
    if k % 2 == 0:
        raise ShapeError(f"same padding needs an odd kernel size, got {k}")
    return (k - 1) // 2


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _col2im(dcols: np.ndarray, shape, k: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """Scatter-add column gradients ``[C*k*k, B*Ho*Wo]`` into a ``(B, C, hp, wp)`` canvas."""
    b, c, hp, wp = shape
    d = dcols.reshape(c, k, k, b, ho, wo)
    out = np.zeros((c, b, hp, wp), dtype=dcols.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + hs : stride, j : j + ws : stride] += d[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    b, c, h, wd = x.shape
    cout, k = w.shape[0], w.shape[-1]
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    if k == 1 and stride == 1 and pad == 0:
        cols = x.transpose(0, 2, 3, 1).reshape(b * ho * wo, c)
    else:
        xp = _pad(x, pad)
        win = _windows(xp, k, stride, ho, wo)
        # im2col matrix: rows (b, i, j), columns (c, di, dj)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    out = cols @ w.reshape(cout, -1).T
    return out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2), cols


def _conv_grad_input(gmat: np.ndarray, w: np.ndarray, stride: int, pad: int, in_shape):
    b, _, h, wd = in_shape
    cout, c, k, _ = w.shape
    if k == 1 and stride == 1 and pad == 0:
        return (gmat @ w.reshape(cout, c)).reshape(b, h, wd, c).transpose(0, 3, 1, 2)
    ho = _conv_out(h, k, stride, pad)
    wo = _conv_out(wd, k, stride, pad)
    dcols = w.reshape(cout, -1).T @ gmat.T  # (C*k*k, B*Ho*Wo)
    gp = _col2im(dcols, (b, c, h + 2 * pad, wd + 2 * pad), k, ho, wo, stride)
    return gp[:, :, pad : pad + h, pad : pad + wd]


def _resolve_padding(padding, k: int) -> int:
    if padding == "same":
        return _same_pad(k)
    if padding == "valid":
        return 0
    if isinstance(padding, int) and padding >= 0:
        return padding
    raise ShapeError(f"conv2d: unknown padding {padding!r}")


def conv2d(x, w, bias=None, padding="same", stride: int = 1, groups: int = 1) -> Tensor:
    """2-D cross-correlation of ``x[B,Cin,H,W]`` with ``w[Cout,Cin/groups,k,k]``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: expected x[B,C,H,W] and w[O,I,k,k], got {x.shape} and {w.shape}")
    cin, cout = x.shape[1], w.shape[0]
    if groups < 1 or cin % groups or cout % groups or w.shape[1] * groups != cin:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {w.shape} (groups={groups})")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernels {w.shape}")
    k = w.shape[-1]
    pad = _resolve_padding(padding, k)
    if groups > 1:
        xs = chunk(x, groups, axis=1)
        ws = chunk(w, groups, axis=0)
        outs = [conv2d(xi, wi, None, pad, stride) for xi, wi in zip(xs, ws)]
        out = concat(outs, axis=1)
        return out if bias is None else add_channel_bias(out, bias)

    xd, wd = x.data, w.data
    out, cols = _conv_forward(xd, wd, stride, pad)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    in_shape = xd.shape

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = _conv_grad_input(gmat, wd, stride, pad, in_shape) if x.requires_grad else None
        gw = (gmat.T @ cols).reshape(wd.shape) if w.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, back)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 4 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_channel_bias: bias {bias.shape} does not fit {x.shape}")
    return _make(
        x.data + bias.data[None, :, None, None],
        (x, bias),
        lambda g: (g, g.sum(axis=(0, 2, 3))),
    )


def conv2d_transpose(
    x, w, bias=None, stride: int = 1, padding: int = 0, output_padding: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``w`` has the layout of the forward convolution being transposed,
    ``[Cin, Cout, k, k]`` here, so ``conv2d_transpose(y, w, stride=s, padding=p)``
    equals the input-gradient of ``conv2d(., w, stride=s, padding=p)`` at
    cotangent ``y``. Output extent is ``(H-1)*s - 2p + k + output_padding``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if stride not in (1, 2):
        raise ShapeError(f"conv2d_transpose: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d_transpose: input {x.shape} incompatible with kernels {w.shape}")
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise ShapeError(f"conv2d_transpose: output_padding {output_padding} must be < stride")
    b, _, h, wd = x.shape
    k = w.shape[-1]
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (wd - 1) * stride - 2 * padding + k + output_padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose: empty output for input {x.shape}")
    xd, wdat = x.data, w.data
    cin, cout = wdat.shape[0], wdat.shape[1]
    xmat = xd.transpose(0, 2, 3, 1).reshape(-1, cin)
    dcols = wdat.reshape(cin, -1).T @ xmat.T  # (Cout*k*k, B*H*W)
    full = _col2im(dcols, (b, cout, ho + 2 * padding, wo + 2 * padding), k, h, wd, stride)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data[None, :, None, None]

    def back(g):
        win = _windows(_pad(g, padding), k, stride, h, wd)  # (B, Cout, H, W, k, k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * wd, cout * k * k)
        gx = (cols @ wdat.reshape(cin, -1).T).reshape(b, h, wd, cin).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xmat.T @ cols).reshape(wdat.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, back)


# --------------------------------------------------------------------------
# finite-difference checking


def gradient_check(
    f: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` is called as ``f(*tensors)`` and must return a scalar. The error per
    coordinate is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``. Leaves are
    perturbed in place and restored. ``max_coords`` samples that many
    coordinates per tensor instead of sweeping all of them.
    """
    tensors = [point] if isinstance(point, Tensor) else list(point)
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError(f"gradient_check needs float64 tensors, got {t.dtype}")
        if not t.requires_grad:
            t.requires_grad = True
        # perturbations go through a flat view, so the buffer must be contiguous
        t.data = np.require(t.data, requirements="C")
        t.grad = np.zeros_like(t.data)

    loss = f(*tensors)
    if loss.size != 1:
        raise ShapeError(f"gradient_check: f must return a scalar, got shape {loss.shape}")
    backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        coords: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        g_flat = analytic[ti].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(f(*tensors).data)
            flat[c] = orig - eps
            fm = float(f(*tensors).data)
            flat[c] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradientCheckError(f"non-finite value at tensor {ti}, coordinate {int(c)}")
            fd = (fp - fm) / (2 * eps)
            ad = float(g_flat[c])
            err = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
            worst = max(worst, err)
    for t in tensors:
        t.grad = np.zeros_like(t.data)
    return worst
