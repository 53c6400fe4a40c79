"""Dense-tensor numerics with per-call reverse-mode gradient recording.

Exactly the primitives the image transforms and the built-in CNN need:
elementwise arithmetic, matmul, convolution, bilinear sampling, 8x8 DCT,
pooling, and a fused cross-entropy. float32 by default; float64 is
supported so finite-difference oracles stay meaningful.

A recording is implicit in the parent links of the output tensors and is
consumed by ``backward``: running backward twice from the same scalar is
an error, not silent accumulation. Tensors are treated as immutable once
created; independent recordings are safe to run concurrently.
"""

from __future__ import annotations

import math

import numpy as np

Array = np.ndarray

LN10 = math.log(10.0)


class Tensor:
    """N-d array plus optional gradient bookkeeping.

    Leaves created with ``requires_grad=True`` receive a ``.grad`` array
    (same shape as the value) after a backward pass. Results of
    operations on traced tensors carry parent links; everything else is
    a plain constant with no graph overhead.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: Array = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp = None
        self._backward_done = False

    # -- construction ------------------------------------------------

    @classmethod
    def _from_op(cls, data: Array, parents, vjp) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._backward_done = False
        traced = tuple(p for p in parents if p._traced())
        if traced:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    def _traced(self) -> bool:
        return self.requires_grad or bool(self._parents)

    # -- basic properties ----------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, traced={self._traced()})"

    # -- operators ----------------------------------------------------

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

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# -- backward pass -----------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every traced leaf reachable from a scalar loss.

    The recording is consumed: a second backward from the same tensor
    raises instead of accumulating.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise RuntimeError("recording already consumed by a previous backward pass")
    loss._backward_done = True

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p._traced():
                stack.append((p, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            # leaf: deliver the gradient
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent._traced():
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum a gradient over axes introduced or stretched by broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops ---------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def log10(a) -> Tensor:
    a = as_tensor(a)
    inv_ln10 = 1.0 / LN10
    return Tensor._from_op(np.log10(a.data), (a,), lambda g: (g * inv_ln10 / a.data,))


def exp10(a) -> Tensor:
    """10**a with exact 10**0 == 1."""
    a = as_tensor(a)
    out = np.power(np.asarray(10.0, dtype=a.data.dtype), a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * LN10,))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    # subgradient at 0 is 0
    return Tensor._from_op(out, (a,), lambda g: (g * (a.data > 0),))


def clamp_st(a, lo=None, hi=None) -> Tensor:
    """Clamp with a straight-through backward (identity gradient)."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    return Tensor._from_op(out, (a,), lambda g: (g,))


def round_st(a) -> Tensor:
    """Round-half-even with a straight-through backward."""
    a = as_tensor(a)
    return Tensor._from_op(np.round(a.data), (a,), lambda g: (g,))


def floor_st(a) -> Tensor:
    """Floor with a straight-through backward."""
    a = as_tensor(a)
    return Tensor._from_op(np.floor(a.data), (a,), lambda g: (g,))


# -- shape ops ---------------------------------------------------------


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    orig = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a, *axes) -> Tensor:
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis), 1.0 / float(n))


def take_index(a, index: int, axis: int) -> Tensor:
    """Select one slice along an axis (integer indexing, axis removed)."""
    a = as_tensor(a)
    out = np.take(a.data, index, axis=axis)

    def vjp(g):
        ga = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        ga[tuple(sl)] = g
        return (ga,)

    return Tensor._from_op(out, (a,), vjp)


def stack_last(parts) -> Tensor:
    """Stack equal-shape tensors along a new trailing axis."""
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=-1)

    def vjp(g):
        return tuple(g[..., i] for i in range(len(parts)))

    return Tensor._from_op(out, tuple(parts), vjp)


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(out, (a, b), vjp)


# -- convolution and pooling --------------------------------------------


def _reflect_indices(n: int, pad: int) -> Array:
    """Index map of length n+2*pad mirroring about edge pixel centers."""
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.abs(idx) % period
    return np.where(idx < n, idx, period - idx)


def _pad2d(x: Array, pad: int, mode: str) -> Array:
    if pad == 0:
        return x
    if mode == "zero":
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if mode == "reflect":
        ih = _reflect_indices(x.shape[2], pad)
        iw = _reflect_indices(x.shape[3], pad)
        return x[:, :, ih[:, None], iw[None, :]]
    raise ValueError(f"unknown padding mode {mode!r}")


def _pad2d_backward(g: Array, n_h: int, n_w: int, pad: int, mode: str) -> Array:
    if pad == 0:
        return g
    if mode == "zero":
        return g[:, :, pad:-pad, pad:-pad]
    ih = _reflect_indices(n_h, pad)
    iw = _reflect_indices(n_w, pad)
    nb, nc = g.shape[:2]
    out = np.zeros((nb * nc, n_h, n_w), dtype=g.dtype)
    np.add.at(
        out,
        (np.arange(nb * nc)[:, None, None], ih[None, :, None], iw[None, None, :]),
        g.reshape(nb * nc, *g.shape[2:]),
    )
    return out.reshape(nb, nc, n_h, n_w)


def _im2col(xp: Array, kh: int, kw: int) -> Array:
    """(N,C,Hp,Wp) -> (N, C, kh*kw, Ho*Wo) patch matrix, stride 1."""
    n, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = np.empty((n, c, kh * kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[:, :, i : i + ho, j : j + wo]
    return cols.reshape(n, c, kh * kw, ho * wo)


def _col2im(gcols: Array, hp: int, wp: int, kh: int, kw: int) -> Array:
    n, c, _, _ = gcols.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    gcols = gcols.reshape(n, c, kh * kw, ho, wo)
    gxp = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + ho, j : j + wo] += gcols[:, :, i * kw + j]
    return gxp


def conv2d(x, weight, bias=None, padding: int = 0, pad_mode: str = "reflect") -> Tensor:
    """Cross-correlation of NCHW input with OIKK kernels, stride 1.

    With odd kernels and padding=(K-1)/2 the spatial size is preserved.
    """
    x = as_tensor(x)
    w = as_tensor(weight, like=x)
    b = as_tensor(bias, like=x) if bias is not None else None
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIKK kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel spatial size must be odd, got {kh}x{kw}")
    xp = _pad2d(x.data, padding, pad_mode)
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = _im2col(xp, kh, kw).reshape(n, c * kh * kw, ho * wo)
    wmat = w.data.reshape(o, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)

    def vjp(g):
        gmat = g.reshape(n, o, ho * wo)
        gw = np.einsum("nop,nkp->ok", gmat, cols).reshape(w.shape)
        gcols = np.matmul(wmat.T, gmat).reshape(n, c, kh * kw, ho * wo)
        gxp = _col2im(gcols, hp, wp, kh, kw)
        gx = _pad2d_backward(gxp, h, wd, padding, pad_mode)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, vjp)


def depthwise_conv2d(x, kernel, pad_mode: str = "reflect") -> Tensor:
    """Convolve every channel of NCHW input with one shared 2-d kernel."""
    x = as_tensor(x)
    k = as_tensor(kernel, like=x)
    if x.ndim != 4 or k.ndim != 2:
        raise ValueError(f"depthwise_conv2d expects NCHW input and 2-d kernel, got {x.shape}, {k.shape}")
    kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel spatial size must be odd, got {kh}x{kw}")
    pad = (kh - 1) // 2
    n, c, h, wd = x.shape
    xp = _pad2d(x.data, pad, pad_mode)
    hp, wp = xp.shape[2], xp.shape[3]
    cols = _im2col(xp, kh, kw)  # (N,C,k2,H*W)
    kflat = k.data.reshape(kh * kw)
    out = np.einsum("nckp,k->ncp", cols, kflat).reshape(n, c, h, wd)

    def vjp(g):
        gflat = g.reshape(n, c, h * wd)
        gk = np.einsum("nckp,ncp->k", cols, gflat).reshape(kh, kw)
        gcols = kflat[None, None, :, None] * gflat[:, :, None, :]
        gxp = _col2im(gcols, hp, wp, kh, kw)
        return _pad2d_backward(gxp, h, wd, pad, pad_mode), gk

    return Tensor._from_op(out, (x, k), vjp)


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial dims must divide by size."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"maxpool2d: {h}x{w} not divisible by {size}")
    ho, wo = h // size, w // size
    xr = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    xr = xr.reshape(n, c, ho, wo, size * size)
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gr = np.zeros_like(xr)
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
        gr = gr.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gr.reshape(n, c, h, w),)

    return Tensor._from_op(out, (x,), vjp)


# -- bilinear sampling ---------------------------------------------------


def _reflect_point_indices(idx: Array, n: int) -> Array:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    m = np.abs(idx) % period
    return np.where(m < n, m, period - m)


def bilinear_sample(image, grid) -> Tensor:
    """Sample (..., H, W, C) input at grid (Ho, Wo, 2) of (x, y) coordinates.

    Coordinates are in source pixel units with half-pixel centers: pixel
    (i, j) has its center at (j + 0.5, i + 0.5). Out-of-range neighbors
    reflect about edge pixel centers. Differentiable in both the input
    values and the grid coordinates.
    """
    image = as_tensor(image)
    grid = as_tensor(grid, like=image)
    if grid.ndim != 3 or grid.shape[-1] != 2:
        raise ValueError(f"grid must have shape (Ho, Wo, 2), got {grid.shape}")
    if image.ndim < 3:
        raise ValueError(f"image must have shape (..., H, W, C), got {image.shape}")
    h, w, c = image.shape[-3], image.shape[-2], image.shape[-1]
    lead = image.shape[:-3]
    img = image.data.reshape((-1, h, w, c))
    nb = img.shape[0]

    u = grid.data[..., 0] - 0.5
    v = grid.data[..., 1] - 0.5
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = (u - x0).astype(image.data.dtype)
    fy = (v - y0).astype(image.data.dtype)
    ix0 = _reflect_point_indices(x0, w)
    ix1 = _reflect_point_indices(x0 + 1, w)
    iy0 = _reflect_point_indices(y0, h)
    iy1 = _reflect_point_indices(y0 + 1, h)

    p00 = img[:, iy0, ix0]  # (nb, Ho, Wo, C)
    p01 = img[:, iy0, ix1]
    p10 = img[:, iy1, ix0]
    p11 = img[:, iy1, ix1]
    fx_ = fx[None, :, :, None]
    fy_ = fy[None, :, :, None]
    top = p00 + fx_ * (p01 - p00)
    bot = p10 + fx_ * (p11 - p10)
    out = top + fy_ * (bot - top)
    ho, wo = grid.shape[0], grid.shape[1]
    out = out.reshape(lead + (ho, wo, c))

    def vjp(g):
        gb = g.reshape((nb, ho, wo, c))
        w00 = (1 - fx_) * (1 - fy_)
        w01 = fx_ * (1 - fy_)
        w10 = (1 - fx_) * fy_
        w11 = fx_ * fy_
        gimg = np.zeros_like(img)
        bidx = np.arange(nb)[:, None, None]
        np.add.at(gimg, (bidx, iy0[None], ix0[None]), w00 * gb)
        np.add.at(gimg, (bidx, iy0[None], ix1[None]), w01 * gb)
        np.add.at(gimg, (bidx, iy1[None], ix0[None]), w10 * gb)
        np.add.at(gimg, (bidx, iy1[None], ix1[None]), w11 * gb)
        # d(out)/du is the horizontal neighbor difference, blended in fy
        du = (1 - fy_) * (p01 - p00) + fy_ * (p11 - p10)
        dv = (1 - fx_) * (p10 - p00) + fx_ * (p11 - p01)
        ggrid = np.empty_like(grid.data)
        ggrid[..., 0] = (gb * du).sum(axis=(0, 3))
        ggrid[..., 1] = (gb * dv).sum(axis=(0, 3))
        return gimg.reshape(image.shape), ggrid

    return Tensor._from_op(out, (image, grid), vjp)


# -- 8x8 orthonormal DCT -------------------------------------------------


def _dct8_basis(dtype) -> Array:
    x = np.arange(8, dtype=np.float64)
    u = x[:, None]
    d = np.cos((2 * x[None, :] + 1) * u * np.pi / 16.0)
    d[0] *= 1.0 / math.sqrt(8.0)
    d[1:] *= 0.5
    return d.astype(dtype)


def _matmul_right(blocks: Tensor, m: Array) -> Tensor:
    shape = blocks.shape
    flat = reshape(blocks, (-1, shape[-1]))
    prod = matmul(flat, Tensor(m))
    return reshape(prod, shape[:-1] + (m.shape[1],))


def _transpose_last2(t: Tensor) -> Tensor:
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return transpose(t, axes)


def _check_8x8(t: Tensor, name: str) -> None:
    if t.ndim < 2 or t.shape[-2:] != (8, 8):
        raise ValueError(f"{name} expects (..., 8, 8) blocks, got {t.shape}")


def dct8(block) -> Tensor:
    """Orthonormal 2-d DCT-II of (..., 8, 8) blocks; DC of a constant c is 8c."""
    block = as_tensor(block)
    _check_8x8(block, "dct8")
    d = _dct8_basis(block.dtype)
    # D @ B @ D^T via right-multiplications: (B^T D^T)^T D^T
    t1 = _matmul_right(_transpose_last2(block), d.T)
    return _matmul_right(_transpose_last2(t1), d.T)


def idct8(coeffs) -> Tensor:
    """Inverse of dct8: D^T @ C @ D."""
    coeffs = as_tensor(coeffs)
    _check_8x8(coeffs, "idct8")
    d = _dct8_basis(coeffs.dtype)
    t1 = _matmul_right(_transpose_last2(coeffs), d)
    return _matmul_right(_transpose_last2(t1), d)


# -- gaussian kernel -----------------------------------------------------


SIGMA_MIN = 1e-3


def gaussian_kernel(sigma, radius: int) -> Tensor:
    """(2r+1)x(2r+1) normalized isotropic Gaussian, differentiable in sigma.

    At sigma near SIGMA_MIN the off-center weights underflow and the
    kernel is numerically a delta.
    """
    sigma = as_tensor(sigma)
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    d2 = Tensor((ax[:, None] ** 2 + ax[None, :] ** 2).astype(sigma.dtype))
    s = reshape(sigma, ())
    w = exp(div(neg(d2), mul(mul(s, s), 2.0)))
    return div(w, tsum(w))


# -- classification loss --------------------------------------------------


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over a batch; labels are integer indices."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    y = np.asarray(labels)
    n, c = logits.shape
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match batch size {n}")
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(sez)
    loss = -logp[np.arange(n), y].mean(dtype=z.dtype)

    def vjp(g):
        sm = ez / sez
        sm[np.arange(n), y] -= 1.0
        return (g * sm / n,)

    return Tensor._from_op(np.asarray(loss, dtype=z.dtype), (logits,), vjp)


def softmax(logits: Array) -> Array:
    """Plain-array softmax used for predictions and reporting."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
