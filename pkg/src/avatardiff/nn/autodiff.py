"""Reverse-mode automatic differentiation on numpy arrays.

Tape-based: each op records a backward closure over its parents; backward()
topologically sorts the graph and accumulates gradients. Convolutions run as
im2col + GEMM in NHWC layout, and their input gradient is again a GEMM
convolution (spatially flipped kernel over the zero-dilated output gradient),
so the whole training step stays inside BLAS.

Ops preserve the input dtype: training runs float32, gradient checks float64.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            # numpy scalar, e.g. from reducing a 0-d array: keep its dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() starts from a scalar loss")
        order, seen = [], set()

        def visit(t):
            if id(t) in seen or not t.requires_grad:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            order.append(t)

        visit(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            if t._backward is not None:
                t._backward(t.grad)
            # free the closure so intermediate buffers can be collected
            t._backward = None
            t._parents = ()

    # -- elementwise ---------------------------------------------------

    def _binary(self, other, fwd, bwd_a, bwd_b):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.data.dtype))
        out_data = fwd(self.data, other.data)
        req = self.requires_grad or other.requires_grad
        if not req:
            return Tensor(out_data)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(bwd_a(g, a.data, b.data), a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(bwd_b(g, a.data, b.data), b.data.shape))

        return Tensor(out_data, True, (a, b), backward)

    def __add__(self, other):
        return self._binary(other, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)

    def __rsub__(self, other):
        return Tensor(np.asarray(other, dtype=self.data.dtype)) - self

    def __mul__(self, other):
        return self._binary(other, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def silu(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out_data = self.data * s
        if not self.requires_grad:
            return Tensor(out_data)
        src = self

        def backward(g):
            src._accumulate(g * (s + self.data * s * (1.0 - s)))

        return Tensor(out_data, True, (src,), backward)

    def softmax(self):
        """Softmax over the last axis."""
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)
        if not self.requires_grad:
            return Tensor(y)
        src = self

        def backward(g):
            src._accumulate((g - (g * y).sum(axis=-1, keepdims=True)) * y)

        return Tensor(y, True, (src,), backward)

    # -- shape ---------------------------------------------------------

    def reshape(self, *shape):
        out_data = self.data.reshape(*shape)
        if not self.requires_grad:
            return Tensor(out_data)
        src, orig = self, self.data.shape

        def backward(g):
            src._accumulate(g.reshape(orig))

        return Tensor(out_data, True, (src,), backward)

    def transpose(self, *axes):
        out_data = np.ascontiguousarray(self.data.transpose(axes))
        if not self.requires_grad:
            return Tensor(out_data)
        src, inv = self, tuple(np.argsort(axes))

        def backward(g):
            src._accumulate(g.transpose(inv))

        return Tensor(out_data, True, (src,), backward)

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data @ other.data
        req = self.requires_grad or other.requires_grad
        if not req:
            return Tensor(out_data)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a._accumulate(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.data.shape))

        return Tensor(out_data, True, (a, b), backward)

    # -- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        # full reductions yield numpy scalars; keep them 0-d arrays so the
        # Tensor constructor does not coerce the dtype
        out_data = np.asarray(self.data.sum(axis=axis, keepdims=keepdims))
        if not self.requires_grad:
            return Tensor(out_data)
        src = self
        axes = axis if axis is None or isinstance(axis, tuple) else (axis,)

        def backward(g):
            if axes is None:
                src._accumulate(np.broadcast_to(g, src.data.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axes)
            src._accumulate(np.broadcast_to(g, src.data.shape).copy())

        return Tensor(out_data, True, (src,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- image ops -----------------------------------------------------

    def conv2d(self, weight: "Tensor", stride: int = 1, padding: int = 1):
        """NHWC correlation with (kh, kw, cin, cout) weights."""
        out_data, cols = _conv_forward(self.data, weight.data, stride, padding)
        req = self.requires_grad or weight.requires_grad
        if not req:
            return Tensor(out_data)
        x, w = self, weight

        def backward(g):
            if w.requires_grad:
                kh, kw, cin, cout = w.data.shape
                gw = cols.reshape(-1, cin * kh * kw).T @ g.reshape(-1, cout)
                w._accumulate(gw.reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3))
            if x.requires_grad:
                x._accumulate(_conv_input_grad(g, w.data, x.data.shape, stride, padding))

        return Tensor(out_data, True, (x, w), backward)

    def upsample2x(self):
        """Nearest-neighbor 2x spatial upsampling (NHWC)."""
        out_data = self.data.repeat(2, axis=1).repeat(2, axis=2)
        if not self.requires_grad:
            return Tensor(out_data)
        src = self
        n, h, w, c = self.data.shape

        def backward(g):
            src._accumulate(g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)))

        return Tensor(out_data, True, (src,), backward)

    def group_norm(self, gamma: "Tensor", beta: "Tensor", groups: int, eps: float = 1e-5):
        """Normalize over (H, W, C/G) per group, then scale and shift per channel."""
        n, h, w, c = self.data.shape
        if c % groups:
            raise ValueError(f"channels {c} not divisible by groups {groups}")
        cg = c // groups
        xg = self.data.reshape(n, h, w, groups, cg)
        m = h * w * cg
        s1_m = np.einsum("nhwgc->ng", xg) / m
        s2_m = np.einsum("nhwgc,nhwgc->ng", xg, xg) / m
        mu = s1_m.reshape(n, 1, 1, groups, 1)
        var = np.maximum(s2_m - s1_m * s1_m, 0.0).reshape(n, 1, 1, groups, 1)
        istd = 1.0 / np.sqrt(var + eps)
        xhat_g = (xg - mu) * istd
        xhat = xhat_g.reshape(n, h, w, c)
        out_data = xhat * gamma.data + beta.data
        req = self.requires_grad or gamma.requires_grad or beta.requires_grad
        if not req:
            return Tensor(out_data)
        x, ga, be = self, gamma, beta

        def backward(g):
            if be.requires_grad:
                be._accumulate(np.einsum("nhwc->c", g))
            if ga.requires_grad:
                ga._accumulate(np.einsum("nhwc,nhwc->c", g, xhat))
            if x.requires_grad:
                dxhat = (g * ga.data).reshape(n, h, w, groups, cg)
                s1 = np.einsum("nhwgc->ng", dxhat).reshape(n, 1, 1, groups, 1)
                s2 = np.einsum("nhwgc,nhwgc->ng", dxhat, xhat_g).reshape(n, 1, 1, groups, 1)
                dx = istd * (dxhat - s1 / m - xhat_g * s2 / m)
                x._accumulate(dx.reshape(n, h, w, c))

        return Tensor(out_data, True, (x, ga, be), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    if not req:
        return Tensor(out_data)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor(out_data, True, tuple(tensors), backward)


# -- convolution internals ----------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                 # (N, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    # patches keep their native (C, kh, kw) ordering; reorder the small weight
    # tensor instead of transposing the big patch buffer
    kh, kw, cin, cout = w.shape
    cols = _im2col(x, kh, kw, stride, pad)
    n, ho, wo = cols.shape[:3]
    wmat = np.ascontiguousarray(w.transpose(2, 0, 1, 3)).reshape(cin * kh * kw, cout)
    out = cols.reshape(n * ho * wo, cin * kh * kw) @ wmat
    return out.reshape(n, ho, wo, cout), cols


def _conv_input_grad(g: np.ndarray, w: np.ndarray, x_shape: tuple, stride: int, pad: int):
    """dL/dx as a stride-1 correlation of the dilated output gradient with the
    spatially flipped, channel-swapped kernel."""
    n, h, wd, cin = x_shape
    kh, kw, _, cout = w.shape
    if stride > 1:
        # dilate, then extend to the full stride-1 position count so trailing
        # input rows/cols covered by the last window still receive gradient
        th = h + 2 * pad - kh + 1
        tw = wd + 2 * pad - kw + 1
        dil = np.zeros((n, max(th, (g.shape[1] - 1) * stride + 1),
                        max(tw, (g.shape[2] - 1) * stride + 1), cout), dtype=g.dtype)
        dil[:, : (g.shape[1] - 1) * stride + 1 : stride,
            : (g.shape[2] - 1) * stride + 1 : stride] = g
        g = dil
    w_flip = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    dx, _ = _conv_forward(g, w_flip, 1, kh - 1 - pad)
    out = np.zeros(x_shape, dtype=g.dtype)
    out[:, : min(h, dx.shape[1]), : min(wd, dx.shape[2])] = dx[:, :h, :wd]
    return out
