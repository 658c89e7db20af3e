"""Reverse-mode automatic differentiation over dense 4-D numpy arrays.

Every value is a (batch, channels, height, width) float tensor.  Ops build a
define-by-run graph: each result keeps references to its parents and a
closure that maps the result's gradient to parent-gradient contributions.
``backward`` topologically sorts the graph from a scalar loss and runs the
closures in reverse order, accumulating into ``.grad``.

Convolutions are im2col + GEMM.  Backward passes re-derive the column matrix
from the cached padded input instead of caching it; that trades one extra
strided copy per layer for a much smaller live set during training.

Float32 is the working precision.  Float64 tensors are supported so tests
can difference the same graph at higher precision; reductions always
accumulate in float64 regardless.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import DomainError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A 4-D array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (B,C,H,W); got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # Arithmetic sugar; scalars route to the *_scalar ops.
    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __mul__(self, other):
        return mul_scalar(self, other) if np.isscalar(other) else mul(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __truediv__(self, other):
        return mul_scalar(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)


class Param(Tensor):
    """A trainable tensor carrying Adam moment estimates."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def constant(data) -> Tensor:
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Run reverse mode from a scalar loss, accumulating into ``.grad``.

    Repeated calls keep accumulating; clear with :func:`zero_grad` between
    steps.  Gradients only land on tensors with ``requires_grad`` set (and on
    intermediates, which die with the graph).
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a (1,1,1,1) loss, got {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:  # iterative DFS; graphs can outgrow the recursion limit
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones((1, 1, 1, 1), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; gradients are consumed (set to None)."""
    if lr <= 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * np.square(g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
        p.grad = None


# ---------------------------------------------------------------------------
# Elementwise binary ops.  Shapes must match exactly, except that one operand
# may be (1,C,1,1) against a matching channel count (per-channel parameters).

def _bcast_check(a: Tensor, b: Tensor, opname: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    for big, small in ((sa, sb), (sb, sa)):
        if small[0] == small[2] == small[3] == 1 and small[1] == big[1]:
            return
    raise ShapeError(f"{opname}: incompatible shapes {sa} and {sb}")


def _unbcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return g.sum(axis=(0, 2, 3), keepdims=True)


def _binary(a: Tensor, b: Tensor, out: np.ndarray, da, db) -> Tensor:
    req = a.requires_grad or b.requires_grad

    def _bw(g):
        if a.requires_grad:
            _accum(a, _unbcast(da(g), a.shape))
        if b.requires_grad:
            _accum(b, _unbcast(db(g), b.shape))

    return Tensor(out, req, (a, b), _bw if req else None)


def add(a: Tensor, b: Tensor) -> Tensor:
    _bcast_check(a, b, "add")
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _bcast_check(a, b, "sub")
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _bcast_check(a, b, "mul")
    return _binary(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    _bcast_check(a, b, "div")
    out = a.data / b.data
    return _binary(a, b, out, lambda g: g / b.data, lambda g: -g * out / b.data)


# ---------------------------------------------------------------------------
# Scalar and unary ops.

def _unary(x: Tensor, out: np.ndarray, dx) -> Tensor:
    req = x.requires_grad

    def _bw(g):
        _accum(x, dx(g))

    return Tensor(out, req, (x,), _bw if req else None)


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _unary(x, x.data + x.data.dtype.type(c), lambda g: g)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _unary(x, x.data * c, lambda g: g * c)


def square(x: Tensor) -> Tensor:
    return _unary(x, np.square(x.data), lambda g: g * (2.0 * x.data))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(x.data)
    return _unary(x, out, lambda g: g / (2.0 * out))


def rsqrt(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("rsqrt needs strictly positive input")
    out = 1.0 / np.sqrt(x.data)
    return _unary(x, out.astype(x.data.dtype), lambda g: g * (-0.5) * out ** 3)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _unary(x, out, lambda g: g * out)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log needs strictly positive input")
    return _unary(x, np.log(x.data), lambda g: g / x.data)


def absolute(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _unary(x, np.abs(x.data), lambda g: g * np.sign(x.data))


def erf(x: Tensor) -> Tensor:
    out = special.erf(x.data)
    coef = x.data.dtype.type(2.0 / math.sqrt(math.pi))
    return _unary(x, out, lambda g: g * coef * np.exp(-np.square(x.data)))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(x.data.dtype.type(0), x.data)  # stable log(1+e^x)
    return _unary(x, out, lambda g: g * special.expit(x.data))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    # gradient passes wherever the input is not clamped away (>= floor)
    mask = x.data >= floor
    out = np.maximum(x.data, x.data.dtype.type(floor))
    return _unary(x, out, lambda g: g * mask)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Per-channel PReLU; ``slope`` is (1,C,1,1)."""
    if slope.shape != (1, x.shape[1], 1, 1):
        raise ShapeError(f"prelu slope must be (1,{x.shape[1]},1,1), got {slope.shape}")
    neg = x.data < 0
    out = np.where(neg, slope.data * x.data, x.data)
    req = x.requires_grad or slope.requires_grad

    def _bw(g):
        if x.requires_grad:
            _accum(x, np.where(neg, slope.data * g, g))
        if slope.requires_grad:
            ds = (np.where(neg, x.data, 0.0) * g).sum(axis=(0, 2, 3), keepdims=True)
            _accum(slope, ds.astype(g.dtype))

    return Tensor(out, req, (x, slope), _bw if req else None)


# ---------------------------------------------------------------------------
# Reductions (float64 accumulation keeps big sums honest in float32 graphs).

def tsum(x: Tensor) -> Tensor:
    out = np.array(x.data.sum(dtype=np.float64), dtype=x.data.dtype).reshape(1, 1, 1, 1)
    return _unary(x, out, lambda g: np.broadcast_to(g.reshape(()), x.shape))


def mean(x: Tensor) -> Tensor:
    out = np.array(x.data.mean(dtype=np.float64), dtype=x.data.dtype).reshape(1, 1, 1, 1)
    inv = 1.0 / x.data.size
    return _unary(x, out, lambda g: np.broadcast_to(g.reshape(()) * inv, x.shape))


# ---------------------------------------------------------------------------
# Structural ops.

def concat(parts) -> Tensor:
    parts = list(parts)
    base = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (base[0], base[2], base[3]):
            raise ShapeError(f"concat: mismatched non-channel dims {base} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=1)
    req = any(p.requires_grad for p in parts)
    sizes = [p.shape[1] for p in parts]

    def _bw(g):
        c0 = 0
        for p, c in zip(parts, sizes):
            if p.requires_grad:
                _accum(p, g[:, c0:c0 + c])
            c0 += c

    return Tensor(out, req, tuple(parts), _bw if req else None)


def split(x: Tensor, sizes) -> tuple:
    """Split along channels into tensors of the given channel counts."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not cover {x.shape[1]} channels")
    outs = []
    c0 = 0
    for c in sizes:
        lo, hi = c0, c0 + c

        def _bw(g, lo=lo, hi=hi):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:, lo:hi] += g

        outs.append(Tensor(x.data[:, lo:hi].copy(), x.requires_grad, (x,),
                           _bw if x.requires_grad else None))
        c0 += c
    return tuple(outs)


def crop(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left height x width window; gradient zero-pads back."""
    if height > x.shape[2] or width > x.shape[3]:
        raise ShapeError(f"crop to ({height},{width}) exceeds input {x.shape}")

    def _bw(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[:, :, :height, :width] += g

    return Tensor(x.data[:, :, :height, :width].copy(), x.requires_grad, (x,),
                  _bw if x.requires_grad else None)


# ---------------------------------------------------------------------------
# Convolutions.

def _pad2d(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(ap: np.ndarray, k: int, stride: int):
    """Column matrix (B, Ho*Wo, C*k*k) from an already-padded array."""
    v = sliding_window_view(ap, (k, k), axis=(2, 3))
    if stride > 1:
        v = v[:, :, ::stride, ::stride]
    b, c, ho, wo = v.shape[:4]
    cols = v.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * k * k)
    return cols, ho, wo


def _scatter(prod: np.ndarray, stride: int, bh: int, bw: int) -> np.ndarray:
    """Sum (B, C, k, k, H, W) taps into a (B, C, bh, bw) buffer.

    Tap (r1, r2) of grid cell (i, j) lands at (i*stride + r1, j*stride + r2);
    the caller guarantees those indices fit the buffer.
    """
    b, c, k, _, h, w = prod.shape
    buf = np.zeros((b, c, bh, bw), dtype=prod.dtype)
    he, we = (h - 1) * stride + 1, (w - 1) * stride + 1
    for r1 in range(k):
        for r2 in range(k):
            buf[:, :, r1:r1 + he:stride, r2:r2 + we:stride] += prod[:, :, r1, r2]
    return buf


def _check_conv_args(x, weight, bias, stride, kind):
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"{kind} weight must be 4-D with square kernel, got {weight.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"{kind} stride must be 1 or 2, got {stride}")
    if bias is not None and bias.shape != (1, _out_channels(weight, kind), 1, 1):
        raise ShapeError(f"{kind} bias must be (1,{_out_channels(weight, kind)},1,1), "
                         f"got {bias.shape}")


def _out_channels(weight, kind):
    return weight.shape[0] if kind == "conv2d" else weight.shape[1]


def conv2d(x: Tensor, weight: Tensor, bias=None, stride: int = 1,
           padding=None) -> Tensor:
    """2-D cross-correlation with 'same'-style padding floor(K/2).

    ``weight`` is (Cout, Cin, K, K); output spatial dims are
    floor((H + 2p - K)/stride) + 1.  ``padding`` may be omitted (defaults to
    floor(K/2)) but if given must equal it; other paddings are not part of
    the contract.
    """
    _check_conv_args(x, weight, bias, stride, "conv2d")
    cout, cin, k, _ = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight wants {cin}")
    p = k // 2
    if padding is not None and padding != p:
        raise ShapeError(f"conv2d padding must be {p} for K={k}, got {padding}")
    if x.shape[2] + 2 * p < k or x.shape[3] + 2 * p < k:
        raise ShapeError(f"conv2d: input {x.shape} too small for K={k}")
    cols, ho, wo = _im2col(_pad2d(x.data, p), k, stride)
    out = cols @ weight.data.reshape(cout, -1).T
    out = out.transpose(0, 2, 1).reshape(x.shape[0], cout, ho, wo)
    if bias is not None:
        out += bias.data
    req = x.requires_grad or weight.requires_grad or (bias is not None and bias.requires_grad)
    parents = (x, weight) if bias is None else (x, weight, bias)
    if not weight.requires_grad:
        cols = None  # only the weight gradient needs the column matrix

    def _bw(g):
        b, _, h, wd = x.shape
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3), dtype=np.float64)
                   .reshape(1, cout, 1, 1).astype(g.dtype))
        if weight.requires_grad:
            gl = g.reshape(b, cout, ho * wo)
            dw = np.matmul(gl, cols).sum(axis=0, dtype=np.float64)
            _accum(weight, dw.reshape(weight.shape).astype(g.dtype))
        if x.requires_grad:
            # adjoint of the forward gather: scatter g*W taps back onto the
            # padded input grid, then drop the padding ring
            gl = g.transpose(0, 2, 3, 1).reshape(b, ho * wo, cout)
            prod = (gl @ weight.data.reshape(cout, -1)) \
                .reshape(b, ho, wo, cin, k, k).transpose(0, 3, 4, 5, 1, 2)
            buf = _scatter(np.ascontiguousarray(prod), stride, h + 2 * p, wd + 2 * p)
            _accum(x, np.ascontiguousarray(buf[:, :, p:p + h, p:p + wd]))

    return Tensor(out, req, parents, _bw if req else None)


def tconv2d(x: Tensor, weight: Tensor, bias=None, stride: int = 1) -> Tensor:
    """Transposed convolution sized so stride 2 exactly doubles H and W.

    ``weight`` is (Cin, Cout, K, K).  Each input pixel (i, j) deposits the
    kernel at output offset (i*stride - floor(K/2), j*stride - floor(K/2)),
    so the output is (H*stride, W*stride) and the op is the exact adjoint of
    ``conv2d`` at the same kernel size and stride.
    """
    _check_conv_args(x, weight, bias, stride, "tconv2d")
    cin, cout, k, _ = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"tconv2d: input has {x.shape[1]} channels, weight wants {cin}")
    b, _, h, wd = x.shape
    p = k // 2
    ho, wo = h * stride, wd * stride
    wflat = weight.data.reshape(cin, cout * k * k)
    xt = x.data.transpose(0, 2, 3, 1).reshape(b, h * wd, cin)
    prod = (xt @ wflat).reshape(b, h, wd, cout, k, k).transpose(0, 3, 4, 5, 1, 2)
    bh = max((h - 1) * stride + k, p + ho)
    bw = max((wd - 1) * stride + k, p + wo)
    buf = _scatter(np.ascontiguousarray(prod), stride, bh, bw)
    out = np.ascontiguousarray(buf[:, :, p:p + ho, p:p + wo])
    if bias is not None:
        out += bias.data
    req = x.requires_grad or weight.requires_grad or (bias is not None and bias.requires_grad)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3), dtype=np.float64)
                   .reshape(1, cout, 1, 1).astype(g.dtype))
        # one stride-s gather of g serves both remaining gradients: column
        # (i, co*k*k + r) holds g at the spot tap r of input pixel i wrote to
        gp = _pad2d(g, p)[:, :, :(h - 1) * stride + k, :(wd - 1) * stride + k]
        cols_g, _, _ = _im2col(gp, k, stride)
        if weight.requires_grad:
            dw = np.matmul(x.data.reshape(b, cin, h * wd), cols_g) \
                .sum(axis=0, dtype=np.float64)
            _accum(weight, dw.reshape(weight.shape).astype(g.dtype))
        if x.requires_grad:
            dx = (cols_g @ wflat.T).transpose(0, 2, 1).reshape(b, cin, h, wd)
            _accum(x, np.ascontiguousarray(dx))

    return Tensor(out, req, parents, _bw if req else None)
