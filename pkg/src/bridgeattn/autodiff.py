"""Reverse-mode automatic differentiation over dense numpy arrays.

Every higher-level piece of this package (attention modules, residual and
transformer blocks, the training harness) is composed from the primitives
defined here. Design constraints:

* float64 everywhere verification matters; float32 is accepted for the
  training path. Ops never silently promote float32 data to float64.
* every op output passes through ``Tensor.__init__``, which rejects
  NaN/Inf, so non-finite values surface at the op boundary that produced
  them (``NonFiniteError``).
* execution is single-threaded and deterministic: identical inputs give
  bit-identical outputs on one platform.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "concat",
    "matmul",
    "relu",
    "sigmoid",
    "softmax",
    "logsumexp",
    "gap",
    "token_mean",
    "channel_scale",
    "conv2d",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf crossed an op boundary."""


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (the inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """A dense array plus the graph record needed for backprop.

    ``data`` is always a floating numpy array; ``grad`` is allocated
    lazily during :meth:`backward`. Graph edges (``_prev``) are only
    recorded when some input requires gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = ()):
        arr = _as_float_array(data)
        if not np.isfinite(arr).all():
            raise NonFiniteError(
                f"non-finite value at op boundary (shape {arr.shape})"
            )
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _prev
        )
        self._prev = tuple(_prev) if self.requires_grad else ()
        self._backward = None

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a one-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # ------------------------------------------------------------------
    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # -- arithmetic -----------------------------------------------------
    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    def __add__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        out = Tensor(self.data + other.data, _prev=(self, other))
        if out.requires_grad:
            def _backward():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad, self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(out.grad, other.shape))
            out._backward = _backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, _prev=(self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(-out.grad)
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-Tensor._lift(other))

    def __rsub__(self, other) -> "Tensor":
        return Tensor._lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        out = Tensor(self.data * other.data, _prev=(self, other))
        if out.requires_grad:
            def _backward():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad * other.data, self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(out.grad * self.data, other.shape))
            out._backward = _backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._lift(other)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = Tensor(self.data / other.data, _prev=(self, other))
        if out.requires_grad:
            def _backward():
                if self.requires_grad:
                    self._accum(_unbroadcast(out.grad / other.data, self.shape))
                if other.requires_grad:
                    g = -out.grad * self.data / (other.data * other.data)
                    other._accum(_unbroadcast(g, other.shape))
            out._backward = _backward
        return out

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise ShapeError("only scalar exponents are supported")
        out = Tensor(self.data ** exponent, _prev=(self,))
        if out.requires_grad:
            def _backward():
                self._accum(out.grad * exponent * self.data ** (exponent - 1))
            out._backward = _backward
        return out

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- elementwise functions -------------------------------------------
    def exp(self) -> "Tensor":
        out = Tensor(np.exp(self.data), _prev=(self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(out.grad * out.data)
        return out

    def log(self) -> "Tensor":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = Tensor(np.log(self.data), _prev=(self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(out.grad / self.data)
        return out

    def sqrt(self) -> "Tensor":
        out = Tensor(np.sqrt(self.data), _prev=(self,))
        if out.requires_grad:
            def _backward():
                self._accum(out.grad * 0.5 / out.data)
            out._backward = _backward
        return out

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _prev=(self,))
        if out.requires_grad:
            def _backward():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.shape).copy())
            out._backward = _backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for ax in axes:
                count *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def amax(self, axis, keepdims: bool = False) -> "Tensor":
        """Differentiable max over `axis`; ties share the gradient evenly."""
        data_max = self.data.max(axis=axis, keepdims=True)
        out_data = data_max if keepdims else np.squeeze(data_max, axis=axis)
        out = Tensor(out_data, _prev=(self,))
        if out.requires_grad:
            def _backward():
                g = out.grad
                if not keepdims:
                    g = np.expand_dims(g, axis)
                mask = (self.data == data_max).astype(self.data.dtype)
                mask /= mask.sum(axis=axis, keepdims=True)
                self._accum(mask * g)
            out._backward = _backward
        return out

    # -- shape manipulation -------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), _prev=(self,))
        if out.requires_grad:
            out._backward = lambda: self._accum(out.grad.reshape(self.shape))
        return out

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out = Tensor(np.transpose(self.data, axes), _prev=(self,))
        if out.requires_grad:
            inverse = np.argsort(axes)
            out._backward = lambda: self._accum(np.transpose(out.grad, inverse))
        return out

    def gather_rows(self, index) -> "Tensor":
        """Pick one column per row of a 2-D tensor: out[i] = self[i, index[i]]."""
        if self.ndim != 2:
            raise ShapeError("gather_rows needs a 2-D tensor")
        idx = np.asarray(index, dtype=np.int64)
        rows = np.arange(self.shape[0])
        out = Tensor(self.data[rows, idx], _prev=(self,))
        if out.requires_grad:
            def _backward():
                g = np.zeros_like(self.data)
                np.add.at(g, (rows, idx), out.grad)
                self._accum(g)
            out._backward = _backward
        return out


# ---------------------------------------------------------------------------
# free functions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with leading batch dimensions, numpy semantics."""
    a, b = Tensor._lift(a), Tensor._lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), _prev=(a, b))
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
                a._accum(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
                b._accum(_unbroadcast(gb, b.shape))
        out._backward = _backward
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _prev=tuple(tensors))
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def _backward():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * out.ndim
                    sl[axis] = slice(lo, hi)
                    t._accum(out.grad[tuple(sl)])
        out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    x = Tensor._lift(x)
    out = Tensor(np.maximum(x.data, 0.0), _prev=(x,))
    if out.requires_grad:
        out._backward = lambda: x._accum(out.grad * (x.data > 0))
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = Tensor._lift(x)
    d = x.data
    pos = d >= 0
    vals = np.empty_like(d)
    vals[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    vals[~pos] = e / (1.0 + e)
    out = Tensor(vals, _prev=(x,))
    if out.requires_grad:
        out._backward = lambda: x._accum(out.grad * out.data * (1.0 - out.data))
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = shift.exp()
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = Tensor(x.data.max(axis=axis, keepdims=True))
    lse = (x - m).exp().sum(axis=axis, keepdims=True).log() + m
    squeezed = tuple(s for i, s in enumerate(lse.shape)
                     if i != axis % lse.ndim)
    return lse.reshape(squeezed)


def gap(x: Tensor) -> Tensor:
    """Global average pooling: spatial mean per channel, [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ShapeError(f"gap expects [N,C,H,W], got {x.shape}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError("gap needs nonempty spatial extents")
    return x.mean(axis=(2, 3))


def token_mean(x: Tensor) -> Tensor:
    """Mean over the token axis: [N,T,D] -> [N,D]."""
    if x.ndim != 3:
        raise ShapeError(f"token_mean expects [N,T,D], got {x.shape}")
    return x.mean(axis=1)


def channel_scale(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply each channel map by its scalar weight.

    Accepts [N,C,H,W] with weights [N,C], or [N,T,D] with weights [N,D]
    (broadcast over tokens).
    """
    if x.ndim == 4:
        if weights.shape != x.shape[:2]:
            raise ShapeError(
                f"channel weights {weights.shape} do not match {x.shape}"
            )
        return x * weights.reshape(x.shape[0], x.shape[1], 1, 1)
    if x.ndim == 3:
        if weights.shape != (x.shape[0], x.shape[2]):
            raise ShapeError(
                f"channel weights {weights.shape} do not match {x.shape}"
            )
        return x * weights.reshape(x.shape[0], 1, x.shape[2])
    raise ShapeError(f"channel_scale expects 3-D or 4-D input, got {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_extent(extent: int, k: int, stride: int, padding: int) -> int:
    span = extent + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv output extent not integral: extent={extent} k={k} "
            f"stride={stride} padding={padding}"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            hout: int, wout: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, hout, wout), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u:u + stride * hout:stride,
                                  v:v + stride * wout:stride]
    return cols.reshape(n, c * kh * kw, hout * wout)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct cross-correlation, [N,Cin,H,W] x [Cout,Cin,kh,kw] -> [N,Cout,H',W']."""
    x, kernel = Tensor._lift(x), Tensor._lift(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ShapeError(f"channel mismatch: input {cin} vs kernel {kcin}")
    hout = _conv_out_extent(h, kh, stride, padding)
    wout = _conv_out_extent(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, hout, wout)        # [N, Cin*kh*kw, L]
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out_data = np.matmul(kmat, cols).reshape(n, cout, hout, wout)
    out = Tensor(out_data, _prev=(x, kernel))
    if out.requires_grad:
        def _backward():
            g = out.grad.reshape(n, cout, hout * wout)
            if kernel.requires_grad:
                gk = np.einsum("nol,nkl->ok", g, cols)
                kernel._accum(gk.reshape(kernel.shape))
            if x.requires_grad:
                gcols = np.matmul(kmat.T, g)              # [N, Cin*kh*kw, L]
                gcols = gcols.reshape(n, cin, kh, kw, hout, wout)
                gxp = np.zeros_like(xp)
                for u in range(kh):
                    for v in range(kw):
                        gxp[:, :, u:u + stride * hout:stride,
                            v:v + stride * wout:stride] += gcols[:, :, u, v]
                if padding:
                    gxp = gxp[:, :, padding:padding + h, padding:padding + w]
                x._accum(gxp)
        out._backward = _backward
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(loss_fn, params, eps: float = 1e-5, max_coords: int = 64,
               seed: int = 0) -> float:
    """Compare reverse-mode gradients of a scalar loss against central
    finite differences.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar Tensor. For parameters with more than ``max_coords``
    entries, a seeded sample of coordinates is checked (at least 64 per
    parameter). Returns the worst relative error, with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    params = list(params)
    loss = loss_fn()
    if loss.size != 1:
        raise ShapeError("grad_check requires a scalar loss")
    for p in params:
        p.grad = None
    loss.backward()
    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(p.grad.copy())

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        total = flat.size
        if total <= max_coords:
            coords = np.arange(total)
        else:
            coords = rng.choice(total, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = loss_fn().item()
            flat[c] = orig - eps
            f_minus = loss_fn().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(gflat[c]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[c] - numeric) / denom)
    return worst
