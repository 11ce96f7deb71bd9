"""Layer modules over the autodiff core: linear, conv, norms, self-attention.

Modules hold ``Parameter`` leaves plus (for batch norm) running-stat
buffers. Parameter initialization is fan-in-scaled uniform with bound
1/sqrt(fan_in); norm scales start at 1 and shifts at 0. Construction takes
an explicit ``numpy.random.Generator`` so models are reproducible from a
single seed.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    conv2d,
    matmul,
    softmax,
)

__all__ = [
    "Parameter",
    "Module",
    "Linear",
    "Conv2d",
    "BatchNorm",
    "DegenerateBatchError",
    "LayerNorm",
    "MultiHeadSelfAttention",
]


class Parameter(Tensor):
    """A learnable leaf tensor."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class DegenerateBatchError(ValueError):
    """Train-mode batch statistics over fewer than two elements."""


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal container: parameter discovery, train/eval mode, state I/O."""

    _buffer_names: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # -- traversal ------------------------------------------------------
    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item
        for name, child in self._children():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(prefix=f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- modes ----------------------------------------------------------
    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    # -- state ----------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data[...] = state[name]
        for name, b in self.named_buffers():
            b[...] = state[name]


class Linear(Module):
    """y = x @ W.T (+ bias); weight stored [out_features, in_features]."""

    def __init__(self, in_features: int, out_features: int, *,
                 bias: bool = True, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            _fan_in_uniform(rng, (out_features, in_features), in_features, dtype)
        )
        self.bias = (
            Parameter(_fan_in_uniform(rng, (out_features,), in_features, dtype))
            if bias else None
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(
                f"linear expects {self.in_features} input features, got {x.shape}"
            )
        out = matmul(x, self.weight.transpose())
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv2d(Module):
    """Bias-free 2-D convolution (cross-correlation)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, *,
                 stride: int = 1, padding: int = 0,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_fan_in_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size),
            fan_in, dtype,
        ))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride, padding=self.padding)


class BatchNorm(Module):
    """Batch normalization over the channel axis of 2-D or 4-D input.

    Train mode normalizes with batch statistics (population variance) and
    folds them into the running estimates with momentum 0.1; eval mode
    uses the running estimates. Differentiable through the batch
    statistics in train mode.
    """

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features: int, *, eps: float = 1e-5,
                 momentum: float = 0.1, dtype=np.float64):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(num_features, dtype=dtype))
        self.beta = Parameter(np.zeros(num_features, dtype=dtype))
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def _stat_shape(self, ndim: int) -> tuple[int, ...]:
        if ndim == 2:
            return (1, self.num_features)
        if ndim == 4:
            return (1, self.num_features, 1, 1)
        raise ShapeError(f"batchnorm expects 2-D or 4-D input, got ndim={ndim}")

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.num_features:
            raise ShapeError(
                f"batchnorm over {self.num_features} features, got {x.shape}"
            )
        shape = self._stat_shape(x.ndim)
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        if self.training:
            count = 1
            for ax in axes:
                count *= x.shape[ax]
            if count < 2:
                raise DegenerateBatchError(
                    "train-mode batch norm needs at least 2 elements per channel"
                )
            mu = x.mean(axis=axes, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean[...] = (
                (1.0 - m) * self.running_mean + m * mu.data.reshape(-1)
            )
            self.running_var[...] = (
                (1.0 - m) * self.running_var + m * var.data.reshape(-1)
            )
            xhat = (x - mu) / (var + self.eps).sqrt()
        else:
            mu = Tensor(self.running_mean.reshape(shape))
            inv = Tensor(1.0 / np.sqrt(self.running_var.reshape(shape) + self.eps))
            xhat = (x - mu) * inv
        return self.gamma.reshape(shape) * xhat + self.beta.reshape(shape)

    def set_identity(self) -> None:
        """Freeze eval-mode normalization to a bit-exact no-op.

        Running variance is set to 1 - eps so that var + eps rounds to
        exactly 1.0; combined with zero mean, unit scale, and zero shift
        the eval path returns its input unchanged.
        """
        self.gamma.data[...] = 1.0
        self.beta.data[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0 - self.eps
        assert np.all(np.sqrt(self.running_var + self.eps) == 1.0)


class LayerNorm(Module):
    """Normalization over the last axis with learnable scale and shift."""

    def __init__(self, dim: int, *, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"layernorm over {self.dim} features, got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return self.gamma * ((x - mu) / (var + self.eps).sqrt()) + self.beta


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over [N,T,D] with h heads."""

    def __init__(self, dim: int, heads: int, *, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.query = Linear(dim, dim, rng=rng, dtype=dtype)
        self.key = Linear(dim, dim, rng=rng, dtype=dtype)
        self.value = Linear(dim, dim, rng=rng, dtype=dtype)
        self.out = Linear(dim, dim, rng=rng, dtype=dtype)

    def _split_heads(self, t: Tensor, n: int, tokens: int) -> Tensor:
        return t.reshape(n, tokens, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"self-attention expects [N,T,D], got {x.shape}")
        n, tokens, _ = x.shape
        q = self._split_heads(self.query(x), n, tokens)
        k = self._split_heads(self.key(x), n, tokens)
        v = self._split_heads(self.value(x), n, tokens)
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.head_dim))
        ctx = matmul(softmax(scores, axis=-1), v)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(n, tokens, self.dim)
        return self.out(ctx)
