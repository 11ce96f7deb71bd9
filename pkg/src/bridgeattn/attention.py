"""Channel-attention variants: squeeze-excite and the two bridge versions.

The bridge modules split attention into two phases. Integration pools each
tapped feature map to per-channel statistics and projects every branch to a
shared reduced width C_n/r, then fuses the branches: v1 batch-normalizes
each branch and sums; v2 blends them with n learnable scalar gains.
Generation turns the fused vector into weights in (0,1): v2 applies batch
norm before the ReLU/expand/sigmoid stack, v1 does not.

Also houses the closed-form parameter arithmetic for the attention extras
under two counting conventions: ``paper`` counts one parameter per
batch-norm channel (the convention behind the published overhead formulas
n*C_n/r for v1 and n + C_n/r for v2), ``actual`` counts everything a
training loop would update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    channel_scale,
    concat,
    gap,
    relu,
    sigmoid,
    token_mean,
)
from .nn import BatchNorm, Linear, Module, Parameter

__all__ = [
    "POOLING_KINDS",
    "PoolingStrategy",
    "AttentionConfig",
    "pool",
    "dct_basis",
    "zigzag_frequencies",
    "SqueezeExcite",
    "BridgeAttention",
    "attention_param_count",
]

POOLING_KINDS = ("avg", "avg_max", "avg_std", "dct")


@dataclass(frozen=True)
class PoolingStrategy:
    """How spatial maps are compressed to per-channel statistics.

    ``avg_max`` and ``avg_std`` concatenate two statistics and therefore
    double the width the branch projection must accept. ``dct`` sums the
    projections onto the ``dct_components`` lowest-frequency orthonormal
    2-D DCT-II bases (zig-zag order); with one component this is average
    pooling up to the sqrt(H*W) normalization of the constant basis.
    """

    kind: str = "avg"
    dct_components: int = 16

    def __post_init__(self):
        if self.kind not in POOLING_KINDS:
            raise ValueError(f"unknown pooling kind {self.kind!r}")
        if self.kind == "dct" and self.dct_components < 1:
            raise ValueError("dct pooling needs at least one component")

    @property
    def stat_width(self) -> int:
        return 2 if self.kind in ("avg_max", "avg_std") else 1


@dataclass(frozen=True)
class AttentionConfig:
    """Variant selection plus the knobs shared by all attention modules."""

    variant: str = "bav2"          # "se" | "bav1" | "bav2"
    r: int = 16
    pooling: PoolingStrategy = field(default_factory=PoolingStrategy)
    sources: tuple[str, ...] | None = None  # extra bridge taps; None = default

    def __post_init__(self):
        if self.variant not in ("se", "bav1", "bav2"):
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.r < 1:
            raise ValueError("reduction ratio must be positive")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def zigzag_frequencies(h: int, w: int) -> list[tuple[int, int]]:
    """All (u,v) frequency pairs of an h-by-w grid in zig-zag order."""
    order = []
    for d in range(h + w - 1):
        diag = [(u, d - u) for u in range(max(0, d - w + 1), min(d, h - 1) + 1)]
        if d % 2 == 0:
            diag.reverse()
        order.extend(diag)
    return order


def _dct_axis(extent: int, freq: int) -> np.ndarray:
    grid = np.arange(extent, dtype=np.float64)
    basis = np.cos(np.pi * freq * (grid + 0.5) / extent) / np.sqrt(extent)
    if freq != 0:
        basis *= np.sqrt(2.0)
    return basis


def dct_basis(h: int, w: int, components: int) -> np.ndarray:
    """The `components` lowest-frequency orthonormal 2-D DCT-II bases, [k,h,w]."""
    if components > h * w:
        raise ShapeError(
            f"{components} DCT components exceed the {h}x{w} spatial extent"
        )
    bases = np.empty((components, h, w))
    for i, (u, v) in enumerate(zigzag_frequencies(h, w)[:components]):
        bases[i] = np.outer(_dct_axis(h, u), _dct_axis(w, v))
    return bases


def _spatial_std(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h * w == 1:
        return Tensor(np.zeros((n, c), dtype=x.dtype))
    mu = x.mean(axis=(2, 3), keepdims=True)
    return ((x - mu) ** 2).mean(axis=(2, 3)).sqrt()


def pool(x: Tensor, strategy: PoolingStrategy) -> Tensor:
    """Compress [N,C,H,W] to per-channel statistics.

    Returns [N,C] for single-statistic strategies and [N,2C] (mean block
    first) for the two-statistic ones.
    """
    if x.ndim != 4:
        raise ShapeError(f"pool expects [N,C,H,W], got {x.shape}")
    kind = strategy.kind
    if kind == "avg":
        return gap(x)
    if kind == "avg_max":
        return concat([gap(x), x.amax(axis=(2, 3))], axis=1)
    if kind == "avg_std":
        return concat([gap(x), _spatial_std(x)], axis=1)
    # dct: sum of projections onto the k lowest-frequency bases
    h, w = x.shape[2], x.shape[3]
    filt = dct_basis(h, w, strategy.dct_components).sum(axis=0)
    weighted = x * Tensor(filt.astype(x.dtype).reshape(1, 1, h, w))
    return weighted.sum(axis=(2, 3))


def _branch_stats(x: Tensor, strategy: PoolingStrategy) -> Tensor:
    """Statistics vector for one attention branch.

    4-D taps are pooled by the strategy; 3-D token maps use the token
    mean; 2-D inputs are taken as precomputed statistics.
    """
    if x.ndim == 4:
        return pool(x, strategy)
    if x.ndim == 3:
        return token_mean(x)
    if x.ndim == 2:
        return x
    raise ShapeError(f"cannot pool a {x.ndim}-D branch input")


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class SqueezeExcite(Module):
    """Classic two-layer channel gate: sigmoid(W2 relu(W1 gap(X))).

    Both projections are bias-free, so an all-zero input maps to weights
    of exactly 0.5.
    """

    def __init__(self, channels: int, r: int = 16, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if channels % r != 0:
            raise ShapeError(f"reduction ratio {r} does not divide {channels}")
        self.channels = channels
        self.r = r
        self.reduce = Linear(channels, channels // r, bias=False,
                             rng=rng, dtype=dtype)
        self.expand = Linear(channels // r, channels, bias=False,
                             rng=rng, dtype=dtype)

    def weights_from_stats(self, stats: Tensor) -> Tensor:
        return sigmoid(self.expand(relu(self.reduce(stats))))

    def forward(self, x: Tensor) -> Tensor:
        """Channel weights in (0,1) for 4-D maps, 3-D token maps, or stats."""
        return self.weights_from_stats(_branch_stats(x, PoolingStrategy("avg")))

    def scale(self, x: Tensor) -> Tensor:
        return channel_scale(x, self.forward(x))


class BridgeAttention(Module):
    """Multi-branch channel gate fusing statistics from several layers.

    ``branch_widths`` are the channel counts of the tapped features, last
    entry the adjacent layer whose output gets rescaled. The branch
    projections accept the pooled statistics (doubled width for
    two-statistic pooling).
    """

    def __init__(self, branch_widths, r: int = 16, *, variant: str = "bav2",
                 pooling: PoolingStrategy | None = None,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if variant not in ("bav1", "bav2"):
            raise ValueError(f"unknown bridge variant {variant!r}")
        widths = tuple(int(c) for c in branch_widths)
        if not widths:
            raise ShapeError("bridge attention needs at least one branch")
        out_channels = widths[-1]
        if out_channels % r != 0:
            raise ShapeError(f"reduction ratio {r} does not divide {out_channels}")
        self.variant = variant
        self.branch_widths = widths
        self.out_channels = out_channels
        self.r = r
        self.fused_width = out_channels // r
        self.pooling = pooling or PoolingStrategy("avg")

        mult = self.pooling.stat_width
        self.branch_proj = [
            Linear(c * mult, self.fused_width, bias=False, rng=rng, dtype=dtype)
            for c in widths
        ]
        n = len(widths)
        if variant == "bav2":
            # n scalar gains, equal contribution at init
            self.branch_gains = [Parameter(np.full(1, 1.0 / n, dtype=dtype))
                                 for _ in widths]
            self.gen_norm = BatchNorm(self.fused_width, dtype=dtype)
        else:
            self.branch_norms = [BatchNorm(self.fused_width, dtype=dtype)
                                 for _ in widths]
        self.expand = Linear(self.fused_width, out_channels, bias=False,
                             rng=rng, dtype=dtype)

    @property
    def num_branches(self) -> int:
        return len(self.branch_widths)

    def integrate(self, branches) -> Tensor:
        """Pool, project, and fuse the branch features into [N, C_n/r]."""
        branches = list(branches)
        if len(branches) != self.num_branches:
            raise ShapeError(
                f"expected {self.num_branches} branches, got {len(branches)}"
            )
        squeezed = [proj(_branch_stats(x, self.pooling))
                    for proj, x in zip(self.branch_proj, branches)]
        if self.variant == "bav2":
            fused = squeezed[0] * self.branch_gains[0]
            for gain, s in zip(self.branch_gains[1:], squeezed[1:]):
                fused = fused + s * gain
        else:
            fused = self.branch_norms[0](squeezed[0])
            for norm, s in zip(self.branch_norms[1:], squeezed[1:]):
                fused = fused + norm(s)
        return fused

    def generate(self, fused: Tensor) -> Tensor:
        """Turn the fused vector into channel weights in (0,1)."""
        if fused.shape[-1] != self.fused_width:
            raise ShapeError(
                f"fused width {fused.shape[-1]} != {self.fused_width}"
            )
        if self.variant == "bav2":
            fused = self.gen_norm(fused)
        return sigmoid(self.expand(relu(fused)))

    def forward(self, branches, trace: dict | None = None) -> Tensor:
        branches = list(branches)
        if trace is not None:
            squeezed = [proj(_branch_stats(x, self.pooling))
                        for proj, x in zip(self.branch_proj, branches)]
            trace["branch_features"] = [s.data.copy() for s in squeezed]
        weights = self.generate(self.integrate(branches))
        if trace is not None:
            trace["weights"] = weights.data.copy()
        return weights

    def set_identity_norms(self) -> None:
        """Freeze every internal batch norm to a bit-exact eval no-op."""
        if self.variant == "bav2":
            self.gen_norm.set_identity()
        else:
            for norm in self.branch_norms:
                norm.set_identity()


# ---------------------------------------------------------------------------
# parameter arithmetic
# ---------------------------------------------------------------------------

def attention_param_count(branch_widths, r: int, variant: str,
                          counting: str = "paper",
                          pooling: PoolingStrategy | None = None) -> int:
    """Closed-form parameter count for an attention module.

    ``paper`` counting covers only the Integration/Generation extras and
    counts one parameter per batch-norm channel: n*C_n/r for v1, n + C_n/r
    for v2, zero for squeeze-excite. ``actual`` counting enumerates every
    learnable tensor: all branch projections, the expansion, scalar gains,
    and two parameters per batch-norm channel.
    """
    if variant not in ("se", "bav1", "bav2"):
        raise ValueError(f"unknown attention variant {variant!r}")
    if counting not in ("paper", "actual"):
        raise ValueError(f"unknown counting convention {counting!r}")
    widths = tuple(int(c) for c in branch_widths)
    n = len(widths)
    out_channels = widths[-1]
    if out_channels % r != 0:
        raise ShapeError(f"reduction ratio {r} does not divide {out_channels}")
    fused = out_channels // r
    if variant == "se" and n != 1:
        raise ShapeError("squeeze-excite takes a single branch width")

    if counting == "paper":
        if variant == "se":
            return 0
        if variant == "bav1":
            return n * fused
        return n + fused

    mult = (pooling or PoolingStrategy("avg")).stat_width
    total = sum(c * mult * fused for c in widths)   # branch projections
    total += fused * out_channels                    # expansion
    if variant == "bav1":
        total += n * 2 * fused                       # per-branch BN
    elif variant == "bav2":
        total += n + 2 * fused                       # gains + generation BN
    return total
