"""Network blocks with attention wired in.

Residual blocks (basic and bottleneck) tap their internal conv outputs as
bridge branches; the tap list is configurable so earlier blocks' features
or attention weights can feed the current module. Transformer blocks
support four integration styles: the bridge module over the two MLP
projections (``ba_mlp``), squeeze-excite on the second projection
(``se_mlp``), bridging the self-attention and MLP sublayers
(``ba_block``), and a stage wrapper bridging two whole blocks
(``ba_stage``).

Forward passes can return an execution trace (per call, never shared) so
a following block can tap this block's tensors and so feature-importance
analysis can read the branch statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, BridgeAttention, SqueezeExcite
from .autodiff import ShapeError, Tensor, channel_scale, relu, token_mean
from .nn import BatchNorm, Conv2d, LayerNorm, Linear, Module, MultiHeadSelfAttention

__all__ = [
    "TAP_POINTS",
    "BridgeSourceConfig",
    "BlockSpec",
    "MissingPredecessorError",
    "bridge_tap",
    "BasicBlock",
    "BottleneckBlock",
    "TransformerBlock",
    "TransformerStage",
    "build_block",
    "DEFAULT_SOURCES",
]

TAP_POINTS = ("prev_attn", "prev_conv3", "prev_end", "curr_conv1", "curr_conv2")

DEFAULT_SOURCES = {
    "bottleneck": ("curr_conv1", "curr_conv2"),
    "basic": ("curr_conv1",),
}


class MissingPredecessorError(ValueError):
    """A prev_* tap was requested on a block with no predecessor trace."""


@dataclass(frozen=True)
class BridgeSourceConfig:
    """Ordered extra taps feeding the bridge module.

    The adjacent layer (the block's last conv output, which the attention
    rescales) is always appended as the final branch; with no extra
    sources the bridge degenerates to squeeze-excite topology.
    """

    sources: tuple[str, ...] = ()

    def __post_init__(self):
        for s in self.sources:
            if s not in TAP_POINTS:
                raise ValueError(f"unknown tap point {s!r}")

    @property
    def needs_prev(self) -> bool:
        return any(s.startswith("prev_") for s in self.sources)

    def branch_widths(self, mid_channels: int, out_channels: int,
                      prev_channels: int | None) -> tuple[int, ...]:
        widths = []
        for s in self.sources:
            if s.startswith("prev_"):
                if prev_channels is None:
                    raise ShapeError(
                        f"tap {s!r} needs the predecessor's output width"
                    )
                widths.append(prev_channels)
            else:
                widths.append(mid_channels)
        widths.append(out_channels)
        return tuple(widths)


def bridge_tap(trace: dict, prev_trace: dict | None,
               sources: tuple[str, ...]) -> list[Tensor]:
    """Collect tap tensors in declared order.

    ``trace`` holds the current block's conv outputs so far; attention-
    weight taps return the predecessor's weights reshaped to [N,C,1,1].
    """
    taps = []
    for s in sources:
        if s.startswith("prev_"):
            if prev_trace is None:
                raise MissingPredecessorError(
                    f"tap {s!r} requested on the first block of a chain"
                )
            if s == "prev_attn":
                w = prev_trace.get("attn")
                if w is None:
                    raise ShapeError("predecessor has no attention weights")
                taps.append(w.reshape(w.shape[0], w.shape[1], 1, 1))
            elif s == "prev_conv3":
                taps.append(prev_trace["conv3"])
            else:
                taps.append(prev_trace["end"])
        elif s == "curr_conv1":
            taps.append(trace["conv1"])
        else:
            taps.append(trace["conv2"])
    return taps


def _make_attention(cfg: AttentionConfig | None, src: BridgeSourceConfig,
                    mid_channels: int, out_channels: int,
                    prev_channels: int | None, rng, dtype):
    if cfg is None:
        return None
    if cfg.variant == "se":
        if cfg.sources:
            raise ValueError("squeeze-excite takes no bridge sources")
        return SqueezeExcite(out_channels, cfg.r, rng=rng, dtype=dtype)
    widths = src.branch_widths(mid_channels, out_channels, prev_channels)
    return BridgeAttention(widths, cfg.r, variant=cfg.variant,
                           pooling=cfg.pooling, rng=rng, dtype=dtype)


class _ResidualBlock(Module):
    """Shared plumbing for the two conv block kinds."""

    def __init__(self):
        super().__init__()
        self.attention_bypass = False

    def _shortcut(self, x: Tensor) -> Tensor:
        if self.downsample is None:
            return x
        return self.down_norm(self.downsample(x))

    def _apply_attention(self, adjacent: Tensor, trace: dict,
                         prev_trace: dict | None) -> Tensor:
        trace["attn"] = None
        if self.attn is None or self.attention_bypass:
            return adjacent
        if isinstance(self.attn, SqueezeExcite):
            weights = self.attn(adjacent)
        else:
            taps = bridge_tap(trace, prev_trace, self.source_cfg.sources)
            taps.append(adjacent)
            subtrace: dict = {}
            weights = self.attn(taps, trace=subtrace)
            trace["branch_features"] = subtrace["branch_features"]
        trace["attn"] = weights
        return channel_scale(adjacent, weights)

    def forward(self, x: Tensor, prev_trace: dict | None = None) -> Tensor:
        out, _ = self.forward_trace(x, prev_trace)
        return out


class BottleneckBlock(_ResidualBlock):
    """1x1 reduce, 3x3 (stride), 1x1 expand-by-4 residual unit.

    The bridge taps the three stage outputs by default (n=3) and rescales
    the last one before the shortcut add.
    """

    expansion = 4

    def __init__(self, in_channels: int, mid_channels: int, *,
                 stride: int = 1, attention: AttentionConfig | None = None,
                 prev_channels: int | None = None,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        out_channels = mid_channels * self.expansion
        self.in_channels = in_channels
        self.mid_channels = mid_channels
        self.out_channels = out_channels
        self.stride = stride
        self.conv1 = Conv2d(in_channels, mid_channels, 1, rng=rng, dtype=dtype)
        self.norm1 = BatchNorm(mid_channels, dtype=dtype)
        self.conv2 = Conv2d(mid_channels, mid_channels, 3, stride=stride,
                            padding=1, rng=rng, dtype=dtype)
        self.norm2 = BatchNorm(mid_channels, dtype=dtype)
        self.conv3 = Conv2d(mid_channels, out_channels, 1, rng=rng, dtype=dtype)
        self.norm3 = BatchNorm(out_channels, dtype=dtype)
        if stride != 1 or in_channels != out_channels:
            self.downsample = Conv2d(in_channels, out_channels, 1,
                                     stride=stride, rng=rng, dtype=dtype)
            self.down_norm = BatchNorm(out_channels, dtype=dtype)
        else:
            self.downsample = None
        if attention is not None and attention.variant != "se":
            self.source_cfg = BridgeSourceConfig(
                attention.sources if attention.sources is not None
                else DEFAULT_SOURCES["bottleneck"]
            )
        else:
            self.source_cfg = BridgeSourceConfig(())
        self.attn = _make_attention(attention, self.source_cfg, mid_channels,
                                    out_channels, prev_channels, rng, dtype)

    def forward_trace(self, x: Tensor, prev_trace: dict | None = None):
        trace: dict = {}
        trace["conv1"] = relu(self.norm1(self.conv1(x)))
        trace["conv2"] = relu(self.norm2(self.conv2(trace["conv1"])))
        trace["conv3"] = self.norm3(self.conv3(trace["conv2"]))
        scaled = self._apply_attention(trace["conv3"], trace, prev_trace)
        out = relu(scaled + self._shortcut(x))
        trace["end"] = out
        return out, trace


class BasicBlock(_ResidualBlock):
    """Two 3x3 convs; the bridge taps both outputs (n=2) by default."""

    expansion = 1

    def __init__(self, in_channels: int, out_channels: int, *,
                 stride: int = 1, attention: AttentionConfig | None = None,
                 prev_channels: int | None = None,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.in_channels = in_channels
        self.mid_channels = out_channels
        self.out_channels = out_channels
        self.stride = stride
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride=stride,
                            padding=1, rng=rng, dtype=dtype)
        self.norm1 = BatchNorm(out_channels, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, padding=1,
                            rng=rng, dtype=dtype)
        self.norm2 = BatchNorm(out_channels, dtype=dtype)
        if stride != 1 or in_channels != out_channels:
            self.downsample = Conv2d(in_channels, out_channels, 1,
                                     stride=stride, rng=rng, dtype=dtype)
            self.down_norm = BatchNorm(out_channels, dtype=dtype)
        else:
            self.downsample = None
        if attention is not None and attention.variant != "se":
            sources = (attention.sources if attention.sources is not None
                       else DEFAULT_SOURCES["basic"])
            if "curr_conv2" in sources:
                raise ValueError("a basic block's conv2 is the adjacent layer")
            self.source_cfg = BridgeSourceConfig(sources)
        else:
            self.source_cfg = BridgeSourceConfig(())
        self.attn = _make_attention(attention, self.source_cfg, out_channels,
                                    out_channels, prev_channels, rng, dtype)

    def forward_trace(self, x: Tensor, prev_trace: dict | None = None):
        trace: dict = {}
        trace["conv1"] = relu(self.norm1(self.conv1(x)))
        trace["conv2"] = self.norm2(self.conv2(trace["conv1"]))
        # the second conv doubles as the bottleneck-style "conv3" tap
        trace["conv3"] = trace["conv2"]
        scaled = self._apply_attention(trace["conv2"], trace, prev_trace)
        out = relu(scaled + self._shortcut(x))
        trace["end"] = out
        return out, trace


TRANSFORMER_INTEGRATIONS = ("ba_mlp", "se_mlp", "ba_block", "ba_stage")


class TransformerBlock(Module):
    """Pre-norm transformer block with optional channel attention in the MLP.

    ``ba_mlp`` bridges the two MLP projections (token-pooled) and rescales
    the second one before its residual add; ``se_mlp`` gates the second
    projection alone; ``ba_block`` bridges the self-attention sublayer
    output with the MLP output. ``integration=None`` is a plain block.
    """

    def __init__(self, dim: int, heads: int, *, mlp_ratio: int = 4,
                 integration: str | None = "ba_mlp",
                 attention: AttentionConfig | None = None,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if integration is not None and integration not in (
                "ba_mlp", "se_mlp", "ba_block"):
            raise ValueError(f"unknown integration variant {integration!r}")
        self.dim = dim
        self.integration = integration
        self.attention_bypass = False
        hidden = dim * mlp_ratio
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.self_attn = MultiHeadSelfAttention(dim, heads, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng=rng, dtype=dtype)
        cfg = attention or AttentionConfig(variant="bav2")
        if integration in ("ba_mlp", "ba_block") and cfg.variant == "se":
            raise ValueError(f"{integration} integration needs a bridge variant")
        if integration == "ba_mlp":
            self.attn = BridgeAttention((hidden, dim), cfg.r,
                                        variant=cfg.variant, rng=rng, dtype=dtype)
        elif integration == "ba_block":
            self.attn = BridgeAttention((dim, dim), cfg.r,
                                        variant=cfg.variant, rng=rng, dtype=dtype)
        elif integration == "se_mlp":
            self.attn = SqueezeExcite(dim, cfg.r, rng=rng, dtype=dtype)
        else:
            self.attn = None

    def forward(self, x: Tensor) -> Tensor:
        attn_out = self.self_attn(self.norm1(x))
        x = x + attn_out
        h1 = relu(self.fc1(self.norm2(x)))
        h2 = self.fc2(h1)
        if self.attn is not None and not self.attention_bypass:
            if self.integration == "ba_mlp":
                weights = self.attn([h1, h2])
            elif self.integration == "ba_block":
                weights = self.attn([attn_out, h2])
            else:
                weights = self.attn.weights_from_stats(token_mean(h2))
            h2 = channel_scale(h2, weights)
        return x + h2


class TransformerStage(Module):
    """Two plain blocks bridged at stage level: the module taps both block
    outputs and rescales the second block's output."""

    def __init__(self, dim: int, heads: int, *, mlp_ratio: int = 4,
                 attention: AttentionConfig | None = None,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        cfg = attention or AttentionConfig(variant="bav2")
        if cfg.variant == "se":
            raise ValueError("stage-level integration needs a bridge variant")
        self.blocks = [
            TransformerBlock(dim, heads, mlp_ratio=mlp_ratio, integration=None,
                             rng=rng, dtype=dtype)
            for _ in range(2)
        ]
        self.attn = BridgeAttention((dim, dim), cfg.r, variant=cfg.variant,
                                    rng=rng, dtype=dtype)
        self.attention_bypass = False

    def forward(self, x: Tensor) -> Tensor:
        y1 = self.blocks[0](x)
        y2 = self.blocks[1](y1)
        if self.attention_bypass:
            return y2
        return channel_scale(y2, self.attn([y1, y2]))


# ---------------------------------------------------------------------------
# spec-driven construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockSpec:
    """Declarative description of a single block, for harness builders."""

    kind: str                      # "basic" | "bottleneck" | "transformer"
    in_channels: int = 0
    mid_channels: int = 0          # bottleneck width; basic/transformer ignore
    out_channels: int = 0
    stride: int = 1
    attention: AttentionConfig | None = None
    integration: str | None = None  # transformer only
    heads: int = 2

    def __post_init__(self):
        if self.kind not in ("basic", "bottleneck", "transformer"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.kind == "bottleneck" and self.out_channels:
            if self.out_channels != 4 * self.mid_channels:
                raise ValueError("bottleneck output width must be 4x its middle")


def build_block(spec: BlockSpec, *, prev_channels: int | None = None,
                rng: np.random.Generator, dtype=np.float64):
    if spec.kind == "bottleneck":
        return BottleneckBlock(spec.in_channels, spec.mid_channels,
                               stride=spec.stride, attention=spec.attention,
                               prev_channels=prev_channels, rng=rng, dtype=dtype)
    if spec.kind == "basic":
        return BasicBlock(spec.in_channels, spec.out_channels,
                          stride=spec.stride, attention=spec.attention,
                          prev_channels=prev_channels, rng=rng, dtype=dtype)
    if spec.integration == "ba_stage":
        return TransformerStage(spec.out_channels, spec.heads,
                                attention=spec.attention, rng=rng, dtype=dtype)
    return TransformerBlock(spec.out_channels, spec.heads,
                            integration=spec.integration,
                            attention=spec.attention, rng=rng, dtype=dtype)
