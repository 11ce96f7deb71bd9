"""Desk-scale models: a small conv net and a small transformer.

These exist to exercise every mechanism end to end (training, gradient
checks, ablations, feature-importance export) without reproducing any
full-scale backbone. The conv net is a stem plus a chain of bottleneck
blocks feeding a pooled linear head; the transformer patchifies, runs two
blocks (or one bridged stage), mean-pools tokens, and classifies.
"""

from __future__ import annotations

import numpy as np

from .attention import AttentionConfig, BridgeAttention
from .autodiff import ShapeError, Tensor, gap, relu, token_mean
from .blocks import BottleneckBlock, TransformerBlock, TransformerStage
from .nn import BatchNorm, Conv2d, Linear, Module

__all__ = ["ToyConvNet", "ToyTransformer", "build_model", "MODEL_NAMES"]

MODEL_NAMES = ("toy2", "toy4", "toy_transformer")


class ToyConvNet(Module):
    """Stem conv -> chain of bottleneck blocks -> gap -> linear head."""

    def __init__(self, *, num_blocks: int = 2, classes: int = 4,
                 stem_channels: int = 16, mid_channels: int = 8,
                 attention: AttentionConfig | None = None,
                 seed: int = 0, dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.classes = classes
        self.stem = Conv2d(3, stem_channels, 3, padding=1, rng=rng, dtype=dtype)
        self.stem_norm = BatchNorm(stem_channels, dtype=dtype)
        out_channels = mid_channels * BottleneckBlock.expansion
        self.blocks = []
        in_ch = stem_channels
        prev_ch = None
        for _ in range(num_blocks):
            self.blocks.append(BottleneckBlock(
                in_ch, mid_channels, attention=attention,
                prev_channels=prev_ch, rng=rng, dtype=dtype,
            ))
            prev_ch = out_channels
            in_ch = out_channels
        self.head = Linear(out_channels, classes, rng=rng, dtype=dtype)

    def set_attention_bypass(self, flag: bool) -> None:
        for block in self.blocks:
            block.attention_bypass = flag

    def features(self, x: Tensor, collect: list | None = None) -> Tensor:
        out = relu(self.stem_norm(self.stem(x)))
        prev_trace = None
        for block in self.blocks:
            out, trace = block.forward_trace(out, prev_trace)
            if collect is not None:
                collect.append(trace)
            prev_trace = trace
        return out

    def forward(self, x: Tensor) -> Tensor:
        return self.head(gap(self.features(x)))

    def forward_collect(self, x: Tensor):
        """Logits plus per-block bridge records for feature-importance runs."""
        traces: list[dict] = []
        logits = self.head(gap(self.features(x, collect=traces)))
        records = []
        for block, trace in zip(self.blocks, traces):
            if isinstance(block.attn, BridgeAttention):
                records.append({
                    "branch_features": trace["branch_features"],
                    "weights": trace["attn"].data.copy(),
                })
        return logits, records


class ToyTransformer(Module):
    """Patchify -> embed -> two transformer blocks -> mean-pool head."""

    def __init__(self, *, image_size: int = 16, patch: int = 8, dim: int = 32,
                 heads: int = 2, classes: int = 4,
                 integration: str | None = "ba_mlp",
                 attention: AttentionConfig | None = None,
                 seed: int = 0, dtype=np.float64):
        super().__init__()
        if image_size % patch != 0:
            raise ShapeError("image size must be a multiple of the patch size")
        rng = np.random.default_rng(seed)
        self.patch = patch
        self.tokens = (image_size // patch) ** 2
        self.classes = classes
        self.embed = Linear(3 * patch * patch, dim, rng=rng, dtype=dtype)
        if integration == "ba_stage":
            self.stage = TransformerStage(dim, heads, attention=attention,
                                          rng=rng, dtype=dtype)
            self.blocks = []
        else:
            self.stage = None
            self.blocks = [
                TransformerBlock(dim, heads, integration=integration,
                                 attention=attention, rng=rng, dtype=dtype)
                for _ in range(2)
            ]
        self.head = Linear(dim, classes, rng=rng, dtype=dtype)

    def set_attention_bypass(self, flag: bool) -> None:
        if self.stage is not None:
            self.stage.attention_bypass = flag
        for block in self.blocks:
            block.attention_bypass = flag

    def _patchify(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        p = self.patch
        gh, gw = h // p, w // p
        tokens = x.reshape(n, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
        return tokens.reshape(n, gh * gw, c * p * p)

    def forward(self, x: Tensor) -> Tensor:
        out = self.embed(self._patchify(x))
        if self.stage is not None:
            out = self.stage(out)
        else:
            for block in self.blocks:
                out = block(out)
        return self.head(token_mean(out))


def build_model(name: str, *, classes: int = 4,
                attention: AttentionConfig | None = None,
                integration: str | None = "ba_mlp",
                seed: int = 0, dtype=np.float64) -> Module:
    if name == "toy2":
        return ToyConvNet(num_blocks=2, classes=classes, attention=attention,
                          seed=seed, dtype=dtype)
    if name == "toy4":
        return ToyConvNet(num_blocks=4, classes=classes, attention=attention,
                          seed=seed, dtype=dtype)
    if name == "toy_transformer":
        return ToyTransformer(classes=classes, attention=attention,
                              integration=integration, seed=seed, dtype=dtype)
    raise ValueError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
