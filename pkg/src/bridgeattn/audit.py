"""Symbolic complexity audit for ResNet backbones with channel attention.

Counts learnable parameters and multiply-accumulate operations without
instantiating anything, layer by layer from the architecture description,
and compares the totals against stored reference cells.

Conventions (fixed here because published tables rarely state them):

* one MAC = one FLOP; convs count Cout*Cin*kh*kw*H'*W', linears Din*Dout;
* batch norm, activations, residual adds, pooling, and attention rescaling
  count one op per element touched;
* batch norm owns two learnable parameters per channel; running statistics
  are not learnable; convs are bias-free and the classifier has a bias;
* spatial extents follow the floor convention of standard strided convs;
* the ``paper`` attention-counting convention tracks only the
  integration/generation extras with one parameter per norm channel
  (n*C_n/r for v1, n + C_n/r for v2).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources

from .attention import attention_param_count

__all__ = [
    "ArchSpec",
    "StagePlan",
    "AuditReport",
    "BACKBONES",
    "ATTENTION_VARIANTS",
    "build_arch",
    "count_params",
    "count_flops",
    "audit_report",
    "load_reference_table",
    "block_param_count",
]

ATTENTION_VARIANTS = ("none", "se", "bav1", "bav2")

PARAM_TOLERANCE_PCT = 0.5
FLOPS_TOLERANCE_PCT = 2.0


@dataclass(frozen=True)
class StagePlan:
    kind: str          # "basic" | "bottleneck"
    blocks: int
    width: int         # bottleneck middle width / basic output width
    stride: int


@dataclass(frozen=True)
class ArchSpec:
    """Fully resolved symbolic description of a backbone + attention."""

    name: str
    attention: str
    r: int
    stages: tuple[StagePlan, ...]
    stem_channels: int = 64
    classes: int = 1000
    input_size: int = 224


BACKBONES: dict[str, tuple[StagePlan, ...]] = {
    "resnet18": tuple(StagePlan("basic", 2, w, s)
                      for w, s in zip((64, 128, 256, 512), (1, 2, 2, 2))),
    "resnet34": tuple(StagePlan("basic", b, w, s)
                      for b, w, s in zip((3, 4, 6, 3), (64, 128, 256, 512),
                                         (1, 2, 2, 2))),
    "resnet50": tuple(StagePlan("bottleneck", b, w, s)
                      for b, w, s in zip((3, 4, 6, 3), (64, 128, 256, 512),
                                         (1, 2, 2, 2))),
    "resnet101": tuple(StagePlan("bottleneck", b, w, s)
                       for b, w, s in zip((3, 4, 23, 3), (64, 128, 256, 512),
                                          (1, 2, 2, 2))),
}


def build_arch(backbone: str, attention: str = "none", r: int = 16) -> ArchSpec:
    if backbone not in BACKBONES:
        raise ValueError(
            f"unknown backbone {backbone!r}; choose from {sorted(BACKBONES)}"
        )
    if attention not in ATTENTION_VARIANTS:
        raise ValueError(f"unknown attention variant {attention!r}")
    return ArchSpec(name=backbone, attention=attention, r=r,
                    stages=BACKBONES[backbone])


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _expansion(kind: str) -> int:
    return 4 if kind == "bottleneck" else 1


def _branch_widths(kind: str, mid: int, out: int) -> tuple[int, ...]:
    # all-current-convs default taps: n=3 for bottleneck, n=2 for basic
    return (mid, mid, out) if kind == "bottleneck" else (out, out)


def _attention_params(kind: str, mid: int, out: int, attention: str,
                      r: int, counting: str) -> int:
    if attention == "none":
        return 0
    if attention == "se":
        return attention_param_count((out,), r, "se", counting)
    return attention_param_count(_branch_widths(kind, mid, out), r,
                                 attention, counting)


def block_param_count(kind: str, in_channels: int, mid: int, stride: int,
                      attention: str = "none", r: int = 16,
                      counting: str = "actual") -> int:
    """Learnable parameters of one residual block under either counting."""
    out = mid * _expansion(kind)
    if counting == "paper":
        return _attention_params(kind, mid, out, attention, r, "paper")
    if kind == "bottleneck":
        params = in_channels * mid + 2 * mid          # conv1 1x1 + bn
        params += mid * mid * 9 + 2 * mid             # conv2 3x3 + bn
        params += mid * out + 2 * out                 # conv3 1x1 + bn
    else:
        params = in_channels * out * 9 + 2 * out      # conv1 3x3 + bn
        params += out * out * 9 + 2 * out             # conv2 3x3 + bn
    if stride != 1 or in_channels != out:
        params += in_channels * out + 2 * out         # downsample 1x1 + bn
    params += _attention_params(kind, mid, out, attention, r, "actual")
    return params


def count_params(spec: ArchSpec) -> dict:
    """Exact parameter counts with a per-stage breakdown."""
    stem = 3 * spec.stem_channels * 49 + 2 * spec.stem_channels
    per_stage = [{"stage": "stem", "params": stem, "attention_params": 0,
                  "attention_params_paper": 0}]
    in_ch = spec.stem_channels
    for i, stage in enumerate(spec.stages, start=1):
        out = stage.width * _expansion(stage.kind)
        total = attn_actual = attn_paper = 0
        for b in range(stage.blocks):
            stride = stage.stride if b == 0 else 1
            total += block_param_count(stage.kind, in_ch, stage.width, stride,
                                       spec.attention, spec.r)
            attn_actual += _attention_params(stage.kind, stage.width, out,
                                             spec.attention, spec.r, "actual")
            attn_paper += _attention_params(stage.kind, stage.width, out,
                                            spec.attention, spec.r, "paper")
            in_ch = out
        per_stage.append({"stage": f"stage{i}", "params": total,
                          "attention_params": attn_actual,
                          "attention_params_paper": attn_paper})
    head = in_ch * spec.classes + spec.classes
    per_stage.append({"stage": "head", "params": head, "attention_params": 0,
                      "attention_params_paper": 0})
    return {
        "total": sum(s["params"] for s in per_stage),
        "attention_total": sum(s["attention_params"] for s in per_stage),
        "attention_total_paper": sum(s["attention_params_paper"]
                                     for s in per_stage),
        "per_stage": per_stage,
    }


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------

def _conv_out(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def _attention_flops_taps(taps: list[tuple[int, int, int]], out: int,
                          attention: str, r: int) -> int:
    """Ops of one attention module; taps are (channels, h, w), adjacent last."""
    if attention == "none":
        return 0
    fused = out // r
    adj_c, adj_h, adj_w = taps[-1]
    if attention == "se":
        flops = adj_c * adj_h * adj_w          # gap
        flops += out * fused + fused           # reduce + relu
        flops += fused * out + out             # expand + sigmoid
        flops += adj_c * adj_h * adj_w         # rescale
        return flops
    n = len(taps)
    flops = sum(c * hh * ww for c, hh, ww in taps)      # pooling
    flops += sum(c * fused for c, _, _ in taps)          # branch projections
    flops += n * fused + (n - 1) * fused                 # fuse (norm/gain + adds)
    if attention == "bav2":
        flops += fused                                   # generation norm
    flops += fused                                       # relu
    flops += fused * out + out                           # expand + sigmoid
    flops += adj_c * adj_h * adj_w                       # rescale
    return flops


def _block_flops(kind: str, in_ch: int, mid: int, stride: int,
                 h: int, w: int, attention: str, r: int) -> tuple[int, int, int, int]:
    """Returns (total_flops, attention_flops, h_out, w_out)."""
    out = mid * _expansion(kind)
    if kind == "bottleneck":
        h2, w2 = _conv_out(h, 3, stride, 1), _conv_out(w, 3, stride, 1)
        flops = in_ch * mid * h * w              # conv1 1x1 at input res
        flops += 2 * mid * h * w                 # bn + relu
        flops += mid * mid * 9 * h2 * w2         # conv2 3x3 (stride)
        flops += 2 * mid * h2 * w2               # bn + relu
        flops += mid * out * h2 * w2             # conv3 1x1
        flops += out * h2 * w2                   # bn3
        taps = [(mid, h, w), (mid, h2, w2), (out, h2, w2)]
    else:
        h2, w2 = _conv_out(h, 3, stride, 1), _conv_out(w, 3, stride, 1)
        flops = in_ch * out * 9 * h2 * w2        # conv1 3x3 (stride)
        flops += 2 * out * h2 * w2               # bn + relu
        flops += out * out * 9 * h2 * w2         # conv2 3x3
        flops += out * h2 * w2                   # bn2
        taps = [(out, h2, w2), (out, h2, w2)]
    if stride != 1 or in_ch != out:
        flops += in_ch * out * h2 * w2           # downsample 1x1
        flops += out * h2 * w2                   # its bn
    flops += 2 * out * h2 * w2                   # residual add + final relu
    attn = _attention_flops_taps(taps, out, attention, r)
    return flops + attn, attn, h2, w2


def count_flops(spec: ArchSpec) -> dict:
    """Multiply-accumulate count for one input image, with breakdown."""
    size = spec.input_size
    h = w = _conv_out(size, 7, 2, 3)
    stem = 3 * spec.stem_channels * 49 * h * w       # stem conv
    stem += 2 * spec.stem_channels * h * w           # bn + relu
    hp, wp = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
    stem += spec.stem_channels * hp * wp * 9         # maxpool comparisons
    per_stage = [{"stage": "stem", "flops": stem, "attention_flops": 0}]
    h, w = hp, wp
    in_ch = spec.stem_channels
    for i, stage in enumerate(spec.stages, start=1):
        total = attn_total = 0
        for b in range(stage.blocks):
            stride = stage.stride if b == 0 else 1
            flops, attn, h, w = _block_flops(stage.kind, in_ch, stage.width,
                                             stride, h, w, spec.attention,
                                             spec.r)
            total += flops
            attn_total += attn
            in_ch = stage.width * _expansion(stage.kind)
        per_stage.append({"stage": f"stage{i}", "flops": total,
                          "attention_flops": attn_total})
    head = in_ch * h * w                              # global average pool
    head += in_ch * spec.classes                      # classifier
    per_stage.append({"stage": "head", "flops": head, "attention_flops": 0})
    return {
        "total": sum(s["flops"] for s in per_stage),
        "attention_total": sum(s["attention_flops"] for s in per_stage),
        "per_stage": per_stage,
    }


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def load_reference_table(path=None) -> dict[tuple[str, str], dict]:
    """Reference cells keyed by (backbone, variant); values in M params / G MACs."""
    if path is None:
        ref = resources.files("bridgeattn").joinpath("data/table_reference.csv")
        text = ref.read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    table = {}
    for row in csv.DictReader(text.splitlines()):
        key = (row["backbone"], row["variant"])
        table[key] = {
            "params_millions": float(row["params_millions"]),
            "flops_g": float(row["flops_g"]),
        }
    return table


@dataclass
class AuditReport:
    arch: str
    attention: str
    r: int
    params_total: int
    flops_total: int
    params_paper_ref: float | None
    flops_paper_ref: float | None
    delta_pct: float | None
    flops_delta_pct: float | None
    params_pass: bool | None
    flops_pass: bool | None
    per_stage: list = field(default_factory=list)
    attention_overhead: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "attention": self.attention,
            "r": self.r,
            "params_total": self.params_total,
            "flops_total": self.flops_total,
            "params_paper_ref": self.params_paper_ref,
            "flops_paper_ref": self.flops_paper_ref,
            "delta_pct": self.delta_pct,
            "flops_delta_pct": self.flops_delta_pct,
            "params_pass": self.params_pass,
            "flops_pass": self.flops_pass,
            "per_stage": self.per_stage,
            "attention_overhead": self.attention_overhead,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @property
    def passed(self) -> bool:
        return (self.params_pass is not False) and (self.flops_pass is not False)


def audit_report(spec: ArchSpec, reference: dict | None = None) -> AuditReport:
    if reference is None:
        reference = load_reference_table()
    params = count_params(spec)
    flops = count_flops(spec)
    per_stage = []
    for p, f in zip(params["per_stage"], flops["per_stage"]):
        per_stage.append({
            "stage": p["stage"],
            "params": p["params"],
            "flops": f["flops"],
            "attention_params": p["attention_params"],
            "attention_flops": f["attention_flops"],
        })
    cell = reference.get((spec.name, spec.attention))
    delta_pct = flops_delta_pct = None
    params_pass = flops_pass = None
    params_ref = flops_ref = None
    if cell is not None:
        params_ref = cell["params_millions"]
        flops_ref = cell["flops_g"]
        delta_pct = 100.0 * (params["total"] / 1e6 - params_ref) / params_ref
        flops_delta_pct = 100.0 * (flops["total"] / 1e9 - flops_ref) / flops_ref
        params_pass = abs(delta_pct) <= PARAM_TOLERANCE_PCT
        flops_pass = abs(flops_delta_pct) <= FLOPS_TOLERANCE_PCT
    return AuditReport(
        arch=spec.name,
        attention=spec.attention,
        r=spec.r,
        params_total=params["total"],
        flops_total=flops["total"],
        params_paper_ref=params_ref,
        flops_paper_ref=flops_ref,
        delta_pct=round(delta_pct, 4) if delta_pct is not None else None,
        flops_delta_pct=(round(flops_delta_pct, 4)
                         if flops_delta_pct is not None else None),
        params_pass=params_pass,
        flops_pass=flops_pass,
        per_stage=per_stage,
        attention_overhead={
            "params_actual": params["attention_total"],
            "params_paper_counting": params["attention_total_paper"],
            "flops": flops["attention_total"],
        },
    )
