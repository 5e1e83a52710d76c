"""CSP-EfficientNet feature extractor with optional spatial attention.

The network is the EfficientNet MBConv stack.  Two switches reshape it:

* ``use_sam`` inserts a spatial-attention gate into every MBConv block,
  between squeeze-excitation and the projection conv.
* ``use_csp`` wraps stages 2-7 in a cross-stage-partial split: half of the
  stage input runs through a half-width block stack, the other half bypasses
  it, and a 1x1 transition conv fuses the concatenation.

Feature taps C3/C4/C5 are the outputs of stages 3, 5 and 7 (strides 8/16/32).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgument
from .tensor import functional as F
from .tensor.core import Tensor, concat, split
from .tensor.nn import Conv2d, ConvBNAct, Linear, Module


@dataclass(frozen=True)
class StageSpec:
    expand_ratio: int
    out_channels: int
    repeats: int
    stride: int
    kernel: int


# EfficientNet-B0 stage table
B0_STAGES = (
    StageSpec(1, 16, 1, 1, 3),
    StageSpec(6, 24, 2, 2, 3),
    StageSpec(6, 40, 2, 2, 5),
    StageSpec(6, 80, 3, 2, 3),
    StageSpec(6, 112, 3, 1, 5),
    StageSpec(6, 192, 4, 2, 5),
    StageSpec(6, 320, 1, 1, 3),
)
B0_STEM = 32

# (width_mult, depth_mult) per variant
COMPOUND_SCALING = {
    "B0": (1.0, 1.0), "B1": (1.0, 1.1), "B2": (1.1, 1.2), "B3": (1.2, 1.4),
    "B4": (1.4, 1.8), "B5": (1.6, 2.2), "B6": (1.8, 2.6), "B7": (2.0, 3.1),
}

# stage indices (0-based) whose outputs are tapped as C3, C4, C5
TAP_STAGES = {3: 2, 4: 4, 5: 6}


def round_channels(channels: float, width_mult: float, divisor: int = 8) -> int:
    c = channels * width_mult
    rounded = max(divisor, int(c + divisor / 2) // divisor * divisor)
    if rounded < 0.9 * c:
        rounded += divisor
    return rounded


def round_repeats(repeats: int, depth_mult: float) -> int:
    return max(1, int(math.ceil(depth_mult * repeats)))


@dataclass
class BackboneConfig:
    variant: str = "B0"
    use_sam: bool = True
    use_csp: bool = True
    width_mult: float | None = None
    depth_mult: float | None = None
    se_ratio: float = 0.25
    csp_split: float = 0.5
    stage_specs: tuple[StageSpec, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.variant not in COMPOUND_SCALING:
            raise InvalidArgument(f"unknown backbone variant {self.variant!r}")
        w, d = COMPOUND_SCALING[self.variant]
        if self.width_mult is None:
            self.width_mult = w
        if self.depth_mult is None:
            self.depth_mult = d
        if self.width_mult <= 0 or self.depth_mult <= 0:
            raise InvalidArgument("width/depth multipliers must be positive")
        if not self.stage_specs:
            self.stage_specs = tuple(
                replace(s, out_channels=round_channels(s.out_channels, self.width_mult),
                        repeats=round_repeats(s.repeats, self.depth_mult))
                for s in B0_STAGES)

    @property
    def stem_channels(self) -> int:
        return round_channels(B0_STEM, self.width_mult)

    def tap_channels(self) -> dict[int, int]:
        return {lvl: self.stage_specs[i].out_channels for lvl, i in TAP_STAGES.items()}


class SqueezeExcite(Module):
    def __init__(self, channels: int, squeezed: int):
        self.reduce = Conv2d(channels, squeezed, 1)
        self.expand = Conv2d(squeezed, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        s = F.pool(x, "global_avg")
        s = F.apply_activation(self.reduce(s), "swish")
        return x * F.apply_activation(self.expand(s), "sigmoid")


class SpatialAttention(Module):
    """Gate each spatial position by a 7x7 conv over channel-wise mean and max maps."""

    def __init__(self, kernel: int = 7):
        self.conv = Conv2d(2, 1, kernel)

    def gate(self, x: Tensor) -> Tensor:
        pooled = concat([F.channel_mean(x), F.channel_max(x)], axis=1)
        return F.apply_activation(self.conv(pooled), "sigmoid")

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class MBConv(Module):
    def __init__(self, in_ch: int, out_ch: int, expand_ratio: int, kernel: int, stride: int,
                 use_sam: bool, se_ratio: float = 0.25, hidden: int | None = None):
        if stride not in (1, 2):
            raise InvalidArgument(f"MBConv stride must be 1 or 2, got {stride}")
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        hidden = in_ch * expand_ratio if hidden is None else hidden
        self.hidden = hidden
        self.expand = ConvBNAct(in_ch, hidden, 1) if hidden != in_ch else None
        self.depthwise = ConvBNAct(hidden, hidden, kernel, stride, groups=hidden)
        self.se = SqueezeExcite(hidden, max(1, int(in_ch * se_ratio)))
        self.sam = SpatialAttention() if use_sam else None
        self.project = ConvBNAct(hidden, out_ch, 1, act=None)
        self.residual = stride == 1 and in_ch == out_ch

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise InvalidArgument(f"MBConv expects {self.in_ch} channels, got {x.shape[1]}")
        y = self.expand(x) if self.expand is not None else x
        y = self.se(self.depthwise(y))
        if self.sam is not None:
            y = self.sam(y)
        y = self.project(y)
        return y + x if self.residual else y


def _block_stack(in_ch: int, spec: StageSpec, use_sam: bool, se_ratio: float, out_ch: int,
                 hidden_widths: tuple[int, int] | None = None) -> list[MBConv]:
    blocks = []
    for i in range(spec.repeats):
        hidden = None if hidden_widths is None else hidden_widths[min(i, 1)]
        blocks.append(MBConv(in_ch if i == 0 else out_ch, out_ch, spec.expand_ratio, spec.kernel,
                             spec.stride if i == 0 else 1, use_sam, se_ratio, hidden))
    return blocks


class PlainStage(Module):
    def __init__(self, in_ch: int, spec: StageSpec, use_sam: bool, se_ratio: float = 0.25):
        self.blocks = _block_stack(in_ch, spec, use_sam, se_ratio, spec.out_channels)

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class CSPStage(Module):
    """Cross-stage-partial wrapper around an MBConv stack.

    The first ``split`` input channels run through a block stack of half the
    stage width; the remaining channels bypass it (average-pooled when the
    stage downsamples).  A 1x1 transition conv maps the concatenation to the
    stage's output width.  The partial blocks keep the expanded (depthwise)
    width of the full stage, so only the 1x1 expand/project convs shrink.
    """

    def __init__(self, in_ch: int, spec: StageSpec, use_sam: bool, se_ratio: float = 0.25,
                 split_ratio: float = 0.5):
        self.split = int(round(in_ch * split_ratio))
        if not 0 < self.split < in_ch:
            raise InvalidArgument(f"CSP split {split_ratio} of {in_ch} channels leaves an empty side")
        self.stride = spec.stride
        half_out = spec.out_channels // 2
        hidden = (in_ch * spec.expand_ratio, spec.out_channels * spec.expand_ratio)
        self.blocks = _block_stack(self.split, spec, use_sam, se_ratio, half_out, hidden)
        self.transition = ConvBNAct(half_out + in_ch - self.split, spec.out_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        return csp_stage(x, self.blocks, self.split, self.stride, self.transition)


def csp_stage(x: Tensor, blocks, split_at: int, stride: int, transition) -> Tensor:
    processed, bypass = split(x, split_at, axis=1)
    for b in blocks:
        processed = b(processed)
    if stride == 2:
        bypass = F.pool(bypass, "avg", 2, 2)
    return transition(concat([processed, bypass], axis=1))


class Backbone(Module):
    """EfficientNet-style trunk returning the requested feature taps.

    Stages past the deepest requested tap are not built, so a C4-only
    consumer carries no parameters that cannot receive gradient.
    """

    def __init__(self, cfg: BackboneConfig, levels=(3, 4, 5)):
        if not levels or set(levels) - set(TAP_STAGES):
            raise InvalidArgument(f"backbone taps must be a nonempty subset of {sorted(TAP_STAGES)}, got {levels}")
        self.cfg = cfg
        self.levels = tuple(sorted(levels))
        self.stem = ConvBNAct(3, cfg.stem_channels, 3, stride=2)
        stages = []
        ch = cfg.stem_channels
        last = max(TAP_STAGES[lvl] for lvl in self.levels)
        for i, spec in enumerate(cfg.stage_specs[:last + 1]):
            if cfg.use_csp and i >= 1:
                stages.append(CSPStage(ch, spec, cfg.use_sam, cfg.se_ratio, cfg.csp_split))
            else:
                stages.append(PlainStage(ch, spec, cfg.use_sam, cfg.se_ratio))
            ch = spec.out_channels
        self.stages = stages

    def forward(self, x: Tensor) -> dict[int, Tensor]:
        """Return the requested subset of {3: C3, 4: C4, 5: C5} (strides 8/16/32)."""
        h, w = x.shape[2:]
        if h % 32 or w % 32:
            raise InvalidArgument(f"input extents {h}x{w} must be divisible by 32")
        y = self.stem(x)
        taps = {}
        wanted = {TAP_STAGES[lvl]: lvl for lvl in self.levels}
        for i, stage in enumerate(self.stages):
            y = stage(y)
            if i in wanted:
                taps[wanted[i]] = y
        return taps


class Classifier(Module):
    """Backbone -> global average pool of C5 -> linear logits."""

    def __init__(self, cfg: BackboneConfig, num_classes: int):
        self.backbone = Backbone(cfg)
        self.head = Linear(cfg.tap_channels()[5], num_classes)

    def forward(self, x: Tensor) -> Tensor:
        c5 = self.backbone(x)[5]
        pooled = F.pool(c5, "global_avg")
        return self.head(pooled.reshape(pooled.shape[0], pooled.shape[1]))


def stage_macs(cfg: BackboneConfig, image_size: int = 256) -> list[int]:
    """Multiply-accumulates per stage (stem excluded), from a traced forward."""
    from .tensor import profiler
    from .tensor.core import no_grad

    model = Backbone(cfg).eval()
    out = []
    with no_grad():
        y = model.stem(Tensor(np.zeros((1, 3, image_size, image_size), dtype=np.float32)))
        for stage in model.stages:
            with profiler.count_macs() as counter:
                y = stage(y)
            out.append(counter.total)
    return out
