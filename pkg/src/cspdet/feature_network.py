"""Cross-scale feature fusion: lateral projection, FPN and NAS-FPN.

All feature networks consume the backbone taps ``{3: C3, 4: C4, 5: C5}`` and
return a dict ``{level: Tensor}`` whose tensors share one channel count, so
the detector heads never see which network produced them.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import InvalidArgument
from .tensor import functional as F
from .tensor.core import Tensor
from .tensor.nn import BatchNorm2d, Conv2d, Module

PYRAMID_LEVELS = (3, 4, 5, 6, 7)
FUSIONS = ("sum", "gattn")


@dataclass(frozen=True)
class MergingCellSpec:
    id: str
    input_a: str
    input_b: str
    target_level: int
    fusion: str


def parse_topology(text: str) -> list[MergingCellSpec]:
    cells = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6 or parts[0] != "cell":
            raise InvalidArgument(f"topology line {lineno}: expected "
                                  f"'cell <id> <a> <b> <level> <sum|gattn>', got {raw!r}")
        _, cid, a, b, level, fusion = parts
        if fusion not in FUSIONS:
            raise InvalidArgument(f"topology line {lineno}: unknown fusion {fusion!r}")
        cells.append(MergingCellSpec(cid, a, b, int(level), fusion))
    validate_topology(cells)
    return cells


def validate_topology(cells: list[MergingCellSpec]) -> dict[int, str]:
    """Check the DAG and return {level: node id} of the pyramid outputs."""
    produced = {f"P{lvl}": lvl for lvl in PYRAMID_LEVELS}
    outputs: dict[int, str] = {}
    for cell in cells:
        if cell.id in produced:
            raise InvalidArgument(f"duplicate node id {cell.id!r}")
        for ref in (cell.input_a, cell.input_b):
            if ref not in produced:
                raise InvalidArgument(f"cell {cell.id!r} references unproduced node {ref!r}")
        if cell.target_level not in PYRAMID_LEVELS:
            raise InvalidArgument(f"cell {cell.id!r} targets level {cell.target_level} outside 3..7")
        produced[cell.id] = cell.target_level
        outputs[cell.target_level] = cell.id
    missing = [lvl for lvl in PYRAMID_LEVELS if lvl not in outputs]
    if missing:
        raise InvalidArgument(f"topology produces no output for levels {missing}")
    return outputs


def load_topology(path: str | Path | None = None) -> list[MergingCellSpec]:
    if path is None:
        text = resources.files("cspdet").joinpath("topologies/nasfpn_7cell.txt").read_text()
    else:
        text = Path(path).read_text()
    return parse_topology(text)


class PyramidInputs(Module):
    """Project C3-C5 to ``channels`` and extend with P6, P7 by stride-2 convs.

    P6 and P7 are only built when C5 is among ``levels``.
    """

    def __init__(self, tap_channels: dict[int, int], channels: int, levels=(3, 4, 5)):
        self.lateral = {lvl: Conv2d(tap_channels[lvl], channels, 1) for lvl in levels}
        self.extra = ({6: Conv2d(channels, channels, 3, stride=2), 7: Conv2d(channels, channels, 3, stride=2)}
                      if 5 in levels else {})

    def forward(self, feats: dict[int, Tensor]) -> dict[int, Tensor]:
        p = {lvl: conv(feats[lvl]) for lvl, conv in self.lateral.items()}
        if self.extra:
            p[6] = self.extra[6](p[5])
            p[7] = self.extra[7](F.apply_activation(p[6], "relu"))
        return p


class FPN(Module):
    """Top-down pathway: each level adds the upsampled level above, then a 3x3 smoothing conv."""

    def __init__(self, channels: int):
        self.smooth = {lvl: Conv2d(channels, channels, 3) for lvl in PYRAMID_LEVELS}

    def forward(self, p: dict[int, Tensor]) -> dict[int, Tensor]:
        merged = {7: p[7]}
        for lvl in (6, 5, 4, 3):
            up = F.interpolate(merged[lvl + 1], p[lvl].shape[2:], "nearest")
            merged[lvl] = p[lvl] + up
        return {lvl: self.smooth[lvl](merged[lvl]) for lvl in PYRAMID_LEVELS}


def resample(x: Tensor, from_level: int, to_level: int, target_hw) -> Tensor:
    """Nearest upsample to a finer level, stride-matched max-pool to a coarser one."""
    target_hw = tuple(target_hw)
    if to_level > from_level:
        factor = 2 ** (to_level - from_level)
        if min(x.shape[2:]) >= factor:
            x = F.pool(x, "max", factor, factor)
    if tuple(x.shape[2:]) != target_hw:
        x = F.interpolate(x, target_hw, "nearest")
    return x


class MergingCell(Module):
    """Fuse two nodes at a target resolution, then ReLU -> 3x3 conv -> BatchNorm."""

    def __init__(self, spec: MergingCellSpec, channels: int):
        self.spec = spec
        self.conv = Conv2d(channels, channels, 3, bias=False)
        self.bn = BatchNorm2d(channels)

    def fuse(self, a: Tensor, a_level: int, b: Tensor, b_level: int, target_hw) -> Tensor:
        lvl = self.spec.target_level
        a = resample(a, a_level, lvl, target_hw)
        b = resample(b, b_level, lvl, target_hw)
        if self.spec.fusion == "sum":
            return a + b
        # gate the coarser input by the global context of the finer one
        if a_level > b_level:
            a, b = b, a
        gate = F.apply_activation(F.pool(a, "global_avg"), "sigmoid")
        return a + b * gate

    def forward(self, a: Tensor, a_level: int, b: Tensor, b_level: int, target_hw,
                extra: list[Tensor] = ()) -> Tensor:
        fused = self.fuse(a, a_level, b, b_level, target_hw)
        for t in extra:
            fused = fused + t
        return self.bn(self.conv(F.apply_activation(fused, "relu")))


class NASFPN(Module):
    def __init__(self, channels: int, cells: list[MergingCellSpec] | None = None):
        cells = load_topology() if cells is None else cells
        self.outputs = validate_topology(cells)
        self.cells = [MergingCell(spec, channels) for spec in cells]

    def forward(self, p: dict[int, Tensor]) -> dict[int, Tensor]:
        nodes = {f"P{lvl}": (p[lvl], lvl) for lvl in PYRAMID_LEVELS}
        consumed = {n for c in self.cells for n in (c.spec.input_a, c.spec.input_b)}
        for cell in self.cells:
            spec = cell.spec
            (a, la), (b, lb) = nodes[spec.input_a], nodes[spec.input_b]
            target_hw = p[spec.target_level].shape[2:]
            extra = []
            if self.outputs.get(spec.target_level) == spec.id:
                # output cells absorb an otherwise unused input at their level
                name = f"P{spec.target_level}"
                if name not in consumed:
                    extra.append(p[spec.target_level])
            nodes[spec.id] = (cell(a, la, b, lb, target_hw, extra), spec.target_level)
        return {lvl: nodes[node][0] for lvl, node in sorted(self.outputs.items())}


class FeatureNetwork(Module):
    """``kind`` is ``c4`` (single level, no fusion), ``fpn`` or ``nasfpn``."""

    def __init__(self, kind: str, tap_channels: dict[int, int], channels: int = 256,
                 topology: list[MergingCellSpec] | None = None):
        if kind not in ("c4", "fpn", "nasfpn"):
            raise InvalidArgument(f"unknown feature network {kind!r}")
        self.kind = kind
        self.channels = channels
        if kind == "c4":
            self.inputs = PyramidInputs(tap_channels, channels, levels=(4,))
            self.fusion = None
        else:
            self.inputs = PyramidInputs(tap_channels, channels)
            self.fusion = FPN(channels) if kind == "fpn" else NASFPN(channels, topology)

    @property
    def levels(self) -> tuple[int, ...]:
        return (4,) if self.kind == "c4" else PYRAMID_LEVELS

    def forward(self, feats: dict[int, Tensor]) -> dict[int, Tensor]:
        if self.kind == "c4":
            return {4: self.inputs.lateral[4](feats[4])}
        return self.fusion(self.inputs(feats))
