"""RPN, box and mask heads."""
from __future__ import annotations

import numpy as np

from ..tensor import functional as F
from ..tensor.core import Tensor, concat
from ..tensor.nn import Conv2d, ConvTranspose2d, Linear, Module


class RPNHead(Module):
    """Shared 3x3 conv and two 1x1 predictors, applied to every pyramid level."""

    def __init__(self, channels: int, anchors_per_location: int):
        self.conv = Conv2d(channels, channels, 3, init_std=0.01)
        self.objectness = Conv2d(channels, anchors_per_location, 1, init_std=0.01)
        self.deltas = Conv2d(channels, 4 * anchors_per_location, 1, init_std=0.01)
        self.num_anchors = anchors_per_location

    def forward(self, pyramid: dict[int, Tensor]) -> tuple[Tensor, Tensor]:
        """Return objectness (N, A_total) and deltas (N, A_total, 4) in anchor order."""
        logits, deltas = [], []
        a = self.num_anchors
        for lvl in sorted(pyramid):
            t = F.apply_activation(self.conv(pyramid[lvl]), "relu")
            n, _, h, w = t.shape
            logits.append(self.objectness(t).transpose(0, 2, 3, 1).reshape(n, h * w * a))
            d = self.deltas(t).reshape(n, a, 4, h, w).transpose(0, 3, 4, 1, 2)
            deltas.append(d.reshape(n, h * w * a, 4))
        if len(logits) == 1:
            return logits[0], deltas[0]
        return concat(logits, axis=1), concat(deltas, axis=1)


class BoxHead(Module):
    """Two shared fully connected layers, then class logits and per-class deltas."""

    def __init__(self, channels: int, pool_size: int, dim: int, num_classes: int):
        self.fc1 = Linear(channels * pool_size * pool_size, dim)
        self.fc2 = Linear(dim, dim)
        self.cls = Linear(dim, num_classes + 1, init_std=0.01)
        self.reg = Linear(dim, 4 * num_classes, init_std=0.001)

    def forward(self, roi_feats: Tensor) -> tuple[Tensor, Tensor]:
        x = roi_feats.reshape(roi_feats.shape[0], -1)
        x = F.apply_activation(self.fc1(x), "relu")
        x = F.apply_activation(self.fc2(x), "relu")
        return self.cls(x), self.reg(x)


class MaskHead(Module):
    """Four 3x3 convs, a 2x deconvolution and a 1x1 per-class predictor."""

    def __init__(self, channels: int, dim: int, num_classes: int, num_convs: int = 4):
        convs = []
        for i in range(num_convs):
            convs.append(Conv2d(channels if i == 0 else dim, dim, 3))
        self.convs = convs
        self.deconv = ConvTranspose2d(dim, dim, 2)
        self.predictor = Conv2d(dim, num_classes, 1, init_std=0.001)

    def forward(self, roi_feats: Tensor) -> Tensor:
        x = roi_feats
        for conv in self.convs:
            x = F.apply_activation(conv(x), "relu")
        x = F.apply_activation(self.deconv(x), "relu")
        return self.predictor(x)

    def zero_(self) -> None:
        for p in self.parameters():
            p.data[...] = 0


def softmax_scores(class_logits: Tensor) -> np.ndarray:
    return F.softmax(class_logits.data, axis=1)
