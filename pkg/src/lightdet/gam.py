"""Global attention gate: a channel gate followed by a spatial gate.

The channel gate runs a per-position two-layer MLP across the channel axis (no
pooling anywhere), the spatial gate a pair of 7x7 convolutions through a narrow
hidden width. Both squash through a sigmoid and multiply the feature map, so the
module can only attenuate: elementwise |output| <= |input|, and zero input stays
zero. The spatial gate reads the channel-gated map, not the raw input.
"""
from __future__ import annotations

import numpy as np

from .nn import Conv2d, ConvBnAct, Linear, Module
from .tensor import Tensor


class GAM(Module):
    def __init__(self, c: int, hidden: int | None = None, rate: int = 4, k: int = 7,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        hidden = hidden if hidden is not None else max(c // rate, 1)
        if hidden <= 0:
            raise ValueError("gate hidden width must be positive")
        self.c, self.hidden, self.k = c, hidden, k
        self.fc1 = Linear(c, hidden, rng=rng)
        self.fc2 = Linear(hidden, c, rng=rng)
        self.sp1 = ConvBnAct(c, hidden, k, act="relu", rng=rng)
        self.sp2 = Conv2d(hidden, c, k, bias=True, rng=rng)

    def channel_gate(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        t = x.transpose(0, 2, 3, 1)
        t = self.fc2(self.fc1(t).relu()).sigmoid()
        return t.transpose(0, 3, 1, 2)

    def spatial_gate(self, x: Tensor) -> Tensor:
        return self.sp2(self.sp1(x)).sigmoid()

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c:
            raise ValueError(f"expected {self.c} channels, got {x.shape[1]}")
        gated = x * self.channel_gate(x)
        return gated * self.spatial_gate(gated)

    def flops(self, hw):
        h, w = hw
        macs = 2 * h * w * self.c * self.hidden              # the two mlp layers
        macs += 2 * self.k * self.k * h * w * self.c * self.hidden  # the two convs
        return 2 * macs
