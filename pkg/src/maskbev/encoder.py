"""Trainable stand-in for the camera/lidar BEV encoder."""
from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, gelu
from .nn import ChannelNorm, Conv2d, Module
from .scenes import Observation


class EncoderStub(Module):
    """Stack of conv3x3 -> GELU -> channel LayerNorm blocks mapping C_in x H x W to C x H x W."""

    def __init__(self, c_in: int, channels: int, depth: int, rng: np.random.Generator, zero_last: bool = False):
        if depth < 1:
            raise ValueError("encoder depth must be >= 1")
        self.c_in = c_in
        self.convs = [
            Conv2d(c_in if i == 0 else channels, channels, 3, rng, zero=zero_last and i == depth - 1)
            for i in range(depth)
        ]
        self.norms = [ChannelNorm(channels) for _ in range(depth)]

    def __call__(self, obs) -> Tensor:
        x = obs.raster if isinstance(obs, Observation) else obs
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 3 or x.shape[0] != self.c_in:
            raise ShapeError(f"encoder: expected ({self.c_in}, H, W) input, got {x.shape}")
        for conv, norm in zip(self.convs, self.norms):
            x = norm(gelu(conv(x)))
        return x
