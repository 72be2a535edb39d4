"""Small convolutional feature extractor standing in for a pretrained backbone."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from pmcr.core import DTYPE, Rng, as_tensor
from pmcr.errors import IndivisibleDims


class Encoder(nn.Module):
    """``H x W x 3`` image to ``D_l x H/s x W/s`` features, ``s`` the stride product.

    3x3 convolutions with leaky-ReLU between layers; the last layer is linear.
    Weights are drawn uniformly in ``+-1/sqrt(fan_in)`` from a seeded stream.
    """

    def __init__(self, out_dim: int = 32, hidden: Sequence[int] = (16, 32), strides: Sequence[int] = (2, 2, 1),
                 in_channels: int = 3, kernel_size: int = 3, negative_slope: float = 0.1, seed: int = 0):
        super().__init__()
        if len(strides) != len(hidden) + 1:
            raise ValueError("need one stride per layer")
        chans = [in_channels, *hidden, out_dim]
        rng = Rng(seed)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for cin, cout in zip(chans[:-1], chans[1:]):
            bound = 1.0 / math.sqrt(cin * kernel_size * kernel_size)
            w = rng.uniform(-bound, bound, size=(cout, cin, kernel_size, kernel_size))
            b = rng.uniform(-bound, bound, size=(cout,))
            self.weights.append(nn.Parameter(torch.as_tensor(w, dtype=DTYPE)))
            self.biases.append(nn.Parameter(torch.as_tensor(b, dtype=DTYPE)))
        self.strides = tuple(int(s) for s in strides)
        self.negative_slope = negative_slope
        self.padding = kernel_size // 2

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    def forward(self, image) -> torch.Tensor:
        x = as_tensor(image)
        batched = x.ndim == 4
        if not batched:
            x = x[None]
        h, w = x.shape[1], x.shape[2]
        s = self.total_stride
        if h % s or w % s:
            raise IndivisibleDims(f"image {h}x{w} not divisible by stride product {s}")
        x = x.permute(0, 3, 1, 2)
        last = len(self.weights) - 1
        for i, (wt, b, st) in enumerate(zip(self.weights, self.biases, self.strides)):
            x = F.conv2d(x, wt, b, stride=st, padding=self.padding)
            if i < last:
                x = F.leaky_relu(x, self.negative_slope)
        return x if batched else x[0]


def encode(image, params: Encoder) -> torch.Tensor:
    return params(image)
