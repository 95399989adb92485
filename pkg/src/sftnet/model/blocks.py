"""Residual building blocks: identity, strided (down), and upsampling (up).

Each block has two unbalanced parallel branches. The main branch is a
bottleneck of three convolutions (1x1 -> kxk -> 1x1) with batch norm and ReLU
between them; the shortcut branch is the identity, a strided 1x1 projection,
or an upsampled 1x1 projection. The branches are summed without a trailing
activation, so an identity block whose main branch is zeroed out is exactly
the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

BN_MOMENTUM = 0.01  # running stats decay 0.99 per batch
BN_EPS = 1e-5


@dataclass(frozen=True)
class BlockSpec:
    """Shape recipe for one residual block.

    kind: 'identity' (spatial size and channel count preserved),
    'conv-down' (spatial dims halved with ceiling rounding), or
    'deconv-up' (spatial dims doubled). channels gives the two inner widths
    and the output width.
    """

    kind: str
    channels: tuple[int, int, int]
    kernel: int = 3
    factor: int = 2

    def __post_init__(self):
        if self.kind not in ("identity", "conv-down", "deconv-up"):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.kind == "identity" and self.factor != 2:
            raise ValueError("identity blocks take no resampling factor")


def _bn(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)


class ResidualBlock(nn.Module):
    def __init__(self, spec: BlockSpec, in_channels: int):
        super().__init__()
        c1, c2, c_out = spec.channels
        if spec.kind == "identity" and in_channels != c_out:
            raise ValueError(
                f"identity block needs matching channels, got {in_channels} -> {c_out}"
            )
        self.spec = spec
        pad = spec.kernel // 2
        stride = spec.factor if spec.kind == "conv-down" else 1

        main: list[nn.Module] = []
        if spec.kind == "deconv-up":
            main.append(nn.Upsample(scale_factor=spec.factor, mode="nearest"))
        main += [
            nn.Conv2d(in_channels, c1, 1, stride=stride, bias=False),
            _bn(c1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, spec.kernel, padding=pad, bias=False),
            _bn(c2),
            nn.ReLU(inplace=True),
            nn.Conv2d(c2, c_out, 1, bias=False),
            _bn(c_out),
        ]
        self.main_branch = nn.Sequential(*main)

        if spec.kind == "identity":
            self.shortcut = nn.Identity()
        else:
            shortcut: list[nn.Module] = []
            if spec.kind == "deconv-up":
                shortcut.append(nn.Upsample(scale_factor=spec.factor, mode="nearest"))
            shortcut += [
                nn.Conv2d(in_channels, c_out, 1, stride=stride, bias=False),
                _bn(c_out),
            ]
            self.shortcut = nn.Sequential(*shortcut)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.main_branch(x) + self.shortcut(x)


def build_residual_block(spec: BlockSpec, in_channels: int | None = None) -> ResidualBlock:
    """Construct a residual block; in_channels defaults to the output width."""
    if in_channels is None:
        in_channels = spec.channels[2]
    return ResidualBlock(spec, in_channels)


def identity_block(channels: tuple[int, int, int], kernel: int = 3) -> ResidualBlock:
    return build_residual_block(BlockSpec("identity", channels, kernel))


def down_block(channels: tuple[int, int, int], in_channels: int, stride: int = 2) -> ResidualBlock:
    return build_residual_block(BlockSpec("conv-down", channels, factor=stride), in_channels)


def up_block(channels: tuple[int, int, int], in_channels: int) -> ResidualBlock:
    return build_residual_block(BlockSpec("deconv-up", channels), in_channels)


def projection_block(channels: tuple[int, int, int], in_channels: int) -> ResidualBlock:
    """Stride-1 projection: changes channel count without resampling."""
    return build_residual_block(BlockSpec("conv-down", channels, factor=1), in_channels)


class CropTo(nn.Module):
    """Center-crop to an exact spatial size (extra rows/cols removed at the end)."""

    def __init__(self, height: int, width: int):
        super().__init__()
        self.height = height
        self.width = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        dh = x.shape[-2] - self.height
        dw = x.shape[-1] - self.width
        if dh < 0 or dw < 0:
            raise ValueError(f"cannot crop {tuple(x.shape[-2:])} to {(self.height, self.width)}")
        top, left = dh // 2, dw // 2
        return x[..., top:top + self.height, left:left + self.width]


class PadTo(nn.Module):
    """Zero-pad to an exact spatial size (extra rows/cols added at the end)."""

    def __init__(self, height: int, width: int):
        super().__init__()
        self.height = height
        self.width = width

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        dh = self.height - x.shape[-2]
        dw = self.width - x.shape[-1]
        if dh < 0 or dw < 0:
            raise ValueError(f"cannot pad {tuple(x.shape[-2:])} to {(self.height, self.width)}")
        return nn.functional.pad(x, (dw // 2, dw - dw // 2, dh // 2, dh - dh // 2))
