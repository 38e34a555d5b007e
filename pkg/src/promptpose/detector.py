"""Correlation, class-agnostic heatmap decoding, upsampling, and fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import DTYPE
from .errors import ConfigError, DimensionError


@dataclass
class AttentiveMap:
    grid: torch.Tensor  # l x l x d
    keypoint_id: int = 0


@dataclass
class Heatmap:
    grid: torch.Tensor  # (u*l) x (u*l)
    upsample_factor: int = 1

    def __post_init__(self):
        if self.upsample_factor < 1:
            raise ValueError("upsample factor must be >= 1")


@dataclass
class HeatmapGroup:
    modality: str
    maps: tuple  # N Heatmaps of uniform shape


@dataclass
class GaussianSpec:
    sigma_gt: float = 2.0

    def __post_init__(self):
        if self.sigma_gt <= 0:
            raise ValueError("sigma_gt must be positive")


def correlate(proto, xq):
    """Channel-wise multiplication of a prototype with the query feature map."""
    if proto.vector.shape[0] != xq.dim:
        raise DimensionError(
            f"prototype width {proto.vector.shape[0]} != feature width {xq.dim}")
    return AttentiveMap(grid=xq.grid * proto.vector, keypoint_id=proto.keypoint_id)


class HeatmapDecoder(nn.Module):
    """Two convolutional blocks mapping d channels to a single-channel map.

    One parameter set serves every keypoint and modality (class-agnostic).
    """

    def __init__(self, dim, hidden=None, kernel=3):
        super().__init__()
        hidden = hidden or max(dim // 2, 1)
        pad = kernel // 2
        self.dim = dim
        self.conv1 = nn.Conv2d(dim, hidden, kernel, padding=pad, dtype=DTYPE)
        self.conv2 = nn.Conv2d(hidden, 1, kernel, padding=pad, dtype=DTYPE)

    def forward(self, grid):
        x = grid.permute(2, 0, 1).unsqueeze(0)
        x = torch.relu(self.conv1(x))
        return self.conv2(x)[0, 0]


def decode(attentive, decoder):
    """Convert one attentive feature map into a u=1 heatmap."""
    if attentive.grid.shape[-1] != decoder.dim:
        raise ConfigError(
            f"decoder configured for {decoder.dim} channels, "
            f"got {attentive.grid.shape[-1]}")
    return Heatmap(grid=decoder(attentive.grid), upsample_factor=1)


class LearnedUpsampler(nn.Module):
    """Transposed-convolution 2x upsampler, initialized to bilinear."""

    def __init__(self):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(1, 1, 4, stride=2, padding=1, dtype=DTYPE)
        k = torch.tensor([1.0, 3.0, 3.0, 1.0], dtype=DTYPE) / 4.0
        with torch.no_grad():
            self.deconv.weight.copy_((k[:, None] * k[None, :])[None, None])
            self.deconv.bias.zero_()

    def forward(self, grid):
        return self.deconv(grid.unsqueeze(0).unsqueeze(0))[0, 0]


def upsample(h, upsampler=None, factor=2):
    """Double heatmap resolution; bilinear fallback when no module is given."""
    if h.upsample_factor != 1:
        raise ValueError("upsample expects a u=1 heatmap")
    if upsampler is not None:
        out = upsampler(h.grid)
    else:
        out = F.interpolate(h.grid.unsqueeze(0).unsqueeze(0), scale_factor=factor,
                            mode="bilinear", align_corners=False)[0, 0]
    return Heatmap(grid=out, upsample_factor=factor)


def fuse(hv, ht):
    """Elementwise mean of the two modality groups; passthrough when one absent."""
    if hv is None and ht is None:
        raise ValueError("at least one heatmap group must be present")
    if hv is None:
        return ht
    if ht is None:
        return hv
    if len(hv.maps) != len(ht.maps):
        raise DimensionError("modality groups differ in keypoint count")
    fused = []
    for a, b in zip(hv.maps, ht.maps):
        if a.grid.shape != b.grid.shape:
            raise DimensionError("modality heatmap shapes differ")
        fused.append(Heatmap(grid=(a.grid + b.grid) / 2.0,
                             upsample_factor=a.upsample_factor))
    return HeatmapGroup(modality="fused", maps=tuple(fused))


def gt_heatmap(p, spec, size, cell_size, upsample_factor=1):
    """Unnormalized Gaussian target with peak value 1 at p's cell.

    ``size`` is the heatmap side length; ``cell_size`` the pixels per
    heatmap cell.  Distances are measured in heatmap cells from the cell
    containing p.
    """
    px, py = float(p[0]), float(p[1])
    extent = size * cell_size
    if not (0 <= px < extent and 0 <= py < extent):
        raise ValueError(f"keypoint {p} lies outside the image")
    col = int(px / cell_size)
    row = int(py / cell_size)
    rows = torch.arange(size, dtype=torch.float64)
    dr = rows - row
    dc = rows - col
    grid = torch.exp(-(dr[:, None] ** 2 + dc[None, :] ** 2)
                     / (2.0 * spec.sigma_gt ** 2))
    return Heatmap(grid=grid, upsample_factor=upsample_factor)


def heatmap_to_coords(h, stride):
    """Argmax cell center in pixels; ties break to the smallest row-major index.

    ``stride`` is the feature-map stride; the effective cell size is
    stride / upsample_factor.
    """
    grid = h.grid.detach()
    flat = grid.reshape(-1)
    idx = int(torch.argmax(flat))  # torch.argmax returns the first maximum
    side = grid.shape[1]
    row, col = divmod(idx, side)
    cell = stride / h.upsample_factor
    return ((col + 0.5) * cell, (row + 0.5) * cell)


def export_heatmap(h, path):
    """Write a heatmap as a portable float grid (.npy)."""
    np.save(path, h.grid.detach().cpu().numpy())


def import_heatmap(path, upsample_factor=1):
    return Heatmap(grid=torch.tensor(np.load(path), dtype=torch.float64),
                   upsample_factor=upsample_factor)
