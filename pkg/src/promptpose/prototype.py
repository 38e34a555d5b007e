"""Visual and textual keypoint prototypes and the unified prototype set."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import NumericError, PromptPoseError


class OrderingError(PromptPoseError):
    """Raised when visual and textual prototype lists disagree on ordering."""


@dataclass
class VKR:
    """Gaussian-pooled feature vector at one support keypoint."""

    vector: torch.Tensor
    source: tuple = (0, 0)  # (support index, keypoint index)


@dataclass
class Prototype:
    vector: torch.Tensor
    modality: str  # "visual" | "textual"
    keypoint_id: int


@dataclass
class PrototypeSet:
    """Union of visual and textual prototypes over a shared keypoint ordering."""

    visual: tuple = ()
    textual: tuple = ()
    ordering: tuple = field(default_factory=tuple)

    def __iter__(self):
        return iter(self.visual + self.textual)

    @property
    def modalities(self):
        active = []
        if self.visual:
            active.append("visual")
        if self.textual:
            active.append("textual")
        return tuple(active)


def gaussian_weights(side, center_cell, sigma):
    """Normalized Gaussian over an (side x side) grid, in grid coordinates.

    ``center_cell`` is a continuous (row, col) position; weights sum to 1.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rows = torch.arange(side, dtype=torch.float64)
    dr = rows - center_cell[0]
    dc = rows - center_cell[1]
    w = torch.exp(-(dr[:, None] ** 2 + dc[None, :] ** 2) / (2.0 * sigma ** 2))
    total = w.sum()
    if total <= 0:
        raise NumericError("degenerate Gaussian weights")
    return w / total


def extract_vkr(x, p, sigma, source=(0, 0)):
    """Pool the feature map around a keypoint with normalized Gaussian weights.

    ``p`` is an (x, y) pixel position mapped continuously into grid
    coordinates via the feature stride (no rounding before weighting).
    """
    px, py = float(p[0]), float(p[1])
    extent = x.side * x.stride
    if not (0 <= px < extent and 0 <= py < extent):
        raise ValueError(f"keypoint {p} lies outside the image")
    center = (py / x.stride - 0.5, px / x.stride - 0.5)
    w = gaussian_weights(x.side, center, sigma)
    vector = (x.grid * w[:, :, None]).sum(dim=(0, 1))
    return VKR(vector=vector, source=source)


def build_vkp(vkrs, keypoint_id=0):
    """Average the VKRs of one keypoint across supports."""
    if not vkrs:
        raise ValueError("cannot build a prototype from an empty VKR list")
    stacked = torch.stack([v.vector for v in vkrs])
    return Prototype(vector=stacked.mean(dim=0), modality="visual",
                     keypoint_id=keypoint_id)


def build_tkp(texts, keypoint_id=0):
    """Average pooled text vectors for one keypoint."""
    if not texts:
        raise ValueError("cannot build a prototype from an empty text list")
    stacked = torch.stack(list(texts))
    return Prototype(vector=stacked.mean(dim=0), modality="textual",
                     keypoint_id=keypoint_id)


def assemble(visual, textual):
    """Unify per-modality prototype lists into one set with a shared ordering."""
    visual, textual = tuple(visual), tuple(textual)
    if not visual and not textual:
        raise ValueError("at least one modality must be non-empty")
    if visual and textual:
        v_ids = tuple(p.keypoint_id for p in visual)
        t_ids = tuple(p.keypoint_id for p in textual)
        if v_ids != t_ids:
            raise OrderingError(f"modality orderings differ: {v_ids} vs {t_ids}")
    ordering = tuple(p.keypoint_id for p in (visual or textual))
    return PrototypeSet(visual=visual, textual=textual, ordering=ordering)
