"""Visual/text encoders, token projection, and residual feature adapters.

Two encoder plugins ship with the package: a deterministic toy encoder
(fixed random linear maps over raster patches, hashed word embeddings)
used throughout the tests, and a stub registration point for pretrained
vision-language encoders.  The text encoder is always frozen; the toy
visual encoder exposes its two projection matrices as the finetunable
stages.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, DimensionError, NumericError

DTYPE = torch.float64


@dataclass
class FeatureMap:
    """An l x l x d spatial feature grid with its pixel stride."""

    grid: torch.Tensor
    stride: float

    def __post_init__(self):
        if self.grid.dim() != 3 or self.grid.shape[0] != self.grid.shape[1]:
            raise DimensionError(f"feature grid must be l x l x d, got {tuple(self.grid.shape)}")
        if self.grid.shape[0] < 2:
            raise DimensionError("feature grid side must be >= 2")

    @property
    def side(self):
        return self.grid.shape[0]

    @property
    def dim(self):
        return self.grid.shape[2]


@dataclass
class TextFeature:
    """An m x d token sequence plus the index of its end-of-sequence token."""

    tokens: torch.Tensor
    eot_index: int

    def __post_init__(self):
        if not 0 <= self.eot_index < self.tokens.shape[0]:
            raise DimensionError("eot_index out of range")


@dataclass
class ProjectionWeights:
    """The two reused projection matrices mapping raw tokens to width d."""

    w_v: torch.Tensor
    w_o: torch.Tensor

    def __post_init__(self):
        if self.w_v.shape[1] != self.w_o.shape[0]:
            raise DimensionError(
                f"projection shapes do not compose: {tuple(self.w_v.shape)} x "
                f"{tuple(self.w_o.shape)}")


def project_image_tokens(raw, weights):
    """Project raw image tokens through both reused matrices.

    ``raw`` is an (l, l, d_raw) grid (or (l*l, d_raw), reshaped back);
    output grid = raw @ w_v @ w_o.
    """
    grid = raw.grid if isinstance(raw, FeatureMap) else raw
    stride = raw.stride if isinstance(raw, FeatureMap) else None
    if grid.dim() == 2:
        side = int(round(grid.shape[0] ** 0.5))
        if side * side != grid.shape[0]:
            raise DimensionError("token count is not a square grid")
        grid = grid.reshape(side, side, -1)
    if grid.shape[-1] != weights.w_v.shape[0]:
        raise DimensionError(
            f"token width {grid.shape[-1]} does not match projection input "
            f"{weights.w_v.shape[0]}")
    out = grid @ weights.w_v @ weights.w_o
    return FeatureMap(grid=out, stride=stride if stride is not None else 1.0)


def adapt_visual(x, adapter):
    """Residual refinement of a visual feature map: x + adapter(x)."""
    delta = adapter(x.grid)
    if delta.shape != x.grid.shape:
        raise DimensionError("adapter output shape differs from input")
    out = x.grid + delta
    if not torch.isfinite(out).all():
        raise NumericError("visual adapter produced non-finite values")
    return FeatureMap(grid=out, stride=x.stride)


def adapt_text(t, adapter):
    """Residual refinement of a text token sequence: t + adapter(t)."""
    delta = adapter(t.tokens)
    if delta.shape != t.tokens.shape:
        raise DimensionError("adapter output shape differs from input")
    out = t.tokens + delta
    if not torch.isfinite(out).all():
        raise NumericError("text adapter produced non-finite values")
    return TextFeature(tokens=out, eot_index=t.eot_index)


def pool_text(t):
    """Reduce a token sequence to one vector by selecting the EOT token.

    The adopted order is adapt-then-pool: callers adapt the full sequence
    first and pool afterwards.
    """
    return t.tokens[t.eot_index]


class VisualAdapter(nn.Module):
    """Per-cell bottleneck refinement block; final layer zero-initialized."""

    def __init__(self, dim, hidden=None):
        super().__init__()
        hidden = hidden or max(dim // 2, 1)
        self.down = nn.Linear(dim, hidden, dtype=DTYPE)
        self.up = nn.Linear(hidden, dim, dtype=DTYPE)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, grid):
        return self.up(torch.relu(self.down(grid)))


class TextAdapter(nn.Module):
    """Single self-attention block over tokens; output projection zero-initialized."""

    def __init__(self, dim):
        super().__init__()
        self.query = nn.Linear(dim, dim, dtype=DTYPE)
        self.key = nn.Linear(dim, dim, dtype=DTYPE)
        self.value = nn.Linear(dim, dim, dtype=DTYPE)
        self.out = nn.Linear(dim, dim, dtype=DTYPE)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, tokens):
        q, k, v = self.query(tokens), self.key(tokens), self.value(tokens)
        attn = torch.softmax(q @ k.T / (tokens.shape[-1] ** 0.5), dim=-1)
        return self.out(attn @ v)


def _seeded_matrix(rng, rows, cols, scale):
    return torch.tensor(rng.standard_normal((rows, cols)) * scale, dtype=DTYPE)


@lru_cache(maxsize=65536)
def _word_vector(word, dim):
    """Deterministic unit embedding for a word, stable across processes."""
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    return torch.tensor(v / np.linalg.norm(v), dtype=DTYPE)


class ToyImageEncoder(nn.Module):
    """Fixed random linear map over non-overlapping raster patches.

    encode_image(image) -> (raw token grid, ProjectionWeights).  The two
    projection matrices are registered as parameters so they can play the
    role of finetunable encoder stages; the patch embedding itself stays
    frozen.
    """

    def __init__(self, patch=8, raw_dim=32, mid_dim=32, out_dim=32, seed=0):
        super().__init__()
        self.patch = patch
        self.out_dim = out_dim
        rng = np.random.default_rng(seed)
        in_dim = patch * patch * 3
        self.register_buffer(
            "embed", _seeded_matrix(rng, in_dim, raw_dim, (1.0 / in_dim) ** 0.5))
        self.w_v = nn.Parameter(_seeded_matrix(rng, raw_dim, mid_dim, raw_dim ** -0.5))
        self.w_o = nn.Parameter(_seeded_matrix(rng, mid_dim, out_dim, mid_dim ** -0.5))

    def encode_image(self, image):
        img = torch.tensor(np.asarray(image), dtype=DTYPE)
        h, w = img.shape[0], img.shape[1]
        if h != w or h % self.patch != 0:
            raise DimensionError(
                f"toy encoder expects square images divisible by patch {self.patch}")
        side = h // self.patch
        patches = (img.reshape(side, self.patch, side, self.patch, 3)
                   .permute(0, 2, 1, 3, 4)
                   .reshape(side, side, -1))
        raw = patches @ self.embed
        return FeatureMap(grid=raw, stride=float(self.patch)), ProjectionWeights(
            w_v=self.w_v, w_o=self.w_o)

    def finetunable_parameters(self):
        # The two projection matrices stand in for the last two encoder stages.
        return [self.w_v, self.w_o]


class ToyTextEncoder:
    """Hashed bag-of-words text encoder; frozen by construction.

    Tokens are unit word embeddings; an extra EOT token holding the mean of
    the word embeddings is appended, so related sentences stay close.
    """

    def __init__(self, dim=32, seed=0):
        self.dim = dim
        self.seed = seed

    def encode_text(self, text):
        words = text.lower().split()
        if not words:
            raise NumericError("cannot encode empty text")
        vecs = [_word_vector(f"{self.seed}:{w}", self.dim) for w in words]
        eot = torch.stack(vecs).mean(dim=0)
        tokens = torch.stack(vecs + [eot])
        return TextFeature(tokens=tokens, eot_index=len(words))


@dataclass
class EncoderBundle:
    """A visual/text encoder pair with adapters and a trainability mask."""

    image_encoder: ToyImageEncoder
    text_encoder: ToyTextEncoder
    visual_adapter: VisualAdapter
    text_adapter: TextAdapter
    finetune_projection: bool = True

    def encode_image(self, image, adapted=True):
        raw, weights = self.image_encoder.encode_image(image)
        x = project_image_tokens(raw, weights)
        if adapted:
            x = adapt_visual(x, self.visual_adapter)
        return x

    def encode_text(self, text, adapted=True):
        t = self.text_encoder.encode_text(text)
        if adapted:
            t = adapt_text(t, self.text_adapter)
        return t

    def trainable_parameters(self):
        params = list(self.visual_adapter.parameters())
        params += list(self.text_adapter.parameters())
        if self.finetune_projection:
            params += self.image_encoder.finetunable_parameters()
        return params


_ENCODER_FACTORIES = {}


def register_encoder(name, factory):
    _ENCODER_FACTORIES[name] = factory


def build_encoder_bundle(name="toy", seed=0, dim=32, **kwargs):
    """Build a named encoder bundle; plugins are discovered by name."""
    if name in _ENCODER_FACTORIES:
        return _ENCODER_FACTORIES[name](seed=seed, dim=dim, **kwargs)
    if name != "toy":
        raise ConfigError(f"unknown encoder plugin: {name!r}")
    image_encoder = ToyImageEncoder(out_dim=dim, seed=seed, **kwargs)
    return EncoderBundle(
        image_encoder=image_encoder,
        text_encoder=ToyTextEncoder(dim=dim, seed=seed),
        visual_adapter=VisualAdapter(dim),
        text_adapter=TextAdapter(dim),
    )
