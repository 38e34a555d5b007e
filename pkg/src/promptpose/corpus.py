"""Dataset model, species/keypoint splits, and episodic sampling.

The canonical on-disk format is a single JSON manifest per dataset (see
``load_dataset``).  Datasets are immutable after load; all sampling is a
pure function of (dataset, config, seed).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ManifestError, SamplingError, SchemaError

DEFAULT_TEXT_TEMPLATE = "the {keypoint} of a {category} in the photo"


@dataclass(frozen=True)
class KeypointSchema:
    """Ordered keypoint names plus the base/novel split and symmetry pairs."""

    names: tuple
    base_ids: frozenset
    novel_ids: frozenset
    symmetry_pairs: tuple = ()

    def __post_init__(self):
        all_ids = set(range(len(self.names)))
        if set(self.base_ids) & set(self.novel_ids):
            raise SchemaError("base and novel keypoint ids overlap")
        if set(self.base_ids) | set(self.novel_ids) != all_ids:
            raise SchemaError("base and novel ids do not cover all keypoints")
        for left, right in self.symmetry_pairs:
            if left not in all_ids or right not in all_ids:
                raise SchemaError(f"symmetry pair ({left}, {right}) out of range")

    def __len__(self):
        return len(self.names)

    @classmethod
    def from_dict(cls, d):
        return cls(
            names=tuple(d["names"]),
            base_ids=frozenset(d["base"]),
            novel_ids=frozenset(d["novel"]),
            symmetry_pairs=tuple(tuple(p) for p in d.get("symmetry", [])),
        )

    def to_dict(self):
        return {
            "names": list(self.names),
            "base": sorted(self.base_ids),
            "novel": sorted(self.novel_ids),
            "symmetry": [list(p) for p in self.symmetry_pairs],
        }


@dataclass(frozen=True)
class Instance:
    """One annotated image: keypoints are per-schema-slot (x, y, visible)."""

    image_ref: str
    species: str
    bbox: tuple  # (x, y, w, h) in pixels
    keypoints: tuple  # ((x, y, v), ...) aligned with the schema
    mask_ref: str | None = None

    def visible_ids(self):
        return frozenset(i for i, (_, _, v) in enumerate(self.keypoints) if v)


@dataclass(frozen=True)
class Episode:
    """K support instances plus one query of the same species.

    K = 0 is the zero-shot case and requires texts; keypoint_ids are the
    schema indices visible in every episode member.
    """

    species: str
    supports: tuple
    query: Instance
    keypoint_ids: tuple
    texts: tuple

    def __post_init__(self):
        if len(self.supports) == 0 and not self.texts:
            raise SamplingError("zero-shot episode requires texts")
        if not self.keypoint_ids:
            raise SamplingError("episode has no keypoints")


@dataclass(frozen=True)
class EpisodePair:
    first: Episode
    second: Episode

    def __post_init__(self):
        if self.first.species == self.second.species:
            raise SamplingError("episode pair must span two species")
        if self.first.keypoint_ids != self.second.keypoint_ids:
            raise SamplingError("episode pair keypoint orderings differ")


@dataclass(frozen=True)
class SplitConfig:
    train_species: frozenset
    val_species: frozenset = frozenset()
    test_species: frozenset = frozenset()
    keypoint_split: str = "default"

    def __post_init__(self):
        if (self.train_species & self.val_species
                or self.train_species & self.test_species
                or self.val_species & self.test_species):
            raise ConfigError("species sets must be pairwise disjoint")


@dataclass(frozen=True)
class Dataset:
    schema: KeypointSchema
    instances: tuple
    root: str = "."
    by_species: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        grouped = {}
        for inst in self.instances:
            grouped.setdefault(inst.species, []).append(inst)
        object.__setattr__(self, "by_species", {s: tuple(v) for s, v in grouped.items()})

    @property
    def species(self):
        return sorted(self.by_species)

    def __len__(self):
        return len(self.instances)


def load_dataset(path, schema=None):
    """Load a canonical JSON manifest into a validated Dataset.

    The manifest carries its own schema block; a ``schema`` argument, when
    given, must agree with it.  Every instance record is checked for the
    right keypoint count; errors name the offending record index.
    """
    with open(path) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise ManifestError(f"manifest is not valid JSON: {e}") from e
    if "schema" not in manifest or "instances" not in manifest:
        raise ManifestError("manifest must contain 'schema' and 'instances'")
    file_schema = KeypointSchema.from_dict(manifest["schema"])
    if schema is not None and schema.names != file_schema.names:
        raise SchemaError("supplied schema disagrees with manifest schema")
    schema = schema or file_schema

    instances = []
    for idx, rec in enumerate(manifest["instances"]):
        try:
            kps = tuple((float(x), float(y), int(v)) for x, y, v in rec["keypoints"])
            bbox = tuple(float(b) for b in rec["bbox"])
            inst = Instance(
                image_ref=rec["image"],
                species=rec["species"],
                bbox=bbox,
                keypoints=kps,
                mask_ref=rec.get("mask"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"malformed instance record {idx}: {e}") from e
        if len(inst.keypoints) != len(schema):
            raise SchemaError(
                f"instance record {idx} has {len(inst.keypoints)} keypoints, "
                f"schema expects {len(schema)}")
        if inst.bbox[2] <= 0 or inst.bbox[3] <= 0:
            raise ManifestError(f"instance record {idx} has non-positive bbox")
        instances.append(inst)
    return Dataset(schema=schema, instances=tuple(instances),
                   root=os.path.dirname(os.path.abspath(path)))


def split_dataset(ds, cfg):
    """Partition a dataset by species into (train, val, test)."""
    named = cfg.train_species | cfg.val_species | cfg.test_species
    unknown = named - set(ds.by_species)
    if unknown:
        raise ConfigError(f"unknown species in split config: {sorted(unknown)}")

    def take(species_set):
        kept = tuple(i for i in ds.instances if i.species in species_set)
        return Dataset(schema=ds.schema, instances=kept, root=ds.root)

    return take(cfg.train_species), take(cfg.val_species), take(cfg.test_species)


def _common_visible(instances, allowed_ids=None):
    common = None
    for inst in instances:
        vis = inst.visible_ids()
        common = vis if common is None else common & vis
    if common is None:
        return frozenset()
    if allowed_ids is not None:
        common = common & frozenset(allowed_ids)
    return common


def synthesize_texts(schema, keypoint_ids, species, template=DEFAULT_TEXT_TEMPLATE):
    """Render simple text prompts for the given keypoint ids."""
    return tuple(template.format(keypoint=schema.names[i], category=species)
                 for i in keypoint_ids)


def sample_episode(ds, K, N_max, rng, allowed_ids=None, template=DEFAULT_TEXT_TEMPLATE,
                   species=None):
    """Sample one episode: K supports + 1 query of a shared species.

    Keypoint ids are exactly those visible in all K+1 instances (optionally
    restricted to ``allowed_ids``), truncated to N_max.  Deterministic given
    the generator state.
    """
    candidates = [s for s in ds.species if len(ds.by_species[s]) >= K + 1]
    if species is not None:
        candidates = [s for s in candidates if s == species]
    rng.shuffle(candidates)
    for sp in candidates:
        insts = ds.by_species[sp]
        picks = rng.choice(len(insts), size=K + 1, replace=False)
        chosen = [insts[i] for i in picks]
        common = _common_visible(chosen, allowed_ids)
        if not common:
            continue
        keypoint_ids = tuple(sorted(common))[:N_max]
        return Episode(
            species=sp,
            supports=tuple(chosen[:K]),
            query=chosen[K],
            keypoint_ids=keypoint_ids,
            texts=synthesize_texts(ds.schema, keypoint_ids, sp, template),
        )
    raise SamplingError(
        f"no species with {K + 1} instances sharing a visible keypoint")


def sample_episode_pair(ds, K, N_max, rng, allowed_ids=None,
                        template=DEFAULT_TEXT_TEMPLATE):
    """Sample two episodes from distinct species with a shared keypoint order."""
    species = [s for s in ds.species if len(ds.by_species[s]) >= K + 1]
    if len(species) < 2:
        raise SamplingError("need at least two species for an episode pair")
    order = list(species)
    rng.shuffle(order)
    for i in range(len(order)):
        for j in range(len(order)):
            if i == j:
                continue
            try:
                ep1 = sample_episode(ds, K, N_max, rng, allowed_ids, template,
                                     species=order[i])
                ep2 = sample_episode(ds, K, N_max, rng, allowed_ids, template,
                                     species=order[j])
            except SamplingError:
                continue
            common = frozenset(ep1.keypoint_ids) & frozenset(ep2.keypoint_ids)
            if not common:
                continue
            ids = tuple(sorted(common))[:N_max]
            return EpisodePair(_restrict(ep1, ids, template, ds.schema),
                               _restrict(ep2, ids, template, ds.schema))
    raise SamplingError("no two species share a common visible keypoint")


def _restrict(ep, keypoint_ids, template, schema):
    return Episode(
        species=ep.species,
        supports=ep.supports,
        query=ep.query,
        keypoint_ids=keypoint_ids,
        texts=synthesize_texts(schema, keypoint_ids, ep.species, template),
    )


@lru_cache(maxsize=2048)
def _load_image_cached(path):
    arr = np.load(path) if path.endswith(".npy") else _load_raster(path)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.max() > 1.5:
        arr = arr / 255.0
    arr.setflags(write=False)
    return arr


def load_image(ds, inst):
    """Resolve an instance's image handle to an HxWx3 float array in [0, 1]."""
    return _load_image_cached(os.path.join(ds.root, inst.image_ref))


@lru_cache(maxsize=2048)
def _load_mask_cached(path):
    arr = np.load(path) if path.endswith(".npy") else _load_raster(path)
    mask = np.asarray(arr) > 0
    mask.setflags(write=False)
    return mask


def load_mask(ds, inst):
    """Resolve an instance's optional foreground mask to a binary raster."""
    if inst.mask_ref is None:
        return None
    return _load_mask_cached(os.path.join(ds.root, inst.mask_ref))


def _load_raster(path):
    from PIL import Image

    return np.asarray(Image.open(path))
