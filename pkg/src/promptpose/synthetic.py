"""Procedurally rendered desk-scale benchmark for keypoint detection.

Each "species" is a color variant of a blob creature carrying eight named
part markers.  Six parts are base keypoints placed at random inside the
body; the two novel keypoints sit at the midpoint of a fixed pair of base
keypoints, so interpolated auxiliary keypoints land exactly on them.  The
generator is seeded and writes the canonical JSON manifest.
"""

from __future__ import annotations

import json
import os
import re

import numpy as np

from .auxgen import InterpolationPath
from .corpus import KeypointSchema, SplitConfig

KEYPOINT_NAMES = ("nose", "horn", "tail", "vent", "fin", "paw", "crown", "belly")
BASE_IDS = (0, 1, 2, 3, 4, 5)
NOVEL_IDS = (6, 7)
# Each novel keypoint lies halfway along one predefined path between bases.
NOVEL_PARENTS = {6: (0, 1), 7: (2, 3)}

SPECIES = ("redling", "blueling", "greenling", "goldling", "pinkling",
           "cyanling", "grayling", "limeling")
TRAIN_SPECIES = SPECIES[:6]
TEST_SPECIES = SPECIES[6:]

GLYPH_COLORS = {
    "nose": (0.95, 0.10, 0.10),
    "horn": (0.10, 0.90, 0.10),
    "tail": (0.15, 0.15, 0.95),
    "vent": (0.95, 0.90, 0.10),
    "fin": (0.90, 0.10, 0.90),
    "paw": (0.10, 0.90, 0.90),
    "crown": (0.95, 0.55, 0.10),
    "belly": (0.55, 0.10, 0.95),
}

BACKGROUND_COLORS = {
    "redling": (0.30, 0.16, 0.16),
    "blueling": (0.16, 0.18, 0.30),
    "greenling": (0.16, 0.28, 0.18),
    "goldling": (0.30, 0.26, 0.14),
    "pinkling": (0.30, 0.18, 0.26),
    "cyanling": (0.14, 0.28, 0.28),
    "grayling": (0.24, 0.24, 0.24),
    "limeling": (0.22, 0.30, 0.14),
}

BODY_COLORS = {sp: tuple(c * 1.6 for c in bg) for sp, bg in BACKGROUND_COLORS.items()}


def _far_enough(p, others, min_sep):
    return all(np.hypot(p[0] - q[0], p[1] - q[1]) >= min_sep for q in others)


def _sample_layout(rng, size, body_radius, min_sep, margin):
    """Place 6 base positions so that derived midpoints also stay separated.

    Base pairs that parent a novel keypoint are placed first, far enough
    apart that the midpoint clears both endpoints; remaining bases fill in.
    """
    center = size / 2.0
    reach = body_radius - margin

    def sample_point(placed):
        for _ in range(200):
            ang = rng.uniform(0, 2 * np.pi)
            rad = reach * np.sqrt(rng.uniform())
            p = (center + rad * np.cos(ang), center + rad * np.sin(ang))
            if _far_enough(p, placed, min_sep):
                return p
        return None

    for _ in range(200):
        pts = {}
        placed = []
        ok = True
        for novel_id, (a, b) in NOVEL_PARENTS.items():
            pa = sample_point(placed)
            if pa is None:
                ok = False
                break
            placed.append(pa)
            pb = None
            for _ in range(200):
                cand = sample_point(placed)
                if cand is None:
                    continue
                mid = ((pa[0] + cand[0]) / 2.0, (pa[1] + cand[1]) / 2.0)
                if _far_enough(mid, placed + [cand], min_sep):
                    pb, pmid = cand, mid
                    break
            if pb is None:
                ok = False
                break
            placed.extend([pb, pmid])
            pts[a], pts[b], pts[novel_id] = pa, pb, pmid
        if not ok:
            continue
        for base_id in BASE_IDS:
            if base_id in pts:
                continue
            p = sample_point(placed)
            if p is None:
                ok = False
                break
            placed.append(p)
            pts[base_id] = p
        if ok:
            return [pts[i] for i in range(len(KEYPOINT_NAMES))]
    raise RuntimeError("could not sample a valid keypoint layout")


def _render(size, species, layout, glyph, noise_rng):
    img = np.empty((size, size, 3))
    img[:] = BACKGROUND_COLORS[species]
    yy, xx = np.mgrid[0:size, 0:size]
    center = size / 2.0
    body_radius = size * 0.42
    body = (xx - center) ** 2 + (yy - center) ** 2 <= body_radius ** 2
    img[body] = BODY_COLORS[species]
    half = glyph // 2
    for name, (px, py) in zip(KEYPOINT_NAMES, layout):
        r0, r1 = int(py) - half, int(py) + half + 1
        c0, c1 = int(px) - half, int(px) + half + 1
        img[max(r0, 0):r1, max(c0, 0):c1] = GLYPH_COLORS[name]
    img += noise_rng.normal(0.0, 0.015, img.shape)
    return np.clip(img, 0.0, 1.0), body


def schema():
    return KeypointSchema(names=KEYPOINT_NAMES, base_ids=frozenset(BASE_IDS),
                          novel_ids=frozenset(NOVEL_IDS))


def split_config():
    return SplitConfig(train_species=frozenset(TRAIN_SPECIES),
                       test_species=frozenset(TEST_SPECIES))


def interpolation_paths(category):
    """The predefined interpolation path table for this benchmark."""
    return [
        InterpolationPath(endpoint_ids=parents, z=0.5,
                          names=(KEYPOINT_NAMES[parents[0]],
                                 KEYPOINT_NAMES[parents[1]]),
                          category=category)
        for parents in NOVEL_PARENTS.values()
    ]


# Replies the synthetic "LLM" gives for each interpolation path; rank 1 is
# the true novel part name, ranks 2-3 are plausible distractors.
_PATH_REPLIES = {
    ("nose", "horn"): "1. Crown\n2. Ridge\n3. Brow",
    ("tail", "vent"): "1. Belly\n2. Flank\n3. Girth",
}

_BETWEEN = re.compile(r"between (.+?) and (.+?) of")


def mock_interpolation_handler(req, repetition):
    """Canned gateway handler answering interpolation prompts for this benchmark."""
    user = next(t for r, t in req.messages if r == "user")
    question = user.rsplit("Q:", 1)[-1]
    m = _BETWEEN.search(question)
    if m and (m.group(1), m.group(2)) in _PATH_REPLIES:
        return _PATH_REPLIES[(m.group(1), m.group(2))]
    return "1. Mid part\n2. Middle\n3. Center"


def generate_benchmark(out_dir, per_species=24, seed=0, size=96, glyph=9):
    """Render the benchmark and write its manifest; returns the manifest path."""
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    body_radius = size * 0.42
    records = []
    for species in SPECIES:
        for idx in range(per_species):
            layout = _sample_layout(rng, size, body_radius, min_sep=glyph + 4,
                                    margin=glyph)
            img, body = _render(size, species, layout, glyph, rng)
            stem = f"{species}_{idx:03d}"
            np.save(os.path.join(out_dir, "images", stem + ".npy"),
                    img.astype(np.float32))
            np.save(os.path.join(out_dir, "masks", stem + ".npy"),
                    body.astype(np.uint8))
            xs = [p[0] for p in layout]
            ys = [p[1] for p in layout]
            cx, cy = size / 2.0, size / 2.0
            bbox = [cx - body_radius, cy - body_radius,
                    2 * body_radius, 2 * body_radius]
            records.append({
                "image": f"images/{stem}.npy",
                "mask": f"masks/{stem}.npy",
                "species": species,
                "bbox": [round(b, 2) for b in bbox],
                "keypoints": [[round(x, 2), round(y, 2), 1] for x, y in
                              zip(xs, ys)],
            })
    manifest = {"schema": schema().to_dict(), "instances": records}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f)
    return path
