"""Procedural benchmark generator and its canned gateway replies."""

import math

import numpy as np

from promptpose import corpus, synthetic
from promptpose.auxgen import build_itpl_prompt, collect_pool
from promptpose.gateway import ChatRequest, LLMGateway


def test_schema_shape():
    schema = synthetic.schema()
    assert len(schema) == 8
    assert schema.base_ids == frozenset(range(6))
    assert schema.novel_ids == frozenset({6, 7})


def test_split_config_species():
    cfg = synthetic.split_config()
    assert len(cfg.train_species) == 6
    assert len(cfg.test_species) == 2
    assert not cfg.train_species & cfg.test_species


def test_novel_keypoints_sit_at_parent_midpoints(dataset):
    for inst in dataset.instances:
        for novel_id, (a, b) in synthetic.NOVEL_PARENTS.items():
            pa, pb = inst.keypoints[a], inst.keypoints[b]
            mid = ((pa[0] + pb[0]) / 2.0, (pa[1] + pb[1]) / 2.0)
            nv = inst.keypoints[novel_id]
            # Manifest coordinates are rounded to 2 decimals.
            assert math.hypot(mid[0] - nv[0], mid[1] - nv[1]) < 0.02


def test_all_keypoints_inside_body_mask(dataset):
    for inst in dataset.instances[:16]:
        mask = corpus.load_mask(dataset, inst)
        for x, y, v in inst.keypoints:
            assert v == 1
            assert mask[int(y), int(x)]


def test_generation_is_seeded(tmp_path):
    import json

    a = synthetic.generate_benchmark(str(tmp_path / "a"), per_species=2, seed=9)
    b = synthetic.generate_benchmark(str(tmp_path / "b"), per_species=2, seed=9)
    with open(a) as f:
        ma = json.load(f)
    with open(b) as f:
        mb = json.load(f)
    assert ma["instances"] == mb["instances"]


def test_glyphs_render_at_keypoints(dataset):
    inst = dataset.instances[0]
    img = corpus.load_image(dataset, inst)
    for name, (x, y, _) in zip(synthetic.KEYPOINT_NAMES, inst.keypoints):
        got = img[int(y), int(x)]
        want = np.array(synthetic.GLYPH_COLORS[name])
        assert np.abs(got - want).max() < 0.1  # noise margin


def test_interpolation_paths_cover_novel_parents():
    paths = synthetic.interpolation_paths("a redling")
    assert {p.endpoint_ids for p in paths} == set(
        synthetic.NOVEL_PARENTS.values())
    assert all(p.z == 0.5 for p in paths)


def test_mock_handler_names_novel_parts():
    gw = LLMGateway(mode="mock",
                    mock_handler=synthetic.mock_interpolation_handler)
    for parents, first in ((("nose", "horn"), "crown"),
                           (("tail", "vent"), "belly")):
        from promptpose.auxgen import InterpolationPath

        path = InterpolationPath(
            endpoint_ids=synthetic.NOVEL_PARENTS[6 if first == "crown" else 7],
            z=0.5, names=parents, category="a redling")
        pool = collect_pool(path, 1, gw)
        assert pool.candidates[0][0] == first


def test_mock_handler_generic_fallback():
    req = ChatRequest(provider="openai", model="m",
                      messages=(("user", "Q: what lies between fin and paw of "
                                         "a thing?"),))
    reply = synthetic.mock_interpolation_handler(req, 0)
    assert reply.startswith("1. ")
