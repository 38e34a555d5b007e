"""Token projection, residual adapters, and the toy encoder pair."""

import numpy as np
import pytest
import torch

from promptpose import encoder
from promptpose.encoder import (DTYPE, FeatureMap, ProjectionWeights, TextAdapter,
                                TextFeature, ToyImageEncoder, ToyTextEncoder,
                                VisualAdapter, adapt_text, adapt_visual,
                                build_encoder_bundle, pool_text,
                                project_image_tokens)
from promptpose.errors import ConfigError, DimensionError


def rand_grid(side=3, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    return torch.tensor(rng.standard_normal((side, side, dim)))


class TestProjection:
    def test_identity_weights(self):
        x = rand_grid()
        w = ProjectionWeights(w_v=torch.eye(4, dtype=DTYPE),
                              w_o=torch.eye(4, dtype=DTYPE))
        out = project_image_tokens(x, w)
        assert torch.equal(out.grid, x)

    def test_hand_multiply(self):
        x = torch.tensor([[[1.0, 2.0], [0.0, 1.0]],
                          [[3.0, 0.0], [1.0, 1.0]]], dtype=DTYPE)
        w = ProjectionWeights(
            w_v=torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=DTYPE),
            w_o=torch.eye(2, dtype=DTYPE))
        out = project_image_tokens(x, w)
        assert torch.allclose(out.grid[0, 0], torch.tensor([1.0, 4.0],
                                                           dtype=DTYPE))

    def test_associativity_oracle(self):
        x = rand_grid(3, 5, seed=1)
        rng = np.random.default_rng(2)
        w_v = torch.tensor(rng.standard_normal((5, 6)))
        w_o = torch.tensor(rng.standard_normal((6, 4)))
        chained = project_image_tokens(x, ProjectionWeights(w_v, w_o)).grid
        single = x @ (w_v @ w_o)
        assert torch.allclose(chained, single, atol=1e-6)

    def test_linearity(self):
        w = ProjectionWeights(w_v=torch.tensor(
            np.random.default_rng(3).standard_normal((4, 4))),
            w_o=torch.tensor(np.random.default_rng(4).standard_normal((4, 4))))
        x, y = rand_grid(seed=5), rand_grid(seed=6)
        lhs = project_image_tokens(2.0 * x + 3.0 * y, w).grid
        rhs = (2.0 * project_image_tokens(x, w).grid
               + 3.0 * project_image_tokens(y, w).grid)
        assert torch.allclose(lhs, rhs, atol=1e-6)

    def test_flat_token_input_reshaped(self):
        x = rand_grid(3, 4, seed=7)
        w = ProjectionWeights(w_v=torch.eye(4, dtype=DTYPE),
                              w_o=torch.eye(4, dtype=DTYPE))
        out = project_image_tokens(x.reshape(9, 4), w)
        assert out.grid.shape == (3, 3, 4)

    def test_shape_mismatch(self):
        w = ProjectionWeights(w_v=torch.eye(5, dtype=DTYPE),
                              w_o=torch.eye(5, dtype=DTYPE))
        with pytest.raises(DimensionError):
            project_image_tokens(rand_grid(3, 4), w)

    def test_noncomposable_weights_rejected(self):
        with pytest.raises(DimensionError):
            ProjectionWeights(w_v=torch.ones(4, 3), w_o=torch.ones(4, 2))


class TestAdapters:
    def test_zero_init_visual_adapter_is_identity(self):
        x = FeatureMap(grid=rand_grid(3, 8), stride=8.0)
        out = adapt_visual(x, VisualAdapter(8))
        assert torch.equal(out.grid, x.grid)

    def test_zero_init_text_adapter_is_identity(self):
        t = TextFeature(tokens=torch.tensor(
            np.random.default_rng(0).standard_normal((5, 8))), eot_index=4)
        out = adapt_text(t, TextAdapter(8))
        assert torch.equal(out.tokens, t.tokens)

    def test_constant_adapter_shifts(self):
        x = FeatureMap(grid=rand_grid(3, 4), stride=8.0)
        out = adapt_visual(x, lambda g: torch.full_like(g, 2.5))
        assert torch.equal(out.grid, x.grid + 2.5)

    def test_identity_jacobian_at_init(self):
        # At zero-adapter init the residual map is x + 0, so perturbing any
        # input entry moves the matching output entry one-for-one.
        x = FeatureMap(grid=rand_grid(2, 3), stride=8.0)
        adapter = VisualAdapter(3)
        eps = 1e-6
        bumped = x.grid.clone()
        bumped[1, 0, 2] += eps
        with torch.no_grad():
            d = adapt_visual(FeatureMap(bumped, 8.0), adapter).grid \
                - adapt_visual(x, adapter).grid
        assert abs(float(d[1, 0, 2]) - eps) < 1e-9
        assert float(d.abs().sum() - d[1, 0, 2].abs()) < 1e-12

    def test_shape_change_rejected(self):
        x = FeatureMap(grid=rand_grid(3, 4), stride=8.0)
        with pytest.raises(DimensionError):
            adapt_visual(x, lambda g: g[:2])


class TestPoolText:
    def test_single_token(self):
        t = TextFeature(tokens=torch.tensor([[1.0, 2.0]]), eot_index=0)
        assert torch.equal(pool_text(t), torch.tensor([1.0, 2.0]))

    def test_selects_eot_row(self):
        tokens = torch.tensor(np.random.default_rng(1).standard_normal((4, 3)))
        t = TextFeature(tokens=tokens, eot_index=2)
        assert torch.equal(pool_text(t), tokens[2])

    def test_eot_out_of_range(self):
        with pytest.raises(DimensionError):
            TextFeature(tokens=torch.ones(3, 2), eot_index=3)

    def test_adapt_then_pool_order(self):
        bundle = build_encoder_bundle("toy", seed=0, dim=32)
        with torch.no_grad():
            for p in bundle.text_adapter.parameters():
                p.normal_(0.0, 0.1)
        adapted_first = pool_text(bundle.encode_text("the nose of a cat"))
        raw = bundle.text_encoder.encode_text("the nose of a cat")
        pooled_first = pool_text(raw) + bundle.text_adapter(raw.tokens)[raw.eot_index]
        # The adopted order is adapt-then-pool; with a self-attention adapter
        # the two orders genuinely differ, pinning the convention.
        assert torch.allclose(adapted_first, pooled_first, atol=1e-9)


class TestToyEncoders:
    def test_image_encoder_deterministic(self, dataset):
        from promptpose import corpus

        img = corpus.load_image(dataset, dataset.instances[0])
        a = ToyImageEncoder(seed=3).encode_image(img)[0].grid
        b = ToyImageEncoder(seed=3).encode_image(img)[0].grid
        assert torch.equal(a, b)

    def test_image_encoder_grid_shape(self):
        enc = ToyImageEncoder(patch=8, out_dim=32)
        raw, weights = enc.encode_image(np.zeros((96, 96, 3)))
        assert raw.grid.shape == (12, 12, 32)
        assert raw.stride == 8.0
        fm = project_image_tokens(raw, weights)
        assert fm.grid.shape == (12, 12, 32)

    def test_image_encoder_rejects_bad_size(self):
        with pytest.raises(DimensionError):
            ToyImageEncoder(patch=8).encode_image(np.zeros((50, 50, 3)))

    def test_text_encoder_stable_and_word_sensitive(self):
        enc = ToyTextEncoder(dim=16)
        a = enc.encode_text("the nose of a cat")
        b = enc.encode_text("the nose of a cat")
        c = enc.encode_text("the tail of a cat")
        assert torch.equal(a.tokens, b.tokens)
        assert not torch.equal(a.tokens, c.tokens)
        assert a.eot_index == 5

    def test_text_eot_is_word_mean(self):
        enc = ToyTextEncoder(dim=16)
        t = enc.encode_text("nose cat")
        assert torch.allclose(t.tokens[2], t.tokens[:2].mean(dim=0))

    def test_bundle_trainable_parameters(self):
        bundle = build_encoder_bundle("toy", dim=16)
        params = bundle.trainable_parameters()
        assert any(p is bundle.image_encoder.w_v for p in params)
        assert any(p is bundle.image_encoder.w_o for p in params)
        assert not any(p is bundle.image_encoder.embed for p in params)

    def test_unknown_plugin(self):
        with pytest.raises(ConfigError):
            build_encoder_bundle("imaginary")

    def test_plugin_registry(self):
        marker = object()
        encoder.register_encoder("stub", lambda **kw: marker)
        try:
            assert build_encoder_bundle("stub") is marker
        finally:
            encoder._ENCODER_FACTORIES.pop("stub")

    def test_bundle_zero_init_adapters_noop(self):
        bundle = build_encoder_bundle("toy", dim=16)
        img = np.random.default_rng(0).uniform(size=(32, 32, 3))
        assert torch.equal(bundle.encode_image(img, adapted=True).grid,
                           bundle.encode_image(img, adapted=False).grid)
