"""Synthetic encoders: determinism, normalization, freezing, gradient exactness."""

import numpy as np
import pytest

from bmcoop.backbone import (
    CachedVisionSource,
    SyntheticTextEncoder,
    SyntheticVisionEncoder,
    encode_images,
    encode_text_bank,
    encode_text_with_context,
    init_context,
)
from bmcoop.errors import DataError
from bmcoop.types import EmbeddingMatrix, PromptBank


class TestInitContext:
    def test_template_tokens_used_verbatim(self, small_handle):
        ctx = init_context(small_handle, "a photo of a", 4)
        expected = small_handle.token_vectors("a photo of a")
        assert ctx.vectors.shape == (4, small_handle.token_width)
        assert np.array_equal(ctx.vectors, expected)

    def test_empty_text_gives_reproducible_gaussian_rows(self, small_handle):
        c1 = init_context(small_handle, "", 4)
        c2 = init_context(small_handle, "", 4)
        assert np.array_equal(c1.vectors, c2.vectors)
        assert c1.vectors.shape == (4, small_handle.token_width)
        # pad rows have the documented small scale
        assert np.all(np.abs(c1.vectors) < 0.02 * 6)

    def test_longer_context_pads_after_tokens(self, small_handle):
        ctx = init_context(small_handle, "a photo of a", 6)
        tokens = small_handle.token_vectors("a photo of a")
        assert np.array_equal(ctx.vectors[:4], tokens)  # direct lookup oracle
        # rows 5-6 are Gaussian pads, not token embeddings
        assert not np.allclose(ctx.vectors[4], tokens[0])
        assert np.linalg.norm(ctx.vectors[4:]) > 0

    def test_truncates_long_text(self, small_handle):
        ctx = init_context(small_handle, "one two three four five", 3)
        tokens = small_handle.token_vectors("one two three four five")
        assert np.array_equal(ctx.vectors, tokens[:3])

    def test_nonpositive_length_rejected(self, small_handle):
        with pytest.raises(DataError):
            init_context(small_handle, "a photo of a", 0)


class TestEncodeTextWithContext:
    def test_deterministic(self, small_handle):
        ctx = init_context(small_handle, "a photo of a", 4)
        e1, _ = encode_text_with_context(small_handle, ctx, "glioma")
        e2, _ = encode_text_with_context(small_handle, ctx, "glioma")
        assert np.array_equal(e1, e2)

    def test_unit_norm(self, small_handle):
        ctx = init_context(small_handle, "a photo of a", 4)
        for name in ("glioma", "meningioma tumor", "normal brain scan"):
            e, _ = encode_text_with_context(small_handle, ctx, name)
            assert abs(np.linalg.norm(e) - 1.0) < 1e-6

    def test_width_mismatch_rejected(self, small_handle):
        other = SyntheticTextEncoder(seed=5, embedding_dim=12, token_width=30)
        ctx = init_context(other, "a photo of a", 4)
        with pytest.raises(DataError, match="width"):
            encode_text_with_context(small_handle, ctx, "glioma")

    def test_tape_matches_central_differences(self, small_handle):
        """Random contexts and random downstream linear losses vs the tape."""
        rng = np.random.default_rng(11)
        eps = 1e-5
        for trial in range(5):
            ctx = init_context(small_handle, "a photo of a", 3)
            ctx.vectors = rng.standard_normal(ctx.vectors.shape) * 0.3
            name = "glioma tumor"
            # random downstream scalar loss L = w . embedding
            w = rng.standard_normal(small_handle.embedding_dim)
            _, tape = encode_text_with_context(small_handle, ctx, name)
            analytic = tape.vjp(w)
            fd = np.zeros_like(ctx.vectors)
            for i in range(ctx.vectors.shape[0]):
                for j in range(ctx.vectors.shape[1]):
                    vp = ctx.copy()
                    vp.vectors[i, j] += eps
                    vm = ctx.copy()
                    vm.vectors[i, j] -= eps
                    ep, _ = encode_text_with_context(small_handle, vp, name)
                    em, _ = encode_text_with_context(small_handle, vm, name)
                    fd[i, j] = (w @ ep - w @ em) / (2 * eps)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-7)
            assert np.max(np.abs(analytic - fd) / denom) < 1e-4

    def test_mean_pool_gives_identical_row_gradients(self, small_handle):
        ctx = init_context(small_handle, "a photo of a", 4)
        _, tape = encode_text_with_context(small_handle, ctx, "glioma")
        g = np.random.default_rng(0).standard_normal(small_handle.embedding_dim)
        grad = tape.vjp(g)
        for row in grad[1:]:
            assert np.array_equal(row, grad[0])


class TestEncodeTextBank:
    def make_bank(self, n):
        return PromptBank(
            prompts={
                "benign": [f"benign finding variant {i}" for i in range(n)],
                "malignant": [f"malignant finding variant {i}" for i in range(n)],
            },
            modalities={"benign": "ultrasound", "malignant": "ultrasound"},
        )

    def test_minimal_bank(self, small_handle):
        bank = PromptBank(
            prompts={"benign": ["a hypoechoic nodule"]},
            modalities={"benign": "ultrasound"},
        )
        out = encode_text_bank(small_handle, bank)
        assert out["benign"].values.shape == (1, small_handle.embedding_dim)

    def test_full_bank_shapes(self, small_handle):
        bank = self.make_bank(50)
        out = encode_text_bank(small_handle, bank)
        assert set(out) == {"benign", "malignant"}
        for matrix in out.values():
            assert matrix.values.shape == (50, small_handle.embedding_dim)
            norms = np.linalg.norm(matrix.values, axis=1)
            assert np.max(np.abs(norms - 1.0)) < 1e-6

    def test_bit_identical_across_calls(self, small_handle):
        bank = self.make_bank(5)
        a = encode_text_bank(small_handle, bank)
        b = encode_text_bank(small_handle, bank)
        for name in a:
            assert np.array_equal(a[name].values, b[name].values)


class TestVisionEncoder:
    def test_zero_features_map_to_normalized_bias(self):
        enc = SyntheticVisionEncoder(seed=4, feature_dim=6, embedding_dim=10)
        out = enc.encode(np.zeros((1, 6)))
        expected = enc.bias / np.linalg.norm(enc.bias)
        assert np.allclose(out.values[0], expected)

    def test_proportional_inputs_identical_without_bias(self):
        enc = SyntheticVisionEncoder(seed=4, feature_dim=6, embedding_dim=10, use_bias=False)
        x = np.random.default_rng(1).standard_normal((1, 6))
        # matrix-multiply oracle: normalize(P @ x) is scale invariant
        raw = enc.projection @ x[0]
        oracle = raw / np.linalg.norm(raw)
        out1 = enc.encode(x)
        out2 = enc.encode(2.0 * x)
        assert np.allclose(out1.values[0], out2.values[0])
        assert np.allclose(out1.values[0], oracle)

    def test_zero_rejected_without_bias(self):
        enc = SyntheticVisionEncoder(seed=4, feature_dim=6, embedding_dim=10, use_bias=False)
        with pytest.raises(DataError, match="zero"):
            enc.encode(np.zeros((1, 6)))

    def test_unit_norm_rows(self):
        enc = SyntheticVisionEncoder(seed=4, feature_dim=6, embedding_dim=10)
        out = enc.encode(np.random.default_rng(2).standard_normal((8, 6)))
        assert np.max(np.abs(np.linalg.norm(out.values, axis=1) - 1.0)) < 1e-6

    def test_wrong_feature_dim_rejected(self):
        enc = SyntheticVisionEncoder(seed=4, feature_dim=6, embedding_dim=10)
        with pytest.raises(DataError, match="shape"):
            enc.encode(np.zeros((2, 5)))


class TestCachedVisionSource:
    def make_source(self, rows=5, dim=8):
        rng = np.random.default_rng(9)
        values = rng.standard_normal((rows, dim))
        values /= np.linalg.norm(values, axis=1, keepdims=True)
        matrix = EmbeddingMatrix(values=values.astype(np.float32), axis="per-image")
        index = {f"img{i}": i for i in range(rows)}
        return CachedVisionSource(matrix=matrix, index=index)

    def test_selection_in_request_order(self):
        source = self.make_source()
        out = encode_images(source, ["img3", "img0", "img4"])
        assert out.values.shape == (3, 8)
        ref = encode_images(source, ["img3"])
        assert np.array_equal(out.values[0], ref.values[0])

    def test_missing_id_named(self):
        source = self.make_source()
        with pytest.raises(DataError, match="img99"):
            encode_images(source, ["img0", "img99"])

    def test_rows_are_renormalized(self):
        source = self.make_source()
        out = encode_images(source, [f"img{i}" for i in range(5)])
        assert np.max(np.abs(np.linalg.norm(out.values, axis=1) - 1.0)) < 1e-12

    def test_index_outside_matrix_rejected(self):
        with pytest.raises(DataError, match="outside"):
            CachedVisionSource(
                matrix=EmbeddingMatrix(values=np.ones((2, 3), dtype=np.float32)),
                index={"a": 5},
            )


class TestFreezing:
    def test_text_parameters_unchanged_by_use(self, small_handle):
        before = small_handle.parameter_digest()
        ctx = init_context(small_handle, "a photo of a", 4)
        for name in ("glioma", "meningioma", "pituitary"):
            encode_text_with_context(small_handle, ctx, name)
        encode_text_bank(
            small_handle,
            PromptBank(prompts={"x": ["some finding"]}, modalities={"x": "mri"}),
        )
        assert small_handle.parameter_digest() == before

    def test_projection_is_read_only(self, small_handle):
        with pytest.raises(ValueError):
            small_handle.projection[0, 0] = 1.0

    def test_same_seed_same_parameters(self):
        a = SyntheticTextEncoder(seed=42, embedding_dim=8, token_width=10)
        b = SyntheticTextEncoder(seed=42, embedding_dim=8, token_width=10)
        assert a.parameter_digest() == b.parameter_digest()
        assert np.array_equal(a.token_vector("glioma"), b.token_vector("glioma"))
        c = SyntheticTextEncoder(seed=43, embedding_dim=8, token_width=10)
        assert c.parameter_digest() != a.parameter_digest()
