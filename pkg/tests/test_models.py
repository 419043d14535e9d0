"""Tests for the visual encoder, augmentation encoder, projection heads and checkpoints."""

from dataclasses import replace

import numpy as np
import pytest

from cate.augment import RelativeTransform
from cate.models import (
    CATEModel,
    ModelConfig,
    load_checkpoint,
    parse_kinds,
    save_checkpoint,
)
from cate.tensor import DimensionError, Tensor, grad_check

TINY = ModelConfig(
    image_size=8, width1=3, width2=4, feature_dim=6, hidden=8, intermediate=12, n_heads=2, n_layers=1, out_dim=5,
    max_time_shift=4, encode="crop+time",
)


def randomise_biases(model, seed=0):
    """Nonzero biases keep ReLU inputs away from their kink during finite differences."""
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.normal(0.0, 0.3, p.shape)


@pytest.fixture
def views():
    return np.random.default_rng(0).random((2, 3, 3, 8, 8))


# =============================================================================
# Visual encoder
# =============================================================================


class TestVisualEncoder:
    def test_output_dimension(self, views):
        model = CATEModel(TINY)
        assert model.encode_visual(views).shape == (2, TINY.feature_dim)

    def test_identical_views_identical_features(self, views):
        model = CATEModel(TINY).eval()
        np.testing.assert_array_equal(model.encode_visual(views).data, model.encode_visual(views.copy()).data)
        np.testing.assert_array_equal(model.encode_visual(views).data[0], model.encode_visual(views[:1]).data[0])

    def test_zero_view_is_a_fixed_vector(self):
        model = CATEModel(TINY).eval()
        zero = np.zeros((1, 3, 3, 8, 8))
        np.testing.assert_array_equal(model.encode_visual(zero).data, model.encode_visual(zero).data)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            CATEModel(TINY).encode_visual(np.zeros((1, 3, 3, 16, 16)))

    @pytest.mark.parametrize("trunk", ["factorised", "conv3d"])
    def test_gradient_wrt_view(self, views, trunk):
        model = CATEModel(replace(TINY, trunk=trunk), seed=1)
        randomise_biases(model)
        w = np.random.default_rng(2).standard_normal((2, TINY.feature_dim))
        x = Tensor(views, requires_grad=True)
        assert grad_check(lambda x: (model.encode_visual(x) * w).sum(), [x]) < 1e-4


# =============================================================================
# Augmentation encoder
# =============================================================================


class TestAugmentationEncoder:
    def test_zero_transform_gives_zero_embeddings(self):
        model = CATEModel(TINY)
        zero = RelativeTransform((0.0, 0.0, 0.0, 0.0), 0)
        tokens = model.encode_augmentation([zero, zero])
        assert sorted(tokens) == ["crop", "time"]
        aug = model.augmentation
        np.testing.assert_allclose(tokens["crop"].data[0], aug.crop.bias.data)
        np.testing.assert_allclose(
            tokens["time"].data[0], aug.time_sign.weight.data[1] + aug.time_magnitude.weight.data[0]
        )
        np.testing.assert_array_equal(tokens["time"].data[0], tokens["time"].data[1])

    def test_sign_only_collapses_magnitude(self):
        model = CATEModel(replace(TINY, time_param="sgn", encode="time"))
        tok = model.encode_augmentation([RelativeTransform(None, 2), RelativeTransform(None, 4)])["time"].data
        np.testing.assert_array_equal(tok[0], tok[1])

    def test_magnitude_additive_structure(self):
        model = CATEModel(replace(TINY, encode="time"))
        tok = model.encode_augmentation([RelativeTransform(None, 3), RelativeTransform(None, -3)])["time"].data
        sign = model.augmentation.time_sign.weight.data
        np.testing.assert_allclose(tok[0] - tok[1], sign[2] - sign[0], atol=1e-15)

    def test_magnitude_beyond_table(self):
        model = CATEModel(replace(TINY, encode="time"))
        with pytest.raises(IndexError):
            model.encode_augmentation([RelativeTransform(None, TINY.max_time_shift + 1)])

    def test_no_kinds_no_tokens(self):
        model = CATEModel(replace(TINY, encode="none"))
        assert model.encode_augmentation([RelativeTransform((0.1, 0, 0, 0), 2)]) == {}

    def test_token_dropout_only_in_training(self):
        model = CATEModel(replace(TINY, encode="time", token_dropout=True, dropout_rate=0.5))
        deltas = [RelativeTransform(None, 1)] * 4
        model.eval()
        a = model.encode_augmentation(deltas)["time"].data
        model.train()
        b = model.encode_augmentation(deltas, np.random.default_rng(0))["time"].data
        assert np.any(b == 0.0) and not np.any(a == 0.0)

    def test_parse_kinds(self):
        assert parse_kinds("time+crop") == ("crop", "time")
        assert parse_kinds("none") == ()
        with pytest.raises(ValueError):
            parse_kinds("color")


# =============================================================================
# Projection heads
# =============================================================================


class TestProjection:
    @pytest.mark.parametrize("head", ["linear", "mlp", "transformer"])
    def test_output_dimension_and_determinism(self, head):
        model = CATEModel(replace(TINY, head=head)).eval()
        visual = Tensor(np.random.default_rng(0).standard_normal((3, TINY.feature_dim)))
        a, b = model.project(visual, {}), model.project(visual)
        assert a.shape == (3, TINY.out_dim)
        np.testing.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("head", ["linear", "mlp", "transformer"])
    def test_token_order_does_not_matter(self, head):
        model = CATEModel(replace(TINY, head=head)).eval()
        rng = np.random.default_rng(1)
        visual = Tensor(rng.standard_normal((2, TINY.feature_dim)))
        crop, time = Tensor(rng.standard_normal((2, 8))), Tensor(rng.standard_normal((2, 8)))
        a = model.project(visual, {"crop": crop, "time": time}).data
        b = model.project(visual, {"time": time, "crop": crop}).data
        np.testing.assert_array_equal(a, b)

    def test_empty_tokens_depend_only_on_visual(self):
        cfgs = [replace(TINY, encode=e) for e in ("none", "crop", "time", "crop+time")]
        visual = Tensor(np.random.default_rng(2).standard_normal((2, TINY.feature_dim)))
        outs = [CATEModel(c, seed=3).eval().project(visual, {}).data for c in cfgs]
        for o in outs[1:]:
            np.testing.assert_array_equal(o, outs[0])

    def test_uniform_attention_oracle(self):
        cfg = replace(TINY, encode="time")
        model = CATEModel(cfg, seed=4).eval()
        head = model.head
        layer = head.layers[0]
        for lin in (layer.q, layer.k, layer.ff2):
            lin.weight.data[...] = 0.0
            lin.bias.data[...] = 0.0
        rng = np.random.default_rng(5)
        visual = rng.standard_normal((1, cfg.feature_dim))
        time_tok = rng.standard_normal((1, cfg.hidden))
        out = model.project(Tensor(visual), {"time": Tensor(time_tok)}).data

        types = head.type_embedding.weight.data
        toks = np.stack([
            head.cls.data + types[0],
            visual[0] @ head.visual_proj.weight.data + head.visual_proj.bias.data + types[1],
            time_tok[0] + types[3],
        ])

        def ln(x, mod):
            x = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
            return x * mod.gamma.data + mod.beta.data

        values = ln(toks, layer.ln1) @ layer.v.weight.data + layer.v.bias.data
        cls = toks[0] + values.mean(axis=0) @ layer.o.weight.data + layer.o.bias.data
        expected = ln(cls, head.final_norm) @ head.out.weight.data + head.out.bias.data
        np.testing.assert_allclose(out[0], expected, atol=1e-12)

    def test_token_dimension_mismatch(self):
        model = CATEModel(TINY)
        visual = Tensor(np.zeros((2, TINY.feature_dim)))
        with pytest.raises(DimensionError):
            model.project(visual, {"time": Tensor(np.zeros((2, 3)))})

    def test_transformer_head_size_independent_of_kinds(self):
        counts = {e: CATEModel(replace(TINY, encode=e)) for e in ("crop", "crop+time")}
        head = {e: m.head.n_parameters() for e, m in counts.items()}
        assert head["crop"] == head["crop+time"]
        aug = counts["crop+time"].augmentation
        tables = aug.time_sign.n_parameters() + aug.time_magnitude.n_parameters()
        assert counts["crop+time"].n_parameters() - counts["crop"].n_parameters() == tables

    def test_init_streams_independent_of_encoding(self):
        a, b = CATEModel(replace(TINY, encode="none"), seed=7), CATEModel(replace(TINY, encode="crop+time"), seed=7)
        for (na, pa), (nb, pb) in zip(a.encoder.named_parameters(), b.encoder.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)
        for (na, pa), (nb, pb) in zip(a.head.named_parameters(), b.head.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_full_model_gradient(self):
        model = CATEModel(TINY, seed=8)
        randomise_biases(model, 1)
        rng = np.random.default_rng(9)
        visual = Tensor(rng.standard_normal((2, TINY.feature_dim)))
        deltas = [RelativeTransform((0.1, -0.2, 0.0, 0.05), 3), RelativeTransform((0.0, 0.1, -0.1, 0.0), -2)]
        w = rng.standard_normal((2, TINY.out_dim))
        params = [model.head.visual_proj.weight, model.augmentation.crop.weight, model.head.layers[0].q.weight]

        def f(*_):
            return (model.project(visual, model.encode_augmentation(deltas)) * w).sum()

        assert grad_check(f, params) < 1e-5


# =============================================================================
# Checkpoints
# =============================================================================


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = CATEModel(TINY, seed=2)
        digest = save_checkpoint(tmp_path / "m.ckpt", model.state_dict(), "[model]\nhead = transformer\n")
        state, manifest = load_checkpoint(tmp_path / "m.ckpt")
        assert manifest.startswith("[model]")
        assert list(state) == list(model.state_dict())
        other = CATEModel(TINY, seed=3)
        other.load_state_dict(state)
        for (_, a), (_, b) in zip(model.named_parameters(), other.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)
        assert len(digest) == 64

    def test_record_layout(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", {"w": np.arange(6.0).reshape(2, 3)}, "")
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:4] == b"CKPT"
        assert np.frombuffer(raw[4:16], "<u4").tolist() == [1, 1, 1]
        assert raw[16:17] == b"w"
        assert np.frombuffer(raw[17:29], "<u4").tolist() == [2, 2, 3]
        np.testing.assert_array_equal(np.frombuffer(raw[29:77], "<f8"), np.arange(6.0))

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nope")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x")

    def test_missing_parameter_rejected(self):
        model = CATEModel(TINY)
        state = model.state_dict()
        state.pop(next(iter(state)))
        with pytest.raises((KeyError, ValueError)):
            model.load_state_dict(state)
