"""
Tests for the end-to-end network: patchify, parameter counts, readouts, heads and
determinism.
"""

import json
import os

import numpy as np
import pytest
from pydantic import ValidationError

from core.errors import PatchError, ShapeError, TokenIndexError
from core.model import SsmNdModel, patchify, to_leaves, token_grid, vit_block_params
from core.tensor import Tape, backward, reduce_sum
from models import ModelConfig


def tiny_config(**overrides):
    fields = {
        "name": "test",
        "rank": 2,
        "input_shape": [4, 4],
        "in_channels": 2,
        "patch": [2, 2],
        "d_model": 4,
        "n_layers": 2,
        "d_state": 2,
        "n_classes": 3,
    }
    fields.update(overrides)
    return ModelConfig(**fields)


def load_preset(presets_dir, name):
    with open(os.path.join(presets_dir, f"{name}.json"), "r", encoding="utf-8") as f:
        return ModelConfig.model_validate(json.load(f))


# ---------- Test 1: Patchify ----------


class TestPatchify:
    """Token grids and patch contents."""

    @pytest.mark.parametrize(
        "shape,patch,grid",
        [((224, 224), (16, 16), (14, 14)), ((224, 224), (8, 8), (28, 28)), ((32, 224, 224), (2, 16, 16), (16, 14, 14))],
    )
    def test_token_grid(self, shape, patch, grid):
        assert token_grid(shape, patch) == grid

    def test_indivisible(self):
        with pytest.raises(PatchError):
            token_grid((10, 10), (3, 3))
        with pytest.raises(PatchError):
            patchify(np.zeros((1, 6, 6, 1)), (4, 4))

    def test_patch_contents(self):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        tokens = patchify(x, (2, 2))
        assert tokens.shape == (1, 2, 2, 4)
        assert tokens[0, 0, 0].tolist() == [0.0, 1.0, 4.0, 5.0]
        assert tokens[0, 1, 1].tolist() == [10.0, 11.0, 14.0, 15.0]

    def test_rank_mismatch(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((1, 4, 4, 1)), (2, 2, 2))


# ---------- Test 2: Parameters ----------


class TestParameters:
    """Analytic counts match the initialised tensors and published sizes."""

    @pytest.mark.parametrize(
        "overrides",
        [{}, {"head": "regression", "out_channels": 5}, {"arrangement": "nd-ssm"}, {"n_layers": 0}],
    )
    def test_count_matches_init(self, overrides):
        model = SsmNdModel(tiny_config(**overrides))
        params = model.init_params(0)
        assert model.param_count() == sum(v.size for v in params.values())

    def test_mamba2d_s_size(self, presets_dir):
        model = SsmNdModel(load_preset(presets_dir, "mamba2d-s"))
        assert model.n_tokens == 28 * 28
        assert abs(model.param_count() - 24e6) / 24e6 < 0.15

    def test_two_layers_match_one_vit_block(self, presets_dir):
        model = SsmNdModel(load_preset(presets_dir, "mamba2d-s"))
        pair = sum(layer.param_count() for layer in model.backbone.layers[:2])
        assert 0.9 < pair / vit_block_params(384) < 1.2

    def test_init_is_seeded(self):
        model = SsmNdModel(tiny_config())
        a, b = model.init_params(3), model.init_params(3)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert list(a) == list(b)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            tiny_config(patch=[2, 2, 2])
        with pytest.raises(ValidationError):
            tiny_config(unknown_field=1)


# ---------- Test 3: Forward ----------


class TestForward:
    """Heads, readouts and determinism."""

    def test_zero_head_gives_zero_logits(self, rng):
        model = SsmNdModel(tiny_config(zero_init_head=True))
        logits = model.predict(model.init_params(0), rng.normal(size=(2, 4, 4, 2)))
        assert logits.shape == (2, 3)
        assert np.all(logits == 0.0)

    def test_regression_head_is_per_token(self, rng):
        model = SsmNdModel(tiny_config(head="regression", out_channels=5))
        out = model.predict(model.init_params(0), rng.normal(size=(2, 4, 4, 2)))
        assert out.shape == (2, 4, 5)

    def test_position_readout(self, rng):
        model = SsmNdModel(tiny_config(readout="position", readout_index=3))
        params = model.init_params(0)
        x = rng.normal(size=(1, 4, 4, 2))
        tokens = model.embed_input(x)
        h = model.features(params, tokens).value
        expected = h[:, 3] @ params["head.w"] + params["head.b"]
        np.testing.assert_allclose(model.predict(params, x), expected, rtol=1e-14)

    def test_readout_index_out_of_range(self, rng):
        model = SsmNdModel(tiny_config(readout="position", readout_index=4))
        with pytest.raises(TokenIndexError) as exc_info:
            model.predict(model.init_params(0), rng.normal(size=(1, 4, 4, 2)))
        assert exc_info.value.field == "readout_index"

    def test_input_shape_checked(self, rng):
        model = SsmNdModel(tiny_config())
        with pytest.raises(ShapeError):
            model.predict(model.init_params(0), rng.normal(size=(1, 4, 4, 3)))

    def test_training_forward_is_deterministic(self, rng):
        model = SsmNdModel(tiny_config(dropout=0.2, drop_path=0.2))
        params = model.init_params(0)
        x = rng.normal(size=(2, 4, 4, 2))
        a = model.forward(params, x, train=True, rng=np.random.default_rng(5)).value
        b = model.forward(params, x, train=True, rng=np.random.default_rng(5)).value
        assert a.tobytes() == b.tobytes()

    def test_eval_ignores_dropout(self, rng):
        x = rng.normal(size=(2, 4, 4, 2))
        plain = SsmNdModel(tiny_config())
        dropped = SsmNdModel(tiny_config(dropout=0.5, drop_path=0.5))
        params = plain.init_params(0)
        np.testing.assert_array_equal(plain.predict(params, x), dropped.predict(params, x))

    def test_depth_truncates_the_backbone(self, rng):
        model = SsmNdModel(tiny_config(n_layers=4))
        shallow = SsmNdModel(tiny_config(n_layers=2))
        params = model.init_params(0)
        tokens = model.embed_input(rng.normal(size=(1, 4, 4, 2)))
        deep_2 = model.features(params, tokens, depth=2).value
        np.testing.assert_array_equal(deep_2, shallow.features(params, tokens).value)

    def test_all_parameters_receive_gradients(self, rng):
        model = SsmNdModel(tiny_config())
        params = model.init_params(0)
        tape = Tape()
        leaves = to_leaves(tape, params)
        grads = backward(tape, reduce_sum(model.forward(leaves, rng.normal(size=(2, 4, 4, 2)))))
        missing = [name for name, leaf in leaves.items() if grads.raw(leaf) is None]
        assert missing == []
