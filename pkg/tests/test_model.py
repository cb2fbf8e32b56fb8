from __future__ import annotations

import numpy as np
import pytest

from condl.config import ModelConfig
from condl.engine import ShapeError, Tape, Tensor, backward, mul, sum_all
from condl.services.model import (
    extract_feature_batch,
    extract_features,
    forward,
    init_model,
    norm_layer_names,
    pair_tensor,
    parameter_layout,
)
from condl.services.synthgen import procedural_image


def _small(**overrides: object) -> ModelConfig:
    values = {"blocks": 1, "channels": 8, "seed": 0}
    values.update(overrides)
    return ModelConfig(**values)  # type: ignore[arg-type]


@pytest.mark.parametrize("size", [32, 64, 100])
def test_features_keep_input_resolution(size: int) -> None:
    params = init_model(_small())
    image = Tensor(np.random.default_rng(size).uniform(size=(3, size, size)))
    fmap = extract_features(params, image)
    assert fmap.data.shape == (8, size, size)
    assert fmap.channels == 8


def test_init_and_forward_are_deterministic() -> None:
    first, second = init_model(_small(seed=4)), init_model(_small(seed=4))
    for (name, a), (_, b) in zip(first.named_parameters(), second.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)
    image = Tensor(procedural_image(32, seed=1).to_chw())
    np.testing.assert_array_equal(
        forward(first, image, training=False).data, forward(second, image, training=False).data
    )
    assert not np.array_equal(init_model(_small(seed=5))["stem.weight"].data, first["stem.weight"].data)


def test_parameter_count_closed_form() -> None:
    cfg = ModelConfig(blocks=2, channels=8, kernel=3)
    c, k = 8, 3
    per_block = 2 * (c * c * k * k + c) + 4 * c
    assert init_model(cfg).parameter_count() == 3 * c * k * k + c + 2 * per_block

    plain = ModelConfig(blocks=2, channels=8, kernel=3, norm=False)
    assert init_model(plain).parameter_count() == 3 * c * k * k + c + 2 * (per_block - 4 * c)
    assert norm_layer_names(plain) == []
    assert [name for name, _ in parameter_layout(cfg)][:2] == ["stem.weight", "stem.bias"]


def test_he_initialization_variance() -> None:
    params = init_model(ModelConfig(blocks=1, channels=64, seed=2))
    weights = params["blocks.0.conv1.weight"].data.astype(np.float64)
    expected = 2.0 / (64 * 3 * 3)
    assert abs(weights.var() / expected - 1.0) < 0.05
    assert np.all(params["blocks.0.norm1.gamma"].data == 1.0)
    assert np.all(params["blocks.0.conv1.bias"].data == 0.0)


def test_translation_covariance_away_from_borders() -> None:
    params = init_model(_small(blocks=1))
    image = np.random.default_rng(0).uniform(size=(3, 16, 20))
    full = forward(params, Tensor(image), training=False).data
    cropped = forward(params, Tensor(image[:, :, 2:]), training=False).data
    # stem plus two convolutions per block, each with radius 1
    r = 3
    np.testing.assert_allclose(cropped[:, r : 16 - r, r : 18 - r], full[:, r : 16 - r, r + 2 : 20 - r], atol=1e-5)


def test_rejects_bad_inputs() -> None:
    params = init_model(_small())
    with pytest.raises(ShapeError):
        forward(params, Tensor(np.zeros((4, 16, 16))), training=False)
    with pytest.raises(ShapeError):
        forward(params, Tensor(np.zeros((3, 4, 4))), training=False)
    with pytest.raises(ShapeError):
        pair_tensor(procedural_image(32, seed=0), procedural_image(48, seed=0))


def test_batch_features_split_per_image() -> None:
    params = init_model(_small())
    a, b = procedural_image(32, seed=1), procedural_image(32, seed=2)
    fa, fb = extract_feature_batch(params, pair_tensor(a, b), training=False)
    alone = extract_features(params, Tensor(a.to_chw()), training=False)
    np.testing.assert_allclose(fa.data.data, alone.data.data, atol=1e-6)
    assert fb.data.shape == (8, 32, 32)


def test_every_parameter_receives_a_gradient() -> None:
    params = init_model(_small(blocks=2))
    images = pair_tensor(procedural_image(16, seed=3), procedural_image(16, seed=4))
    weights = np.random.default_rng(1).normal(size=(2, 8, 16, 16))
    with Tape() as tape:
        out = forward(params, images, training=True)
        backward(sum_all(mul(out, Tensor(weights))), tape)
    for name, tensor in params.named_parameters():
        assert tensor.grad is not None, name
        assert tensor.grad.shape == tensor.shape
        assert np.all(np.isfinite(tensor.grad)), name
    assert all(stats.updates == 1 for stats in params.stats.values())
