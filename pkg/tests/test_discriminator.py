import numpy as np
import pytest

from app.diffcore import no_grad
from app.discriminator import Discriminator, inject_noise, logit_map_size, receptive_field
from app.errors import ShapeError
from app.schemas import DiscConfig


def test_default_logit_map_for_full_crop():
    assert logit_map_size(160, 128, DiscConfig()) == (18, 14)


def test_zero_parameters_give_zero_logits():
    disc = Discriminator(DiscConfig(widths=(4, 8, 1), strides=(2, 1, 1)), std=0.0)
    logits = disc(np.ones((2, 1, 16, 16)), np.ones((2, 1, 16, 16)))
    np.testing.assert_array_equal(logits.data, 0.0)


def test_default_architecture():
    cfg = DiscConfig()
    disc = Discriminator(cfg, np.random.default_rng(0))
    assert [disc.params[f"block.{k}.weight"].shape[0] for k in range(5)] == [64, 128, 256, 256, 1]
    weights = disc.params["block.1.weight"].data
    assert abs(float(weights.std()) - 0.02) < 0.002
    assert not any(name.startswith("norm") for name in disc.params)


def test_batch_permutation_permutes_logits():
    disc = Discriminator(DiscConfig(widths=(4, 4, 1), strides=(2, 1, 1)), np.random.default_rng(1), std=0.3)
    rng = np.random.default_rng(2)
    s, t = rng.uniform(-1, 1, (3, 1, 12, 12)), rng.uniform(-1, 1, (3, 1, 12, 12))
    perm = [2, 0, 1]
    with no_grad():
        a = disc(s, t).data
        b = disc(s[perm], t[perm]).data
    np.testing.assert_allclose(a[perm], b, rtol=1e-6, atol=1e-7)


def test_undersized_input_is_rejected():
    disc = Discriminator(DiscConfig(), np.random.default_rng(0))
    with pytest.raises(ShapeError, match="too small"):
        disc(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)))


def test_extent_mismatch_is_rejected():
    disc = Discriminator(DiscConfig(widths=(4, 1), strides=(2, 1)), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        disc(np.zeros((1, 1, 12, 12)), np.zeros((1, 1, 12, 10)))


def test_config_requires_single_logit_channel():
    from app.errors import ConfigError

    with pytest.raises(ConfigError):
        DiscConfig(widths=(4, 2), strides=(2, 1))


def test_pixel_change_stays_inside_receptive_fields():
    cfg = DiscConfig(widths=(3, 3, 1), strides=(2, 1, 1))
    disc = Discriminator(cfg, np.random.default_rng(3), std=0.5)
    rng = np.random.default_rng(4)
    source, target = rng.uniform(-1, 1, (1, 1, 20, 20)), rng.uniform(-1, 1, (1, 1, 20, 20))
    y, x = 3, 15
    moved = target.copy()
    moved[0, 0, y, x] += 1.0
    with no_grad():
        diff = np.abs(disc(source, moved).data - disc(source, target).data)[0, 0]
    for (i, j), value in np.ndenumerate(diff):
        rows, cols = receptive_field(i, j, cfg)
        covers = rows.start <= y < rows.stop and cols.start <= x < cols.stop
        if not covers:
            assert value == 0.0
    assert diff.max() > 0


def test_noise_identity_and_determinism():
    image = np.random.default_rng(5).uniform(-1, 1, (1, 1, 8, 8))
    assert inject_noise(image, 0.0, np.random.default_rng(0)) is image
    a = inject_noise(image, 0.1, np.random.default_rng(6))
    b = inject_noise(image, 0.1, np.random.default_rng(6))
    np.testing.assert_array_equal(a, b)


def test_noise_statistics():
    image = np.zeros((1, 1, 1000, 1000))
    noise = inject_noise(image, 0.1, np.random.default_rng(7)) - image
    assert abs(noise.mean()) < 0.01 * 0.1
    assert abs(noise.var() - 0.01) < 0.01 * 0.01


def test_state_dict_round_trip():
    cfg = DiscConfig(widths=(4, 1), strides=(2, 1))
    disc = Discriminator(cfg, np.random.default_rng(8))
    other = Discriminator(cfg, np.random.default_rng(9))
    other.load_state_dict(disc.state_dict())
    x = np.random.default_rng(10).uniform(-1, 1, (1, 1, 12, 12))
    np.testing.assert_array_equal(other(x, x).data, disc(x, x).data)
