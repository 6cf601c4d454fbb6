import numpy as np
import pytest

from app.diffcore import no_grad
from app.errors import ChannelMismatchError, LayoutError, ShapeError
from app.generator import (
    Generator,
    broadcast_cell,
    evaluate_mlp,
    generator_forward,
    hypernet_forward,
    downsample_plan,
    init_hypernet,
    local_mlp_eval,
    mlp_param_layout,
)
from app.geometry import encode_grid, partition, pixel_features
from app.schemas import HypernetConfig, MlpSpec, PatchGridSpec, TrainConfig


def small_generator(grid=(2, 2), extent=(8, 8), bands=2, seed=0, **hyper):
    hyper = {"width": 4, "trunk_blocks": 1, "head_init_std": 0.1, **hyper}
    spec = MlpSpec(in_features=4 * bands + 1, hidden=6, layers=3)
    return Generator(HypernetConfig(**hyper), spec, PatchGridSpec(rows=grid[0], cols=grid[1]),
                     *extent, bands=bands, rng=np.random.default_rng(seed))


@pytest.mark.parametrize("hidden,layers,expected", [(128, 8, 102529), (64, 5, 14209)])
def test_parameter_counts(hidden, layers, expected):
    layout = mlp_param_layout(MlpSpec(in_features=25, hidden=hidden, layers=layers))
    assert layout.total == expected


def test_smallest_layout():
    layout = mlp_param_layout(MlpSpec(in_features=1, hidden=1, layers=2))
    assert layout.total == 4
    assert [(s.weight_offset, s.bias_offset) for s in layout.slots] == [(0, 1), (2, 3)]


def test_default_config_mlp_specs():
    cfg = TrainConfig()
    assert mlp_param_layout(cfg.mlp_spec()).total == 14209
    global_cfg = TrainConfig(grid=PatchGridSpec(rows=1, cols=1))
    assert mlp_param_layout(global_cfg.mlp_spec()).total == 102529


@pytest.mark.parametrize("grid,extent", [
    ((4, 4), (16, 16)), ((1, 1), (8, 8)), ((2, 4), (8, 16)),
    ((1, 1), (16, 8)), ((3, 3), (12, 12)), ((1, 1), (20, 12)),
])
def test_weight_grid_shape(grid, extent):
    gen = small_generator(grid=grid, extent=extent)
    weights = gen.weight_grid(np.zeros((2, 1) + extent))
    assert weights.shape == (2, grid[0] * grid[1], gen.layout.total)


@pytest.mark.parametrize("extent,grid,stages,pool", [
    ((64, 64), (8, 8), 3, (1, 1)),
    ((160, 128), (1, 1), 5, (5, 4)),
    ((160, 128), (8, 8), 2, (5, 4)),
    ((12, 12), (3, 3), 2, (1, 1)),
])
def test_downsample_plan(extent, grid, stages, pool):
    plan = downsample_plan(*extent, PatchGridSpec(rows=grid[0], cols=grid[1]))
    assert (plan.stages, plan.pool) == (stages, pool)


def test_pooled_hypernet_is_the_block_mean_of_the_unpooled_one():
    gen = small_generator(grid=(1, 1), extent=(16, 8), trunk_blocks=0)
    source = np.random.default_rng(4).uniform(-1, 1, (1, 1, 16, 8))
    assert (gen.plan.stages, gen.plan.pool) == (3, (2, 1))
    two_cells = hypernet_forward(source, gen.params, gen.hypernet_cfg, gen.mlp, PatchGridSpec(rows=2, cols=1)).data
    one_cell = gen.weight_grid(source).data
    np.testing.assert_allclose(one_cell[0, 0], two_cells[0].mean(axis=0), rtol=1e-5, atol=1e-6)


def test_hypernet_rejects_spatial_mismatch():
    gen = small_generator(grid=(2, 2), extent=(8, 8))
    with pytest.raises(ShapeError, match="patch grid"):
        hypernet_forward(np.zeros((1, 1, 16, 16)), gen.params, gen.hypernet_cfg, gen.mlp, gen.grid)


def test_hypernet_rejects_channel_mismatch():
    gen = small_generator()
    with pytest.raises(ChannelMismatchError):
        gen.weight_grid(np.zeros((1, 2, 8, 8)))


def test_head_bias_is_the_base_mlp():
    gen = small_generator(head_init_std=0.0)
    weights = gen.weight_grid(np.random.default_rng(1).uniform(-1, 1, (1, 1, 8, 8))).data
    for cell in range(4):
        np.testing.assert_array_equal(weights[0, cell], gen.params["head.bias"].data)


def test_zero_weights_give_zero_output():
    gen = small_generator()
    out = gen.render(np.zeros((1, 4, gen.layout.total), dtype=np.float32), np.zeros((1, 1, 8, 8)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_global_grid_matches_single_mlp(float64):
    gen = small_generator(grid=(1, 1))
    source = np.random.default_rng(2).uniform(-1, 1, (1, 1, 8, 8))
    weights = gen.weight_grid(source).data
    out = gen.render(weights, source).data
    feats = pixel_features(gen.encoding, source)[0]
    direct = evaluate_mlp(weights[0, 0], feats, gen.mlp)[..., 0]
    np.testing.assert_allclose(out[0, 0], direct, atol=1e-12)


def test_local_eval_matches_scalar_reference(float64):
    rng = np.random.default_rng(3)
    bands = 2
    spec = MlpSpec(in_features=4 * bands + 1, hidden=5, layers=3)
    grid = PatchGridSpec(rows=2, cols=2)
    pmap = partition(8, 8, grid)
    enc = encode_grid(8, 8, bands)
    weights = rng.normal(0, 0.5, (1, 4, mlp_param_layout(spec).total))
    source = rng.uniform(-1, 1, (1, 1, 8, 8))
    out = local_mlp_eval(weights, enc, source, pmap, spec).data

    for y in range(8):
        for x in range(8):
            r, c = pmap.owner(y, x)
            flat = weights[0, r * 2 + c]
            h = list(enc.features[y, x]) + [source[0, 0, y, x]]
            for slot in mlp_param_layout(spec).slots:
                w = flat[slot.weight_offset:slot.bias_offset].reshape(slot.fan_in, slot.fan_out)
                b = flat[slot.bias_offset:slot.bias_offset + slot.fan_out]
                z = [sum(h[i] * w[i, j] for i in range(slot.fan_in)) + b[j] for j in range(slot.fan_out)]
                h = [np.tanh(v) if slot.last else (v if v > 0 else 0.2 * v) for v in z]
            assert out[0, 0, y, x] == pytest.approx(h[0], abs=1e-12)


def test_layout_mismatch_is_rejected():
    gen = small_generator()
    with pytest.raises(LayoutError):
        gen.render(np.zeros((1, 4, gen.layout.total - 1)), np.zeros((1, 1, 8, 8)))


def test_output_extent_and_range():
    gen = small_generator(head_init_std=0.1)
    source = np.random.default_rng(4).uniform(-1, 1, (3, 1, 8, 8))
    out = gen.translate(source)
    assert out.shape == (3, 1, 8, 8)
    assert np.all(np.abs(out) < 1.0)


def test_generator_forward_function_matches_class():
    gen = small_generator()
    source = np.random.default_rng(5).uniform(-1, 1, (1, 1, 8, 8)).astype(np.float32)
    with no_grad():
        a = generator_forward(source, gen.params, gen.hypernet_cfg, gen.mlp, gen.grid, bands=2).data
    np.testing.assert_array_equal(a, gen.translate(source))


def test_hypernetwork_sees_the_whole_image():
    gen = small_generator(head_init_std=1.0)
    base = np.random.default_rng(6).uniform(-1, 1, (1, 1, 8, 8))
    changed = base.copy()
    changed[0, 0, :4, :4] += 0.5  # only inside cell (0, 0)
    diff = np.abs(gen.translate(changed) - gen.translate(base))[0, 0]
    assert diff[4:, 4:].max() > 0


def test_zeroing_one_cell_changes_only_its_patch():
    gen = small_generator(grid=(4, 4), extent=(32, 32), head_init_std=0.5)
    source = np.random.default_rng(7).uniform(-1, 1, (1, 1, 32, 32))
    weights = gen.weight_grid(source).data
    zeroed = weights.copy()
    zeroed[0, 5] = 0.0
    diff = np.abs(gen.render(zeroed, source).data - gen.render(weights, source).data)[0, 0]
    ys, xs = gen.pmap.bounds(1, 1)
    outside = diff.copy()
    outside[ys, xs] = 0
    assert np.all(outside == 0)
    assert diff[ys, xs].max() > 0


def test_broadcast_cell_tiles_one_vector():
    weights = np.arange(2 * 3 * 4, dtype=np.float64).reshape(2, 3, 4)
    tiled = broadcast_cell(weights, 1)
    assert tiled.shape == weights.shape
    np.testing.assert_array_equal(tiled[:, 2], weights[:, 1])
    with pytest.raises(ShapeError):
        broadcast_cell(weights, 3)


def test_state_round_trip_through_description():
    gen = small_generator(seed=8)
    clone = Generator.from_description(gen.describe(), gen.state_dict())
    source = np.random.default_rng(9).uniform(-1, 1, (1, 1, 8, 8))
    np.testing.assert_array_equal(clone.translate(source), gen.translate(source))


def test_init_is_seed_deterministic():
    cfg, spec = HypernetConfig(width=4, trunk_blocks=2), MlpSpec(in_features=9, hidden=4, layers=3)
    a = init_hypernet(cfg, spec, 2, np.random.default_rng(11))
    b = init_hypernet(cfg, spec, 2, np.random.default_rng(11))
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert sum(1 for n in a if n.startswith("trunk.") and n.endswith(".weight")) == 2
