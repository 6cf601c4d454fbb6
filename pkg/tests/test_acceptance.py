"""Desk-scale training runs; excluded by default, run with ``pytest -m slow``.

One 1x1 / 8x8 sweep is trained per session and every check reads its
checkpoints, history and table.
"""

import numpy as np
import pytest

from app.data import synth_dataset
from app.metrics import copy_source_predictions, evaluate
from app.probes import grid_sweep, run_probe, select_probe_cells
from app.schemas import PatchGridSpec, SynthConfig, TrainConfig
from app.training import CHECKPOINT_NAME, HISTORY_NAME, load_models, read_history

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def desk_data():
    cfg = SynthConfig(height=64, width=64, train_samples=256, test_samples=64, seed=0)
    train_set, _ = synth_dataset(cfg, "train")
    test_set, _ = synth_dataset(cfg, "test")
    return train_set, test_set


def desk_config(**overrides) -> TrainConfig:
    values = dict(crop_height=64, crop_width=64, epochs=30, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="module")
def sweep(desk_data, tmp_path_factory):
    train_set, test_set = desk_data
    out_dir = tmp_path_factory.mktemp("desk-sweep")
    grids = [PatchGridSpec(rows=1, cols=1), PatchGridSpec(rows=8, cols=8)]
    table, _ = grid_sweep(desk_config(), grids, train_set, test_set, out_dir=out_dir)
    return table, out_dir


@pytest.fixture(scope="module")
def local_model(sweep):
    _, out_dir = sweep
    generator, _, _ = load_models(out_dir / "grid-8x8" / CHECKPOINT_NAME)
    return generator


def test_reconstruction_loss_trends_down(sweep):
    _, out_dir = sweep
    rec = [r.rec_loss for r in read_history(out_dir / "grid-8x8" / HISTORY_NAME).records]
    assert np.mean(rec[-5:]) < np.mean(rec[:5])


def test_more_mlps_translate_better(sweep):
    table, _ = sweep
    by_grid = {row.grid: row for row in table.rows}
    assert table.reference == "1x1"
    assert by_grid["8x8"].mse_e3_mean < by_grid["1x1"].mse_e3_mean
    assert by_grid["8x8"].p_mse < 0.05


def test_local_model_beats_copy_source(local_model, desk_data):
    _, test_set = desk_data
    result = evaluate(local_model, test_set, baseline=copy_source_predictions(test_set))
    assert result.report.summary["mse"].mean < result.baseline.summary["mse"].mean


def test_enhancing_regions_beat_copy_source(local_model, desk_data):
    _, test_set = desk_data
    result = evaluate(local_model, test_set, baseline=copy_source_predictions(test_set))
    assert result.report.summary["masked_mse"].mean < result.baseline.summary["masked_mse"].mean


def test_single_mlp_probes(local_model, desk_data):
    _, test_set = desk_data
    pair = test_set[0]
    fg, bg = select_probe_cells(pair.source, local_model.grid)
    report, _ = run_probe(local_model, pair, fg, bg)
    assert report.foreground_mse >= 2 * report.full_mse
    assert report.background_variance * 10 <= report.full_variance
