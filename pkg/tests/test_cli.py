import json

import pytest
from click.testing import CliRunner

from app.cli import cli
from app.config import RESOLVED_CONFIG_NAME
from app.data import MANIFEST_NAME
from app.training import CHECKPOINT_NAME
from tests.conftest import tiny_run, tiny_synth


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.json"
    config.write_text(tiny_run().model_dump_json(indent=2))
    runner = CliRunner()
    data = runner.invoke(cli, ["gen-data", "--config", str(config), "--out-dir", str(root / "data")])
    assert data.exit_code == 0, data.output
    trained = runner.invoke(cli, [
        "train", "--config", str(config), "--data", str(root / "data"),
        "--out-dir", str(root / "train"), "--epochs", "1",
    ])
    assert trained.exit_code == 0, trained.output
    return root, config


def run(*args):
    return CliRunner().invoke(cli, [str(a) for a in args])


def test_gen_data_writes_both_splits(workspace):
    root, _ = workspace
    for split, count in (("train", 8), ("test", 5)):
        manifest = json.loads((root / "data" / split / MANIFEST_NAME).read_text())
        assert manifest["split"] == split
        assert len(manifest["samples"]) == count
    assert (root / "data" / "train" / "train-0000_src.png").is_file()


def test_flags_override_the_config_file(workspace):
    root, _ = workspace
    resolved = json.loads((root / "train" / RESOLVED_CONFIG_NAME).read_text())
    assert resolved["train"]["epochs"] == 1
    assert resolved["train"]["grid"] == {"rows": 2, "cols": 2}
    history = (root / "train" / "history.csv").read_text().splitlines()
    assert len(history) == 2
    assert (root / "train" / CHECKPOINT_NAME).is_file()


def test_evaluate_writes_report(workspace):
    root, config = workspace
    result = run("evaluate", "--config", config, "--checkpoint", root / "train" / CHECKPOINT_NAME,
                 "--data", root / "data", "--out-dir", root / "eval")
    assert result.exit_code == 0, result.output
    block = json.loads((root / "eval" / "metrics.json").read_text())
    assert block["count"] == 5
    assert "baseline_table" in block


def test_translate_dataset_and_single_file(workspace):
    root, config = workspace
    ckpt = root / "train" / CHECKPOINT_NAME
    result = run("translate", "--config", config, "--checkpoint", ckpt,
                 "--data", root / "data" / "test", "--out-dir", root / "pred")
    assert result.exit_code == 0, result.output
    assert len(list((root / "pred" / "predictions").glob("*_pred.raw"))) == 5

    single = root / "data" / "test" / "test-0000_src0.raw"
    result = run("translate", "--config", config, "--checkpoint", ckpt, "--input", single,
                 "--out-dir", root / "single")
    assert result.exit_code == 0, result.output
    assert (root / "single" / "predictions" / "test-0000_src0_pred.png").is_file()


def test_translate_needs_exactly_one_input(workspace):
    root, config = workspace
    result = run("translate", "--config", config, "--checkpoint", root / "train" / CHECKPOINT_NAME,
                 "--out-dir", root / "none")
    assert result.exit_code == 1


def test_probe_writes_outputs(workspace):
    root, config = workspace
    result = run("probe", "--config", config, "--checkpoint", root / "train" / CHECKPOINT_NAME,
                 "--data", root / "data", "--out-dir", root / "probe", "--foreground", "0,1")
    assert result.exit_code == 0, result.output
    report = json.loads((root / "probe" / "probe.json").read_text())
    assert report["foreground_cell"] == [0, 1]
    for name in ("full", "foreground", "background"):
        assert (root / "probe" / f"probe_{name}.png").is_file()


def test_probe_sample_index_out_of_range_is_invalid(workspace):
    root, config = workspace
    result = run("probe", "--config", config, "--checkpoint", root / "train" / CHECKPOINT_NAME,
                 "--data", root / "data", "--out-dir", root / "probe-bad", "--sample-index", 99)
    assert result.exit_code == 1


def test_non_dividing_grid_exits_with_validation_code(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(tiny_run().model_dump_json())
    result = run("train", "--config", config, "--grid", "3x3", "--out-dir", tmp_path / "out")
    assert result.exit_code == 1
    assert not (tmp_path / "out" / CHECKPOINT_NAME).exists()


def test_missing_checkpoint_is_a_runtime_failure(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(tiny_run().model_dump_json())
    result = run("evaluate", "--config", config, "--checkpoint", tmp_path / "absent.linr",
                 "--out-dir", tmp_path / "out")
    assert result.exit_code == 2


def test_unknown_option_is_a_usage_error():
    assert run("train", "--no-such-flag").exit_code == 1


def test_grad_check_passes():
    result = run("grad-check", "--max-entries", 3)
    assert result.exit_code == 0, result.output


def test_translate_crops_sources_larger_than_the_model(tmp_path):
    config = tmp_path / "run.json"
    cfg = tiny_run().model_copy(update={"data": tiny_synth(height=32, width=32, train_samples=4, test_samples=3)})
    config.write_text(cfg.model_dump_json())
    assert run("gen-data", "--config", config, "--out-dir", tmp_path / "data").exit_code == 0
    trained = run("train", "--config", config, "--data", tmp_path / "data", "--out-dir", tmp_path / "train",
                  "--epochs", 1)
    assert trained.exit_code == 0, trained.output
    result = run("translate", "--config", config, "--checkpoint", tmp_path / "train" / CHECKPOINT_NAME,
                 "--data", tmp_path / "data", "--out-dir", tmp_path / "pred")
    assert result.exit_code == 0, result.output
    assert len(list((tmp_path / "pred" / "predictions").glob("*_pred.raw"))) == 3
