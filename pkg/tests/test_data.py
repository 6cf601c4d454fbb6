import json

import numpy as np
import pytest

from app.data import (
    MANIFEST_NAME,
    Ellipse,
    SamplePair,
    center_crop,
    export_png,
    load_dataset,
    nonzero_crop,
    normalize_intensity,
    prepare_raw_image,
    read_tensor,
    render_scene,
    save_sample,
    synth_dataset,
    write_dataset,
    write_tensor,
)
from app.errors import DatasetError
from app.schemas import PatchGridSpec
from tests.conftest import tiny_synth


def lesion(enhancing: bool, cy=8.0, cx=8.0, r=3.0) -> Ellipse:
    return Ellipse(cy=cy, cx=cx, ry=r, rx=r, angle=0.3, enhancing=enhancing)


def test_empty_scene_target_equals_source():
    source, target, mask = render_scene(tiny_synth(), [])
    np.testing.assert_array_equal(target[0], source[0])
    assert not mask.any()


def test_non_enhancing_lesion_leaves_target_unchanged():
    source, target, mask = render_scene(tiny_synth(), [lesion(False)])
    np.testing.assert_array_equal(target[0], source[0])
    assert not mask.any()


def test_enhancing_lesion_lifts_only_its_interior():
    cfg = tiny_synth(gain=0.5)
    source, target, mask = render_scene(cfg, [lesion(True)])
    diff = target[0] - source[0]
    assert mask.any()
    np.testing.assert_array_equal(diff[~mask], 0.0)
    assert np.all(diff[mask] > 0)
    inside = lesion(True).radius_map(cfg.height, cfg.width) < 1.0
    np.testing.assert_array_equal(mask, inside)


def test_classes_share_interior_mean():
    cfg = tiny_synth(height=32, width=32, radius=(4.0, 6.0))
    a, b = lesion(True, 12, 12, 4), lesion(False, 20, 20, 4)
    source, _, _ = render_scene(cfg, [a, b], np.random.default_rng(0).normal(0, 0.02, (32, 32)))
    mean_a = source[0][a.radius_map(32, 32) < 1].mean()
    mean_b = source[0][b.radius_map(32, 32) < 1].mean()
    assert mean_a == pytest.approx(cfg.lesion_level, abs=1e-6)
    assert mean_b == pytest.approx(cfg.lesion_level, abs=1e-6)


def test_later_lesion_wins_on_overlap():
    cfg = tiny_synth()
    first, second = lesion(True, 8, 7, 3), lesion(False, 8, 9, 3)
    _, _, mask = render_scene(cfg, [first, second])
    assert not mask[second.radius_map(16, 16) < 1].any()


def test_synthesis_is_pure_in_config():
    cfg = tiny_synth(train_samples=4)
    a, manifest = synth_dataset(cfg, "train")
    b, _ = synth_dataset(cfg, "train")
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.source, y.source)
        np.testing.assert_array_equal(x.target, y.target)
    assert [s.id for s in manifest.samples] == ["train-0000", "train-0001", "train-0002", "train-0003"]
    other, _ = synth_dataset(tiny_synth(train_samples=4, seed=99), "train")
    assert not np.array_equal(other[0].source, a[0].source)


def test_synthetic_samples_are_bounded_and_divisible():
    pairs, _ = synth_dataset(tiny_synth(source_channels=2, test_samples=6), "test")
    for pair in pairs:
        assert pair.channels == 2
        assert pair.source.min() >= -1 and pair.source.max() <= 1
        assert pair.target.min() >= -1 and pair.target.max() <= 1
        for k in (1, 2, 4, 8):
            PatchGridSpec(rows=k, cols=k).check_divides(*pair.extent)


def test_hundred_sample_manifest_has_unique_ids():
    _, manifest = synth_dataset(tiny_synth(train_samples=100), "train")
    ids = [s.id for s in manifest.samples]
    assert len(ids) == 100 == len(set(ids))


def test_normalize_intensity():
    raw = np.array([[0.0, 50.0, 100.0]])
    np.testing.assert_allclose(normalize_intensity(raw), [[-1.0, 0.0, 1.0]])
    full = np.array([-1.0, 0.25, 1.0])
    np.testing.assert_allclose(normalize_intensity(full), full)
    np.testing.assert_array_equal(normalize_intensity(np.full((3, 3), 7.0)), -1.0)


def test_nonzero_crop_cases():
    empty = nonzero_crop(np.zeros((6, 6)))
    assert empty.empty and empty.image.shape == (6, 6)

    point = np.zeros((16, 16))
    point[5, 7] = 3.0
    res = nonzero_crop(point)
    assert res.box == (1, 1) and res.offsets == (5, 7)

    yy, xx = np.mgrid[0:64, 0:64]
    disk = ((yy - 31.5) ** 2 + (xx - 31.5) ** 2 <= 100).astype(float)
    res = nonzero_crop(disk, PatchGridSpec(rows=8, cols=8))
    assert abs(res.box[0] - 20) <= 1 and abs(res.box[1] - 20) <= 1
    assert res.image.shape[0] % 8 == 0 and res.image.shape[1] % 8 == 0


def test_prepare_raw_image_fits_model_extent():
    raw = np.zeros((40, 40))
    raw[10:30, 12:28] = np.linspace(1, 200, 20 * 16).reshape(20, 16)
    image = prepare_raw_image(raw, 32, 32, PatchGridSpec(rows=4, cols=4))
    assert image.shape == (1, 32, 32)
    assert image.min() == -1.0 and image.max() == pytest.approx(1.0)


def test_center_crop_pads_with_background():
    image = np.zeros((1, 4, 4))
    out = center_crop(image, 6, 2)
    assert out.shape == (1, 6, 2)
    assert out[0, 0, 0] == -1.0 and out[0, 1, 0] == 0.0


def test_tensor_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32)
    back = read_tensor(write_tensor(tmp_path / "a.raw", arr))
    np.testing.assert_array_equal(back, arr)
    assert (tmp_path / "a.raw").read_bytes()[:8] == b"LINRTNSR"


def test_dataset_round_trip_is_bit_exact(tmp_path):
    pairs, _ = synth_dataset(tiny_synth(train_samples=3, source_channels=2), "train")
    write_dataset(pairs, tmp_path, "train")
    loaded = load_dataset(tmp_path / MANIFEST_NAME)
    assert [p.id for p in loaded] == [p.id for p in pairs]
    for a, b in zip(pairs, loaded):
        np.testing.assert_array_equal(a.source, b.source)
        np.testing.assert_array_equal(a.target, b.target)
        np.testing.assert_array_equal(a.mask, b.mask)


def test_missing_file_names_the_sample(tmp_path):
    pairs, _ = synth_dataset(tiny_synth(train_samples=2), "train")
    write_dataset(pairs, tmp_path, "train")
    (tmp_path / "train-0001_tgt.raw").unlink()
    with pytest.raises(DatasetError, match="train-0001"):
        load_dataset(tmp_path)


def test_version_mismatch_is_rejected(tmp_path):
    pairs, _ = synth_dataset(tiny_synth(train_samples=1), "train")
    path = write_dataset(pairs, tmp_path, "train")
    manifest = json.loads(path.read_text())
    manifest["format_version"] = 99
    path.write_text(json.dumps(manifest))
    with pytest.raises(DatasetError, match="format"):
        load_dataset(path)


def test_extent_mismatch_names_the_sample(tmp_path):
    pair = SamplePair(id="odd", source=np.zeros((1, 4, 4), np.float32), target=np.zeros((1, 4, 4), np.float32))
    save_sample(pair, tmp_path)
    write_tensor(tmp_path / "odd_tgt.raw", np.zeros((4, 5), np.float32))
    manifest = {"format_version": 1, "split": "test", "samples": [{
        "id": "odd", "source_files": ["odd_src0.raw"], "target_file": "odd_tgt.raw",
        "height": 4, "width": 4, "channels": 1,
    }]}
    (tmp_path / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(DatasetError, match="odd"):
        load_dataset(tmp_path)


def test_png_export(tmp_path):
    from PIL import Image

    path = export_png(np.array([[-1.0, 0.0, 1.0]]), tmp_path / "p.png")
    pixels = np.asarray(Image.open(path))
    assert pixels.dtype == np.uint8
    assert pixels.tolist() == [[0, 128, 255]]
