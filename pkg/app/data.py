"""Synthetic paired dataset, intensity preparation and on-disk sample storage.

A scene is a head ellipse on a -1 background holding non-overlapping lesion
ellipses of two classes.  Both classes share the same interior mean; class A
("enhancing") carries a stripe texture, class B is smooth.  The target equals
the source except inside class-A lesions, which are lifted by ``gain`` plus a
bright inner rim, so the uplift can only be inferred from texture context.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from app.errors import CropError, DatasetError
from app.schemas import (
    DATASET_FORMAT_VERSION,
    DatasetManifest,
    PatchGridSpec,
    SampleRecord,
    SynthConfig,
)

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"LINRTNSR"
TENSOR_VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4")}
MANIFEST_NAME = "manifest.json"
_SPLIT_STREAM = {"train": 0, "test": 1}
_PLACEMENT_TRIES = 200


@dataclass
class SamplePair:
    id: str
    source: np.ndarray
    target: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.source.ndim != 3 or self.target.ndim != 3:
            raise DatasetError(self.id, f"expected (C, H, W) arrays, got {self.source.shape} and {self.target.shape}")
        if self.source.shape[1:] != self.target.shape[1:]:
            raise DatasetError(self.id, f"source {self.source.shape} and target {self.target.shape} extents differ")
        if self.mask is not None and self.mask.shape != self.source.shape[1:]:
            raise DatasetError(self.id, f"mask {self.mask.shape} does not match extent {self.source.shape[1:]}")

    @property
    def extent(self) -> Tuple[int, int]:
        return self.source.shape[1], self.source.shape[2]

    @property
    def channels(self) -> int:
        return self.source.shape[0]


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float
    enhancing: bool

    def radius_map(self, height: int, width: int) -> np.ndarray:
        """Normalized elliptical radius per pixel; < 1 inside."""
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        dy, dx = yy - self.cy, xx - self.cx
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = (dy * c + dx * s) / self.ry
        v = (-dy * s + dx * c) / self.rx
        return np.sqrt(u * u + v * v)


# scene rendering

def head_ellipse(cfg: SynthConfig) -> Ellipse:
    return Ellipse(
        cy=(cfg.height - 1) / 2, cx=(cfg.width - 1) / 2,
        ry=cfg.head_extent[0] * cfg.height, rx=cfg.head_extent[1] * cfg.width,
        angle=0.0, enhancing=False,
    )


def contrast_variant(channel0: np.ndarray, k: int) -> np.ndarray:
    """Fixed monotone remap of the reference contrast; -1 and 1 are fixed points."""
    if k == 0:
        return channel0
    gamma = 1.0 + 0.5 * k
    return 2.0 * ((channel0 + 1.0) / 2.0) ** gamma - 1.0


def render_scene(
    cfg: SynthConfig,
    lesions: Sequence[Ellipse],
    noise: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic oracle: (source (m, H, W), target (1, H, W), enhancing mask (H, W)).

    A pure function of its arguments.  Lesions are painted in draw order, so a
    later lesion wins where two overlap.
    """
    h, w = cfg.height, cfg.width
    noise = np.zeros((h, w)) if noise is None else noise
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    head = head_ellipse(cfg).radius_map(h, w) < 1.0
    shading = cfg.shading * np.cos(np.pi * (yy / h - 0.5)) * np.cos(np.pi * (xx / w - 0.5))
    image = np.where(head, cfg.tissue_level + shading + noise, -1.0)

    delta = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=bool)
    for lesion in lesions:
        rho = lesion.radius_map(h, w)
        inside = (rho < 1.0) & head
        if not inside.any():
            continue
        if lesion.enhancing:
            phase = (yy * np.cos(lesion.angle) + xx * np.sin(lesion.angle)) / cfg.stripe_period
            values = cfg.stripe_amplitude * np.sin(2 * np.pi * phase) + noise
        else:
            values = noise
        # centre each interior on the shared lesion level
        image[inside] = cfg.lesion_level + values[inside] - values[inside].mean()
        delta[inside] = 0.0
        mask[inside] = False
        if lesion.enhancing:
            rim = inside & (rho > 1.0 - cfg.rim_width / min(lesion.ry, lesion.rx))
            delta[inside] = cfg.gain
            delta[rim] += cfg.rim_gain
            mask[inside] = True

    image = np.clip(image, -1.0, 1.0)
    channels = np.stack([contrast_variant(image, k) for k in range(cfg.source_channels)])
    target = np.clip(image + delta, -1.0, 1.0)[None]
    return channels, target, mask


def _overlaps(candidate: Ellipse, placed: Sequence[Ellipse], margin: float) -> bool:
    reach = max(candidate.ry, candidate.rx)
    for other in placed:
        if np.hypot(candidate.cy - other.cy, candidate.cx - other.cx) < reach + max(other.ry, other.rx) + margin:
            return True
    return False


def draw_lesions(cfg: SynthConfig, rng: np.random.Generator) -> List[Ellipse]:
    head = head_ellipse(cfg)
    n_a = int(rng.integers(cfg.class_a[0], cfg.class_a[1] + 1))
    n_b = int(rng.integers(cfg.class_b[0], cfg.class_b[1] + 1))
    kinds = [True] * n_a + [False] * n_b
    rng.shuffle(kinds)
    placed: List[Ellipse] = []
    for enhancing in kinds:
        for _ in range(_PLACEMENT_TRIES):
            ry, rx = rng.uniform(cfg.radius[0], cfg.radius[1], size=2)
            r, t = np.sqrt(rng.uniform()), rng.uniform(0, 2 * np.pi)
            # keep the whole lesion inside the head
            cy = head.cy + r * max(head.ry - max(ry, rx), 0.0) * np.sin(t)
            cx = head.cx + r * max(head.rx - max(ry, rx), 0.0) * np.cos(t)
            candidate = Ellipse(cy, cx, ry, rx, rng.uniform(0, np.pi), enhancing)
            if not _overlaps(candidate, placed, cfg.rim_width + 1.0):
                placed.append(candidate)
                break
        else:
            logger.debug("no room for another lesion after %d tries", _PLACEMENT_TRIES)
    return placed


def synth_sample(cfg: SynthConfig, split: str, index: int) -> SamplePair:
    rng = np.random.default_rng([cfg.seed, _SPLIT_STREAM[split], index])
    lesions = draw_lesions(cfg, rng)
    noise = cfg.noise_level * rng.standard_normal((cfg.height, cfg.width))
    source, target, mask = render_scene(cfg, lesions, noise)
    return SamplePair(
        id=f"{split}-{index:04d}",
        source=source.astype(np.float32),
        target=target.astype(np.float32),
        mask=mask,
    )


def synth_dataset(cfg: SynthConfig, split: str = "train") -> Tuple[List[SamplePair], DatasetManifest]:
    """All samples of one split plus the manifest describing them.

    Samples depend only on ``(cfg, split, index)``.
    """
    if split not in _SPLIT_STREAM:
        raise DatasetError(None, f"unknown split '{split}'")
    count = cfg.train_samples if split == "train" else cfg.test_samples
    pairs = [synth_sample(cfg, split, i) for i in range(count)]
    manifest = DatasetManifest(split=split, samples=[sample_record(p) for p in pairs])
    logger.info("synthesized %d %s samples at %dx%d", count, split, cfg.height, cfg.width)
    return pairs, manifest


# intensity preparation

def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Per-sample affine min-max map onto [-1, 1]; a constant image maps to -1."""
    image = np.asarray(image)
    if image.size == 0:
        raise CropError("cannot normalize an empty image")
    dtype = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64
    lo, hi = float(image.min()), float(image.max())
    if hi == lo:
        return np.full(image.shape, -1.0, dtype=dtype)
    return (2.0 * (image.astype(np.float64) - lo) / (hi - lo) - 1.0).astype(dtype)


@dataclass
class CropResult:
    image: np.ndarray
    offsets: Tuple[int, int]
    box: Tuple[int, int]
    empty: bool = False


def nonzero_crop(image: np.ndarray, grid: Optional[PatchGridSpec] = None) -> CropResult:
    """Tight box around strictly positive values, zero-padded symmetrically so
    that ``grid`` divides the result.  Accepts (H, W) or (C, H, W); the support
    is the union over channels.  An image with no positive value comes back
    unchanged with ``empty`` set.
    """
    image = np.asarray(image)
    support = image > 0 if image.ndim == 2 else np.any(image > 0, axis=0)
    if not support.any():
        logger.warning("nonzero_crop: image has no positive values, returned unchanged")
        return CropResult(image=image, offsets=(0, 0), box=support.shape, empty=True)
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    top, bottom, left, right = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    cropped = image[..., top:bottom, left:right]
    box = (int(bottom - top), int(right - left))
    if grid is not None:
        pad_h = -box[0] % grid.rows
        pad_w = -box[1] % grid.cols
        spatial = ((pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2))
        cropped = np.pad(cropped, ((0, 0),) * (image.ndim - 2) + spatial)
    return CropResult(image=cropped, offsets=(int(top), int(left)), box=box)


def center_crop(image: np.ndarray, height: int, width: int, fill: float = -1.0) -> np.ndarray:
    """Centre crop or pad the last two axes to ``height`` x ``width``."""
    out = image
    for axis, size in ((-2, height), (-1, width)):
        extent = out.shape[axis]
        if extent > size:
            start = (extent - size) // 2
            out = np.take(out, np.arange(start, start + size), axis=axis)
        elif extent < size:
            pad = [(0, 0)] * out.ndim
            before = (size - extent) // 2
            pad[axis] = (before, size - extent - before)
            out = np.pad(out, pad, constant_values=fill)
    return out


def prepare_raw_image(
    raw: np.ndarray,
    height: int,
    width: int,
    grid: Optional[PatchGridSpec] = None,
) -> np.ndarray:
    """Raw scanner-style intensities -> model-ready (C, H, W) in [-1, 1].

    Non-zero crop, per-channel min-max normalization, then centre pad/crop to
    the model extent with background -1.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 2:
        raw = raw[None]
    if raw.ndim != 3:
        raise CropError(f"expected (H, W) or (C, H, W) raw image, got shape {raw.shape}")
    cropped = nonzero_crop(raw, grid).image
    normalized = np.stack([normalize_intensity(channel) for channel in cropped])
    return center_crop(normalized, height, width, fill=-1.0)


# raw tensor files

def write_tensor(path: Union[str, Path], array: np.ndarray) -> Path:
    """Header (magic, version, dtype code, ndim, dims) then little-endian float32 payload."""
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack(f"<III{arr.ndim}I", TENSOR_VERSION, 1, arr.ndim, *arr.shape)
    path.write_bytes(header + arr.tobytes())
    return path


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    offset = len(TENSOR_MAGIC)
    if blob[:offset] != TENSOR_MAGIC:
        raise DatasetError(None, f"{path.name} is not a raw tensor file")
    version, code, ndim = struct.unpack_from("<III", blob, offset)
    offset += 12
    if version != TENSOR_VERSION or code not in DTYPE_CODES:
        raise DatasetError(None, f"{path.name}: unsupported version {version} or dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) - offset != count * DTYPE_CODES[code].itemsize:
        raise DatasetError(None, f"{path.name}: payload does not match dims {dims}")
    return np.frombuffer(blob, dtype=DTYPE_CODES[code], offset=offset, count=count).reshape(dims).astype(np.float32)


# sample storage

def sample_record(pair: SamplePair) -> SampleRecord:
    return SampleRecord(
        id=pair.id,
        source_files=[f"{pair.id}_src{k}.raw" for k in range(pair.channels)],
        target_file=f"{pair.id}_tgt.raw",
        mask_file=f"{pair.id}_mask.raw" if pair.mask is not None else None,
        height=pair.extent[0],
        width=pair.extent[1],
        channels=pair.channels,
    )


def save_sample(pair: SamplePair, directory: Union[str, Path]) -> SampleRecord:
    """Write one raw tensor file per channel (plus target and mask); values are stored as float32."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    record = sample_record(pair)
    for k, name in enumerate(record.source_files):
        write_tensor(directory / name, pair.source[k])
    write_tensor(directory / record.target_file, pair.target[0])
    if record.mask_file is not None:
        write_tensor(directory / record.mask_file, pair.mask.astype(np.float32))
    return record


def write_dataset(pairs: Sequence[SamplePair], directory: Union[str, Path], split: str) -> Path:
    directory = Path(directory)
    records = [save_sample(pair, directory) for pair in pairs]
    manifest = DatasetManifest(split=split, samples=records)
    path = directory / MANIFEST_NAME
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("wrote %d %s samples to %s", len(records), split, directory)
    return path


def _read_checked(path: Path, record: SampleRecord) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(record.id, f"missing file {path.name}")
    try:
        arr = read_tensor(path)
    except DatasetError as exc:
        raise DatasetError(record.id, str(exc)) from None
    if arr.shape != (record.height, record.width):
        raise DatasetError(record.id, f"{path.name} has extent {arr.shape}, manifest says {(record.height, record.width)}")
    return arr


def load_dataset(manifest_path: Union[str, Path]) -> List[SamplePair]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError(None, f"manifest not found: {manifest_path}")
    raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    if raw.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetError(None, f"manifest format {raw.get('format_version')} != {DATASET_FORMAT_VERSION}")
    try:
        manifest = DatasetManifest.model_validate(raw)
    except ValueError as exc:
        raise DatasetError(None, f"invalid manifest: {exc}") from None
    base = manifest_path.parent
    pairs = []
    for record in manifest.samples:
        if len(record.source_files) != record.channels:
            raise DatasetError(record.id, f"{len(record.source_files)} source files for {record.channels} channels")
        source = np.stack([_read_checked(base / name, record) for name in record.source_files])
        target = _read_checked(base / record.target_file, record)[None]
        mask = None
        if record.mask_file is not None:
            mask = _read_checked(base / record.mask_file, record) > 0.5
        pairs.append(SamplePair(id=record.id, source=source, target=target, mask=mask))
    logger.debug("loaded %d samples from %s", len(pairs), manifest_path)
    return pairs


def export_png(image: np.ndarray, path: Union[str, Path]) -> Path:
    """8-bit grayscale preview, linear from [-1, 1]; for inspection only."""
    arr = np.asarray(image, dtype=np.float64)
    while arr.ndim > 2:
        arr = arr[0]
    pixels = np.round((np.clip(arr, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    path = Path(path)
    Image.fromarray(pixels).save(path)
    return path
