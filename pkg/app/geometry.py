"""Coordinate grids, Fourier positional encoding and the M x N patch partition."""

from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np

from app.errors import GridDivisibilityError, ShapeError
from app.schemas import PatchGridSpec

Denominator = Literal["extent_minus_one", "extent"]


@dataclass(frozen=True)
class EncodedCoords:
    """Per-pixel features, shape (H, W, 4 * bands), plus the normalized coordinates."""

    features: np.ndarray
    coords: np.ndarray
    bands: int

    @property
    def extent(self) -> Tuple[int, int]:
        return self.features.shape[0], self.features.shape[1]


@dataclass(frozen=True)
class PatchMap:
    height: int
    width: int
    rows: int
    cols: int

    @property
    def patch_height(self) -> int:
        return self.height // self.rows

    @property
    def patch_width(self) -> int:
        return self.width // self.cols

    @property
    def cells(self) -> int:
        return self.rows * self.cols

    def owner(self, y: int, x: int) -> Tuple[int, int]:
        if not (0 <= y < self.height and 0 <= x < self.width):
            raise ShapeError("partition", f"pixel ({y}, {x}) outside {self.height}x{self.width}")
        return y // self.patch_height, x // self.patch_width

    def owner_map(self) -> np.ndarray:
        """(H, W, 2) array of owning (row, col) per pixel."""
        rows = np.arange(self.height) // self.patch_height
        cols = np.arange(self.width) // self.patch_width
        return np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1)

    def bounds(self, r: int, c: int) -> Tuple[slice, slice]:
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise ShapeError("partition", f"cell ({r}, {c}) outside grid {self.rows}x{self.cols}")
        ph, pw = self.patch_height, self.patch_width
        return slice(r * ph, (r + 1) * ph), slice(c * pw, (c + 1) * pw)

    def to_patches(self, pixels: np.ndarray) -> np.ndarray:
        """(B, H, W, F) -> (B, M*N, ph*pw, F), cells in row-major order."""
        b, h, w, f = pixels.shape
        if (h, w) != (self.height, self.width):
            raise ShapeError("partition", f"pixel array {h}x{w} does not match map {self.height}x{self.width}")
        ph, pw = self.patch_height, self.patch_width
        cells = pixels.reshape(b, self.rows, ph, self.cols, pw, f).transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(cells.reshape(b, self.cells, ph * pw, f))

    def from_patches(self, cells: np.ndarray) -> np.ndarray:
        """(B, M*N, ph*pw, F) -> (B, F, H, W)."""
        b, _, _, f = cells.shape
        ph, pw = self.patch_height, self.patch_width
        grid = cells.reshape(b, self.rows, self.cols, ph, pw, f).transpose(0, 5, 1, 3, 2, 4)
        return np.ascontiguousarray(grid.reshape(b, f, self.height, self.width))


def make_coord_grid(height: int, width: int, denominator: Denominator = "extent_minus_one") -> np.ndarray:
    """(H, W, 2) array of (row, col) coordinates normalized to [0, 1].

    With ``extent_minus_one`` the corner pixels land on 0 and 1 exactly; a
    single-pixel axis maps to 0.
    """
    if height < 1 or width < 1:
        raise ShapeError("make_coord_grid", f"extent must be positive, got {height}x{width}")

    def axis(n: int) -> np.ndarray:
        d = n - 1 if denominator == "extent_minus_one" else n
        if d == 0:
            return np.zeros(n)
        return np.arange(n, dtype=np.float64) / d

    rows, cols = np.meshgrid(axis(height), axis(width), indexing="ij")
    return np.stack([rows, cols], axis=-1)


def encode_axis(values: np.ndarray, bands: int) -> np.ndarray:
    """[sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(i-1) pi v), cos(2^(i-1) pi v)] along a new last axis."""
    freqs = np.pi * (2.0 ** np.arange(bands))
    angles = values[..., None] * freqs
    out = np.empty(values.shape + (2 * bands,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def positional_encode(coords: np.ndarray, bands: int) -> EncodedCoords:
    if bands < 1:
        raise ShapeError("positional_encode", "bands must be >= 1")
    features = np.concatenate([encode_axis(coords[..., 0], bands), encode_axis(coords[..., 1], bands)], axis=-1)
    return EncodedCoords(features=features, coords=coords, bands=bands)


def encode_grid(height: int, width: int, bands: int, denominator: Denominator = "extent_minus_one") -> EncodedCoords:
    return positional_encode(make_coord_grid(height, width, denominator), bands)


def partition(height: int, width: int, spec: PatchGridSpec) -> PatchMap:
    if height % spec.rows or width % spec.cols:
        raise GridDivisibilityError(
            "grid", f"grid {spec.label} does not divide image extent {height}x{width}"
        )
    return PatchMap(height=height, width=width, rows=spec.rows, cols=spec.cols)


def pixel_features(enc: EncodedCoords, source: np.ndarray) -> np.ndarray:
    """Concatenate gamma(x) and the source intensities s_x: (B, m, H, W) -> (B, H, W, 4i + m)."""
    b, m, h, w = source.shape
    if (h, w) != enc.extent:
        raise ShapeError("pixel_features", f"source {h}x{w} does not match encoding {enc.extent}")
    gamma = np.broadcast_to(enc.features.astype(source.dtype), (b, h, w, enc.features.shape[-1]))
    return np.concatenate([gamma, source.transpose(0, 2, 3, 1)], axis=-1)
