"""Raster primitives: PNG I/O, area resampling, centered trim, grid cropping
and the pixel-loss bookkeeping of the tiling strategy."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgumentError


@dataclass
class Raster:
    """An H x W x C pixel grid.

    Intensity rasters hold float32 values in [0, 1]. Label rasters
    (``labels=True``) hold small non-negative integer class ids as uint8.
    ``offset`` is the (row, col) of this raster's top-left pixel in the
    source image it was cut from.
    """

    data: np.ndarray
    labels: bool = False
    offset: tuple[int, int] = (0, 0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[0] <= 0 or data.shape[1] <= 0:
            raise InvalidArgumentError(f"raster must be HxWxC with positive sides, got {data.shape}")
        if data.shape[2] not in (1, 3, 6):
            raise InvalidArgumentError(f"raster channels must be 1, 3 or 6, got {data.shape[2]}")
        if self.labels:
            data = data.astype(np.uint8, copy=False)
        else:
            data = data.astype(np.float32, copy=False)
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_uint8(self) -> np.ndarray:
        if self.labels:
            return self.data.copy()
        return np.rint(np.clip(self.data, 0.0, 1.0) * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "Raster":
        return cls(np.asarray(arr, dtype=np.float32) / np.float32(255.0))


@dataclass(frozen=True)
class TileGridSpec:
    source_side: int
    trimmed_side: int
    tile_side: int
    output_side: int
    grid_n: int

    def __post_init__(self):
        for name in ("source_side", "trimmed_side", "tile_side", "output_side", "grid_n"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.trimmed_side > self.source_side:
            raise InvalidArgumentError("trimmed_side exceeds source_side")
        if self.grid_n * self.tile_side != self.trimmed_side:
            raise InvalidArgumentError(
                f"trimmed_side {self.trimmed_side} != grid_n {self.grid_n} x tile_side {self.tile_side}"
            )
        if self.output_side > self.tile_side:
            raise InvalidArgumentError("output_side exceeds tile_side")

    @property
    def tiles_per_source(self) -> int:
        return self.grid_n * self.grid_n


#: The Orthofoto Tirol tiling: 4053 -> 4050 -> 36 x 675 -> 256.
FULL_SCALE_GRID = TileGridSpec(4053, 4050, 675, 256, 6)


@dataclass(frozen=True)
class PixelLossReport:
    direct_loss: int
    strategy_loss_per_tile: int
    trim_loss: int
    tiles_per_source: int = field(default=1)

    @property
    def strategy_loss_total(self) -> int:
        """Pixels dropped per source image by trim plus per-tile downscale."""
        return self.trim_loss + self.tiles_per_source * self.strategy_loss_per_tile

    def format(self) -> str:
        return (
            f"direct downscale loss:       {self.direct_loss:,} px\n"
            f"strategy loss per tile:      {self.strategy_loss_per_tile:,} px\n"
            f"trim loss per source image:  {self.trim_loss:,} px\n"
            f"strategy loss per source:    {self.strategy_loss_total:,} px"
        )


def pixel_loss_report(spec: TileGridSpec) -> PixelLossReport:
    return PixelLossReport(
        direct_loss=spec.source_side**2 - spec.output_side**2,
        strategy_loss_per_tile=spec.tile_side**2 - spec.output_side**2,
        trim_loss=spec.source_side**2 - spec.trimmed_side**2,
        tiles_per_source=spec.tiles_per_source,
    )


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix; row o holds the fractional overlap of output
    cell o with each input pixel, normalized to sum to one."""
    if n_in == n_out:
        return np.eye(n_out)
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(1, n_in + 1)[None, :])
    w = np.clip(hi - lo, 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def _area_resize(data: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    h, w, _ = data.shape
    if (h, w) == (target_h, target_w):
        return data.copy()
    wy = _area_weights(h, target_h)
    wx = _area_weights(w, target_w)
    c = data.shape[2]
    rows = wy @ data.astype(np.float64).reshape(h, w * c)
    rows = rows.reshape(target_h, w, c).transpose(1, 0, 2).reshape(w, target_h * c)
    return (wx @ rows).reshape(target_w, target_h, c).transpose(1, 0, 2)


def resize(r: Raster, target_w: int, target_h: int) -> Raster:
    """Area-averaging resample. Label rasters are resampled per class and
    snapped back to the majority label of each output cell (ties go to the
    lower label id)."""
    if target_w <= 0 or target_h <= 0:
        raise InvalidArgumentError(f"resize target must be positive, got {target_w}x{target_h}")
    if (r.width, r.height) == (target_w, target_h):
        return Raster(r.data.copy(), labels=r.labels, offset=r.offset)
    if not r.labels:
        out = _area_resize(r.data, target_h, target_w)
        return Raster(out.astype(np.float32), offset=r.offset)
    # one channel of labels -> per-class coverage -> argmax
    lab = r.data[:, :, 0]
    n_labels = int(lab.max()) + 1
    onehot = (lab[:, :, None] == np.arange(n_labels)[None, None, :]).astype(np.float64)
    cover = _area_resize(onehot, target_h, target_w)
    # round away float noise so exact ties resolve by label order
    cover = np.round(cover, 9)
    return Raster(np.argmax(cover, axis=2).astype(np.uint8), labels=True, offset=r.offset)


def center_trim(r: Raster, target_side: int) -> Raster:
    """Centered square crop. Odd margins leave the smaller half at the top/left."""
    if target_side <= 0 or target_side > min(r.width, r.height):
        raise InvalidArgumentError(
            f"cannot trim {r.height}x{r.width} raster to {target_side}x{target_side}"
        )
    top = (r.height - target_side) // 2
    left = (r.width - target_side) // 2
    data = r.data[top : top + target_side, left : left + target_side].copy()
    return Raster(data, labels=r.labels, offset=(r.offset[0] + top, r.offset[1] + left))


def crop_grid(r: Raster, spec: TileGridSpec) -> list[tuple[int, int, Raster]]:
    """Split a trimmed raster into grid_n x grid_n disjoint tiles, row-major."""
    if r.height != spec.trimmed_side or r.width != spec.trimmed_side:
        raise InvalidArgumentError(
            f"crop_grid expects a {spec.trimmed_side}px square raster, got {r.height}x{r.width}"
        )
    t = spec.tile_side
    tiles = []
    for row in range(spec.grid_n):
        for col in range(spec.grid_n):
            data = r.data[row * t : (row + 1) * t, col * t : (col + 1) * t].copy()
            offset = (r.offset[0] + row * t, r.offset[1] + col * t)
            tiles.append((row, col, Raster(data, labels=r.labels, offset=offset)))
    return tiles


def tile_name(source_id: str, row: int, col: int) -> str:
    return f"{source_id}_r{row}_c{col}.png"


def read_png(path: str | Path) -> Raster:
    """Read an 8-bit PNG as an intensity raster (grey -> 1 channel, else RGB)."""
    with Image.open(path) as img:
        if img.mode in ("L", "1", "LA"):
            arr = np.asarray(img.convert("L"))
        else:
            arr = np.asarray(img.convert("RGB"))
    return Raster.from_uint8(arr)


def write_png(r: Raster, path: str | Path) -> None:
    if r.channels not in (1, 3):
        raise InvalidArgumentError("only 1- or 3-channel rasters can be written as PNG")
    arr = r.to_uint8()
    if r.channels == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", compress_level=1)
