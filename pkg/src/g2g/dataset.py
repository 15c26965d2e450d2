"""Building the three aligned image types (satellite, ground truth,
contour overlay), tiling source pairs into split manifests, and
generating synthetic scenes for tests and smoke runs."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError, InvalidLabelError, PairingError
from .raster import (
    Raster,
    TileGridSpec,
    center_trim,
    crop_grid,
    read_png,
    resize,
    tile_name,
    write_png,
)

logger = logging.getLogger(__name__)

BACKGROUND, BUILDING, CONTOUR = 0, 1, 2
SPLITS = ("train", "val", "test")

# Full-scale source-image counts per split; used to apportion splits when none are given.
FULL_SCALE_SPLIT_COUNTS = (191, 21, 22)

_EIGHT_NEIGHBORS = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class MaskEncoding:
    """Label ids and the RGB palette used to render them on disk and as
    generator targets."""

    palette: tuple[tuple[int, int, int], ...] = ((0, 0, 0), (255, 255, 255), (255, 0, 0))

    def __post_init__(self):
        if len(set(self.palette)) != len(self.palette):
            raise InvalidArgumentError("palette colors must be pairwise distinct")
        if len(self.palette) < 3:
            raise InvalidArgumentError("palette needs background, building and contour colors")

    def palette_array(self) -> np.ndarray:
        """Palette as float32 (n_labels, 3) in [0, 1]."""
        return np.asarray(self.palette, dtype=np.float32) / np.float32(255.0)

    def render(self, mask: Raster) -> Raster:
        _require_labels(mask, allowed=range(len(self.palette)))
        rgb = self.palette_array()[mask.data[:, :, 0]]
        return Raster(rgb, offset=mask.offset)

    def decode(self, rgb: Raster) -> Raster:
        """Inverse of :meth:`render` for exactly palette-colored rasters."""
        from .metrics import nearest_palette_labels

        return Raster(nearest_palette_labels(rgb.data, self.palette_array()), labels=True)


@dataclass
class SampleTriple:
    satellite: Raster
    gt_mask: Raster
    overlay_mask: Raster
    source_id: str = ""
    row: int = 0
    col: int = 0

    def __post_init__(self):
        shapes = {(r.height, r.width) for r in (self.satellite, self.gt_mask, self.overlay_mask)}
        if len(shapes) != 1:
            raise InvalidArgumentError(f"triple rasters differ in size: {sorted(shapes)}")


@dataclass
class DatasetManifest:
    split: str
    entries: list[dict] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.entries)

    @property
    def source_ids(self) -> set[str]:
        return {e["source_id"] for e in self.entries}

    def to_json(self) -> str:
        doc = {"split": self.split, "count": self.count, "entries": self.entries}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(self.to_json())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text())
        return cls(split=doc["split"], entries=list(doc["entries"]))


def _require_labels(r: Raster, allowed: Iterable[int]) -> None:
    allowed = set(allowed)
    present = set(np.unique(r.data).tolist())
    if r.channels != 1 or not present <= allowed:
        raise InvalidLabelError(
            f"expected a 1-channel label raster with labels {sorted(allowed)}, "
            f"got channels={r.channels} labels={sorted(present)}"
        )


def extract_contours(gt_mask: Raster, width: int = 2) -> Raster:
    """Inner boundary band of every building component.

    A building pixel belongs to the 1-px boundary when one of its 8 neighbours
    is background or lies outside the image. ``width`` > 1 thickens the band
    inward, so the contour never leaves the building set.
    """
    _require_labels(gt_mask, allowed=(BACKGROUND, BUILDING))
    if width < 1:
        raise InvalidArgumentError("contour width must be >= 1")
    mask = gt_mask.data[:, :, 0].astype(bool)
    inner = ndimage.binary_erosion(mask, structure=_EIGHT_NEIGHBORS, iterations=width, border_value=0)
    return Raster((mask & ~inner).astype(np.uint8), labels=True, offset=gt_mask.offset)


def overlay_contours(gt_mask: Raster, contours: Raster) -> Raster:
    if (gt_mask.height, gt_mask.width) != (contours.height, contours.width):
        raise InvalidArgumentError("gt mask and contour raster differ in size")
    _require_labels(gt_mask, allowed=(BACKGROUND, BUILDING))
    _require_labels(contours, allowed=(0, 1))
    out = gt_mask.data[:, :, 0].copy()
    out[contours.data[:, :, 0] == 1] = CONTOUR
    return Raster(out, labels=True, offset=gt_mask.offset)


def binarize_gt(r: Raster) -> Raster:
    """Threshold an on-disk ground-truth image (any channel count) to {0, 1}."""
    if r.labels:
        return r
    bright = r.data.mean(axis=2) > 0.5
    return Raster(bright.astype(np.uint8), labels=True, offset=r.offset)


def mask_image(mask: Raster) -> Raster:
    """Binary label raster as a black/white intensity raster for PNG output."""
    return Raster((mask.data > 0).astype(np.float32), offset=mask.offset)


def make_triple(
    satellite: Raster,
    gt_mask: Raster,
    contour_width: int = 2,
    source_id: str = "",
    row: int = 0,
    col: int = 0,
) -> SampleTriple:
    contours = extract_contours(gt_mask, width=contour_width)
    return SampleTriple(satellite, gt_mask, overlay_contours(gt_mask, contours), source_id, row, col)


def tile_pair(
    satellite: Raster, gt: Raster, spec: TileGridSpec, contour_width: int = 2, source_id: str = ""
) -> list[SampleTriple]:
    """trim -> grid crop -> resize -> contours, for one aligned source pair.

    Contours are extracted after the resize so their width is uniform at
    network resolution.
    """
    if (satellite.height, satellite.width) != (gt.height, gt.width):
        raise PairingError(f"{source_id}: satellite {satellite.height}x{satellite.width} "
                           f"vs ground truth {gt.height}x{gt.width}")
    gt = binarize_gt(gt)
    sat_tiles = crop_grid(center_trim(satellite, spec.trimmed_side), spec)
    gt_tiles = crop_grid(center_trim(gt, spec.trimmed_side), spec)
    triples = []
    for (row, col, s), (_, _, g) in zip(sat_tiles, gt_tiles):
        s = resize(s, spec.output_side, spec.output_side)
        g = resize(g, spec.output_side, spec.output_side)
        triples.append(make_triple(s, g, contour_width, source_id, row, col))
    return triples


def proportional_split_counts(n_sources: int, weights: Sequence[int] = FULL_SCALE_SPLIT_COUNTS) -> tuple[int, int, int]:
    """Largest-remainder apportionment of n sources over train/val/test."""
    if n_sources <= 0:
        return (0, 0, 0)
    total = sum(weights)
    quotas = [n_sources * w / total for w in weights]
    counts = [int(q) for q in quotas]
    order = sorted(range(3), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n_sources - sum(counts)]:
        counts[i] += 1
    if counts[0] == 0:
        donor = max(range(3), key=lambda i: counts[i])
        counts[donor] -= 1
        counts[0] += 1
    return tuple(counts)


def assign_splits(source_ids: Sequence[str], split_counts: Sequence[int], seed: int) -> dict[str, list[str]]:
    """Seeded source-level split assignment. Unassigned sources are dropped."""
    if len(split_counts) != 3 or any(c < 0 for c in split_counts):
        raise InvalidArgumentError("split_counts must be three non-negative integers")
    ids = sorted(source_ids)
    if len(set(ids)) != len(ids):
        raise PairingError("duplicate source ids")
    if sum(split_counts) > len(ids):
        raise InvalidArgumentError(f"split counts {tuple(split_counts)} exceed {len(ids)} available sources")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    out, start = {}, 0
    for split, n in zip(SPLITS, split_counts):
        out[split] = sorted(shuffled[start : start + n])
        start += n
    if start < len(ids):
        logger.warning("%d source(s) not assigned to any split", len(ids) - start)
    return out


def plan_manifests(
    source_ids: Sequence[str], spec: TileGridSpec, split_counts: Sequence[int], seed: int
) -> dict[str, DatasetManifest]:
    """Manifest entries for every tile without touching pixel data."""
    manifests = {}
    for split, ids in assign_splits(source_ids, split_counts, seed).items():
        entries = []
        for sid in ids:
            for row in range(spec.grid_n):
                for col in range(spec.grid_n):
                    name = tile_name(sid, row, col)
                    entries.append({
                        "sat": f"{split}/sat/{name}",
                        "gt": f"{split}/gt/{name}",
                        "overlay": f"{split}/overlay/{name}",
                        "source_id": sid,
                        "row": row,
                        "col": col,
                    })
        manifests[split] = DatasetManifest(split, entries)
    return manifests


def _pair_sources(source_pairs: Sequence[tuple[str | Path, str | Path]]) -> dict[str, tuple[Path, Path]]:
    pairs = {}
    for sat, gt in source_pairs:
        sat, gt = Path(sat), Path(gt)
        for p in (sat, gt):
            if not p.is_file():
                raise PairingError(f"missing source file: {p}")
        sid = sat.stem
        if sid in pairs:
            raise PairingError(f"duplicate source id {sid!r} ({sat})")
        pairs[sid] = (sat, gt)
    return pairs


def _process_source(args) -> int:
    sid, sat_path, gt_path, split, spec, out_root, encoding, contour_width = args
    sat = read_png(sat_path)
    gt = read_png(gt_path)
    if (sat.height, sat.width) != (gt.height, gt.width):
        raise PairingError(f"size mismatch: {sat_path} is {sat.height}x{sat.width}, "
                           f"{gt_path} is {gt.height}x{gt.width}")
    if sat.height < spec.trimmed_side or sat.width < spec.trimmed_side:
        raise PairingError(f"{sat_path} is smaller than the trimmed side {spec.trimmed_side}")
    root = Path(out_root)
    triples = tile_pair(sat, gt, spec, contour_width, sid)
    for t in triples:
        name = tile_name(sid, t.row, t.col)
        write_png(t.satellite, root / split / "sat" / name)
        write_png(mask_image(t.gt_mask), root / split / "gt" / name)
        write_png(encoding.render(t.overlay_mask), root / split / "overlay" / name)
    return len(triples)


def build_manifest(
    source_pairs: Sequence[tuple[str | Path, str | Path]],
    spec: TileGridSpec,
    split_counts: Sequence[int],
    seed: int,
    out_root: str | Path,
    encoding: MaskEncoding = MaskEncoding(),
    contour_width: int = 2,
    workers: int = 1,
) -> dict[str, DatasetManifest]:
    """Tile every source pair into ``out_root/<split>/{sat,gt,overlay}/`` and
    write ``out_root/manifest_<split>.json``. Splits are assigned per source."""
    pairs = _pair_sources(source_pairs)
    manifests = plan_manifests(list(pairs), spec, split_counts, seed)
    jobs = [
        (sid, *pairs[sid], split, spec, str(out_root), encoding, contour_width)
        for split, m in manifests.items()
        for sid in sorted(m.source_ids)
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_process_source, jobs))
    else:
        for job in jobs:
            _process_source(job)
    for split, m in manifests.items():
        m.save(Path(out_root) / f"manifest_{split}.json")
        logger.info("%s: %d tiles from %d sources", split, m.count, len(m.source_ids))
    return manifests


def load_triples(manifest: DatasetManifest, root: str | Path, encoding: MaskEncoding = MaskEncoding()) -> list[SampleTriple]:
    return list(ManifestTriples(manifest, root, encoding))


# --- synthetic scenes -------------------------------------------------------

def _smooth_noise(rng: np.random.Generator, side: int, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal((side, side)), sigma)
    return field_ / (field_.std() + 1e-12)


def _draw_rect(ids: np.ndarray, rid: int, cy: float, cx: float, half_h: float, half_w: float, angle: float) -> None:
    side = ids.shape[0]
    reach = int(np.ceil(np.hypot(half_h, half_w))) + 1
    y0, y1 = max(0, int(cy) - reach), min(side, int(cy) + reach + 1)
    x0, x1 = max(0, int(cx) - reach), min(side, int(cx) + reach + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = np.cos(angle), np.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    inside = (np.abs(u) <= half_w) & (np.abs(v) <= half_h)
    ids[y0:y1, x0:x1][inside] = rid


def synthesize_fixture(n_sources: int, side: int, seed: int) -> list[tuple[Raster, Raster]]:
    """Deterministic synthetic (satellite, gt) pairs.

    Buildings are axis-aligned and rotated rectangles with a per-building
    roof tone and fine texture; the background is smooth vegetation-like
    noise. Every building component covers at least 9 pixels.
    """
    pairs = []
    for i in range(n_sources):
        rng = np.random.default_rng([seed, i])
        ids = np.zeros((side, side), dtype=np.int32)
        n_buildings = max(2, int(round(6 * (side / 256) ** 2)))
        min_half = max(2.0, side / 64)
        max_half = max(min_half + 1, side / 14)
        for rid in range(1, n_buildings + 1):
            angle = 0.0 if rng.random() < 0.5 else rng.uniform(-np.pi / 4, np.pi / 4)
            _draw_rect(
                ids, rid,
                cy=rng.uniform(0, side), cx=rng.uniform(0, side),
                half_h=rng.uniform(min_half, max_half), half_w=rng.uniform(min_half, max_half),
                angle=angle,
            )
        labels, n_comp = ndimage.label(ids > 0, structure=_EIGHT_NEIGHBORS)
        sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n_comp + 1))
        small = np.isin(labels, 1 + np.flatnonzero(sizes < 9))
        ids[small] = 0
        mask = ids > 0

        veg = _smooth_noise(rng, side, sigma=max(1.0, side / 64))
        grain = rng.standard_normal((side, side, 3)) * 0.03
        base = np.stack([0.30 + 0.05 * veg, 0.42 + 0.07 * veg, 0.25 + 0.04 * veg], axis=2)
        roof_tones = rng.uniform(0.55, 0.9, size=(n_buildings + 1, 3))
        roof_tones[:, 1:] *= rng.uniform(0.6, 1.0, size=(n_buildings + 1, 1))
        roofs = roof_tones[ids] + 0.04 * _smooth_noise(rng, side, sigma=1.0)[:, :, None]
        sat = np.where(mask[:, :, None], roofs, base) + grain
        sat = np.clip(sat, 0.0, 1.0)
        # quantize so the in-memory fixture equals its PNG round trip
        sat = np.rint(sat * 255.0) / 255.0
        pairs.append((Raster(sat.astype(np.float32)), Raster(mask.astype(np.uint8), labels=True)))
    return pairs


def write_sources(pairs: Sequence[tuple[Raster, Raster]], root: str | Path, prefix: str = "synth") -> list[tuple[Path, Path]]:
    """Write synthetic pairs as on-disk sources ``root/{sat,gt}/<prefix>_NNN.png``."""
    root = Path(root)
    out = []
    for i, (sat, gt) in enumerate(pairs):
        name = f"{prefix}_{i:03d}.png"
        write_png(sat, root / "sat" / name)
        write_png(mask_image(gt), root / "gt" / name)
        out.append((root / "sat" / name, root / "gt" / name))
    return out


def discover_sources(root: str | Path) -> list[tuple[Path, Path]]:
    """Pair ``root/sat/*.png`` with ``root/gt/*.png`` by file name."""
    root = Path(root)
    sats = sorted((root / "sat").glob("*.png"))
    gts = {p.name: p for p in (root / "gt").glob("*.png")}
    pairs = []
    for s in sats:
        if s.name not in gts:
            raise PairingError(f"no ground truth for {s}")
        pairs.append((s, gts.pop(s.name)))
    if gts:
        raise PairingError(f"ground truth without satellite image: {sorted(gts)[0]}")
    return pairs


class ManifestTriples(Sequence):
    """Lazily loaded triples of one manifest (one PNG read per access)."""

    def __init__(self, manifest: DatasetManifest, root: str | Path, encoding: MaskEncoding = MaskEncoding()):
        self.manifest = manifest
        self.root = Path(root)
        self.encoding = encoding

    def __len__(self) -> int:
        return self.manifest.count

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        e = self.manifest.entries[i]
        sat = read_png(self.root / e["sat"])
        gt = binarize_gt(read_png(self.root / e["gt"]))
        overlay = self.encoding.decode(read_png(self.root / e["overlay"]))
        return SampleTriple(sat, gt, overlay, e["source_id"], e["row"], e["col"])
