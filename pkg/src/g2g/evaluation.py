"""Split evaluation: per-tile confusion counts, macro and micro reports,
and input | ground truth | prediction triptychs."""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import MaskEncoding, SampleTriple, mask_image
from .metrics import (
    ConfusionAccumulator,
    MetricsReport,
    accumulate,
    macro_report,
    micro_report,
    write_metrics_csv,
)
from .raster import Raster, tile_name, write_png

SEPARATOR = 4
SEPARATOR_VALUE = 0.5


def triptych(panels: Sequence[Raster], separator: int = SEPARATOR) -> Raster:
    """Panels side by side (greyscale panels promoted to RGB), separated by
    grey bars."""
    rgb = [p.data if p.channels == 3 else np.repeat(p.data, 3, axis=2) for p in panels]
    h = rgb[0].shape[0]
    bar = np.full((h, separator, 3), SEPARATOR_VALUE, dtype=np.float32)
    parts = []
    for i, arr in enumerate(rgb):
        if i:
            parts.append(bar)
        parts.append(arr.astype(np.float32))
    return Raster(np.concatenate(parts, axis=1))


def evaluate_split(
    predict_mask: Callable[[Raster], Raster],
    triples: Sequence[SampleTriple],
    out_dir: str | Path,
    model_name: str,
    encoding: MaskEncoding = MaskEncoding(),
    write_triptychs: bool = True,
) -> tuple[MetricsReport, MetricsReport]:
    """Score ``predict_mask`` against each triple's two-class ground truth.

    Writes ``out_dir/metrics.csv`` (macro and micro rows) and, optionally,
    ``out_dir/triptychs/<tile>.png``. Returns (macro, micro).
    """
    out_dir = Path(out_dir)
    per_image: list[ConfusionAccumulator] = []
    for t in triples:
        mask = predict_mask(t.satellite)
        per_image.append(accumulate(ConfusionAccumulator(2), mask, t.gt_mask))
        if write_triptychs:
            panel = triptych([t.satellite, mask_image(t.gt_mask), mask_image(mask)])
            write_png(panel, out_dir / "triptychs" / tile_name(t.source_id or "tile", t.row, t.col))
    macro, micro = macro_report(per_image), micro_report(per_image)
    write_metrics_csv(out_dir / "metrics.csv", model_name, [macro, micro])
    return macro, micro
