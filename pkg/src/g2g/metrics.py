"""Confusion-matrix accumulation and the segmentation scores PA, MA, MIoU,
FWIoU, IoU and Dice, plus the model comparison table."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidLabelError, ReportParseError, UndefinedMetricError
from .raster import Raster


@dataclass
class ConfusionAccumulator:
    """``n[i, j]`` counts pixels of true class i predicted as class j."""

    n_cl: int = 2
    n: np.ndarray = None

    def __post_init__(self):
        if self.n is None:
            self.n = np.zeros((self.n_cl, self.n_cl), dtype=np.int64)
        else:
            self.n = np.asarray(self.n, dtype=np.int64)
            if self.n.shape != (self.n_cl, self.n_cl) or (self.n < 0).any():
                raise InvalidArgumentError("confusion matrix must be a non-negative n_cl x n_cl array")

    @property
    def t(self) -> np.ndarray:
        """Ground-truth pixel count per class (row sums)."""
        return self.n.sum(axis=1)

    @property
    def predicted(self) -> np.ndarray:
        return self.n.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.n.sum())

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.n_cl != self.n_cl:
            raise InvalidArgumentError("cannot merge accumulators with different class counts")
        return ConfusionAccumulator(self.n_cl, self.n + other.n)

    __add__ = merge


def accumulate(acc: ConfusionAccumulator, pred_mask, gt_mask) -> ConfusionAccumulator:
    """Return a new accumulator with the (gt, pred) pixel pairs added."""
    pred = _labels(pred_mask)
    gt = _labels(gt_mask)
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.size and (a.min() < 0 or a.max() >= acc.n_cl):
            raise InvalidLabelError(f"{name} has labels outside [0, {acc.n_cl})")
    counts = np.bincount(acc.n_cl * gt.ravel() + pred.ravel(), minlength=acc.n_cl**2)
    return ConfusionAccumulator(acc.n_cl, acc.n + counts.reshape(acc.n_cl, acc.n_cl))


def _labels(mask) -> np.ndarray:
    if isinstance(mask, Raster):
        if mask.channels != 1:
            raise InvalidLabelError("label raster must have one channel")
        return mask.data[:, :, 0].astype(np.int64)
    return np.asarray(mask).astype(np.int64)


def _require_pixels(acc: ConfusionAccumulator) -> None:
    if acc.total == 0:
        raise UndefinedMetricError("metric undefined on an empty accumulator")


def pixel_accuracy(acc: ConfusionAccumulator) -> float:
    _require_pixels(acc)
    return int(np.trace(acc.n)) / acc.total


def class_iou(acc: ConfusionAccumulator) -> np.ndarray:
    """Per-class IoU; NaN where the class is absent from both gt and prediction."""
    tp = np.diag(acc.n)
    union = acc.t + acc.predicted - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def absent_classes(acc: ConfusionAccumulator) -> list[int]:
    """Classes with no ground-truth pixels; excluded from MA (and from MIoU
    when also never predicted)."""
    return [int(i) for i in np.flatnonzero(acc.t == 0)]


def mean_accuracy(acc: ConfusionAccumulator) -> float:
    _require_pixels(acc)
    t = acc.t
    present = t > 0
    return float(np.mean(np.diag(acc.n)[present] / t[present]))


def mean_iou(acc: ConfusionAccumulator) -> float:
    _require_pixels(acc)
    return float(np.nanmean(class_iou(acc)))


def fw_iou(acc: ConfusionAccumulator) -> float:
    _require_pixels(acc)
    iou = np.nan_to_num(class_iou(acc), nan=0.0)
    return float(np.sum(acc.t * iou) / acc.total)


def iou(acc: ConfusionAccumulator, class_id: int = 1) -> float:
    value = class_iou(acc)[class_id]
    if math.isnan(value):
        raise UndefinedMetricError(f"class {class_id} absent from ground truth and prediction")
    return float(value)


def dice(acc: ConfusionAccumulator, class_id: int = 1) -> float:
    tp = int(acc.n[class_id, class_id])
    fp = int(acc.predicted[class_id]) - tp
    fn = int(acc.t[class_id]) - tp
    denom = (tp + fp) + (tp + fn)
    if denom == 0:
        raise UndefinedMetricError(f"class {class_id} absent from ground truth and prediction")
    return 2 * tp / denom


def nearest_palette_labels(rgb: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Per-pixel index of the closest palette color (squared Euclidean).

    Equidistant pixels resolve to the lowest label id, so a pixel halfway
    between background and any other color counts as background.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    d = ((rgb[:, :, None, :] - np.asarray(palette, dtype=np.float64)[None, None, :, :]) ** 2).sum(axis=3)
    # round away float noise so exact midpoints tie
    return np.argmin(np.round(d, 9), axis=2).astype(np.uint8)


def binarize_prediction(pred: Raster | np.ndarray, encoding=None, collapse: bool = True) -> Raster:
    """Map a generator output (H x W x 3 in [-1, 1]) to label space.

    Pixels take the label of the nearest palette color; with ``collapse``
    the contour label is folded into building for evaluation against
    two-class ground truth.
    """
    from .dataset import BUILDING, CONTOUR, MaskEncoding

    encoding = encoding or MaskEncoding()
    data = pred.data if isinstance(pred, Raster) else np.asarray(pred)
    if data.ndim != 3 or data.shape[2] != 3:
        raise InvalidArgumentError("binarize_prediction needs a 3-channel input")
    palette = encoding.palette_array() * 2.0 - 1.0
    labels = nearest_palette_labels(data, palette)
    if collapse:
        labels[labels == CONTOUR] = BUILDING
    return Raster(labels, labels=True)


# --- reports ----------------------------------------------------------------

METRIC_FIELDS = ("pa", "ma", "miou", "fwiou", "iou_building", "dice_building")


@dataclass
class MetricsReport:
    pa: float
    ma: float
    miou: float
    fwiou: float
    iou_building: float
    dice_building: float
    per_class_iou: list[float] = field(default_factory=list)
    n_pixels: int = 0
    n_images: int = 1
    averaging: str = "micro"
    absent: list[int] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_FIELDS}


def _nan_if_undefined(fn, *args) -> float:
    try:
        return fn(*args)
    except UndefinedMetricError:
        return math.nan


def report_from_accumulator(acc: ConfusionAccumulator, building: int = 1) -> MetricsReport:
    return MetricsReport(
        pa=pixel_accuracy(acc),
        ma=mean_accuracy(acc),
        miou=mean_iou(acc),
        fwiou=fw_iou(acc),
        iou_building=_nan_if_undefined(iou, acc, building),
        dice_building=_nan_if_undefined(dice, acc, building),
        per_class_iou=[float(v) for v in class_iou(acc)],
        n_pixels=acc.total,
        n_images=1,
        averaging="micro",
        absent=absent_classes(acc),
    )


def macro_report(per_image: Sequence[ConfusionAccumulator], building: int = 1) -> MetricsReport:
    """Average each metric over images (undefined per-image values skipped)."""
    if not per_image:
        raise UndefinedMetricError("no images to average")
    reports = [report_from_accumulator(a, building) for a in per_image]
    n_cl = per_image[0].n_cl

    def avg(values):
        arr = np.asarray(values, dtype=np.float64)
        return float(np.nanmean(arr)) if np.isfinite(arr).any() else math.nan

    return MetricsReport(
        **{k: avg([getattr(r, k) for r in reports]) for k in METRIC_FIELDS},
        per_class_iou=[avg([r.per_class_iou[c] for r in reports]) for c in range(n_cl)],
        n_pixels=sum(r.n_pixels for r in reports),
        n_images=len(reports),
        averaging="macro",
        absent=sorted({c for r in reports for c in r.absent}),
    )


def micro_report(per_image: Sequence[ConfusionAccumulator], building: int = 1) -> MetricsReport:
    if not per_image:
        raise UndefinedMetricError("no images to pool")
    pooled = per_image[0]
    for acc in per_image[1:]:
        pooled = pooled.merge(acc)
    rep = report_from_accumulator(pooled, building)
    rep.n_images = len(per_image)
    return rep


REPORT_COLUMNS = ("model", "averaging", *METRIC_FIELDS, "n_images", "n_pixels", "absent_classes")


def write_metrics_csv(path: str | Path, model: str, reports: Sequence[MetricsReport]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow([
            model, r.averaging, *(f"{getattr(r, k):.6f}" for k in METRIC_FIELDS),
            r.n_images, r.n_pixels, " ".join(map(str, r.absent)),
        ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(buf.getvalue())
    tmp.replace(path)


def read_metrics_csv(path: str | Path) -> tuple[str, dict[str, MetricsReport]]:
    """Return (model name, {averaging: report}) from a metrics.csv file."""
    path = Path(path)
    try:
        rows = list(csv.DictReader(path.read_text().splitlines()))
        if not rows:
            raise ValueError("no data rows")
        model = rows[0]["model"]
        out = {}
        for row in rows:
            out[row["averaging"]] = MetricsReport(
                **{k: float(row[k]) for k in METRIC_FIELDS},
                n_images=int(row["n_images"]),
                n_pixels=int(row["n_pixels"]),
                averaging=row["averaging"],
                absent=[int(c) for c in row.get("absent_classes", "").split()],
            )
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise ReportParseError(f"{path}: malformed metrics report ({exc})") from exc
    return model, out


# Row labels of the comparison table.
TABLE_ROWS = (
    ("pa", "Mean pixel accuracy"),
    ("ma", "Mean accuracy"),
    ("miou", "Mean IoU"),
    ("fwiou", "Mean frequency weighted IU"),
)

# Values quoted from the multi-task learning baseline; never computed here.
LITERATURE_MULTITASK = ("Multi-task (quoted)", {"pa": 0.95, "ma": None, "miou": 0.70, "fwiou": None})

_MODEL_ORDER = {"g2g": 0, "pix2pix": 1}


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{value:.6f}"


def compare_models(
    reports: Mapping[str, MetricsReport], literature: tuple[str, dict] | None = None
) -> tuple[str, str]:
    """Comparison table with metrics as rows and models as columns.

    Returns ``(csv_text, aligned_text)``. G2G and Pix2Pix columns come first,
    in that order; other models follow alphabetically, then the optional
    quoted literature column.
    """
    if not reports:
        raise InvalidArgumentError("compare_models needs at least one report")
    names = sorted(reports, key=lambda m: (_MODEL_ORDER.get(m.lower(), 2), m))
    columns = [(n, reports[n].values()) for n in names]
    if literature is not None:
        columns.append(literature)
    header = ["Metrics", *(c[0] for c in columns)]
    rows = [[label, *(_fmt(vals.get(key)) for _, vals in columns)] for key, label in TABLE_ROWS]

    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header, *rows])

    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(r)).rstrip()
             for r in [header, *rows]]
    lines.insert(1, "-" * len(lines[0]))
    return buf.getvalue(), "\n".join(lines) + "\n"
