"""Weighted soft-Dice loss, Dice/Hausdorff evaluation and report tables."""
import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import kernels
from .dataset import PATHOLOGIES, PHASES
from .diffops.ops import softmax_channels, softmax_channels_backward
from .errors import EmptyRecords, ShapeMismatch

SMOOTH = 1e-6
NUM_CLASSES = 4
# reporting order and the label index of each foreground class
EVAL_CLASSES = (("LV", 3), ("RV", 1), ("MYO", 2))
TABLE1_PATHOLOGIES = ("DCM", "HCM", "MINF", "NOR", "ARV")
assert set(TABLE1_PATHOLOGIES) == set(PATHOLOGIES)


def one_hot(masks, num_classes=NUM_CLASSES, dtype=np.float64):
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    return (np.arange(num_classes)[None, :, None, None] == masks[:, None]).astype(dtype)


def _check_pair(probs, onehot):
    if probs.shape != onehot.shape or probs.ndim != 4:
        raise ShapeMismatch(f"probs {probs.shape} and target {onehot.shape} must match (N, C, H, W)")


def soft_dice_class(probs, onehot, p, smooth=SMOOTH):
    """(2 sum(x*y) + s) / (sum(x) + sum(y) + s) over batch and pixels of class p."""
    _check_pair(probs, onehot)
    x = probs[:, p]
    y = onehot[:, p]
    return float((2.0 * (x * y).sum() + smooth) / (x.sum() + y.sum() + smooth))


def class_weights(masks, mode="invfreq", num_classes=NUM_CLASSES):
    """Per-class loss weights summing to 1.

    ``invfreq`` weights each class by the inverse of its pixel frequency in
    ``masks``; classes that never occur get weight 0. ``uniform`` is flat.
    """
    if mode == "uniform":
        return np.full(num_classes, 1.0 / num_classes)
    if mode not in ("invfreq", "inverse-frequency"):
        raise ValueError(f"unknown weights mode {mode!r}")
    counts = np.zeros(num_classes)
    for m in masks:
        counts += np.bincount(np.asarray(m).ravel(), minlength=num_classes)[:num_classes]
    freq = counts / counts.sum()
    w = np.where(freq > 0, 1.0 / np.where(freq > 0, freq, 1.0), 0.0)
    return w / w.sum()


def weighted_dice_loss(probs, onehot, weights, smooth=SMOOTH, return_grad=False):
    """1 - sum_p w_p D_p / sum_p w_p, optionally with d(loss)/d(probs)."""
    _check_pair(probs, onehot)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (probs.shape[1],) or (weights < 0).any() or weights.sum() <= 0:
        raise ValueError(f"bad class weights {weights}")
    w = weights / weights.sum()
    axes = (0, 2, 3)
    inter = (probs * onehot).sum(axis=axes)
    denom = probs.sum(axis=axes) + onehot.sum(axis=axes) + smooth
    dice = (2.0 * inter + smooth) / denom
    loss = float(1.0 - (w * dice).sum())
    if not return_grad:
        return loss
    # dD/dx_i = (2 y_i denom - (2 I + s)) / denom^2
    num = 2.0 * inter + smooth
    coef = (w / denom)[None, :, None, None]
    grad = -coef * (2.0 * onehot - (num / denom)[None, :, None, None])
    return loss, grad.astype(probs.dtype, copy=False)


def loss_from_logits(logits, masks, weights):
    """Softmax + weighted Dice loss; returns (loss, dloss/dlogits, probs)."""
    probs = softmax_channels(logits)
    target = one_hot(masks, logits.shape[1], logits.dtype)
    loss, dprobs = weighted_dice_loss(probs, target, weights, return_grad=True)
    return loss, softmax_channels_backward(dprobs, probs), probs


# ----------------------------------------------------------------------------
# evaluation metrics on hard labels


def dsc(pred_mask, gt_mask, p):
    """Set Dice 2|X & Y| / (|X| + |Y|); 1 when both sets are empty."""
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ShapeMismatch(f"{pred_mask.shape} != {gt_mask.shape}")
    x = pred_mask == p
    y = gt_mask == p
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((x & y).sum()) / total


def contour_points(mask, p):
    """Pixels of class p with at least one 4-neighbour outside the class
    (the image border counts as outside)."""
    region = np.ascontiguousarray(np.asarray(mask) == p)
    return np.argwhere(kernels.boundary(region)).astype(np.int64)


@dataclass(frozen=True)
class HausdorffResult:
    hd: float  # symmetric, None when either contour is empty
    pred_to_gt: float
    gt_to_pred: float

    @property
    def defined(self):
        return self.hd is not None


def hausdorff_points(a, b, spacing=(1.0, 1.0)):
    """Directed distances between two point sets (rows of (row, col))."""
    sx, sy = float(spacing[0]), float(spacing[1])
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    if len(a) == 0 or len(b) == 0:
        return HausdorffResult(None, None, None)
    ab = float(kernels.directed_hausdorff(a, b, sx, sy))
    ba = float(kernels.directed_hausdorff(b, a, sx, sy))
    return HausdorffResult(max(ab, ba), ab, ba)


def hausdorff(pred_mask, gt_mask, p, spacing=(1.0, 1.0)):
    """Symmetric Hausdorff distance in mm between the class-p contours.

    ``spacing`` is (row, col) mm. Returns a HausdorffResult whose ``hd`` is
    None when either contour is empty.
    """
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ShapeMismatch(f"{pred_mask.shape} != {gt_mask.shape}")
    if not all(s > 0 for s in spacing):
        raise ValueError(f"spacing must be positive, got {spacing}")
    return hausdorff_points(contour_points(pred_mask, p), contour_points(gt_mask, p), spacing)


# ----------------------------------------------------------------------------
# records and aggregation


@dataclass(frozen=True)
class EvalRecord:
    patient_id: str
    slice_index: int
    phase: str
    pathology: str
    cls: str
    dsc: float
    hd_mm: float  # None when undefined
    hd_pred_to_gt: float = None
    hd_gt_to_pred: float = None


def evaluate_masks(pred, gt, meta, spacing):
    records = []
    for name, p in EVAL_CLASSES:
        h = hausdorff(pred, gt, p, spacing)
        records.append(
            EvalRecord(
                meta.patient_id,
                meta.slice_index,
                meta.phase,
                meta.pathology,
                name,
                dsc(pred, gt, p),
                h.hd,
                h.pred_to_gt,
                h.gt_to_pred,
            )
        )
    return records


@dataclass
class Cell:
    dsc: float
    hd: float  # nan when no defined HD in the group
    n: int
    n_hd_undefined: int


@dataclass
class Report:
    table1: dict  # (pathology, phase | "Average", cls) -> Cell
    table2: dict  # (phase | "Average", cls) -> Cell
    n_records: int
    n_hd_undefined: int

    def mean_dsc(self, classes=("LV", "RV", "MYO")):
        cells = [self.table2[("All", c)] for c in classes if ("All", c) in self.table2]
        return float(np.mean([c.dsc for c in cells]))

    def mean_hd(self, classes=("LV", "RV", "MYO")):
        vals = [self.table2[("All", c)].hd for c in classes if ("All", c) in self.table2]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan


def _cell(records):
    hds = [r.hd_mm for r in records if r.hd_mm is not None]
    return Cell(
        float(np.mean([r.dsc for r in records])),
        float(np.mean(hds)) if hds else math.nan,
        len(records),
        len(records) - len(hds),
    )


def _average_cell(a, b):
    if a is None or b is None:
        return a or b
    hd = [v for v in (a.hd, b.hd) if not math.isnan(v)]
    return Cell((a.dsc + b.dsc) / 2, float(np.mean(hd)) if hd else math.nan, a.n + b.n, a.n_hd_undefined + b.n_hd_undefined)


def aggregate(records):
    """Group means of DSC and HD by (pathology, phase, class) and (phase, class).

    The ``Average`` rows are the mean of the ED and ES group means; the
    ``All`` row of table2 pools every record of a class. Undefined HDs are
    excluded from means and counted.
    """
    if not records:
        raise EmptyRecords("no evaluation records to aggregate")
    records = sorted(records, key=lambda r: (r.patient_id, r.phase, r.slice_index, r.cls))
    groups = defaultdict(list)
    phase_groups = defaultdict(list)
    class_groups = defaultdict(list)
    for r in records:
        groups[(r.pathology, r.phase, r.cls)].append(r)
        phase_groups[(r.phase, r.cls)].append(r)
        class_groups[r.cls].append(r)
    table1 = {k: _cell(v) for k, v in groups.items()}
    for path in {k[0] for k in groups}:
        for cls, _ in EVAL_CLASSES:
            avg = _average_cell(table1.get((path, "ED", cls)), table1.get((path, "ES", cls)))
            if avg is not None:
                table1[(path, "Average", cls)] = avg
    table2 = {k: _cell(v) for k, v in phase_groups.items()}
    for cls, v in class_groups.items():
        table2[("All", cls)] = _cell(v)
    undefined = sum(r.hd_mm is None for r in records)
    return Report(table1, table2, len(records), undefined)


def _fmt(v, scale=1.0, digits=2):
    return "-" if v is None or math.isnan(v) else f"{v * scale:.{digits}f}"


def render_text(report):
    """Aligned plain-text tables grouped by pathology and by phase."""
    classes = [c for c, _ in EVAL_CLASSES]
    head = ["Class", "Instance"] + [f"DSC {c}" for c in classes] + [f"HD {c}" for c in classes]
    rows = []
    paths = [p for p in TABLE1_PATHOLOGIES if any(k[0] == p for k in report.table1)]
    extra = sorted({k[0] for k in report.table1} - set(TABLE1_PATHOLOGIES))
    for path in paths + extra:
        label = path
        for phase in (*PHASES, "Average"):
            cells = [report.table1.get((path, phase, c)) for c in classes]
            if all(c is None for c in cells):
                continue
            rows.append(
                [label, phase]
                + [_fmt(c.dsc if c else None) for c in cells]
                + [_fmt(c.hd if c else None) for c in cells]
            )
            label = ""
    out = ["Per-pathology cross-validation (DSC fraction, HD mm)", _align([head] + rows), ""]

    head2 = [""] + [x for c in ("LV", "RV", "Myocardium") for x in (f"{c} Dsc", f"{c} Hd")]
    rows2 = []
    for phase, label in (("ED", "End-diastole"), ("ES", "End-systole"), ("All", "All")):
        cells = [report.table2.get((phase, c)) for c in classes]
        if all(c is None for c in cells):
            continue
        row = [label]
        for c in cells:
            row += [_fmt(c.dsc if c else None, 100.0), _fmt(c.hd if c else None)]
        rows2.append(row)
    out += ["Accuracy by phase (DSC %, HD mm)", _align([head2] + rows2), ""]
    out.append(f"records: {report.n_records}  undefined HD (empty contour): {report.n_hd_undefined}")
    return "\n".join(out) + "\n"


def _align(rows):
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows)


def render_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["table", "pathology", "phase", "class", "dsc", "hd_mm", "n", "n_hd_undefined"])
    for (path, phase, cls), c in sorted(report.table1.items()):
        w.writerow(["table1", path, phase, cls, repr(c.dsc), repr(c.hd), c.n, c.n_hd_undefined])
    for (phase, cls), c in sorted(report.table2.items()):
        w.writerow(["table2", "", phase, cls, repr(c.dsc), repr(c.hd), c.n, c.n_hd_undefined])
    return buf.getvalue()


def records_to_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "slice_index", "phase", "pathology", "class", "dsc", "hd_mm", "hd_pred_to_gt", "hd_gt_to_pred"])
    for r in records:
        w.writerow([r.patient_id, r.slice_index, r.phase, r.pathology, r.cls, repr(r.dsc), r.hd_mm, r.hd_pred_to_gt, r.hd_gt_to_pred])
    return buf.getvalue()
