"""Ray-based occupancy metrics: RayIoU, the mAVE variants and the Occ Score.

A ray counts as a true positive at threshold t when its ground-truth and
predicted first hits carry the same class and their depths differ by at most
t meters. All counts are integers and all float sums go through math.fsum, so
results do not depend on ray order or thread count.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError, SpecMismatchError
from .grid import (
    FOREGROUND_CLASSES,
    FREE_CLASS,
    NUM_CLASSES,
    OPENOCC_CLASS_NAMES,
    FlowField,
    OccupancyGrid,
    check_same_spec,
)
from .raycast import RayBundle, RayHit, cast_bundle

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (1.0, 2.0, 4.0)
MAVE_THRESHOLD = 2.0
# mAVE when nothing qualifies; max(1 - mAVE, 0) then contributes 0.
MAVE_EMPTY = 1.0


@dataclass(frozen=True)
class RayEval:
    gt_hit: RayHit
    pred_hit: RayHit
    gt_flow: tuple[float, float]
    pred_flow: tuple[float, float]


@dataclass(frozen=True, eq=False)
class RayEvals:
    """Per-ray evaluation records stored column-wise.

    Labels are -1 and depths +inf where a ray misses; flows are zero there.
    Hit voxels are stored as linear indices into a grid of shape `dims`.
    """

    gt_label: np.ndarray
    gt_depth: np.ndarray
    pred_label: np.ndarray
    pred_depth: np.ndarray
    gt_flow: np.ndarray
    pred_flow: np.ndarray
    gt_voxel: np.ndarray | None = None
    pred_voxel: np.ndarray | None = None
    dims: tuple[int, int, int] | None = None
    num_classes: int = NUM_CLASSES
    free_class: int = FREE_CLASS

    def __post_init__(self):
        n = len(self.gt_label)
        for name in ("gt_depth", "pred_label", "pred_depth", "gt_flow", "pred_flow"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.gt_label)

    def __getitem__(self, i: int) -> RayEval:
        return RayEval(
            self._hit(i, self.gt_label, self.gt_depth, self.gt_voxel, self.dims),
            self._hit(i, self.pred_label, self.pred_depth, self.pred_voxel, self.dims),
            tuple(float(v) for v in self.gt_flow[i]),
            tuple(float(v) for v in self.pred_flow[i]),
        )

    @staticmethod
    def _hit(i, label, depth, voxel, dims) -> RayHit:
        if label[i] < 0:
            return RayHit(False, math.inf)
        idx = None
        if voxel is not None and dims is not None:
            idx = tuple(int(v) for v in np.unravel_index(int(voxel[i]), dims))
        return RayHit(True, float(depth[i]), idx, int(label[i]))

    @classmethod
    def from_records(cls, records: Sequence[RayEval], num_classes: int = NUM_CLASSES,
                     free_class: int = FREE_CLASS) -> "RayEvals":
        def column(hits, attr, miss, dtype):
            return np.array([getattr(h, attr) if h.hit else miss for h in hits], dtype=dtype)

        gt = [r.gt_hit for r in records]
        pred = [r.pred_hit for r in records]
        return cls(
            gt_label=column(gt, "label", -1, np.int64),
            gt_depth=column(gt, "depth", math.inf, np.float64),
            pred_label=column(pred, "label", -1, np.int64),
            pred_depth=column(pred, "depth", math.inf, np.float64),
            gt_flow=np.array([r.gt_flow for r in records], dtype=np.float64).reshape(-1, 2),
            pred_flow=np.array([r.pred_flow for r in records], dtype=np.float64).reshape(-1, 2),
            num_classes=num_classes,
            free_class=free_class,
        )


@dataclass
class MetricReport:
    ray_iou_at: dict[str, float] = field(default_factory=dict)
    ray_iou_mean: float = 0.0
    mave_tp: float = MAVE_EMPTY
    mave_per_voxel: float = MAVE_EMPTY
    mave_lq: float = MAVE_EMPTY
    occ_score: float = 0.0
    per_class_iou: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ray_iou_at": dict(self.ray_iou_at),
            "ray_iou_mean": self.ray_iou_mean,
            "mave_tp": self.mave_tp,
            "mave_per_voxel": self.mave_per_voxel,
            "mave_lq": self.mave_lq,
            "occ_score": self.occ_score,
            "per_class_iou": dict(self.per_class_iou),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _flow_at(flow: FlowField, voxel: np.ndarray) -> np.ndarray:
    out = np.zeros((len(voxel), 2), dtype=np.float64)
    hit = voxel >= 0
    out[hit] = flow.flow.reshape(-1, 2)[voxel[hit]]
    return out


def evaluate_rays(gt: OccupancyGrid, pred: OccupancyGrid, gt_flow: FlowField, pred_flow: FlowField,
                  bundle: RayBundle, threads: int | None = None) -> RayEvals:
    check_same_spec(gt, pred, gt_flow, pred_flow)
    if (gt.num_classes, gt.free_class) != (pred.num_classes, pred.free_class):
        raise SpecMismatchError("gt and pred use different class sets")
    g = cast_bundle(gt, bundle, threads)
    p = cast_bundle(pred, bundle, threads)
    return RayEvals(
        gt_label=g.label,
        gt_depth=g.depth,
        pred_label=p.label,
        pred_depth=p.depth,
        gt_flow=_flow_at(gt_flow, g.voxel),
        pred_flow=_flow_at(pred_flow, p.voxel),
        gt_voxel=g.voxel,
        pred_voxel=p.voxel,
        dims=gt.spec.dims,
        num_classes=gt.num_classes,
        free_class=gt.free_class,
    )


def _default_classes(evals: RayEvals) -> list[int]:
    return [c for c in range(evals.num_classes) if c != evals.free_class]


def _true_positives(evals: RayEvals, threshold: float) -> np.ndarray:
    # Matching labels >= 0 means both rays hit, so both depths are finite.
    tp = (evals.gt_label >= 0) & (evals.gt_label == evals.pred_label)
    tp[tp] = np.abs(evals.pred_depth[tp] - evals.gt_depth[tp]) <= threshold
    return tp


def _counts(labels: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(labels[labels >= 0], minlength=n)


def ray_iou(evals: RayEvals, threshold: float, classes: Iterable[int] | None = None) -> tuple[float, dict[int, float]]:
    """Class-averaged RayIoU at one depth threshold, plus the per-class values."""
    if len(evals) == 0:
        raise MetricError("RayIoU is undefined for an empty ray list")
    if not threshold > 0:
        raise MetricError(f"threshold must be > 0, got {threshold}")
    classes = _default_classes(evals) if classes is None else sorted(set(int(c) for c in classes))
    n = evals.num_classes
    tp_mask = _true_positives(evals, threshold)
    tp = _counts(evals.gt_label[tp_mask], n)
    gt_n = _counts(evals.gt_label, n)
    pred_n = _counts(evals.pred_label, n)

    per_class = {}
    for c in classes:
        if not 0 <= c < n:
            continue
        denom = int(gt_n[c] + pred_n[c] - tp[c])
        if denom > 0:
            per_class[c] = int(tp[c]) / denom
    if not per_class:
        return 1.0, per_class
    return math.fsum(per_class.values()) / len(per_class), per_class


def combine_thresholds(values: Sequence[float]) -> float:
    if not values:
        raise MetricError("need at least one threshold")
    return math.fsum(values) / len(values)


def ray_iou_mean(evals: RayEvals, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                 classes: Iterable[int] | None = None) -> float:
    if not thresholds:
        raise MetricError("need at least one threshold")
    classes = None if classes is None else list(classes)
    return combine_thresholds([ray_iou(evals, t, classes)[0] for t in thresholds])


def _mave(errors: np.ndarray, labels: np.ndarray, foreground: Iterable[int], pooled: bool) -> float:
    foreground = sorted(set(int(c) for c in foreground))
    if not foreground:
        raise MetricError("foreground class set is empty")
    keep = np.isin(labels, foreground)
    errors, labels = errors[keep], labels[keep]
    if len(errors) == 0:
        return MAVE_EMPTY
    if pooled:
        return math.fsum(errors.tolist()) / len(errors)
    per_class = [
        math.fsum(errors[labels == c].tolist()) / int((labels == c).sum())
        for c in foreground
        if (labels == c).any()
    ]
    return math.fsum(per_class) / len(per_class)


def _flow_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(a, np.float64) - np.asarray(b, np.float64), axis=-1)


def mave_tp(evals: RayEvals, threshold: float = MAVE_THRESHOLD,
            foreground: Iterable[int] = FOREGROUND_CLASSES, pooled: bool = False) -> float:
    """Flow error over true-positive rays of foreground classes."""
    tp = _true_positives(evals, threshold)
    err = _flow_error(evals.pred_flow[tp], evals.gt_flow[tp])
    return _mave(err, evals.gt_label[tp], foreground, pooled)


def mave_per_voxel(gt: OccupancyGrid, pred: OccupancyGrid, gt_flow: FlowField, pred_flow: FlowField,
                   foreground: Iterable[int] = FOREGROUND_CLASSES, pooled: bool = False) -> float:
    """Flow error over voxels where gt and pred agree on a foreground class."""
    check_same_spec(gt, pred, gt_flow, pred_flow)
    g = gt.labels.reshape(-1)
    same = g == pred.labels.reshape(-1)
    err = _flow_error(pred_flow.flow.reshape(-1, 2)[same], gt_flow.flow.reshape(-1, 2)[same])
    return _mave(err, g[same].astype(np.int64), foreground, pooled)


def mave_lq(evals: RayEvals, foreground: Iterable[int] = FOREGROUND_CLASSES, pooled: bool = False) -> float:
    """Flow error over every queried ray with a gt foreground hit and any pred hit."""
    sel = evals.pred_label >= 0
    err = _flow_error(evals.pred_flow[sel], evals.gt_flow[sel])
    return _mave(err, evals.gt_label[sel], foreground, pooled)


def occ_score(ray_iou_mean: float, mave: float) -> float:
    if not 0.0 <= ray_iou_mean <= 1.0:
        raise MetricError(f"ray_iou_mean must lie in [0, 1], got {ray_iou_mean}")
    if not mave >= 0.0:
        raise MetricError(f"mave must be >= 0, got {mave}")
    return 0.9 * ray_iou_mean + 0.1 * max(1.0 - mave, 0.0)


def class_name(c: int, num_classes: int = NUM_CLASSES) -> str:
    if num_classes == NUM_CLASSES:
        return OPENOCC_CLASS_NAMES[c]
    return str(c)


def evaluate(
    gt: OccupancyGrid,
    pred: OccupancyGrid,
    gt_flow: FlowField,
    pred_flow: FlowField,
    bundle: RayBundle,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    classes: Iterable[int] | None = None,
    foreground: Iterable[int] = FOREGROUND_CLASSES,
    mave_threshold: float = MAVE_THRESHOLD,
    pooled: bool = False,
    threads: int | None = None,
) -> MetricReport:
    if not thresholds:
        raise MetricError("need at least one threshold")
    evals = evaluate_rays(gt, pred, gt_flow, pred_flow, bundle, threads)
    classes = None if classes is None else list(classes)
    foreground = list(foreground)

    at, per_threshold = {}, []
    for t in thresholds:
        mean, per_class = ray_iou(evals, t, classes)
        at[f"{t:g}"] = mean
        per_threshold.append(per_class)
    iou = combine_thresholds(list(at.values()))

    per_class_iou = {}
    for c in sorted(per_threshold[0]):
        per_class_iou[class_name(c, gt.num_classes)] = math.fsum(p[c] for p in per_threshold) / len(per_threshold)

    tp = mave_tp(evals, mave_threshold, foreground, pooled)
    report = MetricReport(
        ray_iou_at=at,
        ray_iou_mean=iou,
        mave_tp=tp,
        mave_per_voxel=mave_per_voxel(gt, pred, gt_flow, pred_flow, foreground, pooled),
        mave_lq=mave_lq(evals, foreground, pooled),
        occ_score=occ_score(iou, tp),
        per_class_iou=per_class_iou,
    )
    logger.info("RayIoU %.4f, mAVE@TP %.4f, Occ Score %.4f", iou, tp, report.occ_score)
    return report
