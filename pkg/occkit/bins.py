"""Adaptive-bin flow head math and its analytic gradients.

A scene-level softmax b splits [f_min, f_max] into n bins whose centers are

    c_i = f_min + (f_max - f_min) * (b_i / 2 + sum_{j<i} b_j)

and each voxel predicts its flow as the weighted sum f = sum_k c_k * p_k of
those centers under its own softmax p. The x and y axes carry independent
bin sets; a single shared set is used when scene logits have no axis
dimension.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import MetricError
from .grid import FlowField, OccupancyGrid, VoxelMask, check_same_spec

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-6
COS_EPS = 1e-6


@dataclass(frozen=True)
class BinConfig:
    n_bins: int = 32
    f_min: float = -25.0
    f_max: float = 25.0

    def __post_init__(self):
        if int(self.n_bins) < 1:
            raise ValueError(f"n_bins must be >= 1, got {self.n_bins}")
        if not self.f_min < self.f_max:
            raise ValueError(f"f_min ({self.f_min}) must be < f_max ({self.f_max})")
        object.__setattr__(self, "n_bins", int(self.n_bins))
        object.__setattr__(self, "f_min", float(self.f_min))
        object.__setattr__(self, "f_max", float(self.f_max))

    @property
    def span(self) -> float:
        return self.f_max - self.f_min


def _finite(x, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError(f"{what} must be finite")
    return x


def _check_simplex(p: np.ndarray, n: int, what: str) -> None:
    if p.shape[-1] != n:
        raise ValueError(f"{what} has {p.shape[-1]} bins, expected {n}")
    if (p < -SIMPLEX_TOL).any() or (np.abs(p.sum(axis=-1) - 1.0) > SIMPLEX_TOL).any():
        raise ValueError(f"{what} is not a probability vector")


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = _finite(logits, "logits")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def bin_centers(b, config: BinConfig) -> np.ndarray:
    b = _finite(b, "bin probabilities")
    _check_simplex(b, config.n_bins, "bin probabilities")
    before = np.zeros_like(b)
    before[..., 1:] = np.cumsum(b, axis=-1)[..., :-1]
    return config.f_min + config.span * (b / 2.0 + before)


def aggregate_flow(c, p) -> np.ndarray:
    c = _finite(c, "bin centers")
    p = _finite(p, "bin weights")
    if c.shape[-1] != p.shape[-1]:
        raise ValueError(f"{c.shape[-1]} centers but {p.shape[-1]} weights")
    _check_simplex(p, p.shape[-1], "bin weights")
    return (c * p).sum(axis=-1)


@dataclass(frozen=True, eq=False)
class BinModel:
    """Scene probabilities b [2, n] (or shared [n]) and voxel weights p [..., 2, n]."""

    config: BinConfig
    scene_probs: np.ndarray
    voxel_weights: np.ndarray

    def __post_init__(self):
        b = _finite(self.scene_probs, "scene probabilities")
        p = _finite(self.voxel_weights, "voxel weights")
        n = self.config.n_bins
        _check_simplex(b, n, "scene probabilities")
        _check_simplex(p, n, "voxel weights")
        if b.ndim not in (1, 2) or (b.ndim == 2 and b.shape[0] != 2):
            raise ValueError(f"scene probabilities must be [n] or [2, n], got {b.shape}")
        if p.ndim < 2 or p.shape[-2] != 2:
            raise ValueError(f"voxel weights must be [..., 2, n], got {p.shape}")
        object.__setattr__(self, "scene_probs", b)
        object.__setattr__(self, "voxel_weights", p)

    @classmethod
    def from_logits(cls, scene_logits, voxel_logits, config: BinConfig) -> "BinModel":
        return cls(config, softmax(scene_logits), softmax(voxel_logits))

    def centers(self) -> np.ndarray:
        return bin_centers(self.scene_probs, self.config)

    def flow(self) -> np.ndarray:
        """[..., 2] flow per voxel."""
        return aggregate_flow(self.centers(), self.voxel_weights)


def flow_from_logits(scene_logits, voxel_logits, config: BinConfig) -> np.ndarray:
    return BinModel.from_logits(scene_logits, voxel_logits, config).flow()


class FlowLoss(NamedTuple):
    l2: float
    cos: float
    combined: float


def _cos_terms(pred: np.ndarray, gt: np.ndarray, eps: float):
    np_ = np.linalg.norm(pred, axis=-1)
    ng = np.linalg.norm(gt, axis=-1)
    valid = (np_ > eps) & (ng > eps)
    cos = np.zeros(len(pred))
    cos[valid] = (pred[valid] * gt[valid]).sum(-1) / (np_[valid] * ng[valid])
    return valid, cos, np_, ng


def _loss_inputs(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = _finite(pred, "predicted flow").reshape(-1, 2)
    gt = _finite(gt, "ground-truth flow").reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} flows differ in shape")
    if len(pred) == 0:
        raise MetricError("flow loss needs at least one voxel with valid ground truth")
    return pred, gt


def flow_loss(pred, gt, weight: float = 1.0, eps: float = COS_EPS) -> FlowLoss:
    """L2, mean cosine similarity and l2 + weight * (1 - cos) over [M, 2] flows."""
    pred, gt = _loss_inputs(pred, gt)
    l2 = float(((pred - gt) ** 2).sum(-1).mean())
    valid, cos, _, _ = _cos_terms(pred, gt, eps)
    # Zero vectors have no direction; with none left there is nothing to penalise.
    c = float(cos[valid].mean()) if valid.any() else 1.0
    return FlowLoss(l2, c, l2 + weight * (1.0 - c))


def flow_loss_fields(pred: FlowField, gt: FlowField, occupancy: OccupancyGrid,
                     weight: float = 1.0, eps: float = COS_EPS, mask: VoxelMask | None = None) -> FlowLoss:
    """Flow loss over occupied voxels, further limited to `mask` when one is given."""
    if mask is None:
        check_same_spec(pred, gt, occupancy)
        keep = occupancy.occupied
    else:
        check_same_spec(pred, gt, occupancy, mask)
        keep = occupancy.occupied & mask.bits
    keep = keep.reshape(-1)
    return flow_loss(pred.flow.reshape(-1, 2)[keep], gt.flow.reshape(-1, 2)[keep], weight, eps)


def grad_flow_loss(pred, gt, weight: float = 1.0, eps: float = COS_EPS) -> np.ndarray:
    """d combined / d pred, [M, 2]."""
    pred, gt = _loss_inputs(pred, gt)
    grad = 2.0 * (pred - gt) / len(pred)
    valid, cos, np_, ng = _cos_terms(pred, gt, eps)
    m = int(valid.sum())
    if m:
        p, g = pred[valid], gt[valid]
        dcos = g / (np_[valid] * ng[valid])[:, None] - (cos[valid] / np_[valid] ** 2)[:, None] * p
        grad[valid] -= weight * dcos / m
    return grad


def grad_bin_centers(b, config: BinConfig) -> np.ndarray:
    """n x n Jacobian dc/db; constant in b."""
    b = _finite(b, "bin probabilities")
    n = config.n_bins
    if b.shape[-1] != n:
        raise ValueError(f"bin probabilities have {b.shape[-1]} bins, expected {n}")
    return config.span * (np.tril(np.ones((n, n)), k=-1) + 0.5 * np.eye(n))


def grad_aggregate(c, p) -> tuple[np.ndarray, np.ndarray]:
    """(df/dc, df/dp) = (p, c)."""
    c = _finite(c, "bin centers")
    p = _finite(p, "bin weights")
    if c.shape[-1] != p.shape[-1]:
        raise ValueError(f"{c.shape[-1]} centers but {p.shape[-1]} weights")
    return p.copy(), c.copy()


def grad_through_softmax(logits, upstream) -> np.ndarray:
    s = softmax(logits)
    g = _finite(upstream, "upstream gradient")
    return s * (g - (g * s).sum(axis=-1, keepdims=True))


def grad_flow_from_logits(scene_logits, voxel_logits, config: BinConfig, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate dL/df [..., 2] to (dL/d scene_logits, dL/d voxel_logits)."""
    model = BinModel.from_logits(scene_logits, voxel_logits, config)
    c = model.centers()
    p = model.voxel_weights
    g = _finite(upstream, "upstream gradient")[..., None]

    d_voxel = grad_through_softmax(voxel_logits, g * c)
    dc = g * p
    while dc.ndim > c.ndim:
        dc = dc.sum(axis=0)
    db = dc @ grad_bin_centers(model.scene_probs, config)
    return grad_through_softmax(scene_logits, db), d_voxel
