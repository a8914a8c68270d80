"""Independent reference implementations and the `occkit selftest` suite.

The oracles here are deliberately brute force (per-voxel slab tests, dense
ray marching, Python loops, finite differences) and share no code with the
production paths they check.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import bins, metrics, raycast
from .grid import FeatureGrid, FlowField, GridSpec, OccupancyGrid, VoxelMask, world_to_continuous
from .splat import grad_warp, warp_forward

logger = logging.getLogger(__name__)


# --- traversal ---------------------------------------------------------------


def slab_oracle(spec: GridSpec, origin, direction, max_range: float):
    """Voxels whose interior the segment crosses, sorted by entry.

    Returns ([K, 3] indices, [K] entry distance, [K] exit distance), in meters.
    """
    o = world_to_continuous(spec, np.asarray(origin, dtype=np.float64))
    d = np.asarray(direction, dtype=np.float64)
    idx = np.indices(spec.dims).reshape(3, -1).T
    lo = idx.astype(np.float64)
    hi = lo + 1.0
    tmin = np.empty_like(lo)
    tmax = np.empty_like(lo)
    for a in range(3):
        if d[a] == 0.0:
            inside = (lo[:, a] < o[a]) & (o[a] < hi[:, a])
            tmin[:, a] = np.where(inside, -np.inf, np.inf)
            tmax[:, a] = np.where(inside, np.inf, -np.inf)
        else:
            t1 = (lo[:, a] - o[a]) / d[a]
            t2 = (hi[:, a] - o[a]) / d[a]
            tmin[:, a] = np.minimum(t1, t2)
            tmax[:, a] = np.maximum(t1, t2)
    enter = np.maximum(tmin.max(axis=1), 0.0)
    leave = np.minimum(tmax.min(axis=1), max_range / spec.voxel_size)
    keep = enter < leave
    order = np.argsort(enter[keep], kind="stable")
    vs = spec.voxel_size
    return idx[keep][order], enter[keep][order] * vs, leave[keep][order] * vs


def march_oracle(spec: GridSpec, origin, direction, max_range: float, step: float = 1e-3) -> np.ndarray:
    """Voxel entries seen when sampling the ray every `step` voxel pitches."""
    o = world_to_continuous(spec, np.asarray(origin, dtype=np.float64))
    d = np.asarray(direction, dtype=np.float64)
    s = np.arange(int(max_range / spec.voxel_size / step) + 1) * step
    pts = o[None] + s[:, None] * d[None]
    inside = ((pts >= 0) & (pts < np.asarray(spec.dims))).all(axis=1)
    v = np.floor(pts[inside]).astype(np.int64)
    if len(v) == 0:
        return v.reshape(0, 3)
    change = np.ones(len(v), dtype=bool)
    change[1:] = (v[1:] != v[:-1]).any(axis=1)
    return v[change]


def first_hit_oracle(grid: OccupancyGrid, origin, direction, max_range: float):
    idx, enter, _ = slab_oracle(grid.spec, origin, direction, max_range)
    for k, v in enumerate(idx):
        if grid.labels[tuple(v)] != grid.free_class:
            return tuple(int(x) for x in v), float(enter[k])
    return None, math.inf


def visible_mask_oracle(grid: OccupancyGrid, bundle: raycast.RayBundle) -> np.ndarray:
    bits = np.zeros(grid.spec.dims, dtype=bool)
    origins, dirs = bundle.flat()
    for o, d in zip(origins, dirs):
        idx, _, _ = slab_oracle(grid.spec, o, d, bundle.max_range)
        for v in idx:
            bits[tuple(v)] = True
            if grid.labels[tuple(v)] != grid.free_class:
                break
    return bits


def ball_count_oracle(radius: float, voxel_size: float) -> int:
    """Number of lattice offsets whose center distance is <= radius."""
    r = int(math.ceil(radius / voxel_size)) + 1
    n = 0
    for i in range(-r, r + 1):
        for j in range(-r, r + 1):
            for k in range(-r, r + 1):
                if math.sqrt(i * i + j * j + k * k) * voxel_size <= radius + 1e-9:
                    n += 1
    return n


def hard_examples_oracle(uncertainty: np.ndarray, mask: np.ndarray, fraction: float) -> np.ndarray:
    u = uncertainty.reshape(-1)
    cand = [i for i in range(u.size) if mask.reshape(-1)[i]]
    cand.sort(key=lambda i: (-u[i], i))
    k = math.ceil(round(fraction * len(cand), 9))
    out = np.zeros(u.size, dtype=bool)
    out[cand[:k]] = True
    return out.reshape(mask.shape)


# --- metrics -----------------------------------------------------------------


def ray_iou_oracle(evals: metrics.RayEvals, threshold: float, classes) -> float:
    tp, fp, fn = {}, {}, {}
    for i in range(len(evals)):
        r = evals[i]
        g = r.gt_hit.label if r.gt_hit.hit else None
        p = r.pred_hit.label if r.pred_hit.hit else None
        ok = g is not None and g == p and abs(r.pred_hit.depth - r.gt_hit.depth) <= threshold
        if ok:
            tp[g] = tp.get(g, 0) + 1
            continue
        if g is not None:
            fn[g] = fn.get(g, 0) + 1
        if p is not None:
            fp[p] = fp.get(p, 0) + 1
    ious = []
    for c in classes:
        denom = tp.get(c, 0) + fp.get(c, 0) + fn.get(c, 0)
        if denom:
            ious.append(tp.get(c, 0) / denom)
    return sum(ious) / len(ious) if ious else 1.0


# --- gradients -----------------------------------------------------------------


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(np.asarray(analytic) - np.asarray(numeric)).max()) / scale


def central_diff(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = fn(x)
        flat[i] = keep - h
        down = fn(x)
        flat[i] = keep
        gf[i] = (up - down) / (2.0 * h)
    return g


def flow_chain_case(rng: np.random.Generator, config: bins.BinConfig, voxels: int = 3):
    """Analytic vs numeric gradients of a random linear loss on flow_from_logits."""
    n = config.n_bins
    scene = rng.normal(size=(2, n))
    voxel = rng.normal(size=(voxels, 2, n))
    up = rng.normal(size=(voxels, 2))
    return flow_chain_errors(scene, voxel, config, up)


def flow_chain_errors(scene, voxel, config: bins.BinConfig, up) -> tuple[float, float]:
    """Max relative gradient errors for scene and voxel logits of sum(up * f)."""
    scene = np.asarray(scene, dtype=np.float64)
    voxel = np.asarray(voxel, dtype=np.float64)

    def loss_scene(s):
        return float((bins.flow_from_logits(s, voxel, config) * up).sum())

    def loss_voxel(v):
        return float((bins.flow_from_logits(scene, v, config) * up).sum())

    d_scene, d_voxel = bins.grad_flow_from_logits(scene, voxel, config, up)
    return (
        max_rel_err(d_scene, central_diff(loss_scene, scene)),
        max_rel_err(d_voxel, central_diff(loss_voxel, voxel)),
    )


def warp_grad_case(rng: np.random.Generator, dims=(4, 4, 2), channels: int = 2, dt: float = 0.5):
    """Analytic vs numeric gradients of <G, warp_forward(F, flow)>."""
    spec = GridSpec(origin=(0.0, 0.0, 0.0), voxel_size=0.4, dims=dims)
    F = rng.normal(size=(*dims, channels))
    G = rng.normal(size=(*dims, channels))
    # Sub-voxel shifts kept clear of lattice planes.
    shift = rng.integers(-1, 2, size=(*dims, 2)) + rng.uniform(0.01, 0.99, size=(*dims, 2))
    flow = shift * spec.voxel_size / dt

    def loss_flow(fl):
        out = warp_forward(FeatureGrid(spec, F), FlowField(spec, fl), dt, threads=1)
        return float((out.values * G).sum())

    def loss_feat(f):
        out = warp_forward(FeatureGrid(spec, f), FlowField(spec, flow), dt, threads=1)
        return float((out.values * G).sum())

    d_feat, d_flow = grad_warp(FeatureGrid(spec, F), FlowField(spec, flow), dt, G)
    return (
        max_rel_err(d_feat, central_diff(loss_feat, F)),
        max_rel_err(d_flow, central_diff(loss_flow, flow)),
    )


# --- suite -------------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_ray(rng: np.random.Generator, spec: GridSpec):
    lo, hi = np.asarray(spec.origin), np.asarray(spec.upper)
    pad = (hi - lo) * 0.25
    origin = rng.uniform(lo - pad, hi + pad)
    d = rng.normal(size=3)
    return origin, d / np.linalg.norm(d)


def random_grid(rng: np.random.Generator, dims, occupied: float = 0.1) -> OccupancyGrid:
    spec = GridSpec(origin=(-1.0, -2.0, 0.5), voxel_size=0.4, dims=dims)
    labels = np.where(rng.random(dims) < occupied, rng.integers(0, 16, size=dims), 16)
    return OccupancyGrid(spec, labels)


def _check_traversal(rng) -> CheckResult:
    rays, worst = 0, 0.0
    for _ in range(20):
        grid = random_grid(rng, tuple(int(v) for v in rng.integers(8, 17, size=3)))
        for _ in range(50):
            o, d = random_ray(rng, grid.spec)
            max_range = float(rng.uniform(0.5, 12.0))
            idx, _ = raycast.traverse_with_depth(grid.spec, o, d, max_range)
            ref, _, _ = slab_oracle(grid.spec, o, d, max_range)
            if not np.array_equal(idx, ref):
                return CheckResult("traverse", False, f"voxel list differs from slab oracle after {rays} rays")
            hit = raycast.cast_first_hit(grid, o, d, max_range)
            ref_voxel, ref_depth = first_hit_oracle(grid, o, d, max_range)
            if hit.voxel != ref_voxel:
                return CheckResult("traverse", False, "first hit voxel differs from oracle")
            if hit.hit:
                worst = max(worst, abs(hit.depth - ref_depth))
            rays += 1
    return CheckResult("traverse", worst <= 1e-6, f"{rays} rays, max depth error {worst:.2e} m")


def _check_visible_mask(rng, threads) -> CheckResult:
    grid = random_grid(rng, (16, 16, 4), occupied=0.05)
    elev = tuple(np.linspace(-0.4, 0.3, 8).tolist())
    pattern = raycast.RayPattern(elev, 64, 6.0)
    origin = np.asarray(grid.spec.origin) + np.asarray([8.2, 7.9, 2.1]) * grid.spec.voxel_size
    bundle = raycast.RayBundle(origin[None], pattern.directions(), pattern.max_range, pattern)
    got = raycast.visible_mask_v1(grid, bundle, threads)
    ok = np.array_equal(got.bits, visible_mask_oracle(grid, bundle))
    v2 = raycast.visible_mask_v2(grid, bundle, 2.0, threads)
    ok = ok and got.issubset(v2) and raycast.visible_mask_v2(grid, bundle, 0.0, threads) == got
    return CheckResult("visible_mask", ok, f"{bundle.num_rays} rays, {got.count} visible voxels")


def _check_ball() -> CheckResult:
    ball = raycast.dilation_ball(2.0, 0.4)
    want = ball_count_oracle(2.0, 0.4)
    return CheckResult("dilation_ball", int(ball.sum()) == want, f"{int(ball.sum())} vs {want} offsets")


def _check_hard_examples(rng) -> CheckResult:
    spec = GridSpec(origin=(0.0, 0.0, 0.0), voxel_size=1.0, dims=(10, 10, 1))
    u = rng.random(spec.dims)
    mask = VoxelMask(spec, np.ones(spec.dims, dtype=bool))
    got = raycast.select_hard_examples(FeatureGrid(spec, u[..., None]), mask, 0.1)
    ok = np.array_equal(got.bits, hard_examples_oracle(u, mask.bits, 0.1))
    return CheckResult("hard_examples", ok, f"{got.count} of {mask.count} selected")


def _check_ray_iou(rng, threads) -> CheckResult:
    worst = 0.0
    monotone = True
    for _ in range(100):
        gt = random_grid(rng, (8, 8, 3), occupied=0.15)
        labels = gt.labels.copy()
        flip = rng.random(labels.shape) < 0.2
        labels[flip] = np.where(rng.random(labels.shape) < 0.5, 16, rng.integers(0, 16, labels.shape))[flip]
        pred = gt.with_labels(labels)
        origin = np.asarray(gt.spec.origin) + np.asarray([4.1, 3.9, 1.3]) * gt.spec.voxel_size
        pattern = raycast.RayPattern((-0.3, 0.0, 0.2), 24, 8.0)
        bundle = raycast.RayBundle(origin[None], pattern.directions(), pattern.max_range, pattern)
        zero = FlowField.zeros(gt.spec)
        evals = metrics.evaluate_rays(gt, pred, zero, zero, bundle, threads)
        classes = list(range(16))
        prev = -1.0
        for t in (0.2, 1.0, 2.0, 4.0):
            got, _ = metrics.ray_iou(evals, t, classes)
            worst = max(worst, abs(got - ray_iou_oracle(evals, t, classes)))
            monotone = monotone and got >= prev
            prev = got
        perfect = metrics.evaluate_rays(gt, gt, zero, zero, bundle, threads)
        if metrics.ray_iou_mean(perfect) != 1.0:
            return CheckResult("ray_iou", False, "perfect prediction is not 1.0")
    return CheckResult("ray_iou", worst <= 1e-9 and monotone, f"100 scenes, max error {worst:.1e}")


def _check_occ_score() -> CheckResult:
    mean = metrics.combine_thresholds([0.398, 0.459, 0.496])
    score = metrics.occ_score(0.451, 0.529)
    ok = abs(mean - 0.451) <= 5e-4 and abs(score - 0.453) <= 5e-4
    return CheckResult("occ_score", ok, f"RayIoU {mean:.4f}, Occ Score {score:.4f}")


def _check_flow_grad(rng) -> CheckResult:
    config = bins.BinConfig(n_bins=6, f_min=-25.0, f_max=25.0)
    worst = max(max(flow_chain_case(rng, config)) for _ in range(100))
    return CheckResult("flow_gradients", worst <= 1e-6, f"100 cases, max rel error {worst:.1e}")


def _check_warp(rng, threads) -> CheckResult:
    spec = GridSpec(origin=(0.0, 0.0, 0.0), voxel_size=0.4, dims=(6, 6, 3))
    F = FeatureGrid(spec, rng.normal(size=(*spec.dims, 3)))
    identity = warp_forward(F, FlowField.zeros(spec), 0.5, threads)
    if not np.array_equal(identity.values, F.values):
        return CheckResult("warp", False, "zero flow is not the identity")
    shift = np.zeros((*spec.dims, 2))
    shift[..., 0] = spec.voxel_size / 0.5
    moved = warp_forward(F, FlowField(spec, shift), 0.5, threads)
    if not (np.array_equal(moved.values[1:], F.values[:-1]) and not moved.values[0].any()):
        return CheckResult("warp", False, "one-pitch flow is not a one-cell shift")
    small = np.zeros((*spec.dims, 2))
    small[1:-1, 1:-1] = rng.uniform(-0.3, 0.3, size=(4, 4, 2)) * spec.voxel_size / 0.5
    inner = np.zeros(spec.dims, dtype=bool)
    inner[1:-1, 1:-1] = True
    Fi = FeatureGrid(spec, F.values * inner[..., None])
    kept = warp_forward(Fi, FlowField(spec, small), 0.5, threads)
    err = float(np.abs(kept.values.sum(axis=(0, 1, 2)) - Fi.values.sum(axis=(0, 1, 2))).max())
    return CheckResult("warp", err <= 1e-9, f"identity and shift exact, mass error {err:.1e}")


def _check_warp_grad(rng) -> CheckResult:
    worst = max(max(warp_grad_case(rng)) for _ in range(50))
    return CheckResult("warp_gradients", worst <= 1e-5, f"50 cases, max rel error {worst:.1e}")


def run_selftest(seed: int = 0, threads: int | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    checks = [
        lambda: _check_traversal(rng),
        lambda: _check_visible_mask(rng, threads),
        _check_ball,
        lambda: _check_hard_examples(rng),
        lambda: _check_ray_iou(rng, threads),
        _check_occ_score,
        lambda: _check_flow_grad(rng),
        lambda: _check_warp(rng, threads),
        lambda: _check_warp_grad(rng),
    ]
    results = []
    for check in checks:
        result = check()
        logger.info("%s: %s", result.name, "ok" if result.passed else "FAILED")
        results.append(result)
    return results
