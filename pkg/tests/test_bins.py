import math

import numpy as np
import pytest

from conftest import make_grid
from occkit.bins import (
    BinConfig,
    BinModel,
    aggregate_flow,
    bin_centers,
    flow_from_logits,
    flow_loss,
    flow_loss_fields,
    grad_aggregate,
    grad_bin_centers,
    grad_flow_from_logits,
    grad_flow_loss,
    grad_through_softmax,
    softmax,
)
from occkit.errors import MetricError
from occkit.grid import FlowField, GridSpec, VoxelMask
from occkit.selftest import central_diff, flow_chain_case, flow_chain_errors, max_rel_err


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, math.log(3.0)]), [0.25, 0.75])
    np.testing.assert_allclose(softmax([1000.0, 0.0]), [1.0, 0.0], atol=1e-300)
    s = softmax(np.random.default_rng(0).normal(size=(5, 2, 7)) * 50)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0)
    assert (s >= 0).all()
    with pytest.raises(ValueError):
        softmax([0.0, np.nan])


def test_bin_centers_example():
    c = bin_centers([0.2, 0.3, 0.5], BinConfig(3, 0.0, 10.0))
    np.testing.assert_allclose(c, [1.0, 3.5, 7.5])


def test_bin_centers_are_increasing_and_inside_range(rng):
    config = BinConfig(16, -25.0, 25.0)
    b = softmax(rng.normal(size=(10, 16)))
    c = bin_centers(b, config)
    assert (np.diff(c, axis=-1) > 0).all()
    assert (c > config.f_min).all() and (c < config.f_max).all()


def test_uniform_bins_split_range_evenly():
    c = bin_centers(np.full(4, 0.25), BinConfig(4, -2.0, 2.0))
    np.testing.assert_allclose(c, [-1.5, -0.5, 0.5, 1.5])


@pytest.mark.parametrize("b", [[0.5, 0.6, -0.1], [0.3, 0.3, 0.3], [0.5, 0.5]])
def test_bin_centers_reject_non_simplex(b):
    with pytest.raises(ValueError):
        bin_centers(b, BinConfig(3, 0.0, 10.0))


def test_aggregate_flow_example():
    assert aggregate_flow([1.0, 3.5, 7.5], [0.2, 0.3, 0.5]) == pytest.approx(5.0)
    assert aggregate_flow([1.0, 3.5, 7.5], [0.0, 1.0, 0.0]) == pytest.approx(3.5)
    with pytest.raises(ValueError):
        aggregate_flow([1.0, 2.0], [0.2, 0.3, 0.5])


def test_grad_bin_centers_example():
    np.testing.assert_array_equal(grad_bin_centers([0.5, 0.5], BinConfig(2, -1.0, 1.0)), [[1.0, 0.0], [2.0, 1.0]])


def test_grad_bin_centers_matches_finite_difference(rng):
    config = BinConfig(5, -3.0, 7.0)
    b = softmax(rng.normal(size=5))
    # Centers are linear in b, so finite differences need no simplex projection.
    span, lo = config.span, config.f_min

    def center(k):
        def fn(x):
            before = np.concatenate([[0.0], np.cumsum(x)[:-1]])
            return float(lo + span * (x[k] / 2 + before[k]))
        return fn

    numeric = np.stack([central_diff(center(k), b) for k in range(5)])
    np.testing.assert_allclose(grad_bin_centers(b, config), numeric, atol=1e-6)


def test_grad_aggregate_and_softmax():
    d_c, d_p = grad_aggregate([1.0, 3.5, 7.5], [0.2, 0.3, 0.5])
    np.testing.assert_array_equal(d_c, [0.2, 0.3, 0.5])
    np.testing.assert_array_equal(d_p, [1.0, 3.5, 7.5])
    # A constant upstream is invisible through a softmax.
    np.testing.assert_allclose(grad_through_softmax([0.1, -2.0, 3.0], [4.0, 4.0, 4.0]), 0.0, atol=1e-12)


def test_bin_model_flow_shapes(rng):
    config = BinConfig(8, -25.0, 25.0)
    model = BinModel.from_logits(rng.normal(size=(2, 8)), rng.normal(size=(3, 4, 2, 8)), config)
    assert model.centers().shape == (2, 8)
    flow = model.flow()
    assert flow.shape == (3, 4, 2)
    assert (flow > config.f_min).all() and (flow < config.f_max).all()
    shared = BinModel.from_logits(rng.normal(size=8), rng.normal(size=(5, 2, 8)), config)
    assert shared.flow().shape == (5, 2)
    with pytest.raises(ValueError):
        BinModel.from_logits(rng.normal(size=(3, 8)), rng.normal(size=(5, 2, 8)), config)


def test_flow_scales_with_range(rng):
    scene = rng.normal(size=(2, 6))
    voxel = rng.normal(size=(4, 2, 6))
    base = flow_from_logits(scene, voxel, BinConfig(6, -1.0, 1.0))
    scaled = flow_from_logits(scene, voxel, BinConfig(6, -7.0, 7.0))
    np.testing.assert_allclose(scaled, 7.0 * base, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("n_bins", [1, 2, 6, 32])
def test_flow_chain_gradients(rng, n_bins):
    config = BinConfig(n_bins, -25.0, 25.0)
    for _ in range(10):
        err_scene, err_voxel = flow_chain_case(rng, config)
        assert err_voxel <= 1e-6
        if n_bins > 1:
            assert err_scene <= 1e-6


def test_shared_bin_gradients(rng):
    config = BinConfig(5, -10.0, 10.0)
    err_scene, err_voxel = flow_chain_errors(
        rng.normal(size=5), rng.normal(size=(3, 2, 5)), config, rng.normal(size=(3, 2))
    )
    assert err_scene <= 1e-6 and err_voxel <= 1e-6


def test_single_bin_has_no_scene_gradient(rng):
    config = BinConfig(1, -4.0, 4.0)
    d_scene, d_voxel = grad_flow_from_logits(np.zeros((2, 1)), np.zeros((3, 2, 1)), config, rng.normal(size=(3, 2)))
    np.testing.assert_array_equal(d_scene, 0.0)
    np.testing.assert_array_equal(d_voxel, 0.0)
    np.testing.assert_allclose(flow_from_logits(np.zeros((2, 1)), np.zeros((3, 2, 1)), config), 0.0)


def test_flow_loss_values():
    same = flow_loss([[1.0, 2.0], [-3.0, 0.5]], [[1.0, 2.0], [-3.0, 0.5]])
    assert same.l2 == 0.0
    assert same.cos == pytest.approx(1.0)
    assert same.combined == pytest.approx(0.0, abs=1e-12)

    ortho = flow_loss([[1.0, 0.0]], [[0.0, 1.0]], weight=0.5)
    assert ortho.l2 == pytest.approx(2.0)
    assert ortho.cos == pytest.approx(0.0)
    assert ortho.combined == pytest.approx(2.5)

    opposite = flow_loss([[2.0, 0.0]], [[-1.0, 0.0]])
    assert opposite.cos == pytest.approx(-1.0)
    assert opposite.combined == pytest.approx(9.0 + 2.0)


def test_flow_loss_skips_zero_vectors_for_direction():
    loss = flow_loss([[0.0, 0.0], [1.0, 1.0]], [[1.0, 0.0], [2.0, 2.0]])
    assert loss.cos == pytest.approx(1.0)
    assert loss.l2 == pytest.approx((1.0 + 2.0) / 2)
    static = flow_loss([[0.0, 0.0]], [[0.0, 0.0]])
    assert static == (0.0, 1.0, 0.0)


def test_flow_loss_needs_voxels():
    with pytest.raises(MetricError):
        flow_loss(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        flow_loss(np.zeros((2, 2)), np.zeros((3, 2)))


def test_grad_flow_loss_matches_finite_difference(rng):
    gt = rng.normal(size=(6, 2))
    pred = rng.normal(size=(6, 2))
    analytic = grad_flow_loss(pred, gt, weight=0.7)
    numeric = central_diff(lambda x: flow_loss(x, gt, weight=0.7).combined, pred)
    assert max_rel_err(analytic, numeric) <= 1e-6


def test_flow_loss_fields_uses_occupied_voxels(small_spec):
    occ = make_grid(small_spec, [(1, 1, 1), (2, 3, 0)], label=4)
    gt = np.zeros((*small_spec.dims, 2))
    pred = np.full((*small_spec.dims, 2), 9.0)
    gt[1, 1, 1] = pred[1, 1, 1] = (1.0, 1.0)
    gt[2, 3, 0] = pred[2, 3, 0] = (0.0, -2.0)
    loss = flow_loss_fields(FlowField(small_spec, pred), FlowField(small_spec, gt), occ)
    assert loss.l2 == 0.0
    other = GridSpec(origin=(0.0, 0.0, 0.0), voxel_size=0.5, dims=small_spec.dims)
    with pytest.raises(ValueError):
        flow_loss_fields(FlowField(small_spec, pred), FlowField(other, gt), occ)


def test_flow_loss_fields_restricted_to_mask(small_spec):
    occ = make_grid(small_spec, [(1, 1, 1), (2, 3, 0)], label=4)
    gt = np.zeros((*small_spec.dims, 2))
    pred = np.zeros((*small_spec.dims, 2))
    gt[1, 1, 1] = pred[1, 1, 1] = (1.0, 1.0)
    gt[2, 3, 0], pred[2, 3, 0] = (0.0, -2.0), (0.0, 2.0)
    pred_f, gt_f = FlowField(small_spec, pred), FlowField(small_spec, gt)
    assert flow_loss_fields(pred_f, gt_f, occ).l2 == pytest.approx(8.0)

    bits = np.zeros(small_spec.dims, dtype=bool)
    bits[1, 1, 1] = bits[5, 5, 2] = True
    masked = flow_loss_fields(pred_f, gt_f, occ, mask=VoxelMask(small_spec, bits))
    assert masked.l2 == 0.0 and masked.cos == pytest.approx(1.0)

    bits[1, 1, 1] = False
    with pytest.raises(MetricError):
        flow_loss_fields(pred_f, gt_f, occ, mask=VoxelMask(small_spec, bits))
    other = GridSpec(origin=(0.0, 0.0, 0.0), voxel_size=0.5, dims=small_spec.dims)
    with pytest.raises(ValueError):
        flow_loss_fields(pred_f, gt_f, occ, mask=VoxelMask(other, bits))
