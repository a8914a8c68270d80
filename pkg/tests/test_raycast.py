import math

import numpy as np
import pytest

from conftest import center, fan_bundle, make_grid
from occkit.errors import RayError, SpecMismatchError
from occkit.grid import FeatureGrid, GridSpec, OccupancyGrid, Pose, Trajectory, VoxelMask
from occkit.raycast import (
    RayBundle,
    RayPattern,
    cast_bundle,
    cast_first_hit,
    dilation_ball,
    generate_bundle,
    select_hard_examples,
    traverse,
    traverse_with_depth,
    visible_mask_v1,
    visible_mask_v2,
)
from occkit.selftest import (
    ball_count_oracle,
    first_hit_oracle,
    hard_examples_oracle,
    march_oracle,
    random_grid,
    random_ray,
    slab_oracle,
    visible_mask_oracle,
)


def test_generate_bundle_axis_fan():
    traj = Trajectory((Pose((0.0, 0.0, 0.0)),))
    bundle = generate_bundle(traj, RayPattern((0.0,), 4, 10.0))
    assert bundle.num_rays == 4
    np.testing.assert_allclose(bundle.directions, [[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], atol=1e-15)


def test_generate_bundle_counts_and_elevation():
    traj = Trajectory(tuple(Pose((float(i), 0.0, 0.0), 1.0) for i in range(3)))
    bundle = generate_bundle(traj, RayPattern((-0.1, 0.2), 180, 30.0))
    assert bundle.num_rays == 3 * 2 * 180
    np.testing.assert_allclose(bundle.directions[0, 2], math.sin(-0.1))
    np.testing.assert_allclose(np.linalg.norm(bundle.directions, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(bundle.origins[:, 2], 1.0)


def test_default_pattern():
    p = RayPattern.default()
    assert (len(p.elevations), p.azimuth_count, p.max_range) == (32, 1800, 60.0)
    np.testing.assert_allclose(np.rad2deg([p.elevations[0], p.elevations[-1]]), [-30.0, 10.0])


def test_bundle_json_round_trip():
    bundle = fan_bundle((1.0, 2.0, 0.5))
    back = RayBundle.from_json(bundle.to_json())
    np.testing.assert_array_equal(back.origins, bundle.origins)
    np.testing.assert_array_equal(back.directions, bundle.directions)
    assert back.pattern == bundle.pattern


def test_bundle_rejects_bad_rays():
    with pytest.raises(RayError):
        RayBundle(np.zeros((1, 3)), np.array([[1.0, 1.0, 0.0]]), 10.0)
    with pytest.raises(RayError):
        RayPattern((0.0,), 0, 10.0)
    with pytest.raises(RayError):
        RayPattern((0.0,), 4, 0.0)


def test_traverse_axis_aligned(unit_spec):
    cells = traverse(unit_spec, center(unit_spec, (0, 3, 4)), (1.0, 0.0, 0.0), 20.0)
    assert cells == [(x, 3, 4) for x in range(8)]


def test_traverse_respects_range(unit_spec):
    cells = traverse(unit_spec, center(unit_spec, (0, 3, 4)), (1.0, 0.0, 0.0), 2.0)
    assert cells == [(0, 3, 4), (1, 3, 4), (2, 3, 4)]


def test_traverse_miss(unit_spec):
    assert traverse(unit_spec, (-1.0, 4.0, 4.0), (-1.0, 0.0, 0.0), 100.0) == []


def test_traverse_from_outside_enters_at_face(unit_spec):
    idx, depth = traverse_with_depth(unit_spec, (-2.0, 4.5, 4.5), (1.0, 0.0, 0.0), 100.0)
    assert tuple(idx[0]) == (0, 4, 4)
    assert depth[0] == pytest.approx(2.0)


def test_traverse_rejects_non_unit_direction(unit_spec):
    with pytest.raises(RayError):
        traverse(unit_spec, (0.5, 0.5, 0.5), (1.0, 1.0, 0.0), 5.0)


def test_traverse_edge_tie_steps_x_first(unit_spec):
    d = np.array([1.0, 1.0, 0.0]) / math.sqrt(2.0)
    cells = traverse(unit_spec, (0.5, 0.5, 0.5), d, 1.5)
    assert cells[:3] == [(0, 0, 0), (1, 0, 0), (1, 1, 0)]


def test_traverse_matches_slab_oracle(rng):
    for _ in range(10):
        grid = random_grid(rng, tuple(int(v) for v in rng.integers(8, 17, size=3)))
        for _ in range(100):
            o, d = random_ray(rng, grid.spec)
            max_range = float(rng.uniform(0.5, 12.0))
            idx, depth = traverse_with_depth(grid.spec, o, d, max_range)
            ref, enter, _ = slab_oracle(grid.spec, o, d, max_range)
            np.testing.assert_array_equal(idx, ref)
            np.testing.assert_allclose(depth, enter, atol=1e-9)


def test_traverse_agrees_with_marching(rng):
    spec = GridSpec(origin=(0.0, 0.0, 0.0), voxel_size=0.4, dims=(8, 8, 8))
    step = 1e-3
    for _ in range(50):
        o, d = random_ray(rng, spec)
        cells = [tuple(v) for v in traverse_with_depth(spec, o, d, 6.0)[0]]
        marched = [tuple(v) for v in march_oracle(spec, o, d, 6.0, step)]
        # every marched voxel appears, in the same order
        pos = [cells.index(v) for v in marched]
        assert pos == sorted(pos)
        # anything the marcher skipped was clipped at a corner
        ref, enter, leave = slab_oracle(spec, o, d, 6.0)
        chords = {tuple(v): (b - a) / spec.voxel_size for v, a, b in zip(ref, enter, leave)}
        for v in set(cells) - set(marched):
            assert chords[v] < 2 * step


def test_cast_first_hit_all_free(unit_spec):
    hit = cast_first_hit(OccupancyGrid.empty(unit_spec), (0.5, 0.5, 0.5), (1.0, 0.0, 0.0), 20.0)
    assert not hit.hit and hit.depth == math.inf and hit.voxel is None


def test_cast_first_hit_inside_occupied(unit_spec):
    grid = make_grid(unit_spec, [(2, 2, 2)], label=4)
    hit = cast_first_hit(grid, (2.3, 2.6, 2.1), (0.0, 0.0, 1.0), 20.0)
    assert hit.hit and hit.depth == 0.0 and hit.voxel == (2, 2, 2) and hit.label == 4


def test_cast_first_hit_entry_depth():
    spec = GridSpec(origin=(0.0, 0.0, 0.0), voxel_size=0.4, dims=(10, 3, 3))
    grid = make_grid(spec, [(5, 1, 1)], label=0)
    hit = cast_first_hit(grid, center(spec, (0, 1, 1)), (1.0, 0.0, 0.0), 10.0)
    assert hit.voxel == (5, 1, 1)
    assert hit.depth == pytest.approx(1.8, abs=1e-12)


def test_cast_first_hit_matches_oracle(rng):
    for _ in range(200):
        grid = random_grid(rng, (10, 9, 8), occupied=0.08)
        o, d = random_ray(rng, grid.spec)
        hit = cast_first_hit(grid, o, d, 8.0)
        voxel, depth = first_hit_oracle(grid, o, d, 8.0)
        assert hit.voxel == voxel
        if voxel is not None:
            assert hit.depth == pytest.approx(depth, abs=1e-6)
            assert 0.0 <= hit.depth <= 8.0


def test_first_hit_depth_grows_with_occluder_distance():
    spec = GridSpec(origin=(0.0, 0.0, 0.0), voxel_size=0.4, dims=(12, 3, 3))
    depths = [
        cast_first_hit(make_grid(spec, [(k, 1, 1)]), center(spec, (0, 1, 1)), (1.0, 0.0, 0.0), 20.0).depth
        for k in range(1, 12)
    ]
    assert depths == sorted(depths)


def test_cast_bundle_labels_and_misses(small_spec):
    grid = make_grid(small_spec, [(12, 8, 1)], label=2)
    hits = cast_bundle(grid, fan_bundle(center(small_spec, (8, 8, 1)), elevations=(0.0,), azimuths=4))
    assert hits.label.tolist() == [2, -1, -1, -1]
    assert hits.voxel[1] == -1 and math.isinf(hits.depth[1])


def test_v1_without_occluder_is_traverse_set(small_spec):
    bundle = RayBundle(center(small_spec, (3, 4, 1))[None], np.array([[0.6, 0.8, 0.0]]), 20.0)
    mask = visible_mask_v1(OccupancyGrid.empty(small_spec), bundle)
    expected = np.zeros(small_spec.dims, bool)
    for idx in traverse(small_spec, bundle.origins[0], bundle.directions[0], 20.0):
        expected[idx] = True
    np.testing.assert_array_equal(mask.bits, expected)


def test_v1_wall_blocks_everything_behind(small_spec):
    labels = np.full(small_spec.dims, 16, dtype=np.uint8)
    labels[10] = 14
    grid = OccupancyGrid(small_spec, labels)
    mask = visible_mask_v1(grid, fan_bundle(center(small_spec, (4, 8, 2)), azimuths=64, max_range=10.0))
    assert not mask.bits[11:].any()
    assert mask.bits[10].any()


def test_v1_matches_oracle(rng):
    grid = random_grid(rng, (16, 16, 4), occupied=0.05)
    origin = np.asarray(grid.spec.origin) + np.asarray([8.3, 7.6, 2.2]) * grid.spec.voxel_size
    bundle = fan_bundle(origin, elevations=np.linspace(-0.4, 0.3, 8), azimuths=64, max_range=6.0)
    np.testing.assert_array_equal(visible_mask_v1(grid, bundle).bits, visible_mask_oracle(grid, bundle))


def test_v1_is_thread_count_independent(rng):
    grid = random_grid(rng, (16, 16, 4), occupied=0.05)
    origin = np.asarray(grid.spec.origin) + np.asarray([8.3, 7.6, 2.2]) * grid.spec.voxel_size
    bundle = fan_bundle(origin, elevations=np.linspace(-0.4, 0.3, 8), azimuths=3000, max_range=6.0)
    assert visible_mask_v1(grid, bundle, threads=1) == visible_mask_v1(grid, bundle, threads=4)


def test_adding_occluders_only_removes_visibility(rng):
    grid = random_grid(rng, (16, 16, 4), occupied=0.03)
    origin = np.asarray(grid.spec.origin) + np.asarray([8.3, 7.6, 2.2]) * grid.spec.voxel_size
    bundle = fan_bundle(origin, elevations=np.linspace(-0.4, 0.3, 8), azimuths=64, max_range=6.0)
    before = visible_mask_v1(grid, bundle).bits
    labels = grid.labels.copy()
    added = (rng.random(labels.shape) < 0.05) & (labels == 16)
    labels[added] = 3
    after = visible_mask_v1(grid.with_labels(labels), bundle).bits
    assert not (after & ~before).any()


def test_dilation_ball_matches_exhaustive_count():
    assert int(dilation_ball(2.0, 0.4).sum()) == ball_count_oracle(2.0, 0.4)
    assert int(dilation_ball(0.0, 0.4).sum()) == 1


def test_v2_single_hit_ball():
    spec = GridSpec(origin=(0.0, 0.0, 0.0), voxel_size=0.4, dims=(21, 21, 21))
    grid = make_grid(spec, [(15, 10, 10)])
    bundle = RayBundle(center(spec, (14, 10, 10))[None], np.array([[1.0, 0.0, 0.0]]), 0.3)
    v1 = visible_mask_v1(grid, bundle)
    v2 = visible_mask_v2(grid, bundle, 2.0)
    ball = np.zeros(spec.dims, bool)
    idx = np.indices(spec.dims).transpose(1, 2, 3, 0)
    dist = np.linalg.norm((idx - np.array([15, 10, 10])) * spec.voxel_size, axis=-1)
    ball[dist <= 2.0 + 1e-9] = True
    np.testing.assert_array_equal(v2.bits, ball | v1.bits)


def test_v2_degenerate_cases(rng, small_spec):
    grid = random_grid(rng, (16, 16, 4), occupied=0.05)
    origin = np.asarray(grid.spec.origin) + np.asarray([8.3, 7.6, 2.2]) * grid.spec.voxel_size
    bundle = fan_bundle(origin, azimuths=64, max_range=6.0)
    v1 = visible_mask_v1(grid, bundle)
    assert visible_mask_v2(grid, bundle, 0.0) == v1
    assert v1.issubset(visible_mask_v2(grid, bundle, 1.0))
    empty = OccupancyGrid.empty(small_spec)
    free_bundle = fan_bundle(center(small_spec, (8, 8, 2)))
    assert visible_mask_v2(empty, free_bundle) == visible_mask_v1(empty, free_bundle)


def test_select_hard_examples_tie_break():
    spec = GridSpec(origin=(0, 0, 0), voxel_size=1.0, dims=(4, 4, 1))
    bits = np.zeros(spec.dims, bool)
    chosen = [1, 3, 4, 6, 7, 9, 10, 12, 13, 15]
    bits.reshape(-1)[chosen] = True
    mask = VoxelMask(spec, bits)
    unc = FeatureGrid(spec, np.ones((*spec.dims, 1)))
    hard = select_hard_examples(unc, mask, 0.5)
    assert np.flatnonzero(hard.bits.reshape(-1)).tolist() == chosen[:5]
    assert select_hard_examples(unc, mask, 1.0) == mask


def test_select_hard_examples_matches_sort(rng):
    spec = GridSpec(origin=(0, 0, 0), voxel_size=1.0, dims=(10, 10, 1))
    u = rng.random(spec.dims)
    mask = VoxelMask(spec, np.ones(spec.dims, bool))
    hard = select_hard_examples(FeatureGrid(spec, u[..., None]), mask, 0.1)
    assert hard.count == 10
    np.testing.assert_array_equal(hard.bits, hard_examples_oracle(u, mask.bits, 0.1))


def test_select_hard_examples_errors(unit_spec, small_spec):
    mask = VoxelMask(unit_spec, np.zeros(unit_spec.dims, bool))
    unc = FeatureGrid(unit_spec, np.zeros((*unit_spec.dims, 1)))
    assert select_hard_examples(unc, mask, 0.3).count == 0
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            select_hard_examples(unc, mask, bad)
    with pytest.raises(SpecMismatchError):
        select_hard_examples(FeatureGrid(small_spec, np.zeros((*small_spec.dims, 1))), mask, 0.5)
