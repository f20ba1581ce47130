import math

import numpy as np
import pytest

from core.world_sim import CameraModel, Pose, sense, travel_cost
from core.semantic_map import (
    ENDPOINT_OVERSHOOT, FREE, OCCUPIED, UNKNOWN, MultiLayerMap, integrate_frame, voxel_states,
)
from core.planner import (
    CandidatePose, PlanState, PlannerConfig, coverage_path, coverage_waypoints, extract_frontiers,
    lowres_camera, plan_next_pose, sample_candidates, score_candidate, trace_row, view_information,
)
from utils.errors import ConfigError, DomainError
from helpers import brute_force_supercover, flat_world, mapped_world, oracle_prediction


def set_state(semantic_map, index, state):
    semantic_map.geo_updates[index] = 1
    semantic_map.geo[index] = {FREE: -2.0, OCCUPIED: 2.0}[state]


def half_observed_map(nx=8, ny=8):
    """Columns with x < nx/2 observed (ground occupied, air free); the rest unknown."""
    semantic_map = MultiLayerMap((nx, ny, 2), 1.0, 2)
    set_state(semantic_map, (slice(0, nx // 2), slice(None), 0), OCCUPIED)
    set_state(semantic_map, (slice(0, nx // 2), slice(None), 1), FREE)
    return semantic_map


def test_view_information_cases():
    semantic_map = MultiLayerMap((2, 2, 2), 1.0, 2)
    surface_a = semantic_map.flat_index(0, 1, 0)
    surface_b = semantic_map.flat_index(1, 1, 1)
    semantic_map.unc_sum.ravel()[surface_a] = 0.4
    semantic_map.unc_count.ravel()[surface_a] = 1
    semantic_map.train_count.ravel()[surface_a] = 2
    semantic_map.unc_sum.ravel()[surface_b] = 0.9
    semantic_map.unc_count.ravel()[surface_b] = 1
    semantic_map.train_count.ravel()[surface_b] = 1

    reflect_voxel = np.array([[-1, 0], [surface_a, surface_b]])
    reflect_state = np.array([[-1, UNKNOWN], [OCCUPIED, OCCUPIED]])
    info = view_information(reflect_voxel, reflect_state, semantic_map, c_u=0.1)
    assert info.sum() == pytest.approx(1.2)
    assert info[0, 0] == 0.0


def test_score_candidate_mixed_view():
    semantic_map = MultiLayerMap((2, 2, 2), 1.0, 2)
    # column (0, 0): free space all the way down
    set_state(semantic_map, (0, 0, slice(None)), FREE)
    # column (1, 0) stays unknown
    # column (0, 1): ground surface seen with M_U 0.4, trained on twice
    set_state(semantic_map, (0, 1, 1), FREE)
    set_state(semantic_map, (0, 1, 0), OCCUPIED)
    semantic_map.unc_sum[0, 1, 0], semantic_map.unc_count[0, 1, 0], semantic_map.train_count[0, 1, 0] = 0.4, 1, 2
    # column (1, 1): roof surface with M_U 0.9, trained on once
    set_state(semantic_map, (1, 1, 1), OCCUPIED)
    semantic_map.unc_sum[1, 1, 1], semantic_map.unc_count[1, 1, 1], semantic_map.train_count[1, 1, 1] = 0.9, 1, 1

    candidate = CandidatePose(Pose(1.0, 1.0, 10.0))
    assert score_candidate(semantic_map, candidate, CameraModel(2, 2, 2.0), c_u=0.1) == pytest.approx(1.2)


def test_score_all_unknown_view():
    semantic_map = MultiLayerMap((4, 4, 2), 1.0, 2)
    candidate = CandidatePose(Pose(2.0, 2.0, 10.0))
    assert score_candidate(semantic_map, candidate, CameraModel(2, 2, 2.0), c_u=0.1) == pytest.approx(0.4)


def test_score_known_free_space_is_zero():
    semantic_map = MultiLayerMap((4, 4, 2), 1.0, 2)
    set_state(semantic_map, (slice(None), slice(None), slice(None)), FREE)
    candidate = CandidatePose(Pose(2.0, 2.0, 10.0))
    assert score_candidate(semantic_map, candidate, CameraModel(4, 4, 2.0), c_u=0.5) == 0.0


def test_unobserved_surface_uncertainty_counts_as_one():
    semantic_map = MultiLayerMap((1, 1, 1), 1.0, 2)
    set_state(semantic_map, (0, 0, 0), OCCUPIED)
    info = view_information(np.array([[0]]), np.array([[OCCUPIED]]), semantic_map, c_u=0.5)
    assert info[0, 0] == 1.0


def brute_force_score(semantic_map, pose, camera, c_u):
    states = voxel_states(semantic_map).ravel()
    gx, gy = camera.ground_points(pose)
    start = pose.as_array()
    total = 0.0
    for x, y in zip(gx.ravel(), gy.ravel()):
        end = start + (np.array([x, y, 0.0]) - start) * (1.0 + ENDPOINT_OVERSHOOT)
        for v in brute_force_supercover(start, end, semantic_map.dims):
            if states[v] == FREE:
                continue
            if states[v] == UNKNOWN:
                total += c_u
            else:
                count = semantic_map.unc_count.ravel()[v]
                mean_unc = semantic_map.unc_sum.ravel()[v] / count if count > 0 else 1.0
                total += mean_unc / max(1, semantic_map.train_count.ravel()[v])
            break
    return total


def test_score_matches_brute_force_on_random_maps():
    rng = np.random.default_rng(0)
    for _ in range(50):
        semantic_map = MultiLayerMap((5, 5, 3), 1.0, 2)
        semantic_map.geo[...] = rng.uniform(-2.0, 3.5, size=semantic_map.dims)
        semantic_map.geo_updates[...] = rng.integers(0, 2, size=semantic_map.dims)
        semantic_map.unc_count[...] = rng.integers(0, 3, size=semantic_map.dims)
        semantic_map.unc_sum[...] = rng.uniform(size=semantic_map.dims) * semantic_map.unc_count
        semantic_map.train_count[...] = rng.integers(0, 4, size=semantic_map.dims)
        pose = Pose(rng.uniform(0.5, 4.5), rng.uniform(0.5, 4.5), rng.uniform(4.0, 8.0))
        camera = CameraModel(4, 4, rng.uniform(1.0, 4.0))
        c_u = rng.uniform(0.0, 1.0)
        score = score_candidate(semantic_map, CandidatePose(pose), camera, c_u)
        assert abs(score - brute_force_score(semantic_map, pose, camera, c_u)) < 1e-9


def test_no_frontiers_on_unknown_or_fully_observed_maps():
    semantic_map = MultiLayerMap((6, 6, 2), 1.0, 2)
    assert extract_frontiers(semantic_map) == []
    set_state(semantic_map, (slice(None), slice(None), 1), FREE)
    set_state(semantic_map, (slice(None), slice(None), 0), OCCUPIED)
    assert extract_frontiers(semantic_map) == []


def test_half_observed_map_has_one_frontier_band():
    semantic_map = half_observed_map(32, 32)
    frontiers = extract_frontiers(semantic_map)
    assert len(frontiers) == 1

    states = voxel_states(semantic_map)
    expected = set()
    nx, ny, nz = semantic_map.dims
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if states[i, j, k] != FREE:
                    continue
                for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    a, b, c = i + di, j + dj, k + dk
                    if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz and states[a, b, c] == UNKNOWN:
                        expected.add((i, j, k))
                        break
    assert {tuple(int(c) for c in v) for v in frontiers[0]} == expected
    assert expected == {(15, j, 1) for j in range(32)}


def test_no_candidates_without_budget():
    semantic_map = half_observed_map()
    cfg = PlannerConfig(altitude=10.0, speed=1.0, spacing=2.0)
    plan_state = PlanState(Pose(2.0, 4.0, 10.0), 0.0)
    assert sample_candidates(extract_frontiers(semantic_map), plan_state, cfg, 1.0, (8.0, 8.0), 1.0) == []


def test_candidates_along_a_ten_meter_frontier():
    component = np.array([[i, 0, 1] for i in range(10)])
    cfg = PlannerConfig(altitude=10.0, speed=1.0, spacing=5.0)
    plan_state = PlanState(Pose(10.0, 10.0, 10.0), 1000.0)
    candidates = sample_candidates([component], plan_state, cfg, 1.0, (20.0, 20.0), 1.0)
    assert 2 <= len(candidates) <= 3
    for a in candidates:
        assert a.pose.z == 10.0
        assert a.cost_to_reach == pytest.approx(travel_cost(plan_state.pose, a.pose, 1.0))
        for b in candidates:
            if a is not b:
                assert math.hypot(a.pose.x - b.pose.x, a.pose.y - b.pose.y) >= 5.0


def test_candidates_respect_remaining_budget():
    component = np.array([[i, 0, 1] for i in range(20)])
    cfg = PlannerConfig(altitude=10.0, speed=1.0, spacing=2.0)
    plan_state = PlanState(Pose(0.5, 0.5, 10.0), 6.0)
    candidates = sample_candidates([component], plan_state, cfg, 1.0, (20.0, 20.0), 1.0)
    assert candidates
    assert all(c.cost_to_reach <= 6.0 for c in candidates)


def test_candidate_spacing_must_be_positive():
    with pytest.raises(ConfigError):
        sample_candidates([], PlanState(Pose(0.0, 0.0, 1.0), 1.0), PlannerConfig(1.0, 1.0, 0.0), 1.0, (1.0, 1.0), 1.0)


def test_candidate_on_current_pose_does_not_block_neighbours():
    component = np.array([[i, 0, 1] for i in range(10)])
    cfg = PlannerConfig(altitude=10.0, speed=1.0, spacing=3.0)
    plan_state = PlanState(Pose(0.5, 0.5, 10.0), 1000.0)
    candidates = sample_candidates([component], plan_state, cfg, 1.0, (20.0, 20.0), 1.0)
    assert [c.pose.x for c in candidates] == pytest.approx([1.5, 4.5, 7.5])


def test_argmax_is_invariant_to_uncertainty_scale():
    world = flat_world(24, num_classes=3, seed=2)
    camera = CameraModel(8, 8, 4.0)
    semantic_map, _ = mapped_world(world, camera, 10.0, [(12.0, 12.0), (8.0, 12.0)])
    observed = semantic_map.unc_count > 0
    rng = np.random.default_rng(3)
    semantic_map.unc_sum[observed] = rng.uniform(0.1, 1.0, size=int(observed.sum())) * semantic_map.unc_count[observed]
    cfg = PlannerConfig(altitude=10.0, speed=1.0, spacing=2.0, c_u=0.0, lowres=4)
    plan_state = PlanState(Pose(12.0, 12.0, 10.0), 50.0)

    before, count = plan_next_pose(semantic_map, plan_state, cfg, camera, world.extent)
    assert before is not None and before.info_value > 0
    semantic_map.unc_sum *= 3.7
    after, _ = plan_next_pose(semantic_map, plan_state, cfg, camera, world.extent)
    assert (after.pose.x, after.pose.y) == (before.pose.x, before.pose.y)
    assert after.info_value == pytest.approx(3.7 * before.info_value)


def test_free_space_only_map_has_no_information():
    semantic_map = MultiLayerMap((8, 8, 2), 1.0, 2)
    set_state(semantic_map, (slice(0, 4), slice(None), slice(None)), FREE)
    cfg = PlannerConfig(altitude=10.0, speed=1.0, spacing=2.0, c_u=0.0, lowres=2)
    plan_state = PlanState(Pose(2.0, 4.0, 10.0), 100.0)
    candidate, count = plan_next_pose(semantic_map, plan_state, cfg, CameraModel(4, 4, 1.0), (8.0, 8.0))
    assert count > 0
    assert candidate.info_value == 0.0

    set_state(semantic_map, (slice(None), slice(None), slice(None)), FREE)
    assert plan_next_pose(semantic_map, plan_state, cfg, CameraModel(4, 4, 1.0), (8.0, 8.0)) == (None, 0)


def test_single_feasible_candidate_is_chosen():
    semantic_map = MultiLayerMap((3, 1, 2), 1.0, 2)
    set_state(semantic_map, (0, 0, 0), OCCUPIED)
    set_state(semantic_map, (0, 0, 1), FREE)
    cfg = PlannerConfig(altitude=10.0, speed=1.0, spacing=1.0, lowres=2)
    plan_state = PlanState(Pose(2.5, 0.5, 10.0), 5.0)
    candidate, count = plan_next_pose(semantic_map, plan_state, cfg, CameraModel(4, 4, 1.0), (3.0, 1.0))
    assert count == 1
    assert (candidate.pose.x, candidate.pose.y) == pytest.approx((0.5, 0.5))
    assert candidate.cost_to_reach == pytest.approx(2.0)


def test_plan_returns_none_when_nothing_is_reachable():
    semantic_map = half_observed_map()
    cfg = PlannerConfig(altitude=10.0, speed=1.0, spacing=2.0)
    candidate, count = plan_next_pose(semantic_map, PlanState(Pose(0.5, 0.5, 10.0), 0.1), cfg,
                                      CameraModel(4, 4, 1.0), (8.0, 8.0))
    assert candidate is None and count == 0


def capture(world, semantic_map, camera, pose, frame_id):
    frame = sense(world, pose, camera, noise_seed=frame_id, noise_amplitude=0.0, frame_id=frame_id)
    integrate_frame(semantic_map, frame, *oracle_prediction(frame, world.num_classes), camera)


def explore(world, camera, budget, speed, start, missions, cfg, check_argmax=False):
    """Planner-only campaign: returns the flight time spent in each mission."""
    semantic_map = MultiLayerMap.for_world(world)
    capture(world, semantic_map, camera, start, 0)
    pose, frame_id, spent = start, 1, []
    for _ in range(missions):
        plan_state = PlanState(pose, budget)
        while True:
            if check_argmax:
                candidates = sample_candidates(extract_frontiers(semantic_map), plan_state, cfg, semantic_map.voxel_size,
                                               world.extent, camera.footprint, semantic_map.origin)
                scores = [score_candidate(semantic_map, c, lowres_camera(camera, cfg.lowres), cfg.c_u)
                          for c in candidates]
            candidate, count = plan_next_pose(semantic_map, plan_state, cfg, camera, world.extent)
            if check_argmax:
                assert count == len(candidates)
                if candidate is not None:
                    assert candidate.info_value == pytest.approx(max(scores), abs=1e-12)
            if candidate is None:
                break
            plan_state.move_to(candidate.pose, candidate.cost_to_reach)
            capture(world, semantic_map, camera, candidate.pose, frame_id)
            frame_id += 1
        spent.append(plan_state.spent)
        pose = plan_state.pose
    return spent


def test_planner_picks_exhaustive_argmax_every_step():
    world = flat_world(24, num_classes=3, seed=1)
    camera = CameraModel(8, 8, 4.0)
    cfg = PlannerConfig(altitude=10.0, speed=1.0, spacing=2.0, c_u=0.5, lowres=4)
    spent = explore(world, camera, 12.0, 1.0, Pose(12.0, 12.0, 10.0), 5, cfg, check_argmax=True)
    assert any(s > 0 for s in spent)


def test_budget_is_never_exceeded_over_random_campaigns():
    rng = np.random.default_rng(7)
    camera = CameraModel(8, 8, 4.0)
    for trial in range(100):
        world = flat_world(int(rng.choice([12, 16, 20])), num_classes=2, seed=trial)
        width_m, length_m = world.extent
        budget = float(rng.uniform(1.0, 15.0))
        speed = float(rng.uniform(0.5, 3.0))
        start = Pose(float(rng.uniform(2.0, width_m - 2.0)), float(rng.uniform(2.0, length_m - 2.0)), 10.0)
        cfg = PlannerConfig(altitude=10.0, speed=speed, spacing=2.0, lowres=4)
        for spent in explore(world, camera, budget, speed, start, 2, cfg):
            assert spent <= budget


def test_plan_state_rejects_overspending():
    plan_state = PlanState(Pose(0.0, 0.0, 10.0), 5.0)
    plan_state.move_to(Pose(3.0, 0.0, 10.0), 3.0)
    assert plan_state.budget_remaining == pytest.approx(2.0)
    assert len(plan_state.path) == 2
    with pytest.raises(DomainError):
        plan_state.move_to(Pose(6.0, 0.0, 10.0), 3.0)
    with pytest.raises(DomainError):
        PlanState(Pose(0.0, 0.0, 10.0), -1.0)


def test_coverage_small_extent_is_single_center_pose():
    assert coverage_waypoints((5.0, 5.0), 10.0, 20.0) == [Pose(2.5, 2.5, 20.0)]


def test_coverage_two_by_two_serpentine():
    waypoints = coverage_waypoints((20.0, 20.0), 10.0, 20.0)
    assert [(p.x, p.y) for p in waypoints] == [(5.0, 5.0), (15.0, 5.0), (15.0, 15.0), (5.0, 15.0)]


def test_coverage_path_fits_the_budget():
    rng = np.random.default_rng(3)
    camera = CameraModel(8, 8, 10.0)
    for _ in range(50):
        budget = float(rng.uniform(0.0, 200.0))
        start = Pose(float(rng.uniform(0, 60)), float(rng.uniform(0, 60)), 20.0)
        path = coverage_path((60.0, 60.0), camera, budget, 20.0, 2.0, start=start)
        legs = zip([start] + path[:-1], path)
        assert sum(travel_cost(a, b, 2.0) for a, b in legs) <= budget + 1e-9


def test_coverage_path_resumes_from_index():
    camera = CameraModel(8, 8, 10.0)
    full = coverage_path((20.0, 20.0), camera, 1e6, 20.0, 1.0)
    assert coverage_path((20.0, 20.0), camera, 1e6, 20.0, 1.0, start_index=2) == full[2:]


def test_trace_row_without_candidate():
    row = trace_row(1, 3, 0, None, PlanState(Pose(0.0, 0.0, 10.0), 4.0))
    assert row['x'] is None
    assert row['info_value'] == 0.0
    assert row['budget_remaining'] == 4.0
