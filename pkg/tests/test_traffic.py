from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmiway.traffic import (
    NO_LEADER_GAP,
    CollisionOverlap,
    IDMParams,
    LaneCommand,
    RoadGeometry,
    TrafficSim,
    VehicleState,
    idm_acceleration,
    lidar_observe,
    overlaps,
    ray_rect_distances,
    spawn_traffic,
    step_vehicle,
)

P = IDMParams()


def test_idm_free_flow_equilibrium():
    assert idm_acceleration(P.desired_speed, NO_LEADER_GAP, 0.0, P) == pytest.approx(0.0, abs=1e-12)


def test_idm_standstill_accelerates_at_max():
    assert idm_acceleration(0.0, 1e9, 0.0, P) == pytest.approx(P.max_accel, rel=1e-9)


def test_idm_following_matches_hand_evaluation():
    gap = P.min_gap + 30.0 * P.time_headway      # 55 m
    # v/v0 = 1 and s* = s0 + v*T with dv = 0, so a = a_max * (1 - 1 - 1) = -a_max
    expected = 3.0 * (1.0 - 1.0 - (55.0 / 55.0) ** 2)
    got = idm_acceleration(30.0, gap, 30.0, P)
    assert got == pytest.approx(expected, abs=1e-12)
    assert got < 0


def test_idm_clamped_to_emergency_decel():
    assert idm_acceleration(30.0, 0.5, 0.0, P) == -P.emergency_decel


def test_idm_rejects_overlap():
    with pytest.raises(CollisionOverlap):
        idm_acceleration(10.0, 0.0, 10.0, P)


def test_idm_params_validated():
    with pytest.raises(ValueError):
        IDMParams(time_headway=0.0)


def test_step_constant_speed():
    v = VehicleState(x=0.0, lane=1, speed=10.0, target_lane=1)
    new, ignored = step_vehicle(v, 0.0, LaneCommand.KEEP, 1 / 15)
    assert new.x == pytest.approx(10 / 15)
    assert new.speed == 10.0 and not ignored


def test_step_speed_clamped_at_zero():
    v = VehicleState(x=5.0, lane=1, speed=0.0, target_lane=1)
    new, _ = step_vehicle(v, -2.0, LaneCommand.KEEP, 1 / 15)
    assert new.speed == 0.0 and new.x == 5.0


def test_step_stopping_distance_inside_tick():
    v = VehicleState(x=0.0, lane=1, speed=0.3, target_lane=1)
    new, _ = step_vehicle(v, -9.0, LaneCommand.KEEP, 1 / 15)
    assert new.speed == 0.0
    assert new.x == pytest.approx(0.3 ** 2 / 18.0)


def test_left_from_leftmost_lane_ignored():
    v = VehicleState(x=500.0, lane=0, speed=20.0, target_lane=0)
    new, ignored = step_vehicle(v, 0.0, LaneCommand.LEFT, 1 / 15)
    assert ignored and new.lane == 0 and new.target_lane == 0


def test_lane_change_completes_after_ticks():
    v = VehicleState(x=500.0, lane=1, speed=20.0, target_lane=1)
    v, ign = step_vehicle(v, 0.0, LaneCommand.LEFT, 1 / 15)
    assert not ign and v.target_lane == 0 and v.lane == 1
    v, ign = step_vehicle(v, 0.0, LaneCommand.RIGHT, 1 / 15)
    assert ign    # busy changing
    v, _ = step_vehicle(v, 0.0, LaneCommand.KEEP, 1 / 15)
    assert v.lane == 0 and v.change_ticks == 0


def test_merge_lane_closed_beyond_merge_point():
    geo = RoadGeometry()
    v = VehicleState(x=geo.merge_point + 10, lane=1, speed=20.0, target_lane=1)
    _, ignored = step_vehicle(v, 0.0, LaneCommand.RIGHT, 1 / 15, geo)
    assert ignored


def test_step_rejects_bad_dt():
    with pytest.raises(ValueError):
        step_vehicle(VehicleState(0.0, 0, 1.0, 0), 0.0, 0, 0.0)


def test_overlap_symmetric():
    a = VehicleState(x=0.0, lane=1, speed=0.0, target_lane=1)
    b = VehicleState(x=4.0, lane=1, speed=0.0, target_lane=2)
    c = VehicleState(x=4.0, lane=0, speed=0.0, target_lane=0)
    assert overlaps(a, b) and overlaps(b, a)
    assert not overlaps(a, c) and not overlaps(c, a)


def test_spawn_zero():
    assert spawn_traffic(RoadGeometry(), 0, np.random.default_rng(0)) == []


def test_spawn_gaps_brute_force():
    geo = RoadGeometry()
    vs = spawn_traffic(geo, 20, np.random.default_rng(3), spawn_range=(0.0, 1500.0))
    assert len(vs) == 20
    for i, a in enumerate(vs):
        lo, hi = geo.speed_limits
        assert lo <= a.speed <= hi
        for b in vs[i + 1:]:
            if a.lane == b.lane:
                assert abs(a.x - b.x) - 0.5 * (a.length + b.length) >= 15.0


def test_spawn_deterministic():
    geo = RoadGeometry()
    a = spawn_traffic(geo, 20, np.random.default_rng(9))
    b = spawn_traffic(geo, 20, np.random.default_rng(9))
    assert a == b


def test_spawn_crowded_road_places_fewer(caplog):
    geo = RoadGeometry()
    vs = spawn_traffic(geo, 200, np.random.default_rng(0), spawn_range=(0.0, 100.0))
    assert len(vs) < 200


def test_lidar_empty_road():
    ego = VehicleState(x=100.0, lane=1, speed=20.0, target_lane=1, is_ego=True)
    obs = lidar_observe(ego, [])
    assert obs.shape == (35,)
    assert np.all(obs[:16] == 1.0)
    assert np.all(obs[16:32] == 0.0)
    assert obs[32] == pytest.approx(0.5)
    assert obs[33] == pytest.approx(0.5)
    assert obs[34] == 0.0


def test_lidar_inflation_shrinks_distance():
    ego = VehicleState(x=100.0, lane=1, speed=20.0, target_lane=1, is_ego=True)
    lead = VehicleState(x=130.0, lane=1, speed=20.0, target_lane=1)
    d1 = lidar_observe(ego, [lead], inflation=1.0)[0]
    d3 = lidar_observe(ego, [lead], inflation=3.0)[0]
    assert d3 < d1 < 1.0
    # front ray hits the rear bumper: (30 - 2.5) / 60 and (30 - 7.5) / 60
    assert d1 == pytest.approx(27.5 / 60)
    assert d3 == pytest.approx(22.5 / 60)


def _brute_ray(angle, cx, cy, hl, hw, R=60.0, n=600_001):
    t = np.linspace(0.0, R, n)
    px, py = t * math.cos(angle), t * math.sin(angle)
    inside = (np.abs(px - cx) <= hl) & (np.abs(py - cy) <= hw)
    return t[np.argmax(inside)] if inside.any() else R


@pytest.mark.parametrize("cx,cy", [(20.0, 4.0), (-15.0, -3.0), (8.0, 8.0), (0.5, -9.0)])
def test_ray_casting_matches_sampled_oracle(cx, cy):
    K = 16
    got = ray_rect_distances(K, np.array([cx]), np.array([cy]), np.array([2.5]), np.array([1.0]))[:, 0]
    for k in range(K):
        ref = _brute_ray(2 * math.pi * k / K, cx, cy, 2.5, 1.0)
        assert min(got[k], 60.0) == pytest.approx(min(ref, 60.0), abs=2e-4)


def test_lidar_kernel_agrees_with_numpy_oracle():
    rng = np.random.default_rng(1)
    ego = VehicleState(x=200.0, lane=1, speed=25.0, target_lane=1, is_ego=True)
    for _ in range(20):
        other = VehicleState(x=200.0 + rng.uniform(-50, 50), lane=int(rng.integers(3)),
                             speed=20.0, target_lane=0)
        other = VehicleState(other.x, other.lane, 20.0, other.lane)
        obs = lidar_observe(ego, [other], inflation=2.0)
        ref = ray_rect_distances(16, np.array([other.x - ego.x]), np.array([(other.lane - ego.lane) * 4.0]),
                                 np.array([5.0]), np.array([2.0]))[:, 0]
        np.testing.assert_allclose(obs[:16], np.minimum(ref, 60.0) / 60.0, atol=1e-12)


def _sim(seed=0, n=20):
    geo = RoadGeometry(speed_limits=(25.0, 35.0))
    rng = np.random.default_rng(seed)
    ego = VehicleState(x=60.0, lane=2, speed=28.0, target_lane=2, is_ego=True)
    others = spawn_traffic(geo, n, rng, occupied=[ego], spawn_range=(0.0, 1500.0))
    return TrafficSim(geo, ego, others)


def test_sim_deterministic():
    a, b = _sim(4), _sim(4)
    cmds = [0, 1, 0, 0, 2, 0, 0, 0, 1] * 10
    for c in cmds:
        ra, rb = a.tick(c), b.tick(c)
        assert ra == rb
        np.testing.assert_array_equal(a.observe(3.0, 16, 60.0, 40.0), b.observe(3.0, 16, 60.0, 40.0))


def test_ambient_traffic_never_collides_without_ego_actions():
    for seed in range(5):
        sim = _sim(seed)
        for _ in range(300):
            sim.tick(LaneCommand.KEEP)
            vs = sim.vehicles
            for i, a in enumerate(vs):
                for b in vs[i + 1:]:
                    assert not overlaps(a, b)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 40.0), st.floats(0.1, 500.0), st.floats(0.0, 40.0))
def test_idm_bounded(v, gap, lead):
    a = idm_acceleration(v, gap, lead, P)
    assert -P.emergency_decel <= a <= P.max_accel
