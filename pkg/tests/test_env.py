from __future__ import annotations

import numpy as np
import pytest

from hmiway.cognitive import AIAction, CognitiveState, HumanAction
from hmiway.env import (
    REWARD_TERMS,
    ConfigError,
    EnvDoneError,
    EnvState,
    HMIwayEnv,
    RewardBreakdown,
    ScenarioConfig,
    compute_rewards,
    make_env,
)
from hmiway.traffic import VehicleState

CFG = ScenarioConfig()
KEEP, NO, ALERT = HumanAction.KEEP_SPEED, AIAction.NO_ALERT, AIAction.ALERT


def _state(lane=0, speed=20.0, crashed=False):
    ego = VehicleState(x=500.0, lane=lane, speed=speed, target_lane=lane, is_ego=True)
    return EnvState(ego=ego, vehicles=[], cognitive=CognitiveState(), crashed=crashed)


def _r(new, a_H=KEEP, a_A=ALERT, d_prev=0, d_now=0):
    return compute_rewards(_state(), new, a_H, a_A, d_prev, d_now, CFG)


def test_crash_penalty():
    assert _r(_state(crashed=True)).coll == -5.0
    assert _r(_state()).coll == 0.0


@pytest.mark.parametrize("v", [0.0, 12.5, 40.0])
def test_speed_term_ratio(v):
    assert _r(_state(speed=v)).speed == 5.0 * v / 40.0


def test_speed_term_at_max():
    assert _r(_state(speed=40.0)).speed == 5.0


def test_right_lane_bonus():
    assert _r(_state(lane=1)).right_lane == 0.1
    assert _r(_state(lane=0)).right_lane == 0.0
    assert _r(_state(lane=2)).right_lane == 0.0


def test_merging_deficit():
    got = _r(_state(lane=2, speed=21.0)).merging
    assert got == -0.1 * (30.0 - 21.0) / 30.0
    assert _r(_state(lane=1, speed=21.0)).merging == 0.0


@pytest.mark.parametrize("a", list(HumanAction))
def test_lane_change_penalty(a):
    expected = -0.1 if a in (HumanAction.MOVE_LEFT, HumanAction.MOVE_RIGHT) else 0.0
    assert _r(_state(), a_H=a).lane_change == expected


def test_distracted_step():
    assert _r(_state(), d_now=1).distraction == -10.0
    assert _r(_state(), d_now=0).distraction == 0.0


def test_attentive_no_alert_bonus():
    assert _r(_state(), a_A=NO, d_prev=0).alert == 10.0
    assert _r(_state(), a_A=NO, d_prev=1).alert == 0.0
    assert _r(_state(), a_A=ALERT, d_prev=0).alert == 0.0


def test_accepted_alert_bonus():
    assert _r(_state(), a_A=ALERT, d_prev=1, d_now=0).accept_alert == 30.0
    assert _r(_state(), a_A=ALERT, d_prev=1, d_now=1).accept_alert == 0.0
    assert _r(_state(), a_A=NO, d_prev=1, d_now=0).accept_alert == 0.0


def test_breakdown_roundtrip_and_total():
    rb = RewardBreakdown(*range(8))
    assert rb.total == sum(range(8))
    assert RewardBreakdown.from_array(rb.as_array()) == rb
    assert len(REWARD_TERMS) == 8


def test_observation_shapes():
    env = make_env("Homer")
    drv, hmi = env.reset(seed=1)
    assert drv.shape == (35,) and hmi.shape == (env.spec.hmi_obs_dim,)
    assert env.spec.hmi_obs_dim == 42


def test_driver_view_is_inflated():
    env = make_env("Homer")
    drv, hmi = env.reset(seed=3)
    assert np.all(drv[:16] <= hmi[:16] + 1e-12)


def test_episode_length_and_done_error():
    env = make_env("Lisa")
    env.reset(seed=0)
    n = 0
    done = False
    while not done:
        _, _, done, info = env.step(KEEP, NO)
        n += 1
    assert n <= 100
    if info["truncated"]:
        assert n == 100
    with pytest.raises(EnvDoneError):
        env.step(KEEP, NO)


def test_step_before_reset():
    with pytest.raises(EnvDoneError):
        HMIwayEnv().step(KEEP)


def test_same_seed_same_episode():
    def run():
        env = make_env("Bart")
        env.reset(seed=11)
        out = []
        for t in range(40):
            o, rb, done, info = env.step(t % 5, t % 2)
            out.append((rb.as_array().tolist(), info["d"], o[0].tolist()))
            if done:
                break
        return out
    assert run() == run()


def test_info_channel_fields():
    env = make_env("Lisa")
    env.reset(seed=2)
    _, _, _, info = env.step(KEEP, ALERT)
    assert info["i"] == 1 and info["c"] == 0
    assert {"d", "applied", "crash", "road_end"} <= set(info)


def test_config_validation():
    with pytest.raises(ConfigError):
        ScenarioConfig(episode_steps=0)
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"lanes": 3})
    cfg = ScenarioConfig.from_dict(ScenarioConfig().to_dict())
    assert cfg == ScenarioConfig()
