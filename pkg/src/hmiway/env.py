"""The joint driver / HMI merge environment.

One ``step`` is one 5 Hz action step: the cognitive model is updated first,
then the gated vehicle action drives the ego for ``ticks_per_action``
simulator ticks at 15 Hz while ambient traffic follows IDM.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .cognitive import (
    AIAction,
    CognitiveState,
    DriverProfile,
    HumanAction,
    archetype_profile,
    step_cognitive,
)
from .traffic import LaneCommand, RoadGeometry, TrafficSim, VehicleState, spawn_traffic

REWARD_TERMS = ("coll", "speed", "right_lane", "merging", "lane_change",
                "distraction", "alert", "accept_alert")
DRIVING_TERMS = REWARD_TERMS[:5]


class EnvDoneError(RuntimeError):
    """``step`` called on a finished episode."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RewardBreakdown:
    coll: float = 0.0
    speed: float = 0.0
    right_lane: float = 0.0
    merging: float = 0.0
    lane_change: float = 0.0
    distraction: float = 0.0
    alert: float = 0.0
    accept_alert: float = 0.0

    @property
    def total(self) -> float:
        return float(sum(getattr(self, t) for t in REWARD_TERMS))

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, t) for t in REWARD_TERMS], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> RewardBreakdown:
        return cls(*(float(x) for x in arr))


@dataclass(frozen=True)
class ScenarioConfig:
    lane_count: int = 3
    lane_length: float = 2000.0
    merge_lane: int | None = 2
    merge_point: float = 300.0
    speed_limits: tuple[float, float] = (25.0, 35.0)
    max_vehicles: int = 20
    spawn_range: tuple[float, float] = (0.0, 1500.0)
    episode_steps: int = 100
    sim_hz: float = 15.0
    ticks_per_action: int = 3
    max_speed: float = 40.0
    target_speed: float = 30.0
    speed_step: float = 5.0
    min_desired_speed: float = 10.0
    lidar_sectors: int = 16
    sensing_range: float = 60.0
    window: int = 15
    ego_lane: int = 2
    ego_x: float = 60.0
    initial_distraction: int = 0
    hmi_profile_features: bool = True

    def __post_init__(self):
        if self.episode_steps <= 0 or self.ticks_per_action <= 0 or self.window <= 0:
            raise ConfigError("episode_steps, ticks_per_action and window must be positive")
        if self.max_vehicles < 0:
            raise ConfigError("max_vehicles must be >= 0")
        if not 0 <= self.ego_lane < self.lane_count:
            raise ConfigError("ego_lane outside the road")
        if self.max_speed <= 0 or self.target_speed <= 0:
            raise ConfigError("max_speed and target_speed must be positive")
        if self.initial_distraction not in (0, 1):
            raise ConfigError("initial_distraction must be 0 or 1")
        if self.lidar_sectors < 4:
            raise ConfigError("lidar_sectors must be >= 4")
        self.geometry  # validates the road

    @property
    def geometry(self) -> RoadGeometry:
        try:
            return RoadGeometry(lane_count=self.lane_count, lane_length=self.lane_length,
                                merge_lane=self.merge_lane, merge_point=self.merge_point,
                                speed_limits=tuple(self.speed_limits))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def dt(self) -> float:
        return 1.0 / self.sim_hz

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("speed_limits", "spawn_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = list(val) if isinstance(val, tuple) else val
        return out


@dataclass(frozen=True)
class EnvSpec:
    driver_obs_dim: int
    hmi_obs_dim: int
    n_human_actions: int = len(HumanAction)
    n_ai_actions: int = len(AIAction)

    def to_dict(self) -> dict:
        return {"driver_obs_dim": self.driver_obs_dim, "hmi_obs_dim": self.hmi_obs_dim,
                "n_human_actions": self.n_human_actions, "n_ai_actions": self.n_ai_actions}


@dataclass
class EnvState:
    ego: VehicleState
    vehicles: list[VehicleState]
    cognitive: CognitiveState
    step: int = 0
    done: bool = False
    crashed: bool = False


def compute_rewards(prev: EnvState, new: EnvState, a_H, a_A, d_prev: int, d_now: int,
                    config: ScenarioConfig | None = None) -> RewardBreakdown:
    """Table of per-step reward terms evaluated on the post-transition state."""
    cfg = config or ScenarioConfig()
    geo = cfg.geometry
    ego = new.ego
    speed = min(max(ego.speed, 0.0), cfg.max_speed)
    merging = 0.0
    if ego.lane == geo.merge_lane:
        merging = -0.1 * (cfg.target_speed - ego.speed) / cfg.target_speed
    return RewardBreakdown(
        coll=-5.0 if new.crashed else 0.0,
        speed=5.0 * speed / cfg.max_speed,
        right_lane=0.1 if ego.lane == geo.rightmost_through_lane else 0.0,
        merging=merging,
        lane_change=-0.1 if a_H in (HumanAction.MOVE_LEFT, HumanAction.MOVE_RIGHT) else 0.0,
        distraction=-10.0 if d_now == 1 else 0.0,
        alert=10.0 if (a_A == AIAction.NO_ALERT and d_prev == 0) else 0.0,
        accept_alert=30.0 if (a_A == AIAction.ALERT and d_prev == 1 and d_now == 0) else 0.0,
    )


class HMIwayEnv:
    """Merge scenario with a cognitively gated driver and an HMI alert channel.

    ``reset`` returns ``(driver_obs, hmi_obs)``; ``step(a_H, a_A)`` returns
    ``((driver_obs, hmi_obs), RewardBreakdown, done, info)``.
    """

    def __init__(self, config: ScenarioConfig | None = None,
                 profile: DriverProfile | str | None = None,
                 hmi_profile: DriverProfile | None = None):
        self.config = config or ScenarioConfig()
        if profile is None:
            profile = archetype_profile("Lisa")
        elif isinstance(profile, str):
            profile = archetype_profile(profile)
        self.profile = profile
        # profile features shown to the HMI; a non-personalized HMI sees a fixed one
        self.hmi_profile = hmi_profile or profile
        self.state: EnvState | None = None
        self._seed: int | None = None
        self._sim: TrafficSim | None = None
        self._cog_rng: np.random.Generator | None = None
        k = self.config.lidar_sectors
        driver_dim = 2 * k + 3
        hmi_dim = driver_dim + 3 + (4 if self.config.hmi_profile_features else 0)
        self.spec = EnvSpec(driver_obs_dim=driver_dim, hmi_obs_dim=hmi_dim)

    def seed(self, seed: int | None) -> None:
        self._seed = seed

    def reset(self, seed: int | None = None, profile: DriverProfile | None = None):
        if profile is not None:
            self.profile = profile
        if seed is None:
            seed = self._seed
        cfg = self.config
        ss = np.random.SeedSequence(seed)
        traffic_ss, cog_ss = ss.spawn(2)
        traffic_rng = np.random.default_rng(traffic_ss)
        self._cog_rng = np.random.default_rng(cog_ss)
        geo = cfg.geometry
        lo, hi = geo.speed_limits
        ego = VehicleState(x=cfg.ego_x, lane=cfg.ego_lane, speed=float(traffic_rng.uniform(lo, hi)),
                           target_lane=cfg.ego_lane, is_ego=True,
                           desired_speed=cfg.target_speed)
        others = spawn_traffic(geo, cfg.max_vehicles, traffic_rng, occupied=[ego],
                               spawn_range=cfg.spawn_range)
        self._sim = TrafficSim(geo, ego, others, dt=cfg.dt, v_max=cfg.max_speed,
                               lane_change_ticks=cfg.ticks_per_action)
        self.state = EnvState(ego=ego, vehicles=list(others),
                              cognitive=CognitiveState(d=cfg.initial_distraction))
        return self.observe()

    def observe(self):
        st = self.state
        cfg = self.config
        sim = self._sim
        driver = sim.observe(self.profile.inflation, cfg.lidar_sectors, cfg.sensing_range,
                             cfg.max_speed)
        plain = sim.observe(1.0, cfg.lidar_sectors, cfg.sensing_range, cfg.max_speed)
        cog = st.cognitive
        parts = [plain, [float(cog.d), float(cog.i), cog.c / cfg.window]]
        if cfg.hmi_profile_features:
            parts.append(self.hmi_profile.features())
        return driver, np.concatenate(parts)

    def step(self, a_H, a_A=AIAction.NO_ALERT):
        if self.state is None:
            raise EnvDoneError("reset() must be called before step()")
        if self.state.done:
            raise EnvDoneError("episode finished; call reset()")
        a_H, a_A = HumanAction(int(a_H)), AIAction(int(a_A))
        cfg = self.config
        prev = self.state
        cog, v = step_cognitive(prev.cognitive, a_A, a_H, self.profile, cfg.window, self._cog_rng)
        applied = HumanAction(v)

        sim = self._sim
        desired = float(sim.desired[0])
        command = LaneCommand.KEEP
        if applied == HumanAction.SPEED_UP:
            desired = min(desired + cfg.speed_step, cfg.max_speed)
        elif applied == HumanAction.SLOW_DOWN:
            desired = max(desired - cfg.speed_step, cfg.min_desired_speed)
        elif applied == HumanAction.MOVE_LEFT:
            command = LaneCommand.LEFT
        elif applied == HumanAction.MOVE_RIGHT:
            command = LaneCommand.RIGHT
        sim.set_ego_desired_speed(desired)

        crashed = False
        ignored = False
        for tick in range(cfg.ticks_per_action):
            out = sim.tick(command if tick == 0 else LaneCommand.KEEP)
            ignored = ignored or out["ignored"]
            if out["crash"]:
                crashed = True
                break
        step_idx = prev.step + 1
        road_end = bool(sim.x[0] >= cfg.geometry.lane_length)
        done = crashed or road_end or step_idx >= cfg.episode_steps
        new = EnvState(ego=sim.ego, vehicles=sim.vehicles, cognitive=cog, step=step_idx,
                       done=done, crashed=crashed)
        reward = compute_rewards(prev, new, a_H, a_A, prev.cognitive.d, cog.d, cfg)
        self.state = new
        info = {"d": cog.d, "i": cog.i, "c": cog.c, "applied": int(applied),
                "a_H": int(a_H), "a_A": int(a_A), "crash": crashed, "road_end": road_end,
                "command_ignored": ignored, "step": step_idx,
                "truncated": done and not crashed and not road_end}
        return self.observe(), reward, done, info


def make_env(profile: DriverProfile | str, config: ScenarioConfig | None = None,
             **kwargs) -> HMIwayEnv:
    return HMIwayEnv(config=config, profile=profile, **kwargs)
