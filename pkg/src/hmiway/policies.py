"""Non-learned policies: the scripted demonstration driver and constant HMI baselines."""
from __future__ import annotations

import numpy as np

from .cognitive import AIAction, HumanAction


class FixedPolicy:
    """Always picks one action; used for the NoHMI baseline and always-alert probes."""

    def __init__(self, action: int, n_actions: int):
        self.action = int(action)
        self.n_actions = n_actions

    def action_probs(self, obs) -> np.ndarray:
        p = np.zeros(self.n_actions)
        p[self.action] = 1.0
        return p

    def act(self, obs, rng=None, greedy=False):
        return self.action, 0.0


def no_hmi() -> FixedPolicy:
    return FixedPolicy(AIAction.NO_ALERT, len(AIAction))


def always_alert() -> FixedPolicy:
    return FixedPolicy(AIAction.ALERT, len(AIAction))


class ScriptedDriver:
    """IDM-flavoured driver acting on its own (possibly inflated) lidar view.

    Merges out of the merging lane when the left side is clear, overtakes slow
    leaders, drifts back to the rightmost through lane, and regulates headway
    and speed.  With probability ``noise`` a random longitudinal action replaces
    the heuristic choice, so distracted stretches (where the applied action
    freezes) are visible in the action stream.
    """

    def __init__(self, sectors: int = 16, sensing_range: float = 60.0, max_speed: float = 40.0,
                 cruise_speed: float = 36.0, headway: float = 0.8, side_clear: float = 12.0,
                 noise: float = 0.3):
        self.K = sectors
        self.sensing_range = sensing_range
        self.max_speed = max_speed
        self.cruise_speed = cruise_speed
        self.headway = headway
        self.side_clear = side_clear
        self.noise = noise
        self.n_actions = len(HumanAction)

    def _heuristic(self, obs: np.ndarray) -> int:
        K, R = self.K, self.sensing_range
        dist = obs[:K] * R
        speed = obs[2 * K] * self.max_speed
        lane_norm = obs[2 * K + 1]
        merging = obs[2 * K + 2] > 0.5
        q = K // 4
        left = [3 * q - 1, 3 * q, 3 * q + 1]
        right = [q - 1, q, q + 1]
        front = dist[0]

        def side_ok(sectors):
            return min(dist[s] for s in sectors) > self.side_clear

        if merging:
            if side_ok(left) and front > 0.5 * self.side_clear:
                return HumanAction.MOVE_LEFT
        elif lane_norm < 0.25 and side_ok(right) and front > self.side_clear:
            return HumanAction.MOVE_RIGHT
        safe = 5.0 + self.headway * speed
        closing = obs[K] < -0.01
        if not merging and front < 0.9 * R and closing:
            # overtake a slower leader
            if lane_norm > 0.25 and side_ok(left) and dist[3 * q] > safe:
                return HumanAction.MOVE_LEFT
            if lane_norm < 0.25 and side_ok(right):
                return HumanAction.MOVE_RIGHT
        if front < safe:
            return HumanAction.SLOW_DOWN
        if speed < self.cruise_speed - 2.0:
            return HumanAction.SPEED_UP
        if speed > self.cruise_speed + 2.0:
            return HumanAction.SLOW_DOWN
        return HumanAction.KEEP_SPEED

    def action_probs(self, obs) -> np.ndarray:
        p = np.zeros(self.n_actions)
        p[self._heuristic(np.asarray(obs))] += 1.0 - self.noise
        for a in (HumanAction.SPEED_UP, HumanAction.SLOW_DOWN, HumanAction.KEEP_SPEED):
            p[a] += self.noise / 3.0
        return p

    def act(self, obs, rng: np.random.Generator, greedy: bool = False):
        p = self.action_probs(obs)
        a = int(np.argmax(p)) if greedy else int(rng.choice(self.n_actions, p=p))
        return a, float(np.log(p[a]))
