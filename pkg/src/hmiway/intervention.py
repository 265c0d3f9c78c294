"""Per-driver driving policies and HMI intervention policies trained with PPO."""
from __future__ import annotations

import numpy as np

from .cognitive import AIAction, DriverProfile, HumanAction, archetype_profile
from .env import DRIVING_TERMS, REWARD_TERMS, HMIwayEnv, ScenarioConfig
from .policies import FixedPolicy, no_hmi
from .ppo import PPOConfig, PolicyNet, train_ppo

DEFAULT_DRIVING_WEIGHTS = {t: 1.0 for t in DRIVING_TERMS}


def _profile(p) -> DriverProfile:
    return p if isinstance(p, DriverProfile) else archetype_profile(p)


class DriverTask:
    """Driving-only view of the environment; the HMI never alerts."""

    def __init__(self, profile, config: ScenarioConfig | None = None, weights: dict | None = None):
        self.env = HMIwayEnv(config, _profile(profile))
        w = dict(DEFAULT_DRIVING_WEIGHTS)
        if weights:
            unknown = set(weights) - set(DRIVING_TERMS)
            if unknown:
                raise ValueError(f"unknown driving reward terms {sorted(unknown)}")
            w.update(weights)
        self.weights = np.array([w.get(t, 0.0) for t in REWARD_TERMS])
        self.obs_dim = self.env.spec.driver_obs_dim
        self.n_actions = len(HumanAction)

    def reset(self, seed=None):
        return self.env.reset(seed)[0]

    def step(self, a):
        (obs, _), rb, done, info = self.env.step(a, AIAction.NO_ALERT)
        arr = rb.as_array()
        info["breakdown"] = arr
        return obs, float(arr @ self.weights), done, info


class HMITask:
    """HMI view: the driver policy is frozen and acts first at every step.

    The HMI observation is the environment's HMI vector followed by a one-hot
    of the driver's chosen action, so the HMI reacts to what the driver is
    about to do.
    """

    def __init__(self, profile, driver_policy, config: ScenarioConfig | None = None,
                 hmi_profile: DriverProfile | None = None, driver_seed: int = 0):
        self.env = HMIwayEnv(config, _profile(profile), hmi_profile=hmi_profile)
        self.driver = driver_policy
        self.obs_dim = self.env.spec.hmi_obs_dim + len(HumanAction)
        self.n_actions = len(AIAction)
        self._driver_rng = np.random.default_rng(driver_seed)
        self._pending = None

    def _compose(self, obs_pair):
        drv, hmi = obs_pair
        a_H, _ = self.driver.act(drv, self._driver_rng)
        self._pending = a_H
        onehot = np.zeros(len(HumanAction))
        onehot[a_H] = 1.0
        return np.concatenate([hmi, onehot])

    def reset(self, seed=None):
        obs = self.env.reset(seed)
        # driver randomness follows the episode seed so evaluations are reproducible
        self._driver_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
        return self._compose(obs)

    def step(self, a_A):
        obs, rb, done, info = self.env.step(self._pending, a_A)
        info["breakdown"] = rb.as_array()
        nxt = self._compose(obs) if not done else np.zeros(self.obs_dim)
        return nxt, rb.total, done, info


def train_driver_policy(profile, config: ScenarioConfig | None = None,
                        ppo: PPOConfig | None = None, total_steps: int = 50_000,
                        n_steps: int = 2048, seed: int = 0, weights: dict | None = None,
                        callback=None):
    task = DriverTask(profile, config, weights)
    policy = PolicyNet(task.obs_dim, task.n_actions, seed=seed)
    history = train_ppo(task, policy, ppo or PPOConfig(), total_steps, n_steps, seed, callback)
    return policy, history


def train_hmi_policy(profile, driver_policy, config: ScenarioConfig | None = None,
                     ppo: PPOConfig | None = None, total_steps: int = 50_000,
                     n_steps: int = 2048, seed: int = 0,
                     hmi_profile: DriverProfile | None = None, callback=None):
    """Train an HMI policy against ``profile``; ``hmi_profile`` is the profile it is told about."""
    task = HMITask(profile, driver_policy, config, hmi_profile=hmi_profile)
    policy = PolicyNet(task.obs_dim, task.n_actions, seed=seed)
    history = train_ppo(task, policy, ppo or PPOConfig(), total_steps, n_steps, seed, callback)
    return policy, history


def train_avg_hmi(avg_driver_policy, config: ScenarioConfig | None = None,
                  ppo: PPOConfig | None = None, total_steps: int = 50_000,
                  n_steps: int = 2048, seed: int = 0, callback=None):
    """HMI policy tuned to the averaged driver profile (trained against its driver policy)."""
    avg = archetype_profile("Avg")
    return train_hmi_policy(avg, avg_driver_policy, config, ppo, total_steps, n_steps, seed,
                            hmi_profile=avg, callback=callback)


def baseline_policy(name: str) -> FixedPolicy:
    if name.lower() in ("nohmi", "no_hmi", "none"):
        return no_hmi()
    raise KeyError(f"unknown baseline {name!r}")
