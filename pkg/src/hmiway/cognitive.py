"""Controlled Markov model of driver distraction and alert acceptance.

Per action step the update order is: intervention counter and acceptance flag
(``step_acceptance``), then the distraction flag sampled from the
acceptance-modulated transition probabilities, then the action gate, which
repeats the previously applied vehicle action while the driver is distracted.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np


class HumanAction(IntEnum):
    SPEED_UP = 0
    SLOW_DOWN = 1
    KEEP_SPEED = 2
    MOVE_LEFT = 3
    MOVE_RIGHT = 4


class AIAction(IntEnum):
    ALERT = 0
    NO_ALERT = 1


class AbsorbingChainError(ValueError):
    pass


@dataclass(frozen=True)
class DriverProfile:
    name: str
    driver_id: int
    beta: float
    alpha: float
    eta: float
    inflation: float
    distractibility: str = "low"

    def __post_init__(self):
        if not (0.0 <= self.beta <= 1.0 and 0.0 <= self.alpha <= 1.0):
            raise ValueError(f"{self.name}: beta and alpha must lie in [0, 1]")
        if self.eta < 0:
            raise ValueError(f"{self.name}: eta must be non-negative")
        if self.inflation <= 0:
            raise ValueError(f"{self.name}: inflation must be positive")
        if self.distractibility not in ("low", "high"):
            raise ValueError(f"{self.name}: distractibility label must be 'low' or 'high'")

    @property
    def preference(self) -> str:
        """Preference for AI help; cautious (receptive) drivers prefer it."""
        return "high" if self.eta >= 0.5 else "low"

    def features(self) -> np.ndarray:
        return np.array([self.beta, self.alpha, self.eta, self.inflation / 10.0])

    def to_dict(self) -> dict:
        return {"name": self.name, "driver_id": self.driver_id, "beta": self.beta,
                "alpha": self.alpha, "eta": self.eta, "inflation": self.inflation,
                "distractibility": self.distractibility}


ARCHETYPES: dict[str, DriverProfile] = {
    "Lisa": DriverProfile("Lisa", 0, beta=0.2, alpha=0.8, eta=0.01, inflation=3.0),
    "Marge": DriverProfile("Marge", 1, beta=0.2, alpha=0.8, eta=1.0, inflation=9.0),
    "Bart": DriverProfile("Bart", 2, beta=0.8, alpha=0.2, eta=0.01, inflation=3.0,
                          distractibility="high"),
    "Homer": DriverProfile("Homer", 3, beta=0.8, alpha=0.2, eta=1.0, inflation=9.0,
                           distractibility="high"),
    "Avg": DriverProfile("Avg", 4, beta=0.5, alpha=0.5, eta=0.505, inflation=6.0,
                         distractibility="high"),
}

DRIVER_NAMES = ("Lisa", "Marge", "Bart", "Homer")


def archetype_profile(key: str | int) -> DriverProfile:
    """Look up a built-in profile by name (case-insensitive) or driver id."""
    if isinstance(key, (int, np.integer)):
        for p in ARCHETYPES.values():
            if p.driver_id == int(key):
                return p
        raise KeyError(f"unknown driver id {key}")
    for name, p in ARCHETYPES.items():
        if name.lower() == str(key).lower() or (str(key).lower() == "average" and name == "Avg"):
            return p
    raise KeyError(f"unknown driver profile {key!r}; known: {', '.join(ARCHETYPES)}")


@dataclass(frozen=True)
class CognitiveState:
    d: int = 0
    i: int = 0
    c: int = 0
    v: int | None = None


def step_acceptance(i_prev: int, c_prev: int, a_A: AIAction | int, N: int) -> tuple[int, int]:
    if a_A == AIAction.ALERT:
        return 1, 0
    if i_prev == 0:
        return 0, 0
    c = (c_prev + 1) % N
    return (1 if c_prev < N - 1 else 0), c


def modulated_transition_prob(d_prev: int, i: int, profile: DriverProfile) -> float:
    """Probability that the driver is distracted after this step."""
    boost = profile.eta if i == 1 else 0.0
    if d_prev == 0:
        return max(0.0, profile.beta - boost)
    return 1.0 - min(1.0, profile.alpha + boost)


def step_cognitive(state: CognitiveState, a_A: AIAction | int, a_H: HumanAction | int,
                   profile: DriverProfile, N: int, rng: np.random.Generator,
                   ) -> tuple[CognitiveState, int]:
    i, c = step_acceptance(state.i, state.c, a_A, N)
    p = modulated_transition_prob(state.d, i, profile)
    d = 1 if rng.random() < p else 0
    if state.v is None:
        v = int(a_H)
    else:
        v = state.v if d == 1 else int(a_H)
    return CognitiveState(d=d, i=i, c=c, v=v), v


def effective_chain(profile: DriverProfile, policy: str) -> tuple[float, float]:
    """``(P(attentive -> distracted), P(distracted -> attentive))`` under a fixed alert policy."""
    if policy == "never_alert":
        i = 0
    elif policy == "always_alert":
        i = 1
    else:
        raise ValueError(f"unknown alert policy {policy!r}")
    to_distracted = modulated_transition_prob(0, i, profile)
    to_attentive = 1.0 - modulated_transition_prob(1, i, profile)
    return to_distracted, to_attentive


def stationary_distraction_fraction(profile: DriverProfile, policy: str) -> float:
    b, a = effective_chain(profile, policy)
    if a + b == 0:
        raise AbsorbingChainError(f"{profile.name}: absorbing chain under {policy}")
    return b / (a + b)


def initial_state(d0: int = 0) -> CognitiveState:
    return replace(CognitiveState(), d=int(d0))
