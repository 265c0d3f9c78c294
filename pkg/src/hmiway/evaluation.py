"""Batch evaluation of driver/HMI pairs and latent-separation reports."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cognitive import DRIVER_NAMES, AIAction, DriverProfile, archetype_profile
from .env import REWARD_TERMS, ScenarioConfig
from .intervention import HMITask

log = logging.getLogger(__name__)

SPEED = REWARD_TERMS.index("speed")
DISTRACTION = REWARD_TERMS.index("distraction")


def episode_seeds(seed: int, n: int) -> list[int]:
    """Episode seeds shared by every model evaluated with ``seed`` (common random numbers)."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)]


@dataclass
class EvalCell:
    model: str
    driver: str
    episodes: list[dict] = field(default_factory=list)

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    def _col(self, key) -> np.ndarray:
        return np.array([e[key] for e in self.episodes], dtype=np.float64)

    @property
    def speed_returns(self) -> np.ndarray:
        return self._col("speed_return")

    @property
    def distraction(self) -> np.ndarray:
        return self._col("distraction_reward")

    def summary(self) -> dict:
        if not self.episodes:
            raise ValueError(f"cell {self.model}/{self.driver} has no episodes")
        sp, di = self.speed_returns, self.distraction
        steps = self._col("steps").sum()
        return {"model": self.model, "driver": self.driver, "n_episodes": self.n_episodes,
                "speed_mean": float(sp.mean()), "speed_std": float(sp.std()),
                "distraction_mean": float(di.mean()), "distraction_std": float(di.std()),
                "crash_rate": float(self._col("crashed").mean()),
                "alert_rate": float(self._col("alerts").sum() / steps) if steps else 0.0}


def evaluate(driver_policy, hmi_policy, profile, n_episodes: int, seed: int = 0,
             config: ScenarioConfig | None = None, hmi_profile: DriverProfile | None = None,
             model_name: str = "model", greedy: bool = False) -> EvalCell:
    """Roll out ``n_episodes`` and log per-episode speed and distraction sums."""
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    profile = profile if isinstance(profile, DriverProfile) else archetype_profile(profile)
    task = HMITask(profile, driver_policy, config, hmi_profile=hmi_profile)
    want = getattr(hmi_policy, "obs_dim", None)
    if want is not None and want != task.obs_dim:
        raise ValueError(f"HMI policy expects {want}-dim observations, env provides {task.obs_dim}")
    if getattr(hmi_policy, "n_actions", task.n_actions) != task.n_actions:
        raise ValueError("HMI policy action space does not match the environment")
    cell = EvalCell(model_name, profile.name)
    for k, ep_seed in enumerate(episode_seeds(seed, n_episodes)):
        rng = np.random.default_rng([ep_seed, 1])
        obs = task.reset(ep_seed)
        done = False
        totals = np.zeros(len(REWARD_TERMS))
        alerts = steps = 0
        info = {}
        while not done:
            a, _ = hmi_policy.act(obs, rng, greedy)
            obs, _, done, info = task.step(a)
            totals += info["breakdown"]
            alerts += int(a == AIAction.ALERT)
            steps += 1
        cell.episodes.append({"episode": k, "seed": ep_seed, "steps": steps,
                              "speed_return": float(totals[SPEED]),
                              "distraction_reward": float(totals[DISTRACTION]),
                              "total_reward": float(totals.sum()), "alerts": alerts,
                              "crashed": bool(info.get("crash", False))})
    return cell


@dataclass
class EvalReport:
    cells: dict = field(default_factory=dict)     # (row, driver) -> EvalCell
    rows: list = field(default_factory=list)
    drivers: list = field(default_factory=lambda: list(DRIVER_NAMES))

    def cell(self, row: str, driver: str) -> EvalCell | None:
        return self.cells.get((row, driver))

    def summaries(self) -> dict:
        """Mean over the four per-driver cells for personalized, AvgHMI and NoHMI."""
        out = {}
        groups = {"personalized": [(d, d) for d in self.drivers],
                  "AvgHMI": [("AvgHMI", d) for d in self.drivers],
                  "NoHMI": [("NoHMI", d) for d in self.drivers]}
        for name, keys in groups.items():
            cells = [self.cells[k] for k in keys if k in self.cells]
            if len(cells) != len(keys):
                continue
            out[name] = {"speed": float(np.mean([c.summary()["speed_mean"] for c in cells])),
                         "distraction": float(np.mean([c.summary()["distraction_mean"] for c in cells]))}
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["model", "driver", "n_episodes", "speed_mean", "speed_std", "distraction_mean",
                  "distraction_std", "crash_rate", "alert_rate"]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            for d in self.drivers:
                c = self.cells.get((row, d))
                if c is not None:
                    s = c.summary()
                    w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in s.items()})
        for name, s in self.summaries().items():
            w.writerow({"model": f"summary:{name}", "driver": "mean", "n_episodes": "",
                        "speed_mean": repr(s["speed"]), "distraction_mean": repr(s["distraction"])})
        return buf.getvalue()

    def episodes_csv(self) -> str:
        buf = io.StringIO()
        fields = ["model", "driver", "episode", "seed", "steps", "speed_return",
                  "distraction_reward", "total_reward", "alerts", "crashed"]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            for d in self.drivers:
                c = self.cells.get((row, d))
                if c is None:
                    continue
                for e in c.episodes:
                    w.writerow({"model": row, "driver": d,
                                **{k: (repr(v) if isinstance(v, float) else v) for k, v in e.items()}})
        return buf.getvalue()

    def to_text(self) -> str:
        lines = []
        for title, key in (("High-speed return", "speed_mean"),
                           ("Distraction reward per episode", "distraction_mean")):
            lines.append(title)
            lines.append(f"{'HMI model':<12}" + "".join(f"{d:>10}" for d in self.drivers))
            for row in self.rows:
                cells = []
                for d in self.drivers:
                    c = self.cells.get((row, d))
                    cells.append(f"{c.summary()[key]:>10.1f}" if c else f"{'*':>10}")
                lines.append(f"{row:<12}" + "".join(cells))
            lines.append("")
        for name, s in self.summaries().items():
            lines.append(f"{name:<13} return {s['speed']:8.1f}   distraction {s['distraction']:8.1f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"metrics": out / "metrics.csv", "episodes": out / "episodes.csv",
                 "table": out / "metrics.txt"}
        paths["metrics"].write_text(self.to_csv())
        paths["episodes"].write_text(self.episodes_csv())
        paths["table"].write_text(self.to_text())
        return paths


def metrics_table(driver_policies: dict, hmi_models: dict, n_episodes: int, seed: int = 0,
                  config: ScenarioConfig | None = None, full_matrix: bool = False,
                  drivers=DRIVER_NAMES) -> EvalReport:
    """Evaluate the per-driver HMI rows, AvgHMI and NoHMI on the archetype drivers.

    ``hmi_models`` maps a row name (a driver name, ``"AvgHMI"`` or ``"NoHMI"``)
    to ``(policy, hmi_profile or None)``.  Driver-specific rows are evaluated on
    their own driver only unless ``full_matrix``.
    """
    report = EvalReport(drivers=list(drivers))
    order = [d for d in drivers] + ["AvgHMI", "NoHMI"]
    for row in order:
        if row not in hmi_models:
            log.warning("HMI model %s missing; row omitted", row)
            continue
        policy, hmi_profile = hmi_models[row]
        report.rows.append(row)
        targets = list(drivers) if (row in ("AvgHMI", "NoHMI") or full_matrix) else [row]
        for d in targets:
            if d not in driver_policies:
                log.warning("driver policy %s missing; cell skipped", d)
                continue
            prof = archetype_profile(d)
            shown = hmi_profile if hmi_profile is not None else prof
            report.cells[(row, d)] = evaluate(driver_policies[d], policy, prof, n_episodes, seed,
                                              config, hmi_profile=shown, model_name=row)
    return report


@dataclass
class LatentReport:
    names: list
    kl_matrix: np.ndarray
    average_kl: float
    probe_distraction: float
    probe_preference: float
    embeddings: dict

    def to_csv(self) -> str:
        lines = ["driver_a,driver_b,symmetric_kl"]
        for i, a in enumerate(self.names):
            for j, b in enumerate(self.names):
                if i < j:
                    lines.append(f"{a},{b},{self.kl_matrix[i, j]!r}")
        lines.append(f"average,,{self.average_kl!r}")
        lines.append(f"probe_distraction,,{self.probe_distraction!r}")
        lines.append(f"probe_preference,,{self.probe_preference!r}")
        return "\n".join(lines) + "\n"


def linear_probe(X: np.ndarray, y: np.ndarray, seed: int = 0, test_size: float = 0.5) -> float:
    """Held-out accuracy of a logistic-regression probe on standardized features."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(np.unique(y)) < 2:
        raise ValueError("probe needs two classes")
    Xtr, Xte, ytr, yte = train_test_split(X, y, test_size=test_size, random_state=seed, stratify=y)
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=1000)).fit(Xtr, ytr)
    return float(clf.score(Xte, yte))


def latent_report_from_embeddings(embeddings: dict, profiles: dict, seed: int = 0,
                                  key: str = "mu") -> LatentReport:
    """``embeddings`` maps a driver name to LatentTrait lists (or raw arrays).

    ``key`` picks the pooled posterior mean (default) or the sampled ``z``.
    """
    from .traits import pairwise_cluster_kl

    def arr(v):
        if isinstance(v, np.ndarray):
            return v
        return np.array([getattr(lt, key) for lt in v])

    pts = {n: arr(v) for n, v in embeddings.items()}
    names, mat, avg = pairwise_cluster_kl(pts)
    X = np.concatenate([pts[n] for n in names])
    y_d = np.concatenate([[profiles[n].distractibility] * len(pts[n]) for n in names])
    y_p = np.concatenate([[profiles[n].preference] * len(pts[n]) for n in names])
    return LatentReport(names, mat, avg, linear_probe(X, y_d, seed), linear_probe(X, y_p, seed),
                        embeddings)


def latent_report(encoder, dataset, n_pools: int = 50, seed: int = 0, key: str = "mu",
                  pool_size: int = 8, window: float = 20.0) -> LatentReport:
    from .traits import embed_driver

    rng = np.random.default_rng(seed)
    emb, profiles = {}, {}
    for did in sorted(dataset.by_driver()):
        prof = dataset.profile(did)
        emb[prof.name] = embed_driver(dataset, did, encoder, n_pools, rng, pool_size, window)
        profiles[prof.name] = prof
    return latent_report_from_embeddings(emb, profiles, seed, key)
