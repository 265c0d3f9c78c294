"""Demonstration datasets: generation, label masking, pooling and persistence."""
from __future__ import annotations

import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cognitive import AIAction, DriverProfile, HumanAction, archetype_profile
from .env import REWARD_TERMS, HMIwayEnv, ScenarioConfig
from .policies import ScriptedDriver

log = logging.getLogger(__name__)

FORMAT = "hmiway-dataset"
VERSION = 1
ACTION_HZ = 5.0


class DatasetError(ValueError):
    pass


class VersionError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class SchemaError(DatasetError):
    pass


class BudgetError(DatasetError):
    pass


def step_features(obs: np.ndarray, applied: np.ndarray) -> np.ndarray:
    """Per-step encoder input for one episode.

    Observation, one-hot applied action, and a flag marking steps whose applied
    action repeats the previous one (the visible trace of a held action).
    """
    applied = np.asarray(applied, dtype=np.int64)
    T = len(applied)
    onehot = np.zeros((T, len(HumanAction)))
    onehot[np.arange(T), applied] = 1.0
    held = np.zeros((T, 1))
    held[1:, 0] = applied[1:] == applied[:-1]
    return np.concatenate([np.asarray(obs, dtype=np.float64), onehot, held], axis=1)


FEATURE_EXTRA = len(HumanAction) + 1


@dataclass
class Transition:
    obs: np.ndarray
    a_H: int
    a_A: int
    applied: int
    rewards: np.ndarray
    cognitive: tuple[int, int, int, int]
    next_obs: np.ndarray


@dataclass
class Trajectory:
    """One episode stored column-wise; row ``t`` is one transition."""

    obs: np.ndarray          # (T, D)
    next_obs: np.ndarray     # (T, D)
    a_H: np.ndarray          # (T,)
    a_A: np.ndarray
    applied: np.ndarray
    rewards: np.ndarray      # (T, 8)
    cognitive: np.ndarray    # (T, 4): d, i, c, v after the step
    driver_id: int
    trait_label: str | None = None
    preference_label: str | None = None
    seed: int | None = None
    labeled: bool = True

    def __post_init__(self):
        T = len(self.a_H)
        if T == 0:
            raise SchemaError("trajectory must be nonempty")
        for name in ("obs", "next_obs", "a_A", "applied", "rewards", "cognitive"):
            if len(getattr(self, name)) != T:
                raise SchemaError(f"column {name} has length {len(getattr(self, name))}, expected {T}")

    def __len__(self) -> int:
        return len(self.a_H)

    def transition(self, t: int) -> Transition:
        return Transition(self.obs[t], int(self.a_H[t]), int(self.a_A[t]), int(self.applied[t]),
                          self.rewards[t], tuple(int(x) for x in self.cognitive[t]), self.next_obs[t])

    def label(self, mode: str):
        """Supervision label visible to training, or None if masked."""
        if not self.labeled or mode == "unsupervised":
            return None
        if mode == "driver_id":
            return self.driver_id
        if mode == "preference":
            return self.preference_label
        raise ValueError(f"unknown supervision mode {mode!r}")

    def features(self) -> np.ndarray:
        return step_features(self.obs, self.applied)

    def equals(self, other: Trajectory) -> bool:
        arrays = ("obs", "next_obs", "a_H", "a_A", "applied", "rewards", "cognitive")
        meta = ("driver_id", "trait_label", "preference_label", "seed", "labeled")
        return (all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and all(getattr(self, m) == getattr(other, m) for m in meta))


@dataclass
class Dataset:
    trajectories: list[Trajectory] = field(default_factory=list)
    profiles: list[DriverProfile] = field(default_factory=list)
    env_spec: dict = field(default_factory=dict)
    labeled_fraction: float = 1.0
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def by_driver(self) -> dict[int, list[Trajectory]]:
        out: dict[int, list[Trajectory]] = {}
        for tr in self.trajectories:
            out.setdefault(tr.driver_id, []).append(tr)
        return out

    def steps_per_driver(self) -> dict[int, int]:
        return {d: sum(len(t) for t in trs) for d, trs in self.by_driver().items()}

    def n_labeled(self) -> int:
        return sum(t.labeled for t in self.trajectories)

    def profile(self, driver_id: int) -> DriverProfile:
        for p in self.profiles:
            if p.driver_id == driver_id:
                return p
        return archetype_profile(driver_id)

    def equals(self, other: Dataset) -> bool:
        return (len(self) == len(other)
                and all(a.equals(b) for a, b in zip(self.trajectories, other.trajectories))
                and [p.to_dict() for p in self.profiles] == [p.to_dict() for p in other.profiles]
                and self.env_spec == other.env_spec
                and self.labeled_fraction == other.labeled_fraction
                and self.seed == other.seed)


def record_episode(env: HMIwayEnv, driver, seed: int, rng: np.random.Generator,
                   hmi=None) -> Trajectory:
    """Roll out one episode of ``driver`` (and optionally an HMI policy) and store it."""
    drv_obs, hmi_obs = env.reset(seed)
    rows = {k: [] for k in ("obs", "next_obs", "a_H", "a_A", "applied", "rewards", "cognitive")}
    done = False
    while not done:
        a_H, _ = driver.act(drv_obs, rng)
        if hmi is None:
            a_A = AIAction.NO_ALERT
        else:
            onehot = np.zeros(len(HumanAction))
            onehot[a_H] = 1.0
            a_A, _ = hmi.act(np.concatenate([hmi_obs, onehot]), rng)
        (nxt, hmi_obs), rb, done, info = env.step(a_H, a_A)
        rows["obs"].append(drv_obs)
        rows["next_obs"].append(nxt)
        rows["a_H"].append(int(a_H))
        rows["a_A"].append(int(a_A))
        rows["applied"].append(info["applied"])
        rows["rewards"].append(rb.as_array())
        rows["cognitive"].append((info["d"], info["i"], info["c"], info["applied"]))
        drv_obs = nxt
    p = env.profile
    return Trajectory(
        obs=np.array(rows["obs"]), next_obs=np.array(rows["next_obs"]),
        a_H=np.array(rows["a_H"], dtype=np.int64), a_A=np.array(rows["a_A"], dtype=np.int64),
        applied=np.array(rows["applied"], dtype=np.int64), rewards=np.array(rows["rewards"]),
        cognitive=np.array(rows["cognitive"], dtype=np.int64), driver_id=p.driver_id,
        trait_label=p.distractibility, preference_label=p.preference, seed=int(seed))


def mask_labels(trajectories: list[Trajectory], fraction: float, seed) -> None:
    """Keep labels on exactly ``round(fraction * n)`` trajectories, spread evenly over drivers."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("labeled fraction must lie in [0, 1]")
    n = len(trajectories)
    target = int(round(fraction * n))
    groups: dict[int, list[int]] = {}
    for k, tr in enumerate(trajectories):
        groups.setdefault(tr.driver_id, []).append(k)
    ids = sorted(groups)
    # largest-remainder allocation so each driver gets its share
    quotas = {d: fraction * len(groups[d]) for d in ids}
    alloc = {d: int(np.floor(quotas[d])) for d in ids}
    rest = target - sum(alloc.values())
    for d in sorted(ids, key=lambda d: (-(quotas[d] - alloc[d]), d))[:max(rest, 0)]:
        alloc[d] += 1
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    keep = set()
    for d in ids:
        keep.update(int(i) for i in rng.permutation(groups[d])[:alloc[d]])
    for k, tr in enumerate(trajectories):
        tr.labeled = k in keep


def generate_dataset(profiles, steps_per_type: int, behavior=None, seed: int = 0,
                     config: ScenarioConfig | None = None, labeled_fraction: float = 0.2,
                     hmi=None) -> Dataset:
    """Record episodes per profile until each has at least ``steps_per_type`` transitions.

    ``behavior`` maps a driver name or id to a policy; missing entries fall
    back to the scripted driver.  Demonstrations run without alerts unless an
    ``hmi`` policy is supplied.
    """
    cfg = config or ScenarioConfig()
    profiles = [p if isinstance(p, DriverProfile) else archetype_profile(p) for p in profiles]
    if steps_per_type < cfg.episode_steps:
        raise BudgetError(f"step budget {steps_per_type} is below one episode ({cfg.episode_steps})")
    behavior = behavior or {}
    ss = np.random.SeedSequence(seed)
    per_profile = ss.spawn(len(profiles))
    trajectories = []
    spec = None
    for prof, pss in zip(profiles, per_profile):
        driver = behavior.get(prof.name, behavior.get(prof.driver_id))
        if driver is None:
            driver = ScriptedDriver(cfg.lidar_sectors, cfg.sensing_range, cfg.max_speed)
        env = HMIwayEnv(cfg, prof)
        spec = env.spec.to_dict()
        act_ss, ep_ss = pss.spawn(2)
        rng = np.random.default_rng(act_ss)
        ep_rng = np.random.default_rng(ep_ss)
        recorded = 0
        while recorded < steps_per_type:
            tr = record_episode(env, driver, int(ep_rng.integers(2**31 - 1)), rng, hmi)
            trajectories.append(tr)
            recorded += len(tr)
    mask_labels(trajectories, labeled_fraction, seed)
    if spec is None:
        spec = HMIwayEnv(cfg).spec.to_dict()
    return Dataset(trajectories, profiles, spec, labeled_fraction, seed)


@dataclass
class PooledBatch:
    segments: np.ndarray   # (pool, window, feature_dim)
    driver_id: int
    labels: dict = field(default_factory=dict)
    sources: list = field(default_factory=list)   # (trajectory index, start)

    def __post_init__(self):
        if len(self.segments) == 0:
            raise SchemaError("empty pool")


def segment_index(dataset: Dataset, window_steps: int, labeled_only: bool = False):
    """Non-overlapping full-length segments per driver as (trajectory index, start)."""
    out: dict[int, list[tuple[int, int]]] = {}
    for k, tr in enumerate(dataset.trajectories):
        if labeled_only and not tr.labeled:
            continue
        segs = out.setdefault(tr.driver_id, [])
        for start in range(0, len(tr) - window_steps + 1, window_steps):
            segs.append((k, start))
    return out


def pooled_batches(dataset: Dataset, pool_size: int = 8, window: float = 20.0,
                   rng: np.random.Generator | None = None, labeled_only: bool = False,
                   report: list | None = None, feature_cache: dict | None = None,
                   driver_ids=None) -> list[PooledBatch]:
    """Shuffle each driver's segments into homogeneous pools of ``pool_size``.

    Drivers with fewer than ``pool_size`` segments are skipped and noted in
    ``report``.  Leftover segments that do not fill a pool are dropped this round.
    """
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    steps = int(round(window * ACTION_HZ))
    index = segment_index(dataset, steps, labeled_only)
    feats = feature_cache if feature_cache is not None else {}
    pools = []
    for did in sorted(index):
        if driver_ids is not None and did not in driver_ids:
            continue
        segs = index[did]
        if len(segs) < pool_size:
            msg = f"driver {did}: {len(segs)} segments < pool size {pool_size}; skipped"
            log.warning(msg)
            if report is not None:
                report.append(msg)
            continue
        order = rng.permutation(len(segs))
        for j in range(len(segs) // pool_size):
            chosen = [segs[i] for i in order[j * pool_size:(j + 1) * pool_size]]
            arr = []
            for k, s in chosen:
                if k not in feats:
                    feats[k] = dataset.trajectories[k].features()
                arr.append(feats[k][s:s + steps])
            tr0 = dataset.trajectories[chosen[0][0]]
            labels = {"driver_id": did, "trait": tr0.trait_label, "preference": tr0.preference_label,
                      "labeled": all(dataset.trajectories[k].labeled for k, _ in chosen)}
            pools.append(PooledBatch(np.stack(arr), did, labels, chosen))
    order = rng.permutation(len(pools))
    return [pools[i] for i in order]


# persistence

_ARRAY_COLS = ("obs", "next_obs", "a_H", "a_A", "applied", "rewards", "cognitive")
_META = ("driver_id", "trait_label", "preference_label", "seed", "labeled")


def _header(ds: Dataset, n_records: int) -> dict:
    return {"format": FORMAT, "version": VERSION, "env_spec": ds.env_spec,
            "profiles": [p.to_dict() for p in ds.profiles], "labeled_fraction": ds.labeled_fraction,
            "seed": ds.seed, "reward_terms": list(REWARD_TERMS), "n_trajectories": len(ds),
            "n_records": n_records}


def save(dataset: Dataset, path) -> Path:
    """Write JSONL (``.jsonl``) or compact binary (``.npz``), chosen by suffix."""
    path = Path(path)
    if path.suffix == ".npz":
        return _save_npz(dataset, path)
    n_records = len(dataset) + dataset.n_steps
    lines = [json.dumps(_header(dataset, n_records))]
    for tr in dataset.trajectories:
        meta = {m: getattr(tr, m) for m in _META}
        meta.update(kind="trajectory", length=len(tr))
        lines.append(json.dumps(meta))
        for t in range(len(tr)):
            lines.append(json.dumps({
                "obs": tr.obs[t].tolist(), "a_H": int(tr.a_H[t]), "a_A": int(tr.a_A[t]),
                "applied": int(tr.applied[t]), "rewards": tr.rewards[t].tolist(),
                "cognitive": tr.cognitive[t].tolist(), "next_obs": tr.next_obs[t].tolist()}))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)
    return path


def _check_header(h) -> None:
    if not isinstance(h, dict) or h.get("format") != FORMAT:
        raise SchemaError("not a dataset file (bad header)")
    if h.get("version") != VERSION:
        raise VersionError(f"dataset version {h.get('version')} unsupported (expected {VERSION})")
    for key in ("n_records", "n_trajectories", "profiles", "env_spec"):
        if key not in h:
            raise SchemaError(f"header missing {key!r}")


def _profiles(h) -> list[DriverProfile]:
    try:
        return [DriverProfile(**p) for p in h["profiles"]]
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad profile table: {exc}") from exc


def load(path) -> Dataset:
    path = Path(path)
    if path.suffix == ".npz":
        return _load_npz(path)
    text = path.read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise TruncatedFileError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:1: header is not JSON") from exc
    _check_header(header)
    body = lines[1:]
    if len(body) != header["n_records"]:
        raise TruncatedFileError(
            f"{path}: header declares {header['n_records']} records, found {len(body)}")
    trajectories = []
    pos = 0
    try:
        while pos < len(body):
            meta = json.loads(body[pos])
            if meta.get("kind") != "trajectory":
                raise SchemaError(f"{path}:{pos + 2}: expected a trajectory record")
            T = meta["length"]
            rows = [json.loads(x) for x in body[pos + 1:pos + 1 + T]]
            if len(rows) != T:
                raise TruncatedFileError(f"{path}: trajectory at line {pos + 2} is cut short")
            cols = {c: [r[c] for r in rows] for c in _ARRAY_COLS}
            trajectories.append(Trajectory(
                obs=np.array(cols["obs"], dtype=np.float64),
                next_obs=np.array(cols["next_obs"], dtype=np.float64),
                a_H=np.array(cols["a_H"], dtype=np.int64), a_A=np.array(cols["a_A"], dtype=np.int64),
                applied=np.array(cols["applied"], dtype=np.int64),
                rewards=np.array(cols["rewards"], dtype=np.float64),
                cognitive=np.array(cols["cognitive"], dtype=np.int64),
                **{m: meta[m] for m in _META}))
            pos += 1 + T
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: malformed record near line {pos + 2}: {exc}") from exc
    if len(trajectories) != header["n_trajectories"]:
        raise TruncatedFileError(f"{path}: expected {header['n_trajectories']} trajectories")
    return Dataset(trajectories, _profiles(header), header["env_spec"],
                   header.get("labeled_fraction", 1.0), header.get("seed"))


def _save_npz(ds: Dataset, path: Path) -> Path:
    lengths = np.array([len(t) for t in ds.trajectories], dtype=np.int64)
    header = _header(ds, int(lengths.sum()))
    header["trajectories"] = [{m: getattr(t, m) for m in _META} for t in ds.trajectories]
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
              "lengths": lengths}
    for c in _ARRAY_COLS:
        parts = [getattr(t, c) for t in ds.trajectories]
        arrays[c] = np.concatenate(parts) if parts else np.zeros((0,))
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def _load_npz(path: Path) -> Dataset:
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError, EOFError, zipfile.BadZipFile) as exc:
        raise TruncatedFileError(f"{path}: unreadable archive ({exc})") from exc
    try:
        header = json.loads(bytes(z["header"]).decode())
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"{path}: bad archive header ({exc})") from exc
    _check_header(header)
    try:
        lengths = z["lengths"]
        cols = {c: z[c] for c in _ARRAY_COLS}
    except (KeyError, ValueError, OSError, EOFError, zipfile.BadZipFile) as exc:
        raise TruncatedFileError(f"{path}: missing or damaged column ({exc})") from exc
    if int(lengths.sum()) != header["n_records"] or len(lengths) != header["n_trajectories"]:
        raise TruncatedFileError(f"{path}: record counts disagree with header")
    offs = np.concatenate([[0], np.cumsum(lengths)])
    trajectories = []
    for k, meta in enumerate(header["trajectories"]):
        a, b = offs[k], offs[k + 1]
        trajectories.append(Trajectory(**{c: cols[c][a:b] for c in _ARRAY_COLS}, **meta))
    return Dataset(trajectories, _profiles(header), header["env_spec"],
                   header.get("labeled_fraction", 1.0), header.get("seed"))
