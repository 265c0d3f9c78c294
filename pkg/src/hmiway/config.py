"""Run configuration files (TOML) with line-precise validation errors."""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .cognitive import ARCHETYPES, DRIVER_NAMES
from .env import ScenarioConfig
from .ppo import PPOConfig
from .traits import MODES, TraitConfig


class ConfigFileError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = str(path) if path else "<config>"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}")
        self.path, self.line = path, line


@dataclass
class DataSection:
    profiles: list = field(default_factory=lambda: list(DRIVER_NAMES))
    steps_per_type: int = 20_000
    labeled_fraction: float = 0.2
    behavior: str = "scripted"
    format: str = "npz"


@dataclass
class TrainSection:
    total_steps: int = 60_000
    n_steps: int = 2048


@dataclass
class EvalSection:
    episodes: int = 200
    full_matrix: bool = False
    greedy: bool = False


@dataclass
class EmbedSection:
    n_pools: int = 50
    modes: list = field(default_factory=lambda: ["driver_id", "unsupervised"])


@dataclass
class RunConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    data: DataSection = field(default_factory=DataSection)
    traits: TraitConfig = field(default_factory=TraitConfig)
    driver: TrainSection = field(default_factory=TrainSection)
    hmi: TrainSection = field(default_factory=lambda: TrainSection(total_steps=40_000))
    ppo: PPOConfig = field(default_factory=PPOConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    embed: EmbedSection = field(default_factory=EmbedSection)

    def to_dict(self) -> dict:
        out = {"run": {"out_dir": self.out_dir, "seed": self.seed},
               "scenario": self.scenario.to_dict()}
        for name in ("data", "traits", "driver", "hmi", "ppo", "eval", "embed"):
            sec = getattr(self, name)
            d = {}
            for f in fields(sec):
                v = getattr(sec, f.name)
                d[f.name] = list(v) if isinstance(v, tuple) else v
            out[name] = d
        return out


_SECTIONS = {"scenario": ScenarioConfig, "data": DataSection, "traits": TraitConfig,
             "driver": TrainSection, "hmi": TrainSection, "ppo": PPOConfig,
             "eval": EvalSection, "embed": EmbedSection}


def _key_line(text: str, section: str | None, key: str | None) -> int | None:
    """Best-effort line number of ``key`` inside ``[section]`` (or of the section header)."""
    current = None
    header_line = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if current == section:
                header_line = n
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", line):
            return n
    return header_line


def _coerce(cls, values: dict, text: str, section: str, path):
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigFileError(f"unknown key {k!r} in [{section}]", path, _key_line(text, section, k))
        want = getattr(defaults, k)
        ok = True
        if isinstance(want, bool):
            ok = isinstance(v, bool)
        elif isinstance(want, int) and want is not None and not isinstance(want, bool):
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif isinstance(want, float):
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            v = float(v) if ok else v
        elif isinstance(want, str):
            ok = isinstance(v, str)
        elif isinstance(want, (list, tuple)):
            ok = isinstance(v, list)
            v = tuple(v) if ok and isinstance(want, tuple) else v
        if not ok:
            raise ConfigFileError(f"[{section}] {k} expects {type(want).__name__}, got {type(v).__name__}",
                                  path, _key_line(text, section, k))
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigFileError(f"[{section}] {exc}", path, _key_line(text, section, None)) from exc


def parse_config(text: str, path=None) -> RunConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigFileError(f"TOML syntax error: {exc}", path, int(m.group(1)) if m else None) from exc
    cfg = RunConfig()
    for top, val in raw.items():
        if top == "run":
            for k, v in val.items():
                if k == "out_dir" and isinstance(v, str):
                    cfg.out_dir = v
                elif k == "seed" and isinstance(v, int) and not isinstance(v, bool):
                    cfg.seed = v
                else:
                    raise ConfigFileError(f"bad [run] entry {k!r}", path, _key_line(text, "run", k))
        elif top in _SECTIONS:
            if not isinstance(val, dict):
                raise ConfigFileError(f"{top} must be a table", path, _key_line(text, None, top))
            setattr(cfg, top, _coerce(_SECTIONS[top], val, text, top, path))
        else:
            raise ConfigFileError(f"unknown section [{top}]", path, _key_line(text, top, None))
    validate(cfg, text, path)
    return cfg


def validate(cfg: RunConfig, text: str = "", path=None) -> None:
    for p in cfg.data.profiles:
        if p not in ARCHETYPES:
            raise ConfigFileError(f"unknown profile {p!r}", path, _key_line(text, "data", "profiles"))
    if cfg.data.behavior not in ("scripted", "trained"):
        raise ConfigFileError("data.behavior must be 'scripted' or 'trained'", path,
                              _key_line(text, "data", "behavior"))
    if cfg.data.format not in ("npz", "jsonl"):
        raise ConfigFileError("data.format must be 'npz' or 'jsonl'", path, _key_line(text, "data", "format"))
    if cfg.eval.episodes <= 0:
        raise ConfigFileError("eval.episodes must be positive", path, _key_line(text, "eval", "episodes"))
    if cfg.embed.n_pools < 2:
        raise ConfigFileError("embed.n_pools must be at least 2", path, _key_line(text, "embed", "n_pools"))
    for m in cfg.embed.modes:
        if m not in MODES:
            raise ConfigFileError(f"unknown supervision mode {m!r}", path, _key_line(text, "embed", "modes"))
    for sec in ("driver", "hmi"):
        s = getattr(cfg, sec)
        if s.total_steps <= 0 or s.n_steps <= 0:
            raise ConfigFileError(f"{sec}.total_steps and n_steps must be positive", path,
                                  _key_line(text, sec, None))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config: {exc}", path) from exc
    return parse_config(text, path)


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides (values parsed as TOML scalars)."""
    for item in pairs:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigFileError(f"override {item!r} must look like section.key=value")
        lhs, rhs = item.split("=", 1)
        section, key = lhs.split(".", 1)
        try:
            value = tomli.loads(f"v = {rhs}")["v"]
        except tomli.TOMLDecodeError:
            value = rhs
        if section == "run":
            setattr(cfg, key, value)
            continue
        if section not in _SECTIONS:
            raise ConfigFileError(f"unknown section {section!r} in override {item!r}")
        current = cfg.to_dict()[section]
        current[key] = value
        setattr(cfg, section, _coerce(_SECTIONS[section], current, "", section, None))
    validate(cfg)
    return cfg
