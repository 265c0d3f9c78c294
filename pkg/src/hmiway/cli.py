"""Command-line entry point: ``hmiway <subcommand> --config run.toml``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import shutil
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .cognitive import DRIVER_NAMES, archetype_profile
from .config import ConfigFileError, RunConfig, apply_overrides, load_config

log = logging.getLogger("hmiway")

COMMANDS = ("gen-data", "train-traits", "train-driver", "train-hmi", "eval", "embed", "report")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hashed_copy(src: Path, dest_dir: Path, stem: str) -> Path:
    """Move ``src`` to ``dest_dir/stem-<hash12><suffix>``; identical content reuses the name."""
    digest = sha256(src)[:12]
    dest = dest_dir / f"{stem}-{digest}{src.suffix}"
    if dest.exists():
        src.unlink()
    else:
        shutil.move(str(src), dest)
    return dest


class RunDir:
    """Append-only run directory with a JSON manifest of every command invocation."""

    def __init__(self, root, cfg: RunConfig):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.manifest_path = self.root / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"runs": [], "artifacts": {}}

    def record(self, command: str, artifacts: dict[str, Path], extra: dict | None = None) -> None:
        man = self.manifest()
        entry = {"command": command, "config": self.cfg.to_dict(), "seed": self.cfg.seed,
                 "versions": versions(),
                 "artifacts": {k: {"path": str(Path(p).relative_to(self.root)), "sha256": sha256(p)}
                               for k, p in artifacts.items()},
                 **(extra or {})}
        man["runs"].append(entry)
        man["artifacts"].update(entry["artifacts"])
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(man, indent=2, sort_keys=True))
        tmp.replace(self.manifest_path)

    def artifact(self, key: str) -> Path:
        arts = self.manifest()["artifacts"]
        if key not in arts:
            raise FileNotFoundError(f"artifact {key!r} not found in {self.manifest_path}; "
                                    "run the producing subcommand first")
        return self.root / arts[key]["path"]

    def has(self, key: str) -> bool:
        return key in self.manifest()["artifacts"]

    def fail_marker(self, command: str) -> Path:
        return self.root / f"{command}.FAILED"


def versions() -> dict:
    import numba
    import sklearn

    return {"hmiway": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scikit-learn": sklearn.__version__, "numba": numba.__version__}


# subcommands

def cmd_gen_data(cfg: RunConfig, run: RunDir, args) -> dict:
    from .dataset import generate_dataset, save
    from .ppo import load_policy

    behavior = {}
    if cfg.data.behavior == "trained":
        for name in cfg.data.profiles:
            behavior[name] = load_policy(run.artifact(f"driver/{name}"))[0]
    steps = args.steps_per_type or cfg.data.steps_per_type
    ds = generate_dataset(cfg.data.profiles, steps, behavior, seed=cfg.seed, config=cfg.scenario,
                          labeled_fraction=cfg.data.labeled_fraction)
    out = run.root / "data"
    out.mkdir(exist_ok=True)
    path = save(ds, out / f"dataset.{cfg.data.format}")
    summary = {"drivers": {ds.profile(d).name: n for d, n in ds.steps_per_driver().items()},
               "trajectories": len(ds), "labeled": ds.n_labeled()}
    (out / "dataset_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"dataset: {len(ds)} trajectories, {ds.n_steps} steps -> {path}")
    return {"dataset": path, "dataset_summary": out / "dataset_summary.json"}


def _mode_list(cfg, args):
    if args.mode:
        return [args.mode]
    return [cfg.traits.mode]


def cmd_train_traits(cfg: RunConfig, run: RunDir, args) -> dict:
    from dataclasses import replace

    from .dataset import load
    from .traits import train

    ds = load(run.artifact("dataset"))
    arts = {}
    for mode in _mode_list(cfg, args):
        tcfg = replace(cfg.traits, mode=mode)
        if args.budget:
            tcfg = replace(tcfg, budget=args.budget)
        work = run.root / "traits" / mode
        model = train(ds, tcfg, seed=cfg.seed, env_config=cfg.scenario, out_dir=work,
                      resume=args.resume)
        final = work / "final.npz"
        model.save(final)
        arts[f"traits/{mode}"] = hashed_copy(final, work, "encoder")
        curve = work / "training_curve.csv"
        keys = list(model.history[0]) if model.history else []
        lines = [",".join(keys)] + [",".join(repr(r[k]) for k in keys) for r in model.history]
        curve.write_text("\n".join(lines) + "\n")
        arts[f"traits/{mode}/curve"] = curve
        print(f"traits[{mode}]: {model.round} rounds -> {arts[f'traits/{mode}']}")
    return arts


def _profiles_arg(args, default):
    if args.profiles:
        return [archetype_profile(p).name for p in args.profiles.split(",")]
    return list(default)


def _write_curve(path: Path, history: list[dict]) -> Path:
    keys = ["update", "steps", "mean_return", "entropy", "approx_kl", "clip_frac",
            "policy_loss", "value_loss"]
    lines = [",".join(keys + ["breakdown_mean"])]
    for r in history:
        br = " ".join(repr(x) for x in r.get("breakdown_mean", []))
        lines.append(",".join(repr(r.get(k)) for k in keys) + "," + br)
    path.write_text("\n".join(lines) + "\n")
    return path


def cmd_train_driver(cfg: RunConfig, run: RunDir, args) -> dict:
    from .intervention import train_driver_policy
    from .ppo import save_policy

    out = run.root / "driver"
    out.mkdir(exist_ok=True)
    arts = {}
    steps = args.steps or cfg.driver.total_steps
    for k, name in enumerate(_profiles_arg(args, list(DRIVER_NAMES) + ["Avg"])):
        policy, hist = train_driver_policy(name, cfg.scenario, cfg.ppo, steps, cfg.driver.n_steps,
                                           seed=cfg.seed + k)
        tmp = save_policy(out / f"{name}.npz", policy, {"profile": name})
        arts[f"driver/{name}"] = hashed_copy(tmp, out, name)
        arts[f"driver/{name}/curve"] = _write_curve(out / f"{name}_curve.csv", hist)
        print(f"driver[{name}]: final mean return {hist[-1]['mean_return']:.1f}")
    return arts


def cmd_train_hmi(cfg: RunConfig, run: RunDir, args) -> dict:
    from .intervention import train_hmi_policy
    from .ppo import load_policy, save_policy

    out = run.root / "hmi"
    out.mkdir(exist_ok=True)
    arts = {}
    steps = args.steps or cfg.hmi.total_steps
    for k, name in enumerate(_profiles_arg(args, list(DRIVER_NAMES) + ["Avg"])):
        driver, _ = load_policy(run.artifact(f"driver/{name}"))
        prof = archetype_profile(name)
        policy, hist = train_hmi_policy(prof, driver, cfg.scenario, cfg.ppo, steps, cfg.hmi.n_steps,
                                        seed=cfg.seed + 100 + k, hmi_profile=prof)
        row = "AvgHMI" if name == "Avg" else name
        tmp = save_policy(out / f"{row}.npz", policy, {"profile": name, "row": row})
        arts[f"hmi/{row}"] = hashed_copy(tmp, out, row)
        arts[f"hmi/{row}/curve"] = _write_curve(out / f"{row}_curve.csv", hist)
        print(f"hmi[{row}]: final mean return {hist[-1]['mean_return']:.1f}")
    return arts


def cmd_eval(cfg: RunConfig, run: RunDir, args) -> dict:
    from .evaluation import metrics_table
    from .policies import no_hmi
    from .ppo import load_policy

    episodes = cfg.eval.episodes if args.episodes is None else args.episodes
    if episodes <= 0:
        raise ConfigFileError("eval episodes must be positive")
    drivers = {n: load_policy(run.artifact(f"driver/{n}"))[0]
               for n in DRIVER_NAMES if run.has(f"driver/{n}")}
    models = {}
    for row in list(DRIVER_NAMES) + ["AvgHMI"]:
        if run.has(f"hmi/{row}"):
            shown = archetype_profile("Avg") if row == "AvgHMI" else None
            models[row] = (load_policy(run.artifact(f"hmi/{row}"))[0], shown)
    models["NoHMI"] = (no_hmi(), None)
    report = metrics_table(drivers, models, episodes, seed=cfg.seed, config=cfg.scenario,
                           full_matrix=cfg.eval.full_matrix)
    paths = report.write(run.root / "eval")
    print(report.to_text())
    return {f"eval/{k}": p for k, p in paths.items()}


def cmd_embed(cfg: RunConfig, run: RunDir, args) -> dict:
    from .dataset import load
    from .evaluation import latent_report
    from .traits import TraitModel, export_embeddings_csv

    ds = load(run.artifact("dataset"))
    out = run.root / "embed"
    out.mkdir(exist_ok=True)
    arts = {}
    n_pools = args.n_pools or cfg.embed.n_pools
    modes = [args.mode] if args.mode else cfg.embed.modes
    for mode in modes:
        if not run.has(f"traits/{mode}"):
            log.warning("no trained encoder for mode %s; skipped", mode)
            continue
        model = TraitModel.load(run.artifact(f"traits/{mode}"))
        rep = latent_report(model.encoder, ds, n_pools, seed=cfg.seed,
                            pool_size=model.config.pool_size, window=model.config.window)
        p1 = export_embeddings_csv(out / f"{mode}_embeddings.csv", rep.embeddings)
        p2 = out / f"{mode}_latent.csv"
        p2.write_text(rep.to_csv())
        arts[f"embed/{mode}"] = p1
        arts[f"embed/{mode}/latent"] = p2
        print(f"embed[{mode}]: averaged KL {rep.average_kl:.3f}, "
              f"distraction probe {rep.probe_distraction:.3f}, preference probe {rep.probe_preference:.3f}")
    return arts


def cmd_report(cfg: RunConfig, run: RunDir, args) -> dict:
    parts = []
    if run.has("eval/table"):
        parts.append(run.artifact("eval/table").read_text())
    for mode in ("unsupervised", "driver_id", "preference"):
        if run.has(f"embed/{mode}/latent"):
            parts.append(f"latent separation [{mode}]\n" + run.artifact(f"embed/{mode}/latent").read_text())
    if not parts:
        raise FileNotFoundError("nothing to report: run eval and/or embed first")
    path = run.root / "report.txt"
    path.write_text("\n".join(parts))
    print(path.read_text())
    return {"report": path}


HANDLERS = {"gen-data": cmd_gen_data, "train-traits": cmd_train_traits,
            "train-driver": cmd_train_driver, "train-hmi": cmd_train_hmi, "eval": cmd_eval,
            "embed": cmd_embed, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hmiway", description="Driver trait learning and HMI intervention experiments")
    p.add_argument("--version", action="version", version=f"hmiway {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", "-c", help="TOML run configuration")
        sp.add_argument("--out", help="run directory (overrides run.out_dir)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "gen-data":
            sp.add_argument("--steps-per-type", type=int)
        if name in ("train-traits", "embed"):
            sp.add_argument("--mode", choices=["unsupervised", "driver_id", "preference"])
        if name == "train-traits":
            sp.add_argument("--budget", type=int)
            sp.add_argument("--resume", action="store_true")
        if name in ("train-driver", "train-hmi"):
            sp.add_argument("--profiles", help="comma-separated profile names")
            sp.add_argument("--steps", type=int)
        if name == "eval":
            sp.add_argument("--episodes", type=int)
        if name == "embed":
            sp.add_argument("--n-pools", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = apply_overrides(cfg, args.set)
        if args.out:
            cfg.out_dir = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        if getattr(args, "episodes", None) is not None and args.episodes <= 0:
            raise ConfigFileError("--episodes must be positive")
    except ConfigFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    run = RunDir(cfg.out_dir, cfg)
    marker = run.fail_marker(args.command)
    try:
        artifacts = HANDLERS[args.command](cfg, run, args)
    except Exception as exc:  # leave a marker next to any partial output
        marker.write_text(f"{type(exc).__name__}: {exc}\n\n{traceback.format_exc()}")
        print(f"error: {args.command} failed: {exc} (see {marker})", file=sys.stderr)
        return 1
    if marker.exists():
        marker.unlink()
    run.record(args.command, artifacts)
    return 0


if __name__ == "__main__":
    sys.exit(main())
