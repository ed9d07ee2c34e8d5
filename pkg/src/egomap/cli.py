"""Command line: train, evaluate, ablate, gradcheck, visualize, robustness, compare.

Exit codes: 0 success, 2 configuration error, 3 runtime failure,
4 a check that ran but failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .agents import ABLATION_TOGGLES, Agent
from .config import ConfigError, content_hash, dump_config, load_config, parse_overrides
from .env import NOISE_SIGMAS, GenerationParams, ScenarioSet, generate, load_replay
from .training import METRIC_COLUMNS, TrainConfig, TrainingError, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4
RUN_LAYOUT = ("manifest.json", "metrics.csv", "checkpoints/", "figures/", "replays/")

log = logging.getLogger("egomap")


class CheckFailed(RuntimeError):
    pass


# ---------------------------------------------------------------- run directories

def write_manifest(run_dir: Path, command: str, config: TrainConfig, seeds: list[int], extra: dict | None = None):
    run_dir.mkdir(parents=True, exist_ok=True)
    for sub in ("checkpoints", "figures", "replays"):
        (run_dir / sub).mkdir(exist_ok=True)
    manifest = {"command": command, "argv": sys.argv[1:], "version": __version__,
                "config": asdict(config), "config_hash": content_hash(config), "seeds": seeds,
                "started": time.strftime("%Y-%m-%dT%H:%M:%S"), "layout": list(RUN_LAYOUT), **(extra or {})}
    path = run_dir / "manifest.json"
    if path.exists():
        old = json.loads(path.read_text())
        if old.get("config_hash") != manifest["config_hash"]:
            raise ConfigError(f"{run_dir} already holds a run with a different config "
                              f"({old.get('config_hash')}); choose another --name")
        manifest["started"] = old["started"]
        manifest["seeds"] = sorted(set(old.get("seeds", [])) | set(seeds))
    path.write_text(json.dumps(manifest, indent=2))
    (run_dir / "config.yaml").write_text(dump_config(config))
    return manifest


def _drop_seed_rows(metrics: Path, seed: int) -> None:
    if not metrics.exists():
        return
    with open(metrics, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["seed"] != str(seed)]
    with open(metrics, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def run_seeds(config: TrainConfig, run_dir: Path, seeds: list[int], max_updates: int | None = None) -> dict:
    """Train one config per seed; finished seeds (summary present) are reused."""
    for seed in seeds:
        seed_cfg = replace(config, seed=seed)
        if (run_dir / "checkpoints" / f"seed_{seed}" / "summary.json").exists():
            log.info("seed %d already finished, reusing it", seed)
            continue
        _drop_seed_rows(run_dir / "metrics.csv", seed)
        log.info("training %s seed %d for %d frames", config.agent, seed, config.total_frames)
        train(seed_cfg, run_dir, max_updates)
    return aggregate(run_dir)


def aggregate(run_dir: Path) -> dict:
    """Mean and std across every finished seed of a run directory."""
    results = [json.loads(p.read_text()) for p in sorted((run_dir / "checkpoints").glob("seed_*/summary.json"))]
    if not results:
        raise RuntimeError(f"{run_dir} has no finished seeds")
    config = results[0]["config"]
    means = [r["test_mean"] for r in results]
    trains = [r["train_return"] for r in results if np.isfinite(r["train_return"])]
    agg = {"agent": config["agent"], "ablations": config["ablations"], "noise_sigma": config["noise_sigma"],
           "frames": results[0]["frames"], "seeds": [r["config"]["seed"] for r in results],
           "per_seed_test": means, "test_mean": float(np.mean(means)), "test_std": float(np.std(means)),
           "per_seed_train": [r["train_return"] for r in results],
           "train_mean": float(np.mean(trains)) if trains else float("nan"),
           "train_std": float(np.std(trains)) if trains else float("nan")}
    (run_dir / "summary.json").write_text(json.dumps(agg, indent=2))
    return agg


def _config_from_args(args, **fixed) -> TrainConfig:
    overrides = parse_overrides(getattr(args, "set", None))
    for flag, key in (("scenario", "scenario"), ("agent", "agent"), ("frames", "total_frames"),
                      ("noise_sigma", "noise_sigma"), ("metric", "metric"), ("precision", "precision"),
                      ("eval_every", "eval_every_frames")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    if getattr(args, "ablation", None):
        overrides["ablations"] = list(args.ablation)
    overrides.update(fixed)
    return load_config(args.config, overrides)


def _seeds(args) -> list[int]:
    return list(range(args.seed, args.seed + args.seeds))


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    config = _config_from_args(args)
    name = args.name or f"{config.scenario}_{config.agent}_sigma{config.noise_sigma:g}"
    run_dir = Path(args.runs_dir) / name
    seeds = _seeds(args)
    write_manifest(run_dir, "train", config, seeds)
    agg = run_seeds(config, run_dir, seeds, args.max_updates)
    print(f"{config.agent}: held-out return {agg['test_mean']:.3f} ± {agg['test_std']:.3f} "
          f"over seeds {seeds} -> {run_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    agent, meta = Agent.load(args.checkpoint)
    params = GenerationParams(**(json.loads(args.params) if args.params else {}))
    scen = ScenarioSet.standard(args.scenario, params)
    configs = scen.configs(args.split)[:args.limit]
    res = evaluate(agent, configs, args.episodes, args.greedy, args.noise_sigma, seed=args.seed)
    print(f"{args.split} return {res['mean']:.3f} ± {res['std']:.3f} over {len(res['returns'])} episodes")
    if args.json:
        Path(args.json).write_text(json.dumps({"checkpoint": str(args.checkpoint), "meta": meta, **res}, indent=2))
    return EXIT_OK


def format_table(rows: list[tuple[str, dict]]) -> str:
    lines = ["| agent | train | test |", "|---|---|---|"]
    for label, s in rows:
        lines.append(f"| {label} | {s['train_mean']:.3f} ± {s['train_std']:.3f} | "
                     f"{s['test_mean']:.3f} ± {s['test_std']:.3f} |")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    toggles = ABLATION_TOGGLES if args.toggles is None else args.toggles
    for t in toggles:
        if t not in ABLATION_TOGGLES:
            raise ConfigError(f"unknown toggle {t!r}; expected one of {ABLATION_TOGGLES}")
    base = _config_from_args(args, agent="egomap", ablations=[])
    name = args.name or f"ablate_{base.scenario}"
    root = Path(args.runs_dir) / name
    seeds = _seeds(args)
    rows = []
    for label, abl in [("EgoMap", [])] + [(f"EgoMap ({t})", [t]) for t in toggles]:
        cfg = replace(base, ablations=abl)
        run_dir = root / (abl[0].replace("=", "_") if abl else "egomap")
        write_manifest(run_dir, "ablate", cfg, seeds)
        rows.append((label, run_seeds(cfg, run_dir, seeds, args.max_updates)))
    table = format_table(rows)
    (root / "ablation.md").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import diffcore_suite, end_to_end_suite, format_report, memory_suite

    scopes = ("diffcore", "memory", "end2end") if args.scope == "all" else (args.scope,)
    suites = {"diffcore": diffcore_suite, "memory": memory_suite, "end2end": end_to_end_suite}
    results = []
    started = time.time()
    for scope in scopes:
        results.extend(suites[scope](instances=args.instances))
    print(format_report(results))
    print(f"{len(results)} checks, {args.instances} instances each, {time.time() - started:.1f}s")
    if not all(r.passed for r in results):
        raise CheckFailed("gradient check failed: " + ", ".join(r.name for r in results if not r.passed))
    return EXIT_OK


def cmd_robustness(args) -> int:
    agent, _ = Agent.load(args.checkpoint)
    configs = ScenarioSet.standard(args.scenario).configs("test")[:args.limit]
    lines = ["| noise sigma | test return |", "|---|---|"]
    for sigma in args.sigmas:
        res = evaluate(agent, configs, args.episodes, args.greedy, sigma, seed=args.seed)
        lines.append(f"| {sigma:.2f} | {res['mean']:.3f} ± {res['std']:.3f} |")
        print(lines[-1], flush=True)
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_compare(args) -> int:
    rows = []
    for d in args.runs:
        path = Path(d) / "summary.json"
        if not path.exists():
            raise ConfigError(f"{d} has no summary.json; train it first")
        s = json.loads(path.read_text())
        label = s["agent"] + (f" ({', '.join(s['ablations'])})" if s.get("ablations") else "")
        label += f" sigma={s['noise_sigma']:g}" if s.get("noise_sigma") else ""
        rows.append((label, s))
    print(format_table(rows))
    if args.require_order:
        first, second = rows[0][1], rows[1][1]
        gap = first["test_mean"] - second["test_mean"]
        margin = max(first["test_std"], second["test_std"])
        print(f"difference in means {gap:.3f}, larger std {margin:.3f}")
        if not gap > margin:
            raise CheckFailed(f"{rows[0][0]} does not beat {rows[1][0]} by more than one std")
    return EXIT_OK


def cmd_visualize(args) -> int:
    from .visualize import degradation_strip, record_episode, triptychs

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.strip_only:
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required unless --strip-only is given")
        agent, _ = Agent.load(args.checkpoint)
        if not agent.uses_map:
            raise ConfigError("the checkpoint is a baseline agent; it has no map to show")
        actions = None
        if args.replay:
            record = load_replay(args.replay)
            config = generate(record["seed"], record["kind"], GenerationParams(**record["params"]))
            actions = record["actions"]
        else:
            config = generate(args.episode_seed, args.scenario)
        trace = record_episode(agent, config, actions, max_steps=args.max_steps, seed=args.seed)
        paths = triptychs(trace, out, args.steps)
        print(f"wrote {len(paths)} triptychs to {out}")
    print(f"wrote {degradation_strip(out / 'degradation_strip.png')}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_training_flags(p):
    p.add_argument("--config", help="YAML config (paper_defaults / desk_scale sections)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--scenario", choices=("labyrinth", "ordered_k_item", "find_return"))
    p.add_argument("--frames", type=float, help="total environment frames per seed")
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--metric", choices=("cosine", "l1"))
    p.add_argument("--precision", choices=("fast", "high"))
    p.add_argument("--eval-every", type=float, help="frames between held-out evaluations (0 = end only)")
    p.add_argument("--seeds", type=int, default=1, help="number of training seeds")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--name", help="run name under --runs-dir")
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("--max-updates", type=int, help="stop after this many updates (smoke runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egomap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train agents, one run per seed")
    _add_training_flags(p)
    p.add_argument("--agent", choices=("baseline", "egomap", "neuralmap"))
    p.add_argument("--ablation", action="append", choices=ABLATION_TOGGLES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="held-out returns of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--scenario", default="find_return")
    p.add_argument("--params", help="JSON generation parameters")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--episodes", type=int, default=1, help="episodes per configuration")
    p.add_argument("--greedy", action="store_true", help="argmax actions instead of sampling")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, help="use only the first N configurations")
    p.add_argument("--json", help="write the result here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="EgoMap plus one run per ablation toggle")
    _add_training_flags(p)
    p.add_argument("--toggles", nargs="*", help=f"subset of {', '.join(ABLATION_TOGGLES)} (default: all)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--scope", choices=("diffcore", "memory", "end2end", "all"), default="all")
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("visualize", help="PCA map triptychs and the rotation degradation strip")
    p.add_argument("--checkpoint")
    p.add_argument("--scenario", default="find_return")
    p.add_argument("--episode-seed", type=int, default=1_000_000)
    p.add_argument("--replay", help="replay file to follow instead of sampling actions")
    p.add_argument("--steps", type=int, nargs="*", help="steps to render (default: four evenly spaced)")
    p.add_argument("--max-steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strip-only", action="store_true")
    p.add_argument("--out", default="runs/figures")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("robustness", help="evaluate a checkpoint across ego-motion noise levels")
    p.add_argument("checkpoint")
    p.add_argument("--scenario", default="find_return")
    p.add_argument("--sigmas", type=float, nargs="*", default=list(NOISE_SIGMAS))
    p.add_argument("--limit", type=int, help="use only the first N test configurations")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("compare", help="table of finished runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--require-order", action="store_true",
                   help="fail unless the first run beats the second by more than the larger std")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (TrainingError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
