#!/usr/bin/env python3
"""Collect the summaries written by learning_runs.sh into tests/data/learning_results.json."""
import argparse
import json
from pathlib import Path

from egomap.cli import aggregate

LAYOUT = {
    "learning": {"egomap": "learning_egomap", "baseline": "learning_baseline"},
    "noise": {"egomap_sigma0.1": "noise_egomap_sigma0.1", "baseline_sigma0": "noise_baseline_sigma0"},
}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--runs", type=Path, default=Path("runs"))
    parser.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "tests/data/learning_results.json")
    args = parser.parse_args()

    frozen = {"command": "scripts/learning_runs.sh"}
    for group, names in LAYOUT.items():
        frozen[group] = {}
        for key, name in names.items():
            run = args.runs / name
            summary = aggregate(run)
            summary["config_hash"] = json.loads((run / "manifest.json").read_text())["config_hash"]
            frozen[group][key] = summary
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(frozen, indent=2) + "\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
