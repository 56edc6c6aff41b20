#!/usr/bin/env python3
"""Regenerate the bundled scenario fixtures under src/querytuner/data/."""

import json
from pathlib import Path

from querytuner.engine import build_synthetic_scenario, scenario_to_dict

OUT = Path(__file__).resolve().parent.parent / "src" / "querytuner" / "data"


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    small = build_synthetic_scenario("synth-small", seed=20250809, n_knobs=10,
                                     n_queries=20)
    wide = build_synthetic_scenario("synth-wide", seed=20250810, n_knobs=25,
                                    n_queries=20)
    for scenario, fname in ((small, "synth_small.json"), (wide, "synth_wide.json")):
        path = OUT / fname
        path.write_text(json.dumps(scenario_to_dict(scenario)) + "\n",
                        encoding="utf-8")
        print(f"wrote {path} ({len(scenario.queries)} queries, "
              f"{scenario.knob_space.n} knobs, {len(scenario.node_types)} node types)")


if __name__ == "__main__":
    main()
