"""Command-line surface: tune, warmstart, report, correlate.

The session configuration is a plain key-value text file::

    # comment lines start with '#'
    scenario = scenarios/synth_small.json
    seed = 7
    budget_evals = 300

Unknown keys are rejected.  Every command honors --seed, and identical seeds
yield identical artifacts: history timestamps are logical counters and all
randomness flows from seeded generators.  Output files are written to a
temporary name and atomically renamed into place.

Exit codes: 0 success, 2 configuration or scenario problems, 3 engine
errors, 4 command usage errors.  Unexpected internal failures exit 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import correlation as corrmod
from . import tuner as tunermod
from .encoder import CorrelationMatrix
from .engine import SimulatedEngine, load_bundled, load_scenario
from .errors import (ConfigError, EngineError, KnobValidationError,
                     ScenarioError, UsageError)
from .knobs import KnobSpace, sample_uniform
from .tuner import (CandidateConfig, ModelConfig, Observation, TunerConfig,
                    TuningBudget, TuningHistory)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_ENGINE = 3
EXIT_USAGE = 4

logger = logging.getLogger("querytuner.cli")


@dataclass
class SessionConfig:
    scenario: str = ""
    knob_space: str = ""          # optional override; scenario embeds one
    out_dir: str = "out"
    seed: int = 0
    queries: str = ""             # comma-separated subset; empty means all
    budget_evals: int = 100
    budget_seconds: float = 0.0   # 0 disables the wall-clock budget
    warm_m: int = 20
    particles: int = 3
    pso_mu: float = 0.5
    pso_c1: float = 2.0
    pso_c2: float = 2.0
    dim: int = 32
    hspe_k: int = 10
    lr: float = 1e-3
    mc_samples: int = 4
    init_fit_steps: int = 100
    refresh_fit_steps: int = 50
    fit_batch_cap: int = 64
    candidates_uniform: int = 192
    candidates_perturb: int = 64
    perturb_radius: float = 0.1
    shap_permutations: int = 2000
    shap_points: int = 16
    shap_background: int = 128
    corr_epsilon_fraction: float = 0.01
    corr_samples: int = 200


_FIELD_TYPES = {f.name: f.type for f in fields(SessionConfig)}


def parse_config(path) -> SessionConfig:
    """Parse the key-value config file; unknown keys are configuration errors."""
    cfg = SessionConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        kind = _FIELD_TYPES[key]
        try:
            if kind in ("int", int):
                setattr(cfg, key, int(value))
            elif kind in ("float", float):
                setattr(cfg, key, float(value))
            else:
                setattr(cfg, key, value)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}") from None
    if not cfg.scenario:
        raise ConfigError(f"{path}: missing required key 'scenario'")
    return cfg


def _load_engine(cfg: SessionConfig) -> SimulatedEngine:
    if cfg.scenario.startswith("bundled:"):
        scenario = load_bundled(cfg.scenario.split(":", 1)[1])
    else:
        scenario = load_scenario(cfg.scenario)
    return SimulatedEngine(scenario, seed=cfg.seed)


def _space_for(cfg: SessionConfig, engine: SimulatedEngine) -> KnobSpace:
    if cfg.knob_space:
        space = KnobSpace.load(cfg.knob_space)
        if space.names != engine.knob_space.names:
            raise ConfigError("knob_space file does not match the scenario's knobs")
        return space
    return engine.knob_space


def _query_list(cfg: SessionConfig, engine: SimulatedEngine,
                only: str | None) -> list[str]:
    available = engine.query_ids()
    if only:
        picked = [only]
    elif cfg.queries:
        picked = [q.strip() for q in cfg.queries.split(",") if q.strip()]
    else:
        picked = available
    for qid in picked:
        if qid not in available:
            raise ConfigError(f"query {qid!r} not in scenario")
    return picked


def _tuner_config(cfg: SessionConfig) -> TunerConfig:
    return TunerConfig(
        warm_samples_per_query=cfg.warm_m,
        particles=cfg.particles,
        pso_inertia=cfg.pso_mu, pso_local=cfg.pso_c1, pso_global=cfg.pso_c2,
        candidates=CandidateConfig(n_uniform=cfg.candidates_uniform,
                                   n_perturb=cfg.candidates_perturb,
                                   perturb_radius=cfg.perturb_radius),
        model=ModelConfig(d=cfg.dim, hspe_k=cfg.hspe_k,
                          latent_dim=cfg.dim, hidden=cfg.dim,
                          mc_samples=cfg.mc_samples, lr=cfg.lr,
                          initial_fit_steps=cfg.init_fit_steps,
                          refresh_fit_steps=cfg.refresh_fit_steps,
                          fit_batch_cap=cfg.fit_batch_cap),
        correlation_permutations=cfg.shap_permutations,
        correlation_eval_points=cfg.shap_points,
        correlation_background=cfg.shap_background,
        correlation_epsilon_fraction=cfg.corr_epsilon_fraction)


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def atomic_write_json(path: Path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2) + "\n")


def atomic_write_jsonl(path: Path, records) -> None:
    atomic_write_text(path, "".join(json.dumps(r) + "\n" for r in records))


def nearest_rank_percentile(values, q: float) -> float:
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


def q_error(actual: float, predicted: float) -> float:
    return max(actual / predicted, predicted / actual)


def compute_report(history: TuningHistory, predictions: list[dict],
                   skipped_lines: int = 0) -> tuple[dict, list[dict]]:
    """Aggregate metrics plus per-pair Q-Error rows for the CSV."""
    query_ids = sorted({obs.query_id for obs in history})
    per_query = {}
    best_latencies = []
    for qid in query_ids:
        obs = history.for_query(qid)
        best = history.best_for(qid)
        per_query[qid] = {
            "best_latency_s": best.latency_s if best else None,
            "evaluations_used": len(obs),
            "failures": sum(o.status for o in obs),
        }
        if best is not None:
            best_latencies.append(best.latency_s)
    failures = sum(o.status for o in history)
    qerr_rows = []
    for rec in predictions:
        if rec.get("status", 1) != 0:
            continue
        qerr_rows.append({
            "query_id": rec["query_id"], "iteration": rec["iteration"],
            "predicted_latency_s": rec["predicted_latency_s"],
            "actual_latency_s": rec["actual_latency_s"],
            "qerror": q_error(rec["actual_latency_s"], rec["predicted_latency_s"]),
        })
    qerr_values = sorted(r["qerror"] for r in qerr_rows)
    report = {
        "queries": per_query,
        "avg_best_latency_s": (sum(best_latencies) / len(best_latencies)
                               if best_latencies else None),
        "p95_best_latency_s": (nearest_rank_percentile(best_latencies, 0.95)
                               if best_latencies else None),
        "failures": failures,
        "skipped_lines": skipped_lines,
        "qerror": ({
            "count": len(qerr_values),
            "mean": sum(qerr_values) / len(qerr_values),
            "median": nearest_rank_percentile(qerr_values, 0.5),
            "p90": nearest_rank_percentile(qerr_values, 0.9),
            "max": qerr_values[-1],
        } if qerr_values else None),
    }
    return report, qerr_rows


def render_qerror_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["query_id", "iteration", "predicted_latency_s",
                     "actual_latency_s", "qerror"])
    for r in rows:
        writer.writerow([r["query_id"], r["iteration"], r["predicted_latency_s"],
                         r["actual_latency_s"], r["qerror"]])
    return buf.getvalue()


def _best_payload(result) -> list[dict]:
    payload = []
    for qid, obs in result.best.items():
        used = len(result.history.for_query(qid))
        if obs is None:
            payload.append({"query_id": qid, "theta": None, "latency_s": None,
                            "evaluations_used": used,
                            "note": "none-successful"})
        else:
            payload.append({"query_id": qid, "theta": list(obs.theta),
                            "latency_s": obs.latency_s,
                            "evaluations_used": used})
    return payload


def cmd_tune(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    engine = _load_engine(cfg)
    space = _space_for(cfg, engine)
    queries = _query_list(cfg, engine, getattr(args, "query", None))
    budget = TuningBudget(
        max_evaluations=cfg.budget_evals if cfg.budget_evals > 0 else None,
        max_duration_s=cfg.budget_seconds if cfg.budget_seconds > 0 else None)
    result = tunermod.run(queries, space, engine, budget, cfg.seed,
                          _tuner_config(cfg))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_jsonl(out / "history.jsonl",
                       [o.to_dict() for o in result.history])
    atomic_write_jsonl(out / "predictions.jsonl", result.predictions)
    atomic_write_json(out / "best.json", _best_payload(result))
    atomic_write_json(out / "correlation.json", result.correlation.to_dict())
    atomic_write_text(out / "model.json",
                      json.dumps(result.model.store.to_dict()) + "\n")
    report, qerr_rows = compute_report(result.history, result.predictions)
    atomic_write_json(out / "report.json", report)
    atomic_write_text(out / "report.csv", render_qerror_csv(qerr_rows))
    logger.info("tuning finished: %d observations, artifacts in %s",
                len(result.history), out)
    return EXIT_OK


def cmd_warmstart(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    if not args.query:
        raise UsageError("warmstart needs --query")
    engine = _load_engine(cfg)
    space = _space_for(cfg, engine)
    _query_list(cfg, engine, args.query)  # validates the id
    session_queries = _query_list(cfg, engine, None)
    # derive the same warm-start stream the full loop would use for this query
    qi = session_queries.index(args.query) if args.query in session_queries else 0
    history = TuningHistory()
    clock = {"t": 0}

    def next_timestamp():
        clock["t"] += 1
        return clock["t"] - 1

    tunermod.warm_start_query(args.query, engine, space, _tuner_config(cfg),
                              np.random.default_rng((cfg.seed, 2, qi)),
                              history, [], next_timestamp)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"warmstart_{args.query}.jsonl"
    atomic_write_jsonl(path, [o.to_dict() for o in history])
    logger.info("wrote %d warm-start samples to %s", len(history), path)
    return EXIT_OK


def load_history_lenient(path) -> tuple[TuningHistory, int]:
    """Parse a history file, skipping corrupt lines with a count."""
    history = TuningHistory()
    skipped = 0
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read history {path}: {exc}") from None
    with fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                history.append(Observation.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                skipped += 1
    return history, skipped


def cmd_report(args) -> int:
    history, skipped = load_history_lenient(args.history)
    predictions: list[dict] = []
    pred_path = Path(args.predictions) if args.predictions else \
        Path(args.history).with_name("predictions.jsonl")
    if pred_path.exists():
        with open(pred_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    predictions.append(json.loads(line))
                except json.JSONDecodeError:
                    skipped += 1
    out = Path(args.out or Path(args.history).parent)
    out.mkdir(parents=True, exist_ok=True)
    report, qerr_rows = compute_report(history, predictions, skipped_lines=skipped)
    atomic_write_json(out / "report.json", report)
    atomic_write_text(out / "report.csv", render_qerror_csv(qerr_rows))
    print(json.dumps(report, indent=2))
    return EXIT_OK


def correlation_precision_recall(matrix: CorrelationMatrix, scenario) -> tuple[float, float]:
    tp = fp = fn = 0
    for i, nt in enumerate(matrix.node_types):
        truth = scenario.ground_truth[scenario.node_types.index(nt)]
        pred = matrix.matrix[i]
        tp += int(((pred == 1) & (truth == 1)).sum())
        fp += int(((pred == 1) & (truth == 0)).sum())
        fn += int(((pred == 0) & (truth == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall


def cmd_correlate(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    engine = _load_engine(cfg)
    space = _space_for(cfg, engine)
    queries = _query_list(cfg, engine, getattr(args, "query", None))
    rng = np.random.default_rng((cfg.seed, 5))
    thetas = sample_uniform(space, cfg.corr_samples, rng)
    timings = corrmod.collect_timings(engine, queries, thetas)
    node_types = sorted({op for qid in queries
                         for op in engine.plan(qid).node_types()})
    matrix, _ = corrmod.identify_correlations(
        timings, node_types, space.names, rng,
        n_permutations=cfg.shap_permutations, eval_points=cfg.shap_points,
        background_size=cfg.shap_background,
        epsilon_fraction=cfg.corr_epsilon_fraction)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / "correlation.json", matrix.to_dict())
    precision, recall = correlation_precision_recall(matrix, engine.scenario)
    print(f"correlation matrix: {len(matrix.node_types)} node types x "
          f"{len(matrix.knob_names)} knobs")
    print(f"vs ground truth: precision={precision:.3f} recall={recall:.3f}")
    return EXIT_OK


def _apply_overrides(cfg: SessionConfig, args) -> SessionConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "budget_evals", None) is not None:
        cfg.budget_evals = args.budget_evals
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="querytuner",
        description="Query-level knob tuning against a simulated analytical engine.",
        epilog="Exit codes: 0 ok, 2 configuration error, 3 engine error, "
               "4 usage error, 1 unexpected failure.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="session config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--verbose", action="store_true", help="chatty logging")

    p_tune = sub.add_parser("tune", help="run the full tuning loop")
    common(p_tune)
    p_tune.add_argument("--query", help="tune a single query id")
    p_tune.add_argument("--budget-evals", type=int, dest="budget_evals",
                        help="override the optimization evaluation budget")
    p_tune.set_defaults(func=cmd_tune)

    p_warm = sub.add_parser("warmstart", help="collect warm-start samples only")
    common(p_warm)
    p_warm.add_argument("--query", help="query id to sample (required)")
    p_warm.set_defaults(func=cmd_warmstart)

    p_rep = sub.add_parser("report", help="compute metrics from a history file")
    p_rep.add_argument("history", help="path to history.jsonl")
    p_rep.add_argument("--predictions", help="path to predictions.jsonl")
    p_rep.add_argument("--out", help="output directory (default: history's)")
    p_rep.add_argument("--seed", type=int, help="accepted for uniformity; unused")
    p_rep.add_argument("--verbose", action="store_true")
    p_rep.set_defaults(func=cmd_report)

    p_corr = sub.add_parser("correlate",
                            help="build the knob/node-type correlation matrix")
    common(p_corr)
    p_corr.add_argument("--query", help="restrict to a single query id")
    p_corr.set_defaults(func=cmd_correlate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScenarioError, KnobValidationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EngineError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
