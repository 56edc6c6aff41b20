"""Tuning-loop orchestration: warm start, surrogate fitting, candidate scoring
with constrained expected improvement, evaluation, and history management.

Per query, the loop keeps a best-observed log-latency incumbent over its
successful evaluations.  Candidate configurations are scored by the Gaussian
expected-improvement closed form (minimization direction) multiplied by the
predicted probability of successful execution; before any success exists the
score falls back to (1 - fail_prob) * (-predicted latency).

History timestamps are a logical event counter, not wall-clock time, so two
runs with the same seed produce byte-identical artifacts.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import predictor as npmod
from . import warmstart as ws
from .correlation import NodeTiming, identify_correlations
from .encoder import (CorrelationMatrix, EncoderConfig, PreparedPlan,
                      encode_batch, init_encoder_params)
from .errors import UsageError
from .knobs import KnobSpace, perturb, sample_uniform
from .plan import Vocabulary, adjacency_mask, featurize, hspe
from .predictor import Prediction, PredictorConfig, Standardizer

logger = logging.getLogger("querytuner.tuner")

SOURCE_WARMSTART = "warmstart"
SOURCE_BO = "bo"


@dataclass(frozen=True)
class Observation:
    query_id: str
    theta: tuple[float, ...]
    latency_s: float
    status: int
    iteration: int
    source: str
    timestamp: int

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "theta": list(self.theta),
                "latency_s": self.latency_s, "status": self.status,
                "iteration": self.iteration, "source": self.source,
                "timestamp": self.timestamp}

    @classmethod
    def from_dict(cls, payload: dict) -> "Observation":
        return cls(query_id=str(payload["query_id"]),
                   theta=tuple(float(t) for t in payload["theta"]),
                   latency_s=float(payload["latency_s"]),
                   status=int(payload["status"]),
                   iteration=int(payload["iteration"]),
                   source=str(payload["source"]),
                   timestamp=int(payload["timestamp"]))


class TuningHistory:
    """Append-only observation log with a per-query index."""

    def __init__(self):
        self._observations: list[Observation] = []
        self._by_query: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self._observations)

    def __iter__(self):
        return iter(self._observations)

    @property
    def observations(self) -> list[Observation]:
        return list(self._observations)

    def append(self, obs: Observation) -> int:
        idx = len(self._observations)
        self._observations.append(obs)
        self._by_query.setdefault(obs.query_id, []).append(idx)
        return idx

    def indices_for(self, query_id: str) -> list[int]:
        return list(self._by_query.get(query_id, []))

    def for_query(self, query_id: str) -> list[Observation]:
        return [self._observations[i] for i in self.indices_for(query_id)]

    def get(self, idx: int) -> Observation:
        return self._observations[idx]

    def best_for(self, query_id: str) -> Observation | None:
        best = None
        for obs in self.for_query(query_id):
            if obs.status == 0 and (best is None or obs.latency_s < best.latency_s):
                best = obs
        return best

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for obs in self._observations:
                fh.write(json.dumps(obs.to_dict()) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "TuningHistory":
        history = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    history.append(Observation.from_dict(json.loads(line)))
        return history


@dataclass
class TuningBudget:
    max_evaluations: int | None = None
    max_duration_s: float | None = None

    def __post_init__(self):
        if self.max_evaluations is None and self.max_duration_s is None:
            raise UsageError("set max_evaluations and/or max_duration_s")
        if self.max_evaluations is not None and self.max_evaluations < 1:
            raise UsageError("max_evaluations must be >= 1")
        if self.max_duration_s is not None and self.max_duration_s <= 0:
            raise UsageError("max_duration_s must be positive")


def _phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def expected_improvement(f_star: float, mean: float, std: float) -> float:
    """Closed-form Gaussian expected improvement below the incumbent."""
    if std <= 0:
        raise UsageError("expected improvement needs a positive spread")
    gamma = (f_star - mean) / std
    return max(std * (gamma * _phi(gamma) + _pdf(gamma)), 0.0)


def eic(pred: Prediction, f_star: float | None) -> float:
    """Expected improvement weighted by the predicted success probability.

    Without an incumbent (no successful run yet) the score prefers reliable,
    fast-predicted candidates: (1 - fail_prob) * (-predicted mean).
    """
    p_success = 1.0 - pred.fail_prob
    if f_star is None:
        return p_success * (-pred.perf_mean)
    return expected_improvement(f_star, pred.perf_mean, pred.perf_std) * p_success


@dataclass
class CandidateConfig:
    n_uniform: int = 192
    n_perturb: int = 64
    perturb_radius: float = 0.1


def generate_candidates(space: KnobSpace, rng: np.random.Generator,
                        best_theta: np.ndarray | None,
                        ccfg: CandidateConfig) -> np.ndarray:
    """Global uniform draws plus local jitter around the incumbent, if any."""
    pools = [sample_uniform(space, ccfg.n_uniform, rng)]
    if best_theta is None:
        pools.append(sample_uniform(space, ccfg.n_perturb, rng))
    else:
        pools.append(np.vstack([perturb(best_theta, ccfg.perturb_radius, rng)
                                for _ in range(ccfg.n_perturb)]))
    return np.vstack(pools)


def select_candidate(candidates: np.ndarray, predictions: list[Prediction],
                     f_star: float | None) -> tuple[int, float]:
    """Argmax of the acquisition; ties prefer lower failure probability, then
    the lexicographically smallest configuration."""
    best_idx = -1
    best_key = None
    for i, pred in enumerate(predictions):
        key = (eic(pred, f_star), -pred.fail_prob, tuple(-candidates[i]))
        if best_key is None or key > best_key:
            best_key = key
            best_idx = i
    return best_idx, best_key[0]


@dataclass
class ModelConfig:
    d: int = 32
    hspe_k: int = 10
    latent_dim: int = 32
    hidden: int = 32
    mc_samples: int = 4
    lr: float = dc.ADAM_LR
    initial_fit_steps: int = 100
    refresh_fit_steps: int = 50
    fit_batch_cap: int = 64


class SurrogateModel:
    """End-to-end surrogate: joint encoder feeding the dual-task predictor.

    One parameter store carries both parts, so fitting backpropagates from
    the variational loss through the predictor into the attention blocks.
    Prediction contexts are the target query's own observations, encoded
    under the current parameters (cached until the next refit).
    """

    def __init__(self, plans: dict, space: KnobSpace, seed: int,
                 cfg: ModelConfig | None = None,
                 correlation: CorrelationMatrix | None = None):
        self.cfg = cfg or ModelConfig()
        self.space = space
        self.vocab = Vocabulary.from_plans(plans.values())
        self.prepared: dict[str, PreparedPlan] = {}
        for qid, plan in plans.items():
            feats = featurize(plan, self.vocab)
            pos = hspe(plan, self.cfg.hspe_k)
            self.prepared[qid] = PreparedPlan(
                query_id=qid, node_inputs=np.hstack([feats, pos]),
                adjacency=adjacency_mask(plan), ops=plan.node_types())
        self.enc_cfg = EncoderConfig(
            plan_dim=self.vocab.feature_dim + self.cfg.hspe_k + 1,
            knob_dim=space.n, d=self.cfg.d)
        self.pred_cfg = PredictorConfig(
            x_dim=self.cfg.d, r_dim=self.cfg.latent_dim, u_dim=self.cfg.latent_dim,
            z_dim=self.cfg.latent_dim, h_dim=self.cfg.latent_dim,
            hidden=self.cfg.hidden, mc_samples=self.cfg.mc_samples)
        self.correlation = correlation
        self.store = dc.ParamStore()
        init_rng = np.random.default_rng((seed, 0))
        init_encoder_params(self.store, self.enc_cfg, init_rng)
        npmod.init_predictor_params(self.store, self.pred_cfg, init_rng)
        self.rng = np.random.default_rng((seed, 1))
        self.version = 0
        self._x_cache: dict[int, np.ndarray] = {}

    def set_correlation(self, correlation: CorrelationMatrix) -> None:
        self.correlation = correlation
        self._x_cache.clear()

    ENCODE_CHUNK = 16  # bounds the stacked attention matrices to (chunk*n)^2

    def encode_rows(self, tape: dc.Tape, items) -> dc.Matrix:
        """Differentiable encodings for (query_id, theta) items, one per row."""
        chunks = []
        for lo in range(0, len(items), self.ENCODE_CHUNK):
            part = items[lo:lo + self.ENCODE_CHUNK]
            prepared = [self.prepared[qid] for qid, _ in part]
            thetas = np.asarray([theta for _, theta in part], dtype=np.float64)
            chunks.append(encode_batch(tape, self.store, self.enc_cfg, prepared,
                                       thetas, self.correlation))
        return chunks[0] if len(chunks) == 1 else dc.concat_rows(chunks)

    def encode_values(self, items) -> np.ndarray:
        """Forward-only encodings as a plain array."""
        tape = dc.Tape(record=False)
        return self.encode_rows(tape, items).value

    def fit(self, history: TuningHistory, steps: int) -> list[float]:
        observations = history.observations
        if len(observations) < 4:
            logger.info("not enough observations to fit (%d)", len(observations))
            return []

        def provider(tape, rng):
            n = len(observations)
            take = min(self.cfg.fit_batch_cap, n)
            idx = np.sort(rng.choice(n, size=take, replace=False))
            batch = [observations[i] for i in idx]
            x = self.encode_rows(tape, [(o.query_id, o.theta) for o in batch])
            latency = np.array([o.latency_s for o in batch])
            fail = np.array([float(o.status) for o in batch])
            return x, latency, fail

        losses = npmod.fit(provider, self.store, self.pred_cfg, steps,
                           self.rng, lr=self.cfg.lr)
        self.version += 1
        self._x_cache.clear()
        return losses

    def _context_arrays(self, history: TuningHistory, query_id: str):
        idx = history.indices_for(query_id)
        missing = [i for i in idx if i not in self._x_cache]
        if missing:
            values = self.encode_values(
                [(query_id, history.get(i).theta) for i in missing])
            for row, i in enumerate(missing):
                self._x_cache[i] = values[row]
        obs = [history.get(i) for i in idx]
        x = np.vstack([self._x_cache[i] for i in idx])
        latency = np.array([o.latency_s for o in obs])
        fail = np.array([float(o.status) for o in obs])
        return x, latency, fail

    def predict_thetas(self, history: TuningHistory, query_id: str,
                       thetas: np.ndarray) -> list[Prediction]:
        ctx_x, ctx_lat, ctx_fail = self._context_arrays(history, query_id)
        x_targets = self.encode_values([(query_id, t) for t in thetas])
        return npmod.predict(self.store, self.pred_cfg, ctx_x, ctx_lat, ctx_fail,
                             x_targets, self.rng)


def bo_iteration(query_id: str, history: TuningHistory, model: SurrogateModel,
                 engine, rng: np.random.Generator, ccfg: CandidateConfig,
                 iteration: int, timestamp: int) -> tuple[Observation, dict]:
    """One optimize-evaluate-record cycle for a query.

    Engine failures surface as status-1 observations, never exceptions.
    Returns the appended observation and the prediction-vs-actual record.
    """
    best = history.best_for(query_id)
    best_theta = np.array(best.theta) if best is not None else None
    f_star = math.log(best.latency_s) if best is not None else None
    candidates = generate_candidates(model.space, rng, best_theta, ccfg)
    predictions = model.predict_thetas(history, query_id, candidates)
    idx, _ = select_candidate(candidates, predictions, f_star)
    theta = candidates[idx]
    result = engine.execute(query_id, model.space.denormalize(theta))
    obs = Observation(query_id=query_id, theta=tuple(float(t) for t in theta),
                      latency_s=result.latency_s, status=result.status,
                      iteration=iteration, source=SOURCE_BO, timestamp=timestamp)
    history.append(obs)
    record = {"query_id": query_id, "iteration": iteration,
              "predicted_latency_s": float(math.exp(predictions[idx].perf_mean)),
              "actual_latency_s": float(result.latency_s),
              "status": int(result.status)}
    return obs, record


@dataclass
class TunerConfig:
    warm_samples_per_query: int = 20
    particles: int = ws.DEFAULT_PARTICLES
    pso_inertia: float = ws.DEFAULT_INERTIA
    pso_local: float = ws.DEFAULT_LOCAL_PULL
    pso_global: float = ws.DEFAULT_GLOBAL_PULL
    candidates: CandidateConfig = field(default_factory=CandidateConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    correlation_permutations: int = 2000
    correlation_eval_points: int = 16
    correlation_background: int = 128
    correlation_epsilon_fraction: float = 0.01


@dataclass
class TuningResult:
    history: TuningHistory
    best: dict[str, Observation | None]
    correlation: CorrelationMatrix
    predictions: list[dict]
    model: SurrogateModel
    fit_losses: list[list[float]]


def warm_start_query(query_id: str, engine, space: KnobSpace, cfg: TunerConfig,
                     rng: np.random.Generator, history: TuningHistory,
                     timings: list[NodeTiming], next_timestamp) -> None:
    """Collect the query's initial samples, recording node timings on success."""
    ops = engine.plan(query_id).node_types()

    def evaluate(theta):
        result, node_seconds = engine.execute_analyze(query_id,
                                                      space.denormalize(theta))
        if result.status == 0 and node_seconds is not None:
            for op, seconds in zip(ops, node_seconds):
                timings.append(NodeTiming(op, theta.copy(), float(seconds)))
        return result.latency_s, result.status

    swarm = ws.init_swarm(cfg.particles, space.n, rng, mu=cfg.pso_inertia,
                          c1=cfg.pso_local, c2=cfg.pso_global)
    samples = ws.run(query_id, cfg.warm_samples_per_query, evaluate, swarm)
    for i, sample in enumerate(samples):
        history.append(Observation(
            query_id=query_id, theta=tuple(float(t) for t in sample.theta),
            latency_s=sample.latency_s, status=sample.status, iteration=i,
            source=SOURCE_WARMSTART, timestamp=next_timestamp()))


def run(queries: list[str], space: KnobSpace, engine, budget: TuningBudget,
        seed: int, cfg: TunerConfig | None = None) -> TuningResult:
    """Full tuning session over a set of queries.

    Warm start feeds both the initial surrogate fit and the correlation
    matrix (computed once per session from warm-start timings); afterwards
    queries take round-robin optimization turns, with a surrogate refresh
    after each full pass.  Stops on the evaluation or wall-clock budget.
    """
    cfg = cfg or TunerConfig()
    if space.n != engine.knob_space.n:
        raise UsageError("knob space does not match the engine's")
    start = time.monotonic()
    clock = {"t": 0}

    def next_timestamp() -> int:
        clock["t"] += 1
        return clock["t"] - 1

    history = TuningHistory()
    timings: list[NodeTiming] = []
    for qi, query_id in enumerate(queries):
        warm_rng = np.random.default_rng((seed, 2, qi))
        warm_start_query(query_id, engine, space, cfg, warm_rng, history,
                         timings, next_timestamp)

    node_types = sorted({op for qid in queries
                         for op in engine.plan(qid).node_types()})
    corr_rng = np.random.default_rng((seed, 3))
    correlation, corr_report = identify_correlations(
        timings, node_types, space.names, corr_rng,
        n_permutations=cfg.correlation_permutations,
        eval_points=cfg.correlation_eval_points,
        background_size=cfg.correlation_background,
        epsilon_fraction=cfg.correlation_epsilon_fraction)

    plans = {qid: engine.plan(qid) for qid in queries}
    model = SurrogateModel(plans, space, seed, cfg.model, correlation=correlation)
    fit_losses = [model.fit(history, cfg.model.initial_fit_steps)]

    predictions: list[dict] = []
    bo_rng = np.random.default_rng((seed, 4))
    bo_evals = 0
    iteration_of = {qid: 0 for qid in queries}

    def exhausted() -> bool:
        if budget.max_evaluations is not None and bo_evals >= budget.max_evaluations:
            return True
        if budget.max_duration_s is not None and \
                time.monotonic() - start >= budget.max_duration_s:
            return True
        return False

    while not exhausted():
        progressed = False
        for query_id in queries:
            if exhausted():
                break
            _, record = bo_iteration(query_id, history, model, engine, bo_rng,
                                     cfg.candidates, iteration_of[query_id],
                                     next_timestamp())
            predictions.append(record)
            iteration_of[query_id] += 1
            bo_evals += 1
            progressed = True
        if not progressed:
            break
        if not exhausted():
            fit_losses.append(model.fit(history, cfg.model.refresh_fit_steps))

    best = {qid: history.best_for(qid) for qid in queries}
    for qid, obs in best.items():
        if obs is None:
            logger.warning("query %s: no successful evaluation within budget", qid)
    return TuningResult(history=history, best=best, correlation=correlation,
                        predictions=predictions, model=model,
                        fit_losses=fit_losses)
