"""Dual-task neural-process predictor for latency and failure probability.

Two data abstractors encode (encoding, outcome) pairs per task: one for
latency regression over successfully executed observations, one for failure
classification over every observation.  Deterministic per-target profiles come
from cross-attention of the target encoding over the context encodings; the
uncertainty path pools per-pair vectors into a shared latent z plus one
task-specific latent per task.  A gating step lets each task's profiles borrow
from the other before decoding.  Training maximizes a variational bound with
reparameterized Monte-Carlo sampling over the latents.

Latency targets are log-transformed and standardized with context statistics;
failed observations never contribute a regression pair (only a classification
pair), and their sentinel latency stays out of the regression path entirely.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Matrix, ParamStore, Tape
from .errors import UsageError

logger = logging.getLogger("querytuner.predictor")

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PredictorConfig:
    x_dim: int
    r_dim: int = 32
    u_dim: int = 32
    z_dim: int = 32
    h_dim: int = 32
    hidden: int = 32
    mc_samples: int = 4
    sigma_floor: float = 1e-3


@dataclass
class Standardizer:
    """Affine map for log-latencies, fitted on context statistics."""

    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, log_latencies: np.ndarray) -> "Standardizer":
        vals = np.asarray(log_latencies, dtype=np.float64)
        if vals.size == 0:
            return cls()
        if vals.size == 1:
            return cls(mean=float(vals[0]), std=1.0)
        std = float(vals.std())
        return cls(mean=float(vals.mean()), std=std if std > 1e-12 else 1.0)

    def encode(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def decode_mean(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.std + self.mean

    def decode_std(self, s: np.ndarray) -> np.ndarray:
        return np.asarray(s, dtype=np.float64) * self.std


@dataclass
class LatentGaussian:
    mu: Matrix     # (1 x dim)
    sigma: Matrix  # (1 x dim), strictly positive


@dataclass
class Prediction:
    perf_mean: float  # log-latency
    perf_std: float
    fail_prob: float


@dataclass
class TaskPairs:
    x: Matrix        # (m x x_dim)
    y: Matrix        # (m x 1) constant target column
    y_np: np.ndarray


@dataclass
class ContextSet:
    """Per-task context views of one observation set.

    ``perf`` holds only successfully executed pairs and is None when every
    observation failed; ``rel`` always holds all pairs.
    """

    perf: TaskPairs | None
    rel: TaskPairs
    x_all: Matrix
    success_idx: np.ndarray


def build_context(tape: Tape, x: Matrix, latency_s: np.ndarray,
                  fail: np.ndarray, stats: Standardizer) -> ContextSet:
    latency_s = np.asarray(latency_s, dtype=np.float64)
    fail = np.asarray(fail, dtype=np.float64)
    if x.rows != latency_s.size or x.rows != fail.size:
        raise UsageError("context arrays are misaligned")
    success = np.flatnonzero(fail == 0)
    perf = None
    if success.size:
        y_f = stats.encode(np.log(latency_s[success])).reshape(-1, 1)
        perf = TaskPairs(dc.take_rows(x, success), tape.constant(y_f),
                         y_f.ravel())
    y_g = fail.reshape(-1, 1)
    rel = TaskPairs(x, tape.constant(y_g), fail)
    return ContextSet(perf=perf, rel=rel, x_all=x, success_idx=success)


def init_predictor_params(store: ParamStore, cfg: PredictorConfig,
                          rng: np.random.Generator) -> None:
    for task in ("f", "g"):
        dc.init_mlp(store, f"abs_{task}_det", [cfg.x_dim + 1, cfg.hidden, cfg.r_dim], rng)
        dc.init_mlp(store, f"abs_{task}_lat", [cfg.x_dim + 1, cfg.hidden, cfg.u_dim], rng)
    store.create("empty_rf", 1, cfg.r_dim, rng)
    store.create("empty_uf", 1, cfg.u_dim, rng)
    dc.init_linear(store, "z_trunk", cfg.u_dim, cfg.hidden, rng)
    dc.init_linear(store, "z_mu", cfg.hidden, cfg.z_dim, rng)
    dc.init_linear(store, "z_sigma", cfg.hidden, cfg.z_dim, rng)
    for task in ("f", "g"):
        dc.init_linear(store, f"h_{task}_trunk", cfg.u_dim + cfg.z_dim, cfg.hidden, rng)
        dc.init_linear(store, f"h_{task}_mu", cfg.hidden, cfg.h_dim, rng)
        dc.init_linear(store, f"h_{task}_sigma", cfg.hidden, cfg.h_dim, rng)
    for name, dim in (("rf", cfg.r_dim), ("rg", cfg.r_dim),
                      ("hf", cfg.h_dim), ("hg", cfg.h_dim)):
        src = cfg.r_dim if name in ("rf", "rg") else cfg.z_dim
        dc.init_linear(store, f"gate_{name}.t", src, dim, rng)
        dc.init_linear(store, f"gate_{name}.s", src, dim, rng)
    dec_in_f = cfg.x_dim + cfg.r_dim + cfg.h_dim
    dc.init_mlp(store, "dec_f_trunk", [dec_in_f, cfg.hidden, cfg.hidden], rng)
    dc.init_linear(store, "dec_f_mu", cfg.hidden, 1, rng)
    dc.init_linear(store, "dec_f_sigma", cfg.hidden, 1, rng)
    dc.init_mlp(store, "dec_g_trunk", [dec_in_f, cfg.hidden, cfg.hidden], rng)
    dc.init_linear(store, "dec_g_logit", cfg.hidden, 1, rng)


def abstract_context(tape: Tape, store: ParamStore, cfg: PredictorConfig,
                     task: str, pairs: TaskPairs) -> tuple[Matrix, Matrix]:
    """Per-pair deterministic and uncertainty vectors for one task."""
    inp = dc.concat_cols([pairs.x, pairs.y])
    r_i = dc.mlp(tape, store, f"abs_{task}_det", inp, depth=2)
    u_i = dc.mlp(tape, store, f"abs_{task}_lat", inp, depth=2)
    return r_i, u_i


def aggregate_deterministic(x_targets: Matrix, x_context: Matrix,
                            r_context: Matrix) -> tuple[Matrix, np.ndarray]:
    """Attend each target over context pairs; values are the r_i vectors.

    Plain scaled dot-product scores on the raw encodings keep the guarantee
    that a single context pair is returned unchanged and that a target equal
    to one context point puts its top weight there.
    """
    scale = 1.0 / math.sqrt(x_targets.cols)
    scores = dc.scale(dc.matmul(x_targets, dc.transpose(x_context)), scale)
    weights = dc.softmax_rows(scores)
    return dc.matmul(weights, r_context), weights.value.copy()


def _gaussian_head(tape: Tape, store: ParamStore, cfg: PredictorConfig,
                   prefix: str, pooled: Matrix) -> LatentGaussian:
    hidden = dc.relu(dc.linear(tape, store, f"{prefix}_trunk", pooled))
    mu = dc.linear(tape, store, f"{prefix}_mu", hidden)
    raw = dc.linear(tape, store, f"{prefix}_sigma", hidden)
    floor = tape.constant(np.full((1, raw.cols), cfg.sigma_floor))
    return LatentGaussian(mu=mu, sigma=dc.add(dc.softplus(raw), floor))


def infer_z(tape: Tape, store: ParamStore, cfg: PredictorConfig,
            u_rows: Matrix) -> LatentGaussian:
    """Cross-task latent from the mean-pooled uncertainty vectors of both tasks."""
    return _gaussian_head(tape, store, cfg, "z", dc.mean_rows(u_rows))


def infer_h(tape: Tape, store: ParamStore, cfg: PredictorConfig, task: str,
            u_rows: Matrix, z_sample: Matrix) -> LatentGaussian:
    """Task latent from the task's pooled uncertainty vectors and a z draw."""
    pooled = dc.concat_cols([dc.mean_rows(u_rows), z_sample])
    return _gaussian_head(tape, store, cfg, f"h_{task}", pooled)


def sample_gaussian(tape: Tape, dist: LatentGaussian, eps: np.ndarray) -> Matrix:
    """Reparameterized draw mu + sigma * eps with eps supplied by the caller."""
    return dc.add(dist.mu, dc.mul(dist.sigma, tape.constant(eps)))


def kl_diag(tape: Tape, q: LatentGaussian, p: LatentGaussian) -> Matrix:
    """KL(q || p) for diagonal Gaussians, summed over dimensions."""
    var_ratio = dc.div(dc.mul(q.sigma, q.sigma), dc.mul(p.sigma, p.sigma))
    diff = dc.sub(q.mu, p.mu)
    mean_term = dc.div(dc.mul(diff, diff), dc.mul(p.sigma, p.sigma))
    logs = dc.sub(dc.log(p.sigma), dc.log(q.sigma))
    half = tape.constant(np.full(q.mu.shape, 0.5))
    per_dim = dc.sub(dc.add(logs, dc.scale(dc.add(var_ratio, mean_term), 0.5)), half)
    return dc.sum_all(per_dim)


def gate(tape: Tape, store: ParamStore, prefix: str, p_o: Matrix,
         p_c: Matrix) -> Matrix:
    """Complement profile p_o with gated information from p_c."""
    t = dc.tanh(dc.linear(tape, store, f"{prefix}.t", p_c))
    s = dc.sigmoid(dc.linear(tape, store, f"{prefix}.s", p_c))
    return dc.add(p_o, dc.mul(t, s))


def decode_perf(tape: Tape, store: ParamStore, cfg: PredictorConfig, x: Matrix,
                r: Matrix, h: Matrix) -> tuple[Matrix, Matrix]:
    """Regression head: per-target mean and strictly positive spread."""
    inp = dc.concat_cols([x, r, dc.repeat_rows(h, x.rows)])
    trunk = dc.relu(dc.mlp(tape, store, "dec_f_trunk", inp, depth=2))
    mu = dc.linear(tape, store, "dec_f_mu", trunk)
    raw = dc.linear(tape, store, "dec_f_sigma", trunk)
    floor = tape.constant(np.full((x.rows, 1), cfg.sigma_floor))
    return mu, dc.add(dc.softplus(raw), floor)


def decode_rel(tape: Tape, store: ParamStore, cfg: PredictorConfig, x: Matrix,
               r: Matrix, h: Matrix) -> tuple[Matrix, Matrix]:
    """Classification head: failure probability via a sigmoid, plus the logit."""
    inp = dc.concat_cols([x, r, dc.repeat_rows(h, x.rows)])
    trunk = dc.relu(dc.mlp(tape, store, "dec_g_trunk", inp, depth=2))
    logit = dc.linear(tape, store, "dec_g_logit", trunk)
    return dc.sigmoid(logit), logit


def gaussian_loglik(tape: Tape, y: Matrix, mu: Matrix, sigma: Matrix) -> Matrix:
    """Sum of independent Gaussian log-densities."""
    diff = dc.sub(y, mu)
    quad = dc.div(dc.mul(diff, diff), dc.scale(dc.mul(sigma, sigma), 2.0))
    per = dc.add(dc.log(sigma), quad)
    const = tape.constant([[-0.5 * LOG_2PI * y.rows]])
    return dc.add(dc.scale(dc.sum_all(per), -1.0), const)


def bernoulli_loglik(tape: Tape, y: Matrix, logit: Matrix) -> Matrix:
    """Sum of Bernoulli log-likelihoods, computed stably from logits."""
    comp = tape.constant(1.0 - y.value)
    per = dc.add(dc.mul(y, dc.softplus(dc.scale(logit, -1.0))),
                 dc.mul(comp, dc.softplus(logit)))
    return dc.scale(dc.sum_all(per), -1.0)


def _u_rows_f(tape: Tape, store: ParamStore, u_f: Matrix | None) -> Matrix:
    if u_f is not None:
        return u_f
    return tape.parameter(store, "empty_uf")


def _r_f_targets(tape: Tape, store: ParamStore, ctx: ContextSet,
                 r_f_i: Matrix | None, x_targets: Matrix) -> Matrix:
    if ctx.perf is None or r_f_i is None:
        return dc.repeat_rows(tape.parameter(store, "empty_rf"), x_targets.rows)
    r, _ = aggregate_deterministic(x_targets, ctx.perf.x, r_f_i)
    return r


def elbo_loss(tape: Tape, store: ParamStore, cfg: PredictorConfig,
              C: ContextSet, D: ContextSet, rng: np.random.Generator,
              n_samples: int | None = None) -> Matrix:
    """Negative variational bound over both tasks.

    Monte-Carlo over the latents uses reparameterized draws from the
    target-conditioned posteriors; the KL terms pull those posteriors toward
    their context-conditioned counterparts.
    """
    if D.rel.x.rows == 0:
        raise UsageError("target set is empty")
    S = cfg.mc_samples if n_samples is None else n_samples

    r_f_C, u_f_C = (abstract_context(tape, store, cfg, "f", C.perf)
                    if C.perf is not None else (None, None))
    r_g_C, u_g_C = abstract_context(tape, store, cfg, "g", C.rel)
    _, u_f_D = (abstract_context(tape, store, cfg, "f", D.perf)
                if D.perf is not None else (None, None))
    _, u_g_D = abstract_context(tape, store, cfg, "g", D.rel)

    u_f_C_rows = _u_rows_f(tape, store, u_f_C)
    u_f_D_rows = _u_rows_f(tape, store, u_f_D)
    q_z_C = infer_z(tape, store, cfg, dc.concat_rows([u_f_C_rows, u_g_C]))
    q_z_D = infer_z(tape, store, cfg, dc.concat_rows([u_f_D_rows, u_g_D]))
    kl_z = kl_diag(tape, q_z_D, q_z_C)

    x_targets = D.x_all
    r_f = _r_f_targets(tape, store, C, r_f_C, x_targets)
    r_g, _ = aggregate_deterministic(x_targets, C.rel.x, r_g_C)
    r_f_prime = gate(tape, store, "gate_rf", r_f, r_g)
    r_g_prime = gate(tape, store, "gate_rg", r_g, r_f)

    succ = D.success_idx
    total: Matrix | None = None
    for _ in range(S):
        z = sample_gaussian(tape, q_z_D, rng.standard_normal((1, cfg.z_dim)))
        q_h_f_D = infer_h(tape, store, cfg, "f", u_f_D_rows, z)
        q_h_f_C = infer_h(tape, store, cfg, "f", u_f_C_rows, z)
        q_h_g_D = infer_h(tape, store, cfg, "g", u_g_D, z)
        q_h_g_C = infer_h(tape, store, cfg, "g", u_g_C, z)
        h_f = sample_gaussian(tape, q_h_f_D, rng.standard_normal((1, cfg.h_dim)))
        h_g = sample_gaussian(tape, q_h_g_D, rng.standard_normal((1, cfg.h_dim)))
        h_f_prime = gate(tape, store, "gate_hf", h_f, z)
        h_g_prime = gate(tape, store, "gate_hg", h_g, z)

        _, logit = decode_rel(tape, store, cfg, x_targets, r_g_prime, h_g_prime)
        term = bernoulli_loglik(tape, D.rel.y, logit)
        if succ.size and D.perf is not None:
            mu, sigma = decode_perf(tape, store, cfg,
                                    dc.take_rows(x_targets, succ),
                                    dc.take_rows(r_f_prime, succ), h_f_prime)
            term = dc.add(term, gaussian_loglik(tape, D.perf.y, mu, sigma))
        term = dc.sub(term, kl_diag(tape, q_h_f_D, q_h_f_C))
        term = dc.sub(term, kl_diag(tape, q_h_g_D, q_h_g_C))
        total = term if total is None else dc.add(total, term)

    elbo = dc.sub(dc.scale(total, 1.0 / S), kl_z)
    return dc.scale(elbo, -1.0)


def predict(store: ParamStore, cfg: PredictorConfig, context_x: np.ndarray,
            context_latency_s: np.ndarray, context_fail: np.ndarray,
            x_targets: np.ndarray, rng: np.random.Generator,
            n_samples: int | None = None,
            stats: Standardizer | None = None) -> list[Prediction]:
    """Monte-Carlo predictive distribution for a batch of target encodings.

    The predictive latency mean/std pool the per-draw Gaussians as a mixture
    (law of total variance); failure probabilities average across draws.
    Returned means/stds are in log-latency units.
    """
    context_fail = np.asarray(context_fail, dtype=np.float64)
    if context_x.shape[0] == 0:
        raise UsageError("prediction needs a nonempty context")
    S = cfg.mc_samples if n_samples is None else n_samples
    if stats is None:
        succ = context_fail == 0
        stats = Standardizer.fit(np.log(np.asarray(context_latency_s)[succ]))

    tape = Tape(record=False)
    ctx = build_context(tape, tape.constant(context_x), context_latency_s,
                        context_fail, stats)
    r_f_C, u_f_C = (abstract_context(tape, store, cfg, "f", ctx.perf)
                    if ctx.perf is not None else (None, None))
    r_g_C, u_g_C = abstract_context(tape, store, cfg, "g", ctx.rel)
    u_f_rows = _u_rows_f(tape, store, u_f_C)
    q_z = infer_z(tape, store, cfg, dc.concat_rows([u_f_rows, u_g_C]))

    x_D = tape.constant(np.asarray(x_targets, dtype=np.float64))
    r_f = _r_f_targets(tape, store, ctx, r_f_C, x_D)
    r_g, _ = aggregate_deterministic(x_D, ctx.rel.x, r_g_C)
    r_f_prime = gate(tape, store, "gate_rf", r_f, r_g)
    r_g_prime = gate(tape, store, "gate_rg", r_g, r_f)

    n_targets = x_D.rows
    means = np.empty((S, n_targets))
    stds = np.empty((S, n_targets))
    fails = np.empty((S, n_targets))
    for s in range(S):
        z = sample_gaussian(tape, q_z, rng.standard_normal((1, cfg.z_dim)))
        q_h_f = infer_h(tape, store, cfg, "f", u_f_rows, z)
        q_h_g = infer_h(tape, store, cfg, "g", u_g_C, z)
        h_f = sample_gaussian(tape, q_h_f, rng.standard_normal((1, cfg.h_dim)))
        h_g = sample_gaussian(tape, q_h_g, rng.standard_normal((1, cfg.h_dim)))
        h_f_prime = gate(tape, store, "gate_hf", h_f, z)
        h_g_prime = gate(tape, store, "gate_hg", h_g, z)
        mu, sigma = decode_perf(tape, store, cfg, x_D, r_f_prime, h_f_prime)
        prob, _ = decode_rel(tape, store, cfg, x_D, r_g_prime, h_g_prime)
        means[s] = mu.value.ravel()
        stds[s] = sigma.value.ravel()
        fails[s] = prob.value.ravel()

    mix_mean = means.mean(axis=0)
    mix_var = (stds ** 2 + means ** 2).mean(axis=0) - mix_mean ** 2
    mix_std = np.sqrt(np.maximum(mix_var, cfg.sigma_floor ** 2))
    out_mean = stats.decode_mean(mix_mean)
    out_std = stats.decode_std(mix_std)
    fail_prob = fails.mean(axis=0)
    return [Prediction(float(out_mean[i]), float(out_std[i]), float(fail_prob[i]))
            for i in range(n_targets)]


def fit(provider, store: ParamStore, cfg: PredictorConfig, epochs: int,
        rng: np.random.Generator, lr: float = dc.ADAM_LR) -> list[float]:
    """Optimize the bound; each epoch re-splits the provided data 50/50.

    ``provider(tape, rng)`` returns (x: Matrix, latency_s, fail) for the
    epoch's training points, re-encoded on the fresh tape so gradients reach
    upstream parameters.  Returns the per-epoch loss trajectory.
    """
    losses: list[float] = []
    for _ in range(epochs):
        tape = Tape()
        x, latency_s, fail = provider(tape, rng)
        m = x.rows
        if m < 4:
            logger.info("skipping training: %d observation(s), need at least 4", m)
            return losses
        perm = rng.permutation(m)
        c_idx, d_idx = np.sort(perm[:m // 2]), np.sort(perm[m // 2:])
        fail = np.asarray(fail, dtype=np.float64)
        latency_s = np.asarray(latency_s, dtype=np.float64)
        c_succ = c_idx[fail[c_idx] == 0]
        stats = Standardizer.fit(np.log(latency_s[c_succ])) if c_succ.size \
            else Standardizer()
        C = build_context(tape, dc.take_rows(x, c_idx), latency_s[c_idx],
                          fail[c_idx], stats)
        D = build_context(tape, dc.take_rows(x, d_idx), latency_s[d_idx],
                          fail[d_idx], stats)
        store.zero_grad()
        loss = elbo_loss(tape, store, cfg, C, D, rng)
        dc.backward(tape, loss, store)
        dc.adam_step(store, lr)
        losses.append(loss.item())
    return losses
