"""Joint knob/plan encoder.

Three attention blocks: self-attention over plan nodes (restricted to tree
adjacency, inputs carry the positional encoding), self-attention over knob
vectors (full, knobs have no inherent order), and a cross block where knob
embeddings attend over node embeddings under a relevance mask.  Averaging the
cross output over the knob sequence yields one fixed-width vector per
(plan, configuration) pair.

Masking is additive: irrelevant pairs get a -1e9 score sentinel before the
softmax, which drives their weights to exactly zero.  A row with every pair
masked falls back to uniform attention (scores forced to a constant) and logs
a warning instead of producing NaNs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Matrix, ParamStore, Tape
from .errors import ScenarioError, ShapeError
from .knobs import weighted_one_hot

logger = logging.getLogger("querytuner.encoder")

_fallback_warned: set[str] = set()


@dataclass
class EncoderConfig:
    plan_dim: int    # node feature width + positional width
    knob_dim: int    # number of knobs
    d: int = 32      # shared embedding width
    ffn_hidden: int = 64


@dataclass
class CorrelationMatrix:
    """Binary relevance of each knob to each plan node type."""

    node_types: list[str]
    knob_names: list[str]
    matrix: np.ndarray  # (node_types x knobs) of {0,1}

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.int64)
        if self.matrix.shape != (len(self.node_types), len(self.knob_names)):
            raise ShapeError(
                f"correlation matrix shape {self.matrix.shape} does not match "
                f"{len(self.node_types)} node types x {len(self.knob_names)} knobs")
        if not np.isin(self.matrix, (0, 1)).all():
            raise ScenarioError("correlation matrix entries must be 0 or 1")
        self._row = {t: i for i, t in enumerate(self.node_types)}

    @classmethod
    def all_ones(cls, node_types, knob_names) -> "CorrelationMatrix":
        return cls(list(node_types), list(knob_names),
                   np.ones((len(node_types), len(knob_names)), dtype=np.int64))

    def expand(self, ops_per_node) -> np.ndarray:
        """Knob x node boolean mask for one plan's node sequence."""
        cols = [self.matrix[self._row[op]] for op in ops_per_node]
        return np.stack(cols, axis=1).astype(bool)

    def to_dict(self) -> dict:
        return {"node_types": list(self.node_types),
                "knobs": list(self.knob_names),
                "matrix": self.matrix.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "CorrelationMatrix":
        for key in ("node_types", "knobs", "matrix"):
            if key not in payload:
                raise ScenarioError(f"correlation matrix: missing field {key!r}")
        return cls(list(payload["node_types"]), list(payload["knobs"]),
                   np.asarray(payload["matrix"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "CorrelationMatrix":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class AttentionOut:
    output: Matrix       # post residual + feed-forward
    attended: Matrix     # weights @ values, before residual/FFN
    weights: np.ndarray  # post-softmax attention weights (detached copy)


def init_attention(store: ParamStore, prefix: str, q_dim: int, kv_dim: int,
                   d: int, ffn_hidden: int, rng: np.random.Generator) -> None:
    store.create(f"{prefix}.wq", q_dim, d, rng)
    store.create(f"{prefix}.wk", kv_dim, d, rng)
    store.create(f"{prefix}.wv", kv_dim, d, rng)
    store.create(f"{prefix}.wr", q_dim, d, rng)  # residual projection
    dc.init_linear(store, f"{prefix}.ffn0", d, ffn_hidden, rng)
    dc.init_linear(store, f"{prefix}.ffn1", ffn_hidden, d, rng)


def _mask_terms(mask: np.ndarray, warn: str,
                scope: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Multiplicative keep factor and additive sentinel implementing the mask.

    All-masked rows get keep=0 and a sentinel confined to ``scope`` (the keys
    the row may legally see; defaults to the whole row), which makes every
    in-scope score equal and the softmax uniform over that scope.
    """
    keep = np.ones(mask.shape)
    extra = np.where(mask, 0.0, dc.MASK_SENTINEL)
    dead = ~mask.any(axis=1)
    if dead.any():
        if warn not in _fallback_warned:
            _fallback_warned.add(warn)
            logger.warning("%s: %d fully masked attention row(s), falling back "
                           "to uniform attention (warned once per block)",
                           warn, int(dead.sum()))
        keep[dead] = 0.0
        extra[dead] = 0.0 if scope is None else \
            np.where(scope[dead], 0.0, dc.MASK_SENTINEL)
    return keep, extra


def attention(tape: Tape, store: ParamStore, prefix: str, queries: Matrix,
              keys_values: Matrix, mask: np.ndarray | None, d: int,
              uniform_scope: np.ndarray | None = None) -> AttentionOut:
    """Scaled dot-product attention block with residual projection and FFN."""
    if mask is not None and mask.shape != (queries.rows, keys_values.rows):
        raise ShapeError(
            f"mask shape {mask.shape} does not match "
            f"{queries.rows} queries x {keys_values.rows} keys")
    q = dc.matmul(queries, tape.parameter(store, f"{prefix}.wq"))
    k = dc.matmul(keys_values, tape.parameter(store, f"{prefix}.wk"))
    v = dc.matmul(keys_values, tape.parameter(store, f"{prefix}.wv"))
    scores = dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / math.sqrt(d))
    if mask is not None:
        keep, extra = _mask_terms(mask, prefix, uniform_scope)
        scores = dc.add_const(dc.mul_const(scores, keep), extra)
    weights = dc.softmax_rows(scores)
    attended = dc.matmul(weights, v)
    resid = dc.add(dc.matmul(queries, tape.parameter(store, f"{prefix}.wr")), attended)
    hidden = dc.relu(dc.linear(tape, store, f"{prefix}.ffn0", resid))
    out = dc.add(resid, dc.linear(tape, store, f"{prefix}.ffn1", hidden))
    return AttentionOut(output=out, attended=attended, weights=weights.value.copy())


def init_encoder_params(store: ParamStore, cfg: EncoderConfig,
                        rng: np.random.Generator) -> None:
    init_attention(store, "plan_attn", cfg.plan_dim, cfg.plan_dim, cfg.d,
                   cfg.ffn_hidden, rng)
    dc.init_mlp(store, "plan_proj", [cfg.d, cfg.d, cfg.d], rng)
    init_attention(store, "knob_attn", cfg.knob_dim, cfg.knob_dim, cfg.d,
                   cfg.ffn_hidden, rng)
    dc.init_mlp(store, "knob_proj", [cfg.d, cfg.d, cfg.d], rng)
    init_attention(store, "cross_attn", cfg.d, cfg.d, cfg.d, cfg.ffn_hidden, rng)


def encode_plan(tape: Tape, store: ParamStore, cfg: EncoderConfig,
                node_inputs: np.ndarray, adjacency: np.ndarray) -> Matrix:
    """Embed plan nodes: adjacency-masked self-attention, then projection to d.

    ``node_inputs`` rows are feature vectors already concatenated with their
    positional encodings.
    """
    x = tape.constant(node_inputs)
    block = attention(tape, store, "plan_attn", x, x, adjacency, cfg.d)
    return dc.mlp(tape, store, "plan_proj", block.output, depth=2)


def encode_knobs(tape: Tape, store: ParamStore, cfg: EncoderConfig,
                 theta: np.ndarray) -> Matrix:
    """Embed knob values: full self-attention over weighted one-hot rows."""
    x = tape.constant(weighted_one_hot(theta))
    block = attention(tape, store, "knob_attn", x, x, None, cfg.d)
    return dc.mlp(tape, store, "knob_proj", block.output, depth=2)


def cross_encode(tape: Tape, store: ParamStore, cfg: EncoderConfig,
                 knob_seq: Matrix, node_seq: Matrix,
                 mask: np.ndarray | None) -> tuple[Matrix, np.ndarray]:
    """Knobs attend over plan nodes under the relevance mask; average-pool.

    Returns the pooled joint encoding (1 x d) and the post-softmax
    cross-attention weights for inspection.
    """
    block = attention(tape, store, "cross_attn", knob_seq, node_seq, mask, cfg.d)
    return dc.mean_rows(block.output), block.weights


@dataclass
class PreparedPlan:
    """Plan tensors precomputed once per query: inputs, adjacency, ops."""

    query_id: str
    node_inputs: np.ndarray
    adjacency: np.ndarray
    ops: list[str] = field(default_factory=list)


def encode(tape: Tape, store: ParamStore, cfg: EncoderConfig, prepared: PreparedPlan,
           theta: np.ndarray, corr: CorrelationMatrix | None,
           node_seq: Matrix | None = None) -> Matrix:
    """Full forward pass to the pooled joint encoding.

    ``node_seq`` lets callers reuse the plan embedding across configurations
    of the same query on the same tape.
    """
    if node_seq is None:
        node_seq = encode_plan(tape, store, cfg, prepared.node_inputs,
                               prepared.adjacency)
    knob_seq = encode_knobs(tape, store, cfg, theta)
    mask = corr.expand(prepared.ops) if corr is not None else None
    joint, _ = cross_encode(tape, store, cfg, knob_seq, node_seq, mask)
    return joint


_batch_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _batch_constants(n_items: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Cached block-diagonal self-attention mask and mean-pooling matrix."""
    key = (n_items, n)
    if key not in _batch_cache:
        mask = np.zeros((n_items * n, n_items * n), dtype=bool)
        pool = np.zeros((n_items, n_items * n))
        for b in range(n_items):
            mask[b * n:(b + 1) * n, b * n:(b + 1) * n] = True
            pool[b, b * n:(b + 1) * n] = 1.0 / n
        _batch_cache[key] = (mask, pool)
    return _batch_cache[key]


def encode_batch(tape: Tape, store: ParamStore, cfg: EncoderConfig,
                 prepared_list: list[PreparedPlan], thetas: np.ndarray,
                 corr: CorrelationMatrix | None) -> Matrix:
    """Joint encodings for aligned (plan, configuration) pairs as one stacked
    forward pass, one output row per pair.

    All pairs are concatenated along the sequence axis with block masks
    keeping attention inside each pair (the additive sentinel zeroes any
    cross-pair weight exactly), so the result matches per-pair encode() up
    to summation order.  This is the hot path for training minibatches and
    candidate scoring.
    """
    n_items = len(prepared_list)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if thetas.shape[0] != n_items:
        raise ShapeError("one configuration row per prepared plan is required")
    n = cfg.knob_dim

    # plan path: unique plans stacked with a block-diagonal adjacency
    unique: dict[str, PreparedPlan] = {}
    for prepared in prepared_list:
        unique.setdefault(prepared.query_id, prepared)
    sizes = {qid: p.node_inputs.shape[0] for qid, p in unique.items()}
    offsets: dict[str, int] = {}
    total_nodes = 0
    for qid, size in sizes.items():
        offsets[qid] = total_nodes
        total_nodes += size
    plan_inputs = np.vstack([p.node_inputs for p in unique.values()])
    plan_adj = np.zeros((total_nodes, total_nodes), dtype=bool)
    for qid, p in unique.items():
        o, s = offsets[qid], sizes[qid]
        plan_adj[o:o + s, o:o + s] = p.adjacency
    node_seq = encode_plan(tape, store, cfg, plan_inputs, plan_adj)

    # knob path: stacked weighted one-hot blocks with block-diagonal attention
    knob_inputs = np.zeros((n_items * n, n))
    for b in range(n_items):
        np.fill_diagonal(knob_inputs[b * n:(b + 1) * n], thetas[b])
    knob_mask, pool = _batch_constants(n_items, n)
    x = tape.constant(knob_inputs)
    block = attention(tape, store, "knob_attn", x, x, knob_mask, cfg.d)
    knob_seq = dc.mlp(tape, store, "knob_proj", block.output, depth=2)

    # cross path: each pair's knobs see only its own plan's nodes
    cross_mask = np.zeros((n_items * n, total_nodes), dtype=bool)
    scope = np.zeros_like(cross_mask)
    for b, prepared in enumerate(prepared_list):
        o, s = offsets[prepared.query_id], sizes[prepared.query_id]
        rows = slice(b * n, (b + 1) * n)
        scope[rows, o:o + s] = True
        cross_mask[rows, o:o + s] = (corr.expand(prepared.ops)
                                     if corr is not None else True)
    cross = attention(tape, store, "cross_attn", knob_seq, node_seq,
                      cross_mask, cfg.d, uniform_scope=scope)
    return dc.matmul(tape.constant(pool), cross.output)
