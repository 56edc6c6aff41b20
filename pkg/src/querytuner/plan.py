"""Query-plan data model, node featurization, and tree positional encodings.

Plans arrive pre-structured (from the simulated engine or a JSON Lines corpus
file); there is no SQL parsing here.  Featurization is vocabulary-driven and
total over the corpus the vocabulary was built from: one-hot slots for
operators, tables, columns, aggregates, fixed-width predicate triplet slots,
and min-max normalized cardinality/cost estimates, all zero-padded so every
node encoding in a corpus has the same width.

The positional encoding concatenates a normalized breadth-first depth with
coordinates of the tree Laplacian's eigenvectors for the k smallest nonzero
eigenvalues.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import FeaturizationError, ScenarioError

COMPARISON_OPS = ("lt", "le", "eq", "ge", "gt", "ne")


@dataclass(frozen=True)
class PlanNode:
    node_id: int
    op: str
    tables: tuple[str, ...] = ()
    columns: tuple[str, ...] = ()
    predicates: tuple[tuple[str, str, float], ...] = ()
    join: tuple[str, str] | None = None
    aggs: tuple[str, ...] = ()
    card_est: float = 0.0
    cost_est: float = 0.0
    children: tuple[int, ...] = ()


@dataclass
class QueryPlan:
    """Rooted operator tree; every non-root node has exactly one parent."""

    query_id: str
    nodes: list[PlanNode]
    root: int

    def __post_init__(self):
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"plan {self.query_id}: duplicate node ids")
        self._index = {nid: pos for pos, nid in enumerate(ids)}
        if self.root not in self._index:
            raise ScenarioError(f"plan {self.query_id}: root {self.root} not a node")
        parents: dict[int, int] = {}
        for n in self.nodes:
            for c in n.children:
                if c not in self._index:
                    raise ScenarioError(
                        f"plan {self.query_id}: node {n.node_id} references missing child {c}")
                if c in parents:
                    raise ScenarioError(
                        f"plan {self.query_id}: node {c} has more than one parent")
                parents[c] = n.node_id
        if self.root in parents:
            raise ScenarioError(f"plan {self.query_id}: root has a parent")
        for n in self.nodes:
            if n.node_id != self.root and n.node_id not in parents:
                raise ScenarioError(
                    f"plan {self.query_id}: node {n.node_id} is disconnected")

    def __len__(self) -> int:
        return len(self.nodes)

    def position(self, node_id: int) -> int:
        return self._index[node_id]

    def node_types(self) -> list[str]:
        return [n.op for n in self.nodes]


@dataclass
class Vocabulary:
    """Feature id spaces shared by every plan in one corpus."""

    ops: tuple[str, ...]
    tables: tuple[str, ...]
    columns: tuple[str, ...]
    aggs: tuple[str, ...]
    max_predicates: int
    card_range: tuple[float, float]
    cost_range: tuple[float, float]
    cmps: tuple[str, ...] = COMPARISON_OPS
    _lookup: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._lookup = {
            "op": {v: i for i, v in enumerate(self.ops)},
            "table": {v: i for i, v in enumerate(self.tables)},
            "column": {v: i for i, v in enumerate(self.columns)},
            "agg": {v: i for i, v in enumerate(self.aggs)},
            "cmp": {v: i for i, v in enumerate(self.cmps)},
        }

    @classmethod
    def from_plans(cls, plans) -> "Vocabulary":
        ops, tables, columns, aggs = set(), set(), set(), set()
        max_preds = 0
        cards, costs = [], []
        for plan in plans:
            for n in plan.nodes:
                ops.add(n.op)
                tables.update(n.tables)
                columns.update(n.columns)
                aggs.update(n.aggs)
                max_preds = max(max_preds, len(n.predicates))
                for col, cmp_op, _ in n.predicates:
                    columns.add(col)
                    if cmp_op not in COMPARISON_OPS:
                        raise ScenarioError(f"unknown comparison operator {cmp_op!r}")
                if n.join is not None:
                    columns.update(n.join)
                cards.append(n.card_est)
                costs.append(n.cost_est)
        return cls(
            ops=tuple(sorted(ops)),
            tables=tuple(sorted(tables)),
            columns=tuple(sorted(columns)),
            aggs=tuple(sorted(aggs)),
            max_predicates=max_preds,
            card_range=(min(cards), max(cards)) if cards else (0.0, 1.0),
            cost_range=(min(costs), max(costs)) if costs else (0.0, 1.0),
        )

    def idx(self, kind: str, value: str) -> int:
        try:
            return self._lookup[kind][value]
        except KeyError:
            raise FeaturizationError(f"unknown {kind} id {value!r}") from None

    @property
    def predicate_width(self) -> int:
        return len(self.columns) + len(self.cmps) + 1

    @property
    def feature_dim(self) -> int:
        return (len(self.ops) + len(self.tables) + len(self.columns)
                + self.max_predicates * self.predicate_width
                + 2 * len(self.columns) + len(self.aggs) + 2)


def _minmax(v: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.0
    return min(max((v - lo) / (hi - lo), 0.0), 1.0)


def featurize(plan: QueryPlan, vocab: Vocabulary) -> np.ndarray:
    """One fixed-width feature row per node, absent slots zero-padded."""
    out = np.zeros((len(plan), vocab.feature_dim))
    n_cols = len(vocab.columns)
    for pos, node in enumerate(plan.nodes):
        row = out[pos]
        off = 0
        row[off + vocab.idx("op", node.op)] = 1.0
        off += len(vocab.ops)
        for t in node.tables:
            row[off + vocab.idx("table", t)] = 1.0
        off += len(vocab.tables)
        for c in node.columns:
            row[off + vocab.idx("column", c)] = 1.0
        off += n_cols
        if len(node.predicates) > vocab.max_predicates:
            raise FeaturizationError(
                f"node {node.node_id}: {len(node.predicates)} predicates exceed "
                f"the corpus maximum {vocab.max_predicates}")
        for col, cmp_op, value in node.predicates:
            row[off + vocab.idx("column", col)] = 1.0
            row[off + n_cols + vocab.idx("cmp", cmp_op)] = 1.0
            row[off + n_cols + len(vocab.cmps)] = float(value)
            off += vocab.predicate_width
        off += (vocab.max_predicates - len(node.predicates)) * vocab.predicate_width
        if node.join is not None:
            row[off + vocab.idx("column", node.join[0])] = 1.0
            row[off + n_cols + vocab.idx("column", node.join[1])] = 1.0
        off += 2 * n_cols
        for a in node.aggs:
            row[off + vocab.idx("agg", a)] = 1.0
        off += len(vocab.aggs)
        row[off] = _minmax(node.card_est, *vocab.card_range)
        row[off + 1] = _minmax(node.cost_est, *vocab.cost_range)
    return out


def bfs_depths(plan: QueryPlan) -> np.ndarray:
    """Per-node depth from the root, normalized by the maximum depth."""
    depth = np.zeros(len(plan))
    queue = deque([(plan.root, 0)])
    seen = {plan.root}
    while queue:
        nid, d = queue.popleft()
        depth[plan.position(nid)] = d
        for c in plan.nodes[plan.position(nid)].children:
            if c not in seen:
                seen.add(c)
                queue.append((c, d + 1))
    peak = depth.max()
    return depth / peak if peak > 0 else depth


def laplacian(plan: QueryPlan) -> np.ndarray:
    """Unnormalized Laplacian L = D - A of the undirected plan tree."""
    n = len(plan)
    lap = np.zeros((n, n))
    for node in plan.nodes:
        i = plan.position(node.node_id)
        for c in node.children:
            j = plan.position(c)
            lap[i, j] -= 1.0
            lap[j, i] -= 1.0
            lap[i, i] += 1.0
            lap[j, j] += 1.0
    return lap


def spectral_encoding(plan: QueryPlan, k: int) -> np.ndarray:
    """Coordinates of the k smallest-nonzero-eigenvalue Laplacian eigenvectors.

    Eigenvectors are unit norm with a deterministic sign (first coordinate
    with magnitude above 1e-12 made positive).  When the tree has fewer than
    k nonzero eigenvalues the remaining coordinates stay zero.
    """
    n = len(plan)
    out = np.zeros((n, k))
    if n == 1:
        return out
    eigvals, eigvecs = np.linalg.eigh(laplacian(plan))
    taken = 0
    for col in range(n):
        if taken == k:
            break
        if eigvals[col] <= 1e-9:
            continue
        vec = eigvecs[:, col]
        for coord in vec:
            if abs(coord) > 1e-12:
                if coord < 0:
                    vec = -vec
                break
        out[:, taken] = vec
        taken += 1
    return out


def hspe(plan: QueryPlan, k: int) -> np.ndarray:
    """Positional encoding: [normalized BFS depth || spectral coordinates]."""
    return np.hstack([bfs_depths(plan).reshape(-1, 1), spectral_encoding(plan, k)])


def adjacency_mask(plan: QueryPlan) -> np.ndarray:
    """Boolean node x node matrix: true iff tree-adjacent or identical."""
    n = len(plan)
    mask = np.eye(n, dtype=bool)
    for node in plan.nodes:
        i = plan.position(node.node_id)
        for c in node.children:
            j = plan.position(c)
            mask[i, j] = True
            mask[j, i] = True
    return mask


_NODE_KEYS = ("id", "op", "tables", "columns", "predicates", "join",
              "aggs", "card_est", "cost_est", "children")


def plan_from_dict(payload: dict, where: str = "plan") -> QueryPlan:
    for key in ("query_id", "nodes", "root"):
        if key not in payload:
            raise ScenarioError(f"{where}: missing field {key!r}")
    nodes = []
    for i, entry in enumerate(payload["nodes"]):
        path = f"{where}.nodes[{i}]"
        for key in _NODE_KEYS:
            if key not in entry:
                raise ScenarioError(f"{path}: missing field {key!r}")
        join = entry["join"]
        nodes.append(PlanNode(
            node_id=int(entry["id"]),
            op=str(entry["op"]),
            tables=tuple(entry["tables"]),
            columns=tuple(entry["columns"]),
            predicates=tuple((str(p[0]), str(p[1]), float(p[2]))
                             for p in entry["predicates"]),
            join=None if join is None else (str(join[0]), str(join[1])),
            aggs=tuple(entry["aggs"]),
            card_est=float(entry["card_est"]),
            cost_est=float(entry["cost_est"]),
            children=tuple(int(c) for c in entry["children"]),
        ))
    return QueryPlan(query_id=str(payload["query_id"]), nodes=nodes,
                     root=int(payload["root"]))


def plan_to_dict(plan: QueryPlan) -> dict:
    return {
        "query_id": plan.query_id,
        "nodes": [{
            "id": n.node_id,
            "op": n.op,
            "tables": list(n.tables),
            "columns": list(n.columns),
            "predicates": [[c, o, v] for c, o, v in n.predicates],
            "join": list(n.join) if n.join is not None else None,
            "aggs": list(n.aggs),
            "card_est": n.card_est,
            "cost_est": n.cost_est,
            "children": list(n.children),
        } for n in plan.nodes],
        "root": plan.root,
    }


def load_corpus(path) -> list[QueryPlan]:
    """Read a JSON Lines plan corpus, one plan per line."""
    plans = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ScenarioError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            plans.append(plan_from_dict(payload, where=f"{path}:{lineno}"))
    return plans


def dump_corpus(plans, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for plan in plans:
            fh.write(json.dumps(plan_to_dict(plan)) + "\n")
