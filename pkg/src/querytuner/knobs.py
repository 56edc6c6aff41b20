"""Knob search space: [0,1]^n normalization, encodings, candidate sampling.

Every knob domain is min-max scaled onto [0, 1]; discrete and categorical
knobs are tuned in that continuous relaxation and snapped back on
denormalization.  The ordering of knobs is fixed for the life of a session.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import KnobValidationError, ScenarioError, UsageError

KIND_CONTINUOUS = "continuous"
KIND_DISCRETE = "discrete"
KIND_CATEGORICAL = "categorical"
_KINDS = (KIND_CONTINUOUS, KIND_DISCRETE, KIND_CATEGORICAL)


@dataclass(frozen=True)
class KnobSpec:
    """One tunable knob: a numeric range or a category list."""

    name: str
    kind: str
    minimum: float | None = None
    maximum: float | None = None
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ScenarioError(f"knob {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == KIND_CATEGORICAL:
            if not self.categories:
                raise ScenarioError(f"knob {self.name!r}: empty category list")
        else:
            if self.minimum is None or self.maximum is None:
                raise ScenarioError(f"knob {self.name!r}: missing min/max")
            if not self.minimum < self.maximum:
                raise ScenarioError(f"knob {self.name!r}: min must be < max")

    def normalize_value(self, raw) -> float:
        if self.kind == KIND_CATEGORICAL:
            try:
                idx = self.categories.index(raw)
            except ValueError:
                raise KnobValidationError(
                    f"knob {self.name!r}: {raw!r} not in categories") from None
            if len(self.categories) == 1:
                return 0.0
            return idx / (len(self.categories) - 1)
        v = float(raw)
        if not self.minimum <= v <= self.maximum:
            raise KnobValidationError(
                f"knob {self.name!r}: value {v} outside [{self.minimum}, {self.maximum}]")
        return (v - self.minimum) / (self.maximum - self.minimum)

    def denormalize_value(self, t: float):
        t = min(max(float(t), 0.0), 1.0)
        if self.kind == KIND_CATEGORICAL:
            idx = int(round(t * (len(self.categories) - 1)))
            return self.categories[idx]
        raw = self.minimum + t * (self.maximum - self.minimum)
        if self.kind == KIND_DISCRETE:
            return int(round(raw))
        return raw


@dataclass
class KnobSpace:
    """Ordered collection of knob specs; the order defines coordinate indices."""

    specs: list[KnobSpec] = field(default_factory=list)

    def __post_init__(self):
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ScenarioError("knob names must be unique")

    @property
    def n(self) -> int:
        return len(self.specs)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def index(self, name: str) -> int:
        for i, s in enumerate(self.specs):
            if s.name == name:
                return i
        raise KeyError(name)

    def normalize(self, raw_values) -> np.ndarray:
        if len(raw_values) != self.n:
            raise KnobValidationError(
                f"expected {self.n} values, got {len(raw_values)}")
        return np.array([s.normalize_value(v) for s, v in zip(self.specs, raw_values)])

    def denormalize(self, theta) -> list:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n,):
            raise KnobValidationError(f"expected {self.n} coordinates, got {theta.shape}")
        return [s.denormalize_value(t) for s, t in zip(self.specs, theta)]

    def to_dict(self) -> dict:
        knobs = []
        for s in self.specs:
            entry: dict = {"name": s.name, "kind": s.kind}
            if s.kind == KIND_CATEGORICAL:
                entry["categories"] = list(s.categories)
            else:
                entry["min"] = s.minimum
                entry["max"] = s.maximum
            knobs.append(entry)
        return {"knobs": knobs}

    @classmethod
    def from_dict(cls, payload: dict, where: str = "knobs") -> "KnobSpace":
        if "knobs" not in payload:
            raise ScenarioError(f"{where}: missing field 'knobs'")
        specs = []
        for i, entry in enumerate(payload["knobs"]):
            path = f"{where}[{i}]"
            for key in ("name", "kind"):
                if key not in entry:
                    raise ScenarioError(f"{path}: missing field {key!r}")
            kind = entry["kind"]
            if kind == KIND_CATEGORICAL:
                if "categories" not in entry:
                    raise ScenarioError(f"{path}: missing field 'categories'")
                specs.append(KnobSpec(entry["name"], kind,
                                      categories=tuple(entry["categories"])))
            else:
                for key in ("min", "max"):
                    if key not in entry:
                        raise ScenarioError(f"{path}: missing field {key!r}")
                specs.append(KnobSpec(entry["name"], kind,
                                      minimum=float(entry["min"]),
                                      maximum=float(entry["max"])))
        return cls(specs)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "KnobSpace":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), where=str(path))


def validate_configuration(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1:
        raise KnobValidationError("a configuration is a flat vector")
    if np.any(theta < 0.0) or np.any(theta > 1.0):
        raise KnobValidationError("configuration coordinates must lie in [0, 1]")
    return theta


def weighted_one_hot(theta: np.ndarray) -> np.ndarray:
    """Per-knob vectors with the coordinate's value in its own slot.

    Row i carries theta[i] at position i and zeros elsewhere, so the encoding
    preserves the actual configuration values rather than flattening them
    to indicator 1s.
    """
    theta = validate_configuration(theta)
    return np.diag(theta)


def sample_uniform(space: KnobSpace, count: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. uniform configurations on [0,1]^n, one per row."""
    if count < 1:
        raise UsageError("count must be >= 1")
    return rng.uniform(0.0, 1.0, size=(count, space.n))


def perturb(theta: np.ndarray, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Truncated-uniform jitter of at most ``radius`` per coordinate, clamped."""
    if radius <= 0:
        raise UsageError("radius must be positive")
    theta = validate_configuration(theta)
    noise = rng.uniform(-radius, radius, size=theta.shape)
    return np.clip(theta + noise, 0.0, 1.0)
