"""Particle-swarm warm start: collect initial observations for a query.

A small swarm moves through [0,1]^n; every evaluation (including failures) is
recorded as a sample.  Successful evaluations update a particle's best and the
swarm's best and steer the velocity; failed evaluations resample the particle
outright.  Updates are applied synchronously after each batch of evaluations,
which is also the unit of parallelism the engine contract allows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EngineError, UsageError

DEFAULT_PARTICLES = 3
DEFAULT_INERTIA = 0.5
DEFAULT_LOCAL_PULL = 2.0
DEFAULT_GLOBAL_PULL = 2.0
INIT_VELOCITY_RANGE = 0.1
# Per-coordinate speed limit.  With inertia 0.5 and pull coefficients of 2 an
# unclamped swarm orbits its bests instead of contracting onto them; the cap
# turns the oscillation into refinement without touching those coefficients.
VELOCITY_CLAMP = 0.2


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    best_position: np.ndarray | None = None
    best_latency: float = np.inf


@dataclass
class Swarm:
    particles: list[Particle]
    mu: float
    c1: float
    c2: float
    rng: np.random.Generator
    best_position: np.ndarray | None = None
    best_latency: float = np.inf
    dims: int = field(init=False)

    def __post_init__(self):
        self.dims = self.particles[0].position.size


@dataclass(frozen=True)
class WarmSample:
    theta: np.ndarray
    latency_s: float
    status: int


def init_swarm(p_count: int, n_dims: int, rng: np.random.Generator,
               mu: float = DEFAULT_INERTIA, c1: float = DEFAULT_LOCAL_PULL,
               c2: float = DEFAULT_GLOBAL_PULL) -> Swarm:
    """Positions uniform in [0,1]^n, velocities uniform in +-0.1 per axis."""
    if p_count < 1:
        raise UsageError("need at least one particle")
    particles = [
        Particle(position=rng.uniform(0.0, 1.0, n_dims),
                 velocity=rng.uniform(-INIT_VELOCITY_RANGE, INIT_VELOCITY_RANGE, n_dims))
        for _ in range(p_count)
    ]
    return Swarm(particles=particles, mu=mu, c1=c1, c2=c2, rng=rng)


def velocity_update(velocity: np.ndarray, position: np.ndarray,
                    local_best: np.ndarray | None, global_best: np.ndarray | None,
                    mu: float, c1: float, c2: float,
                    r1, r2) -> np.ndarray:
    """Inertia plus attraction toward the particle and swarm bests.

    r1 and r2 are uniform draws on [0, 1], one per coordinate in the usual
    swarm formulation (scalars behave identically on one coordinate).
    Attraction terms vanish while the corresponding best is still unset.
    The speed limit is applied by step(), not here.
    """
    v = mu * velocity
    if local_best is not None:
        v = v + c1 * r1 * (local_best - position)
    if global_best is not None:
        v = v + c2 * r2 * (global_best - position)
    return v


def step(swarm: Swarm, evaluations: list[tuple[float, int]]) -> None:
    """Apply one synchronous swarm update from per-particle (latency, status).

    Successful particles (status 0) refresh their bests and move along the
    updated velocity, clamped to the unit box; failed particles are redrawn
    from the initial distributions with their bests untouched.
    """
    if len(evaluations) != len(swarm.particles):
        raise UsageError("need exactly one evaluation per particle")
    rng = swarm.rng
    for particle, (latency, status) in zip(swarm.particles, evaluations):
        if status == 0:
            if latency < particle.best_latency:
                particle.best_latency = latency
                particle.best_position = particle.position.copy()
            if latency < swarm.best_latency:
                swarm.best_latency = latency
                swarm.best_position = particle.position.copy()
            r1 = rng.random(swarm.dims)
            r2 = rng.random(swarm.dims)
            raw = velocity_update(
                particle.velocity, particle.position, particle.best_position,
                swarm.best_position, swarm.mu, swarm.c1, swarm.c2, r1, r2)
            particle.velocity = np.clip(raw, -VELOCITY_CLAMP, VELOCITY_CLAMP)
            particle.position = np.clip(particle.position + particle.velocity,
                                        0.0, 1.0)
        else:
            particle.position = rng.uniform(0.0, 1.0, swarm.dims)
            particle.velocity = rng.uniform(-INIT_VELOCITY_RANGE,
                                            INIT_VELOCITY_RANGE, swarm.dims)


def run(query_id: str, required_samples: int, evaluate, swarm: Swarm) -> list[WarmSample]:
    """Evaluate swarm batches until at least ``required_samples`` are recorded.

    ``evaluate(theta) -> (latency_s, status)`` runs one engine execution.
    Failures count toward the sample total.  If the engine raises, the
    partial sample list is attached to the error as ``partial_samples``.
    """
    if required_samples < 1:
        raise UsageError("required_samples must be >= 1")
    samples: list[WarmSample] = []
    while len(samples) < required_samples:
        evaluations = []
        for particle in swarm.particles:
            theta = particle.position.copy()
            try:
                latency, status = evaluate(theta)
            except EngineError as exc:
                exc.partial_samples = samples
                exc.query_id = query_id
                raise
            evaluations.append((latency, status))
            samples.append(WarmSample(theta=theta, latency_s=float(latency),
                                      status=int(status)))
        step(swarm, evaluations)
    return samples
