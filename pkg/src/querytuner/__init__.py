"""Query-level knob tuning for analytical query engines.

Subpackages cover the numerical substrate (diffcore), plan and knob
modelling, the attention-based joint encoder, the dual-task neural-process
predictor, particle-swarm warm starts, Shapley-based correlation discovery,
a simulated engine with bundled scenarios, and the tuning loop plus CLI.
"""

__version__ = "0.1.0"
