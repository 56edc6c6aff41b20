#!/usr/bin/env python3
"""Pre-test sweep: 10-seed tuner-vs-random comparison on synth-small."""

import logging
import time

import numpy as np

logging.disable(logging.WARNING)

from querytuner.engine import SimulatedEngine, load_bundled
from querytuner.harness import random_baseline
from querytuner.tuner import TuningBudget, run


def main() -> None:
    sc = load_bundled("synth-small")
    queries = sc.query_ids()[:10]
    wins_lat = wins_fail = 0
    for seed in range(10):
        t0 = time.time()
        eng = SimulatedEngine(sc, seed=1000 + seed)
        result = run(queries, sc.knob_space, eng,
                     TuningBudget(max_evaluations=300), seed=seed)
        t_best = [result.best[q].latency_s for q in queries if result.best[q]]
        t_fail = sum(o.status for o in result.history)
        total = len(result.history)
        per_q = total // len(queries)

        eng2 = SimulatedEngine(sc, seed=1000 + seed)
        rng = np.random.default_rng((seed, 77))
        r_best, r_fail = [], 0
        for q in queries:
            def ev(theta, q=q):
                r = eng2.execute(q, sc.knob_space.denormalize(theta))
                return r.latency_s, r.status
            obs = random_baseline(q, ev, per_q, rng, sc.knob_space.n)
            r_fail += sum(s for _, _, s in obs)
            ok = [l for _, l, s in obs if s == 0]
            if ok:
                r_best.append(min(ok))
        tm, rm = np.mean(t_best), np.mean(r_best)
        wl = tm < rm
        wf = t_fail < r_fail
        wins_lat += wl
        wins_fail += wf
        print(f"seed {seed}: latency {tm:.3f} vs {rm:.3f} ({'W' if wl else 'L'})  "
              f"fails {t_fail} vs {r_fail} ({'W' if wf else 'L'})  "
              f"[{time.time()-t0:.0f}s]", flush=True)
    print(f"TOTAL: latency wins {wins_lat}/10, failure wins {wins_fail}/10")


if __name__ == "__main__":
    main()
