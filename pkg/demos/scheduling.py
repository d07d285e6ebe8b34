"""Compare schedulers on one random trust table.

Once every chosen client clears the threshold, B only depends on which
servers are occupied, so the solvers tie on B. They differ in whom they pick:
greedy takes the most trusted clients first.

    python demos/scheduling.py
"""
import numpy as np

from trail.scheduler import SchedulingInstance, exhaustive_schedule, solve, surrogate_objective

rng = np.random.default_rng(7)
U, S = 8, 2
inst = SchedulingInstance(sizes=rng.integers(50, 500, U), trust=rng.uniform(0, 30, (U, S)),
                          threshold=8.0, capacity=3)
print("trust levels:")
print(np.round(inst.trust, 1))

_, best = exhaustive_schedule(inst)
print(f"{'solver':>12} {'B':>9} {'gap':>7} {'mean TL':>8}  assignment (client->server)")
for solver in ("trail", "random", "trust-only", "exhaustive"):
    d = solve(inst, solver, seed=0)
    B = surrogate_objective(d, inst)
    gap = (B - best) / abs(best) if best else 0.0
    pairs = " ".join(f"{i}->{s}" for i, s in np.argwhere(d))
    print(f"{solver:>12} {B:9.3f} {gap:7.1%} {inst.trust[d.astype(bool)].mean():8.2f}  {pairs}")
