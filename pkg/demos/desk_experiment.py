"""Desk-scale run: trust-aware scheduling against random scheduling, one seed.

    python demos/desk_experiment.py [seed]

Takes about ten seconds. The full five-seed comparison is criterion 7 of
tests/test_acceptance.py.
"""
import sys
from pathlib import Path

from trail.config import load_config
from trail.fedsim import run_experiment

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "desk.toml", seed=seed)

for solver in ("trail", "random"):
    result = run_experiment(cfg.replace(scheduler={"solver": solver}))
    s = result.summary()
    late = result.metrics[-1].participants
    print(f"{solver:>7}: final acc {s['final_acc']:.4f}  final loss {s['final_loss']:.4f}  "
          f"mean B {s['mean_B']:.3f}  per-server load {late}")
    if solver == "trail":
        last = {r.client: r.trust for r in result.trust if r.round == cfg.rounds}
        worst = sorted(last, key=last.get)[:len(s["degrading_clients"])]
        print(f"         degrading clients {s['degrading_clients']}, lowest trust {sorted(worst)}")
