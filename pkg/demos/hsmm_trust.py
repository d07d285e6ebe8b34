"""Fit a quality HSMM to clients that degrade and print their trust levels.

    python demos/hsmm_trust.py
"""
import numpy as np

from trail.hsmm import QualityHsmm, baum_welch_fit, initial_model, viterbi_decode
from trail.trust import DwellStats, trust_records

rng = np.random.default_rng(0)
truth = QualityHsmm(
    initial_probs=[1.0, 0.0, 0.0],
    transitions=[[0.0, 0.9, 0.1], [0.2, 0.0, 0.8], [0.5, 0.5, 0.0]],
    duration_mean=[12.0, 8.0, 5.0],
    duration_var=[4.0, 3.0, 2.0],
    emission_mean=[[0.9, 0.95], [0.7, 0.8], [0.4, 0.5]],  # (accuracy, delivery) per state
    emission_var=[[0.002, 0.002], [0.004, 0.004], [0.01, 0.01]],
    max_duration=20,
)
histories = [truth.sample(40, rng)[0] for _ in range(6)]

init = initial_model(histories, num_states=3, max_duration=20)
model, trace = baum_welch_fit(init, histories, max_iters=50, tol=1e-6)
model = model.permute_states(np.argsort(-model.emission_mean[:, 0], kind="stable"))
print(f"EM: {len(trace) - 1} iterations, loglik {trace[0]:.2f} -> {trace[-1]:.2f}")
print("emission means (best state first):")
print(np.round(model.emission_mean, 3))

stats = DwellStats.from_model(model, lifespan=120)
print("expected residences:", np.round(stats.residences(), 2), "sum", round(stats.residences().sum(), 6))

records = trust_records(model, None, np.stack(histories), stats, clients=range(len(histories)), round_index=40)
for rec, z in zip(records, histories):
    path = viterbi_decode(model, z)
    print(f"client {rec.client}: state {rec.state}, trust {rec.trust:7.2f}, last segments {path.segments[-3:]}")
