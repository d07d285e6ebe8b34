"""Deterministic semi-decentralized federated learning simulator."""
from trail.fedsim.core import (
    METRICS_CSV_HEADER, ClientState, DegradationProfile, RoundMetrics, apply_uplink,
    emit_observation, global_loss, inter_consensus, intra_aggregate, local_train, noisy_labels,
    window_mean,
)
from trail.fedsim.experiment import ExperimentResult, build_world, run_experiment, write_outputs
from trail.fedsim.models import (
    ModelVector, accuracy, cross_entropy, init_model, logits, loss_and_grad, num_params, predict,
)
