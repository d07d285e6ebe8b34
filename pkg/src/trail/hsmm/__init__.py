from trail.hsmm.model import QualityHsmm, as_observations, default_model, discretized_gaussian_pmf
from trail.hsmm.inference import (
    DurationLattice,
    PosteriorTables,
    ViterbiPath,
    backward_pass,
    forward_pass,
    log_emission,
    posteriors,
    sequence_likelihood,
    smooth,
    viterbi_decode,
)
from trail.hsmm.oracle import OracleResult, brute_force_likelihood, count_segmentations
from trail.hsmm.fit import baum_welch_fit, initial_model
from trail.hsmm.adapt import MllrTransform, channel_posteriors, map_state_estimate, mllr_adapt
