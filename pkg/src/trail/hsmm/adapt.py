"""Per-channel linear adaptation of a canonical model, and MAP state estimates.

Each observation channel ``s`` carries its own affine maps: emission means
``mu -> scale_s * mu + offset_s`` and dwell-time means
``m -> duration_scale_s * m + duration_offset_s``. Variances are untouched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trail.errors import InvalidInputError
from trail.hsmm.inference import PosteriorTables, posteriors, smooth
from trail.hsmm.model import QualityHsmm, as_observations


@dataclass(frozen=True)
class MllrTransform:
    emission_scale: tuple
    emission_offset: tuple
    duration_scale: tuple
    duration_offset: tuple

    def __post_init__(self):
        fields = (self.emission_scale, self.emission_offset, self.duration_scale, self.duration_offset)
        sizes = {len(f) for f in fields}
        if len(sizes) != 1:
            raise InvalidInputError("every transform component needs one entry per channel")
        if any(d <= 0 for d in self.duration_scale):
            raise InvalidInputError("duration scale must be positive on every channel")

    @classmethod
    def identity(cls, num_channels):
        return cls((1.0,) * num_channels, (0.0,) * num_channels,
                   (1.0,) * num_channels, (0.0,) * num_channels)

    @property
    def num_channels(self):
        return len(self.emission_scale)


def mllr_adapt(model: QualityHsmm, transform: MllrTransform, channel=None) -> QualityHsmm:
    """Apply ``transform`` to ``model``'s emission and dwell-time means.

    Emission means of every channel get that channel's map. A model has one
    dwell distribution per state, so the dwell map comes from ``channel``; it
    may be omitted when all channels share the same dwell map.
    """
    if transform.num_channels != model.num_channels:
        raise InvalidInputError(
            f"transform has {transform.num_channels} channels, model has {model.num_channels}")
    scale = np.asarray(transform.emission_scale, dtype=float)
    offset = np.asarray(transform.emission_offset, dtype=float)
    if channel is None:
        pairs = set(zip(transform.duration_scale, transform.duration_offset))
        if len(pairs) != 1:
            raise InvalidInputError("channels disagree on the dwell map; pass channel=")
        d_scale, d_offset = pairs.pop()
    else:
        d_scale, d_offset = transform.duration_scale[channel], transform.duration_offset[channel]
    if d_scale <= 0:
        raise InvalidInputError("duration scale must be positive")
    return model.replace(
        emission_mean=model.emission_mean * scale + offset,
        duration_mean=d_scale * model.duration_mean + d_offset,
    )


def _as_transforms(transforms, num_channels):
    if transforms is None:
        return MllrTransform.identity(num_channels)
    return transforms


def channel_posteriors(model: QualityHsmm, transforms, seq) -> list[PosteriorTables]:
    """Posteriors for each channel under that channel's adapted model."""
    z = as_observations(seq, model.num_channels)
    tr = _as_transforms(transforms, model.num_channels)
    out = []
    for s in range(model.num_channels):
        adapted = mllr_adapt(model, tr, channel=s)
        out.append(posteriors(adapted, z, smooth(adapted, z, channel=s)))
    return out


def combine_channel_scores(per_channel_marginals):
    """Normalized product of per-channel state probabilities, computed in log space."""
    with np.errstate(divide="ignore"):
        logp = np.sum([np.log(m) for m in per_channel_marginals], axis=0)
    if np.all(np.isneginf(logp)):
        return np.full(logp.shape, 1.0 / logp.size)
    p = np.exp(logp - logp.max())
    return p / p.sum()


def map_state_estimate(model: QualityHsmm, transforms, seq, t):
    """MAP quality state at round ``t`` (1-based) fusing all channels.

    Returns ``(state, scores)``: scores are the normalized product over channels
    of each channel's posterior state probability; ties go to the lower state.
    """
    z = as_observations(seq, model.num_channels)
    if not 1 <= t <= z.shape[0]:
        raise InvalidInputError(f"round {t} outside 1..{z.shape[0]}")
    tables = channel_posteriors(model, transforms, z)
    scores = combine_channel_scores([tab.state_marginals[t - 1] for tab in tables])
    return int(np.argmax(scores)), scores
