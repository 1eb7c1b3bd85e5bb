"""Two-test acquisition functions.

Each acquisition accepts either closed-form :class:`Marginals` (a Gaussian or
a finite Gaussian mixture per candidate) or a Monte-Carlo :class:`SampleSet`
of joint draws.  Ranking-based quantities (mining probability, the top-N
threshold) need joint draws and only take a ``SampleSet``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import ndtr

from .score_models import Marginals, SampleSet
from .state import TT, ScreenState

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class AcquisitionValues:
    candidate_ids: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("acquisition values must be finite")

    def __len__(self):
        return self.values.size

    def to_dict(self) -> dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.candidate_ids, self.values)}

    def restrict(self, ids) -> "AcquisitionValues":
        keep = np.isin(self.candidate_ids, ids)
        return AcquisitionValues(self.candidate_ids[keep], self.values[keep])

    def argmax(self, among=None) -> int:
        """Id with the highest value; ties go to the smallest id."""
        ids, vals = self.candidate_ids, self.values
        if among is not None:
            keep = np.isin(ids, among)
            ids, vals = ids[keep], vals[keep]
        if ids.size == 0:
            raise ValueError("argmax over an empty candidate set")
        best = vals.max()
        return int(ids[vals == best].min())


@dataclass(frozen=True)
class ThresholdEstimate:
    tau: float
    N: int
    sample_count: int
    age: int = 0

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("a threshold needs at least one draw")

    def aged(self, steps: int = 1) -> "ThresholdEstimate":
        return ThresholdEstimate(self.tau, self.N, self.sample_count, self.age + steps)


Distribution = Union[Marginals, SampleSet]


def _gaussian_ei(mu, sd, y_max):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (mu - y_max) / sd
        ei = sd * _INV_SQRT_2PI * np.exp(-0.5 * z * z) + (mu - y_max) * ndtr(z)
    return np.where(sd > 0, ei, np.maximum(mu - y_max, 0.0))


def greedy_expected_improvement(dist: Distribution, y_max: float) -> AcquisitionValues:
    """``E[max(y_E - y_max, 0) | D]`` for every candidate in ``dist``."""
    if not np.isfinite(y_max):
        raise ValueError("y_max must be finite")
    if isinstance(dist, SampleSet):
        vals = np.maximum(dist.draws - y_max, 0.0).mean(axis=0)
        return AcquisitionValues(dist.candidate_ids, vals)
    if np.any(dist.var < 0):
        raise ValueError("negative variance")
    ei = _gaussian_ei(dist.mean, np.sqrt(dist.var), y_max)
    return AcquisitionValues(dist.candidate_ids, np.maximum(dist.weights @ ei, 0.0))


def greedy_threshold(dist: Distribution, tau: float) -> AcquisitionValues:
    """``P[y_E >= tau | D]`` for every candidate in ``dist``."""
    if isinstance(dist, SampleSet):
        return AcquisitionValues(dist.candidate_ids, (dist.draws >= tau).mean(axis=0))
    sd = np.sqrt(dist.var)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = ndtr((dist.mean - tau) / sd)
    p = np.where(sd > 0, p, (dist.mean >= tau).astype(float))
    return AcquisitionValues(dist.candidate_ids, np.clip(dist.weights @ p, 0.0, 1.0))


def _top_n_mask(samples: SampleSet, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean ``(m, k)`` mask of each draw's top-N, columns in id order."""
    k = samples.candidate_ids.size
    if not 1 <= N <= k:
        raise ValueError(f"N={N} must lie in [1, {k}]")
    order = np.argsort(samples.candidate_ids, kind="stable")
    draws = samples.draws[:, order]
    # stable sort of -score keeps the smaller id first among ties
    rank_order = np.argsort(-draws, axis=1, kind="stable")
    mask = np.zeros(draws.shape, dtype=bool)
    np.put_along_axis(mask, rank_order[:, :N], True, axis=1)
    return samples.candidate_ids[order], mask


def greedy_mining(samples: SampleSet, N: int, state: ScreenState | None = None) -> AcquisitionValues:
    """``P[i in top_N | D]`` by rank counting over joint draws.

    ``samples`` must cover every candidate, with expensive-tested ones pinned
    to their scores; values are returned for the candidates without an
    expensive score (all columns when ``state`` is omitted).
    """
    ids, mask = _top_n_mask(samples, N)
    vals = mask.mean(axis=0)
    if state is not None:
        keep = state.status[ids] != TT
        ids, vals = ids[keep], vals[keep]
    return AcquisitionValues(ids, vals)


def nth_largest(draws: np.ndarray, N: int) -> np.ndarray:
    k = draws.shape[1]
    if not 1 <= N <= k:
        raise ValueError(f"N={N} must lie in [1, {k}]")
    return np.partition(draws, k - N, axis=1)[:, k - N]


def estimate_threshold(samples: SampleSet, N: int) -> ThresholdEstimate:
    """Posterior median of the N-th largest expensive score."""
    if samples.m < 1:
        raise ValueError("need at least one joint draw")
    return ThresholdEstimate(float(np.median(nth_largest(samples.draws, N))), N, samples.m)


def thompson(samples: SampleSet) -> AcquisitionValues:
    """The single joint draw itself is the acquisition."""
    if samples.m != 1:
        raise ValueError(f"Thompson acquisition needs exactly one draw, got {samples.m}")
    return AcquisitionValues(samples.candidate_ids, samples.draws[0].copy())

