"""Synthetic one-dimensional screening problems with a tunable cheap-test value.

Features are uniform on [0, 1].  Cheap scores are a GP draw over the feature
plus noise; expensive scores are a GP draw over (feature, cheap score) whose
lengthscales are ``0.25 / sin(theta)`` in the feature and ``0.25 / cos(theta)``
in the cheap score.  ``theta = 0`` makes the expensive score a function of
the cheap score alone; ``theta = pi/2`` makes it ignore the cheap score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import Dataset
from .gp_core import KernelSpec, kernel_matrix, robust_cholesky
from .score_models import CovariateModel

CHEAP_AMPLITUDE = 0.25**2
CHEAP_NOISE = 0.25**2
LENGTHSCALE = 0.25
EXPENSIVE_AMPLITUDE = 1.0
EXPENSIVE_NOISE = 0.05**2


@dataclass(frozen=True)
class SynthConfig:
    n: int = 500
    theta: float = np.pi / 4
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if not 0.0 <= self.theta <= np.pi / 2 + 1e-12:
            raise ValueError(f"theta must lie in [0, pi/2], got {self.theta}")


def _stretch(weight: float) -> float:
    w = abs(weight)
    return LENGTHSCALE / w if w > 0 else np.inf


def cheap_spec() -> KernelSpec:
    return KernelSpec(CHEAP_AMPLITUDE, (LENGTHSCALE,), CHEAP_NOISE)


def expensive_spec(theta: float) -> KernelSpec:
    return KernelSpec(
        EXPENSIVE_AMPLITUDE,
        (_stretch(np.sin(theta)), _stretch(np.cos(theta))),
        EXPENSIVE_NOISE,
    )


def true_model(config: SynthConfig) -> CovariateModel:
    """The generating model, handed to screening policies as-is."""
    return CovariateModel(cheap_spec(), expensive_spec(config.theta))


def cheap_covariance(x: np.ndarray) -> np.ndarray:
    return kernel_matrix(x[:, None], x[:, None], cheap_spec(), add_noise=True)


def expensive_covariance(x: np.ndarray, y_cheap: np.ndarray, theta: float) -> np.ndarray:
    Z = np.column_stack([x, y_cheap])
    return kernel_matrix(Z, Z, expensive_spec(theta), add_noise=True)


def sample_scores(x: np.ndarray, theta: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, float)
    yc = robust_cholesky(cheap_covariance(x)) @ rng.standard_normal(x.size)
    ye = robust_cholesky(expensive_covariance(x, yc, theta)) @ rng.standard_normal(x.size)
    return yc, ye


def generate_problem(config: SynthConfig) -> Dataset:
    rng = np.random.default_rng(config.seed)
    x = rng.uniform(0.0, 1.0, config.n)
    yc, ye = sample_scores(x, config.theta, rng)
    return Dataset(x[:, None], yc, ye, np.arange(config.n))
