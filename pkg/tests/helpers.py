"""Random screening instances shared across test modules."""

from __future__ import annotations

import numpy as np

from screenbo.data_io import Dataset
from screenbo.gp_core import KernelSpec
from screenbo.score_models import CovariateModel
from screenbo.state import TT, TU, ScreenState


def random_covariate_model(rng, d=1) -> CovariateModel:
    f = KernelSpec(float(rng.uniform(0.5, 1.5)), tuple(rng.uniform(0.3, 1.0, d)), float(rng.uniform(0.05, 0.2)))
    g = KernelSpec(float(rng.uniform(0.5, 1.5)), tuple(rng.uniform(0.3, 1.0, d + 1)), float(rng.uniform(0.01, 0.1)))
    return CovariateModel(f, g)


def random_state(rng, n=8, d=1, n_tu=2, n_tt=3, budget=100.0, c_cheap=0.2, c_expensive=1.0):
    """A state with ``n_tt`` fully tested, ``n_tu`` cheap-tested, rest untested."""
    X = rng.uniform(0, 1, (n, d))
    s = ScreenState.initial(X, budget, c_cheap, c_expensive)
    order = rng.permutation(n)
    tt, tu = order[:n_tt], order[n_tt:n_tt + n_tu]
    s.status[tt], s.status[tu] = TT, TU
    s.cheap[tt] = rng.normal(size=n_tt)
    s.cheap[tu] = rng.normal(size=n_tu)
    s.expensive[tt] = rng.normal(size=n_tt)
    return s


def random_dataset(rng, n=30, d=1) -> Dataset:
    X = rng.uniform(0, 1, (n, d))
    yc = np.sin(5 * X[:, 0]) + 0.1 * rng.normal(size=n)
    ye = np.cos(3 * yc) + X[:, 0] + 0.05 * rng.normal(size=n)
    return Dataset(X, yc, ye, np.arange(n))


def model_state(rng, model: CovariateModel, n=10, n_tu=3, n_tt=3) -> ScreenState:
    """A state whose revealed scores are drawn from ``model`` itself."""
    from screenbo.gp_core import kernel_matrix

    x = rng.uniform(0, 1, n)
    yc = np.linalg.cholesky(kernel_matrix(x[:, None], x[:, None], model.f_spec, add_noise=True)) @ rng.normal(size=n)
    Z = np.column_stack([x, yc])
    ye = np.linalg.cholesky(kernel_matrix(Z, Z, model.g_spec, add_noise=True)) @ rng.normal(size=n)
    s = ScreenState.initial(x, 100.0, 0.2, 1.0)
    order = rng.permutation(n)
    tt, tu = order[:n_tt], order[n_tt:n_tt + n_tu]
    s.status[tt], s.status[tu] = TT, TU
    s.cheap[tt], s.cheap[tu] = yc[tt], yc[tu]
    s.expensive[tt] = ye[tt]
    return s
