"""Generative models for (cheap, expensive) scores and posterior inference.

Two models are supported:

* :class:`MultiFidelityModel`: both scores are noisy views of one latent GP
  ``f`` over the features.  The posterior over expensive scores is Gaussian.
* :class:`CovariateModel`: the cheap score is ``f(x) + noise`` and the
  expensive score is ``g(x, y_cheap) + noise`` for a second GP ``g``.  For
  candidates whose cheap score is still unknown the posterior is a
  continuous Gaussian mixture, handled by sampling or quadrature.

Both models only support the sequential setting where no candidate has an
expensive score without a cheap one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .gp_core import (
    GPPosterior,
    HyperBounds,
    KernelSpec,
    fit_posterior,
    negative_log_likelihood,
    optimize_hyperparameters,
    psd_sqrt,
)
from .state import TT, TU, UU, PreconditionError, ScreenState

logger = logging.getLogger(__name__)

# Gauss-Hermite nodes for expectations over a single unknown cheap score.
_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(48)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()

SAMPLE_CHUNK = 64


@dataclass(frozen=True)
class MultiFidelityModel:
    """``y_C = f(x) + eps_C`` and ``y_E = f(x) + eps_E`` with one shared ``f``."""

    f_spec: KernelSpec
    sigma_C: float
    sigma_E: float

    def __post_init__(self):
        if not (self.sigma_C > 0 and self.sigma_E > 0):
            raise ValueError("sigma_C and sigma_E must be positive")

    @property
    def kind(self) -> str:
        return "multi_fidelity"

    def condition(self, state: ScreenState) -> "MultiFidelityPosterior":
        return MultiFidelityPosterior(self, state)


@dataclass(frozen=True)
class CovariateModel:
    """``y_C = f(x) + eps_C`` and ``y_E = g(x, y_C) + eps_E``.

    The noise standard deviations live in the GP specs: ``sigma_C**2`` is
    ``f_spec.noise_variance`` and ``sigma_E**2`` is ``g_spec.noise_variance``.
    """

    f_spec: KernelSpec
    g_spec: KernelSpec

    def __post_init__(self):
        if self.g_spec.dim != self.f_spec.dim + 1:
            raise ValueError(
                f"g needs {self.f_spec.dim + 1} lengthscales (features plus cheap score), got {self.g_spec.dim}"
            )
        if not (self.f_spec.noise_variance > 0 and self.g_spec.noise_variance > 0):
            raise ValueError("sigma_C and sigma_E must be positive")

    @property
    def kind(self) -> str:
        return "covariate"

    @property
    def sigma_C(self) -> float:
        return float(np.sqrt(self.f_spec.noise_variance))

    @property
    def sigma_E(self) -> float:
        return float(np.sqrt(self.g_spec.noise_variance))

    def condition(self, state: ScreenState) -> "CovariatePosterior":
        return CovariatePosterior(self, state)


@dataclass(frozen=True)
class SingleTestModel:
    """One GP for the expensive score, ignoring the two-test structure.

    With ``use_cheap`` the GP inputs are the features plus the (pre-purchased)
    cheap score; otherwise the features alone.
    """

    spec: KernelSpec
    use_cheap: bool = False

    @property
    def kind(self) -> str:
        return "single"

    def condition(self, state: ScreenState) -> "SingleTestPosterior":
        return SingleTestPosterior(self, state)


ScoreModel = Union[MultiFidelityModel, CovariateModel, SingleTestModel]


@dataclass(frozen=True)
class SampleSet:
    """``m`` joint draws (rows) of expensive scores over ``candidate_ids``."""

    candidate_ids: np.ndarray
    draws: np.ndarray

    @property
    def m(self) -> int:
        return self.draws.shape[0]

    def column(self, cid: int) -> np.ndarray:
        return self.draws[:, int(np.flatnonzero(self.candidate_ids == cid)[0])]


@dataclass(frozen=True)
class Marginals:
    """Per-candidate law of the expensive score as a finite Gaussian mixture.

    ``mean`` and ``var`` have shape ``(q, k)``: ``q`` mixture components for
    each of ``k`` candidates, with component weights ``weights`` (shape
    ``(q,)``).  A plain Gaussian marginal is the ``q == 1`` case.
    """

    candidate_ids: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    weights: np.ndarray = field(default_factory=lambda: np.ones(1))

    @classmethod
    def gaussian(cls, ids, mean, var) -> "Marginals":
        return cls(np.asarray(ids), np.atleast_2d(mean), np.atleast_2d(var), np.ones(1))

    def subset(self, positions) -> "Marginals":
        return Marginals(self.candidate_ids[positions], self.mean[:, positions], self.var[:, positions], self.weights)

    def expectation_mean(self) -> np.ndarray:
        return self.weights @ self.mean

    def total_var(self) -> np.ndarray:
        m = self.expectation_mean()
        return self.weights @ (self.var + self.mean**2) - m**2


def _require_sequential(state: ScreenState) -> None:
    if np.any(~np.isnan(state.expensive) & np.isnan(state.cheap)):
        raise PreconditionError("expensive score without a cheap score (I_ut must be empty)")


def _as_ids(ids) -> np.ndarray:
    return np.atleast_1d(np.asarray(ids, dtype=int))


class MultiFidelityPosterior:
    """Shared-``f`` posterior given every revealed cheap and expensive score."""

    def __init__(self, model: MultiFidelityModel, state: ScreenState):
        _require_sequential(state)
        self.model, self.state = model, state
        X = state.features
        c_ids, e_ids = state.ids(TU, TT), state.i_tt
        inputs = np.vstack([X[c_ids], X[e_ids]])
        targets = np.r_[state.cheap[c_ids], state.expensive[e_ids]]
        noise = np.r_[np.full(c_ids.size, model.sigma_C**2), np.full(e_ids.size, model.sigma_E**2)]
        self.f_post = fit_posterior(inputs, targets, model.f_spec, noise)

    def cheap_marginals(self, ids) -> tuple[np.ndarray, np.ndarray]:
        mean, var = self.f_post.mean_var(self.state.features[_as_ids(ids)])
        return mean, var + self.model.sigma_C**2

    def expensive_marginals(self, ids) -> Marginals:
        ids = _as_ids(ids)
        mean, var = self.f_post.mean_var(self.state.features[ids])
        var = var + self.model.sigma_E**2
        tt = self.state.status[ids] == TT
        mean[tt], var[tt] = self.state.expensive[ids[tt]], 0.0
        return Marginals.gaussian(ids, mean, var)

    def sample_expensive(self, ids, m: int, rng: np.random.Generator) -> SampleSet:
        ids = _as_ids(ids)
        draws = np.empty((m, ids.size))
        tt = self.state.status[ids] == TT
        draws[:, tt] = self.state.expensive[ids[tt]]
        free = ids[~tt]
        if free.size and m:
            mean, cov = self.f_post.mean_cov(self.state.features[free])
            cov[np.diag_indices_from(cov)] += self.model.sigma_E**2
            L = psd_sqrt(cov)
            draws[:, ~tt] = mean + rng.standard_normal((m, free.size)) @ L.T
        return SampleSet(ids, draws)

    def after_cheap(self, i_uu: int, query, y_cheap: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Expensive-score moments at ``query`` after hypothetically observing
        ``y_cheap`` (vector of alternatives) as the cheap score of ``i_uu``.

        Returns ``(mean, var)`` of shape ``(len(y_cheap), len(query))``.
        """
        query = _as_ids(query)
        X = self.state.features
        pts = np.vstack([X[[i_uu]], X[query]])
        mean, cov = self.f_post.mean_cov(pts)
        v_c = cov[0, 0] + self.model.sigma_C**2
        gain = cov[0, 1:] / v_c
        y_cheap = np.asarray(y_cheap, float)
        new_mean = mean[1:] + np.outer(y_cheap - mean[0], gain)
        new_var = np.diag(cov)[1:] - cov[0, 1:] * gain + self.model.sigma_E**2
        new_var = np.broadcast_to(np.maximum(new_var, 0.0), new_mean.shape)
        tt = self.state.status[query] == TT
        new_mean[:, tt] = self.state.expensive[query[tt]]
        new_var = np.where(tt, 0.0, new_var)
        return new_mean, new_var


class CovariatePosterior:
    """``f`` conditioned on revealed cheap scores, ``g`` on fully tested candidates."""

    def __init__(self, model: CovariateModel, state: ScreenState):
        _require_sequential(state)
        self.model, self.state = model, state
        X = state.features
        c_ids, tt = state.ids(TU, TT), state.i_tt
        self.f_post = fit_posterior(X[c_ids], state.cheap[c_ids], model.f_spec)
        self.g_post = fit_posterior(self.augment(tt, state.cheap[tt]), state.expensive[tt], model.g_spec)

    def augment(self, ids, y_cheap) -> np.ndarray:
        return np.column_stack([self.state.features[_as_ids(ids)], np.asarray(y_cheap, float)])

    def cheap_marginals(self, ids) -> tuple[np.ndarray, np.ndarray]:
        return self.f_post.mean_var(self.state.features[_as_ids(ids)], include_noise=True)

    def g_predict(self, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean/variance of ``y_E`` at augmented inputs ``Z``."""
        return self.g_post.mean_var(Z, include_noise=True)

    def expensive_marginals(self, ids) -> Marginals:
        """Exact marginals: Gaussian for tested candidates, Gauss-Hermite
        mixture over the unknown cheap score for untested ones."""
        ids = _as_ids(ids)
        st = self.state.status[ids]
        q = _GH_NODES.size
        mean = np.zeros((q, ids.size))
        var = np.zeros((q, ids.size))
        tt, tu, uu = st == TT, st == TU, st == UU
        mean[:, tt] = self.state.expensive[ids[tt]]
        if tu.any():
            mu, v = self.g_predict(self.augment(ids[tu], self.state.cheap[ids[tu]]))
            mean[:, tu], var[:, tu] = mu, v
        if uu.any():
            mc, vc = self.cheap_marginals(ids[uu])
            yc = mc[None, :] + np.sqrt(vc)[None, :] * _GH_NODES[:, None]
            Z = np.column_stack([np.tile(self.state.features[ids[uu]], (q, 1)), yc.ravel()])
            mu, v = self.g_predict(Z)
            mean[:, uu], var[:, uu] = mu.reshape(q, -1), v.reshape(q, -1)
        return Marginals(ids, mean, var, _GH_WEIGHTS.copy())

    def sample_cheap_joint(self, ids, m: int, rng: np.random.Generator) -> np.ndarray:
        ids = _as_ids(ids)
        mean, cov = self.f_post.mean_cov(self.state.features[ids], include_noise=True)
        return mean + rng.standard_normal((m, ids.size)) @ psd_sqrt(cov).T

    def sample_expensive(self, ids, m: int, rng: np.random.Generator) -> SampleSet:
        """Joint draws: cheap scores of untested candidates are drawn jointly
        from ``f``, then ``g`` is drawn jointly at the resulting inputs."""
        ids = _as_ids(ids)
        st = self.state.status[ids]
        draws = np.empty((m, ids.size))
        if m == 0:
            return SampleSet(ids, draws)
        tt = st == TT
        draws[:, tt] = self.state.expensive[ids[tt]]
        tu_pos, uu_pos = np.flatnonzero(st == TU), np.flatnonzero(st == UU)
        if uu_pos.size == 0:
            if tu_pos.size:
                Z = self.augment(ids[tu_pos], self.state.cheap[ids[tu_pos]])
                mean, cov = self.g_post.mean_cov(Z, include_noise=True)
                draws[:, tu_pos] = mean + rng.standard_normal((m, tu_pos.size)) @ psd_sqrt(cov).T
            return SampleSet(ids, draws)

        yc = self.sample_cheap_joint(ids[uu_pos], m, rng)
        free = np.r_[tu_pos, uu_pos]
        X = self.state.features
        Z_fixed = self.augment(ids[tu_pos], self.state.cheap[ids[tu_pos]])
        z = rng.standard_normal((m, free.size))
        for lo in range(0, m, SAMPLE_CHUNK):
            hi = min(lo + SAMPLE_CHUNK, m)
            Z = np.empty((hi - lo, free.size, X.shape[1] + 1))
            Z[:, : tu_pos.size] = Z_fixed
            Z[:, tu_pos.size :, :-1] = X[ids[uu_pos]]
            Z[:, tu_pos.size :, -1] = yc[lo:hi]
            mean, cov = _batched_g_moments(self.g_post, Z)
            L = _batched_sqrt(cov)
            draws[lo:hi][:, free] = mean + (L @ z[lo:hi, :, None])[..., 0]
        return SampleSet(ids, draws)

    def after_cheap(self, i_uu: int, query, y_cheap: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Expensive-score moments at ``query`` if ``i_uu`` revealed each of
        ``y_cheap``.  ``g`` is not refit: a cheap score alone carries no
        expensive label, it only moves ``i_uu``'s input to ``g``."""
        query = _as_ids(query)
        y_cheap = np.asarray(y_cheap, float)
        marg = self.expensive_marginals(query)
        mean = np.broadcast_to(marg.mean[0], (y_cheap.size, query.size)).copy()
        var = np.broadcast_to(marg.var[0], (y_cheap.size, query.size)).copy()
        hit = np.flatnonzero(query == i_uu)
        if hit.size:
            mu, v = self.g_predict(self.augment(np.full(y_cheap.size, i_uu), y_cheap))
            mean[:, hit[0]], var[:, hit[0]] = mu, v
        uu_other = (self.state.status[query] == UU) & (query != i_uu)
        if uu_other.any():
            # other untested candidates keep their mixture law; summarise it by its moments
            mean[:, uu_other] = marg.expectation_mean()[uu_other]
            var[:, uu_other] = marg.total_var()[uu_other]
        return mean, var


class SingleTestPosterior:
    def __init__(self, model: SingleTestModel, state: ScreenState):
        self.model, self.state = model, state
        tt = state.i_tt
        self.post = fit_posterior(self.inputs(tt), state.expensive[tt], model.spec)

    def inputs(self, ids) -> np.ndarray:
        ids = _as_ids(ids)
        X = self.state.features[ids]
        return np.column_stack([X, self.state.cheap[ids]]) if self.model.use_cheap else X

    def expensive_marginals(self, ids) -> Marginals:
        ids = _as_ids(ids)
        mean, var = self.post.mean_var(self.inputs(ids), include_noise=True)
        tt = self.state.status[ids] == TT
        mean[tt], var[tt] = self.state.expensive[ids[tt]], 0.0
        return Marginals.gaussian(ids, mean, var)

    def sample_expensive(self, ids, m: int, rng: np.random.Generator) -> SampleSet:
        ids = _as_ids(ids)
        draws = np.empty((m, ids.size))
        tt = self.state.status[ids] == TT
        draws[:, tt] = self.state.expensive[ids[tt]]
        free = ids[~tt]
        if free.size and m:
            mean, cov = self.post.mean_cov(self.inputs(free), include_noise=True)
            draws[:, ~tt] = mean + rng.standard_normal((m, free.size)) @ psd_sqrt(cov).T
        return SampleSet(ids, draws)


def _batched_g_moments(g_post: GPPosterior, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    spec = g_post.spec
    ls = np.asarray(spec.lengthscales)
    A = Z / ls
    sq = (A * A).sum(-1)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * (A @ A.transpose(0, 2, 1))
    Kzz = spec.signal_variance * np.exp(-0.5 * np.maximum(d2, 0.0))
    b, k = Z.shape[0], Z.shape[1]
    idx = np.arange(k)
    Kzz[:, idx, idx] = spec.signal_variance + spec.noise_variance
    if g_post.n == 0:
        return np.zeros((b, k)), Kzz
    T = g_post.train_inputs / ls
    d2x = (A * A).sum(-1)[:, :, None] + (T * T).sum(-1)[None, None, :] - 2.0 * A @ T.T
    Kzt = spec.signal_variance * np.exp(-0.5 * np.maximum(d2x, 0.0))
    mean = Kzt @ g_post.alpha
    Linv = np.linalg.inv(g_post.chol_factor)
    V = Kzt @ Linv.T
    cov = Kzz - V @ V.transpose(0, 2, 1)
    return mean, cov


def _batched_sqrt(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return np.stack([psd_sqrt(c) for c in cov])


# ---------------------------------------------------------------------------
# functional interface
# ---------------------------------------------------------------------------


def predict_cheap(model: ScoreModel, state: ScreenState, ids) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian marginals (mean, variance) of the cheap score for untested ids."""
    ids = _as_ids(ids)
    if np.any(state.status[ids] != UU):
        raise PreconditionError("predict_cheap only applies to candidates without a cheap score")
    return model.condition(state).cheap_marginals(ids)


def posterior_expensive_samples(model: ScoreModel, state: ScreenState, ids, m: int, rng: np.random.Generator) -> SampleSet:
    return model.condition(state).sample_expensive(ids, m, rng)


def expensive_marginals(model: ScoreModel, state: ScreenState, ids) -> Marginals:
    return model.condition(state).expensive_marginals(ids)


@dataclass
class RefitConfig:
    bounds: HyperBounds = field(default_factory=HyperBounds)
    restarts: int = 3
    maxiter: int = 300
    min_points: int = 2


def refit(model: ScoreModel, state: ScreenState, config: RefitConfig | None = None, rng: np.random.Generator | None = None) -> ScoreModel:
    """Refit each GP's hyperparameters (noise included) on the revealed data.

    A GP with fewer than ``min_points`` observations keeps its current spec.
    """
    config = config or RefitConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    _require_sequential(state)
    X = state.features
    c_ids, tt = state.ids(TU, TT), state.i_tt

    def fit(inputs, y, spec, what):
        if y.size < config.min_points:
            logger.info("refit of %s skipped: %d observations", what, y.size)
            return spec
        new = optimize_hyperparameters(inputs, y, spec, config.bounds, config.restarts, rng, config.maxiter)
        if negative_log_likelihood(inputs, y, new) > negative_log_likelihood(inputs, y, spec):
            return spec
        return new

    if isinstance(model, SingleTestModel):
        post = SingleTestPosterior(model, state)
        return SingleTestModel(fit(post.inputs(tt), state.expensive[tt], model.spec, "single-test GP"), model.use_cheap)
    if isinstance(model, MultiFidelityModel):
        spec = model.f_spec.replace(noise_variance=model.sigma_C**2)
        new = fit(X[c_ids], state.cheap[c_ids], spec, "f")
        return MultiFidelityModel(new.replace(noise_variance=0.0), float(np.sqrt(new.noise_variance)), model.sigma_E)
    f_spec = fit(X[c_ids], state.cheap[c_ids], model.f_spec, "f")
    g_in = np.column_stack([X[tt], state.cheap[tt]])
    g_spec = fit(g_in, state.expensive[tt], model.g_spec, "g")
    return CovariateModel(f_spec, g_spec)
