"""Exact Gaussian process regression with an ARD squared-exponential kernel.

Everything here is dense linear algebra on Cholesky factors.  Posteriors are
immutable snapshots, so a fitted :class:`GPPosterior` may be shared freely
between readers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

logger = logging.getLogger(__name__)

JITTER_LEVELS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
LOG_2PI = float(np.log(2.0 * np.pi))


class GPNumericalError(RuntimeError):
    """Raised when a covariance cannot be factorised even after jitter."""


@dataclass(frozen=True)
class KernelSpec:
    """Hyperparameters of ``sv * exp(-0.5 * sum(((a - b) / ls)**2)) + noise``.

    Lengthscales may be ``inf``, which switches the matching input dimension
    off entirely.
    """

    signal_variance: float
    lengthscales: tuple[float, ...]
    noise_variance: float = 0.0

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "noise_variance", float(self.noise_variance))
        if not self.signal_variance > 0:
            raise ValueError(f"signal_variance must be > 0, got {self.signal_variance}")
        if len(ls) == 0 or not all(v > 0 for v in ls):
            raise ValueError(f"lengthscales must be a non-empty vector of positive values, got {ls}")
        if not self.noise_variance >= 0:
            raise ValueError(f"noise_variance must be >= 0, got {self.noise_variance}")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    @classmethod
    def isotropic(cls, signal_variance: float, lengthscale: float, dim: int, noise_variance: float = 0.0):
        return cls(signal_variance, (lengthscale,) * dim, noise_variance)

    def replace(self, **changes) -> "KernelSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "lengthscales": list(self.lengthscales),
            "noise_variance": self.noise_variance,
        }


def _as_matrix(X, name="X") -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {X.shape}")
    return X


def _scaled(X: np.ndarray, spec: KernelSpec) -> np.ndarray:
    if X.shape[1] != spec.dim:
        raise ValueError(f"input has {X.shape[1]} columns but kernel expects {spec.dim}")
    return X / np.asarray(spec.lengthscales)


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def kernel_matrix(X1, X2, spec: KernelSpec, add_noise: bool = False) -> np.ndarray:
    """Cross-covariance between the rows of ``X1`` and ``X2``.

    With ``add_noise`` the noise variance is added on the diagonal; this is
    only meaningful when ``X1`` and ``X2`` are the same set of points.
    """
    A = _scaled(_as_matrix(X1, "X1"), spec)
    B = A if X2 is X1 else _scaled(_as_matrix(X2, "X2"), spec)
    K = spec.signal_variance * np.exp(-0.5 * _sqdist(A, B))
    if X2 is X1:
        np.fill_diagonal(K, spec.signal_variance)
    if add_noise:
        if K.shape[0] != K.shape[1]:
            raise ValueError("add_noise requires a square kernel matrix")
        K[np.diag_indices_from(K)] += spec.noise_variance
    return K


def kernel_diag(X, spec: KernelSpec) -> np.ndarray:
    X = _as_matrix(X)
    if X.shape[1] != spec.dim:
        raise ValueError(f"input has {X.shape[1]} columns but kernel expects {spec.dim}")
    return np.full(X.shape[0], spec.signal_variance)


def robust_cholesky(K: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``K``, escalating diagonal jitter on failure."""
    if K.shape[0] == 0:
        return np.zeros((0, 0))
    scale = max(float(np.mean(np.diag(K))), 1e-300)
    eye = np.eye(K.shape[0])
    for jitter in JITTER_LEVELS:
        try:
            return np.linalg.cholesky(K + (jitter * scale) * eye if jitter else K)
        except np.linalg.LinAlgError:
            continue
    raise GPNumericalError(
        f"covariance of size {K.shape[0]} is not positive definite after jitter {JITTER_LEVELS[-1]:g}"
    )


def psd_sqrt(C: np.ndarray) -> np.ndarray:
    """A matrix ``L`` with ``L @ L.T == C`` for a symmetric PSD ``C``.

    Tries a plain Cholesky first and falls back to a clamped eigendecomposition,
    which copes with exactly singular covariances (e.g. pinned values).
    """
    k = C.shape[0]
    if k == 0:
        return np.zeros((0, 0))
    diag = np.diag(C)
    if np.all(diag <= 0.0):
        return np.zeros_like(C)
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True, eq=False)
class GPPosterior:
    """A zero-mean GP conditioned on ``(train_inputs, train_targets)``.

    ``noise`` holds the per-observation noise variance actually used; by
    default every entry equals ``spec.noise_variance``.
    """

    train_inputs: np.ndarray
    train_targets: np.ndarray
    spec: KernelSpec
    chol_factor: np.ndarray
    alpha: np.ndarray
    noise: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.train_targets.shape[0]

    def _cross(self, Xq: np.ndarray) -> np.ndarray:
        return kernel_matrix(self.train_inputs, Xq, self.spec)

    def mean_var(self, Xq, include_noise: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Marginal means and variances only; O(n k) memory."""
        Xq = _as_matrix(Xq, "Xq")
        prior = kernel_diag(Xq, self.spec)
        if self.n == 0:
            mean, var = np.zeros(Xq.shape[0]), prior.copy()
        else:
            Ks = self._cross(Xq)
            mean = Ks.T @ self.alpha
            V = solve_triangular(self.chol_factor, Ks, lower=True, check_finite=False)
            var = np.maximum(prior - (V * V).sum(0), 0.0)
        if include_noise:
            var = var + self.spec.noise_variance
        return mean, var

    def mean_cov(self, Xq, include_noise: bool = False) -> tuple[np.ndarray, np.ndarray]:
        Xq = _as_matrix(Xq, "Xq")
        Kqq = kernel_matrix(Xq, Xq, self.spec)
        if self.n == 0:
            mean, cov = np.zeros(Xq.shape[0]), Kqq
        else:
            Ks = self._cross(Xq)
            mean = Ks.T @ self.alpha
            V = solve_triangular(self.chol_factor, Ks, lower=True, check_finite=False)
            cov = Kqq - V.T @ V
            cov = 0.5 * (cov + cov.T)
            d = np.diag_indices_from(cov)
            cov[d] = np.maximum(cov[d], 0.0)
        if include_noise:
            cov[np.diag_indices_from(cov)] += self.spec.noise_variance
        return mean, cov

    def sample(self, Xq, m: int, rng: np.random.Generator, include_noise: bool = False) -> np.ndarray:
        Xq = _as_matrix(Xq, "Xq")
        return sample_mvn(*self.mean_cov(Xq, include_noise), m, rng)


def sample_mvn(mean: np.ndarray, cov: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` joint draws (rows) from ``N(mean, cov)``."""
    if m < 0:
        raise ValueError("m must be non-negative")
    k = mean.shape[0]
    if m == 0:
        return np.zeros((0, k))
    L = psd_sqrt(cov)
    z = rng.standard_normal((m, k))
    return mean + z @ L.T


def fit_posterior(X, y, spec: KernelSpec, noise: Sequence[float] | None = None) -> GPPosterior:
    """Condition the GP prior on noisy observations ``y`` at ``X``.

    ``noise`` optionally overrides the spec's homoscedastic noise with one
    variance per observation.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
    if X.shape[0] and X.shape[1] != spec.dim:
        raise ValueError(f"input has {X.shape[1]} columns but kernel expects {spec.dim}")
    if X.shape[0] == 0:
        X = np.zeros((0, spec.dim))
    noise_vec = np.full(y.shape[0], spec.noise_variance) if noise is None else np.asarray(noise, float)
    if noise_vec.shape != y.shape:
        raise ValueError("noise must have one entry per observation")
    K = kernel_matrix(X, X, spec)
    K[np.diag_indices_from(K)] += noise_vec
    L = robust_cholesky(K)
    alpha = cho_solve((L, True), y, check_finite=False) if y.size else np.zeros(0)
    return GPPosterior(X.copy(), y.copy(), spec, L, alpha, noise_vec)


def posterior_mean_cov(post: GPPosterior, Xq) -> tuple[np.ndarray, np.ndarray]:
    return post.mean_cov(Xq)


def sample_posterior(post: GPPosterior, Xq, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` joint draws of the latent function at ``Xq`` (shape ``m x k``)."""
    return post.sample(Xq, m, rng)


def negative_log_likelihood(X, y, spec: KernelSpec, noise: Sequence[float] | None = None) -> float:
    post = fit_posterior(X, y, spec, noise)
    n = post.n
    return float(
        0.5 * post.train_targets @ post.alpha
        + np.log(np.diag(post.chol_factor)).sum()
        + 0.5 * n * LOG_2PI
    )


@dataclass(frozen=True)
class HyperBounds:
    """Box constraints for :func:`optimize_hyperparameters`, in natural units."""

    signal_variance: tuple[float, float] = (1e-4, 1e3)
    lengthscales: tuple[float, float] = (1e-3, 1e3)
    noise_variance: tuple[float, float] = (1e-6, 1e1)

    def __post_init__(self):
        for name in ("signal_variance", "lengthscales", "noise_variance"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"bounds for {name} need 0 < lower <= upper, got {(lo, hi)}")

    def log_box(self, dim: int) -> np.ndarray:
        rows = [self.signal_variance] + [self.lengthscales] * dim + [self.noise_variance]
        return np.log(np.asarray(rows, dtype=float))


def _pack(spec: KernelSpec) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.r_[spec.signal_variance, spec.lengthscales, spec.noise_variance])


def _unpack(theta: np.ndarray) -> KernelSpec:
    v = np.exp(theta)
    return KernelSpec(v[0], tuple(v[1:-1]), v[-1])


def optimize_hyperparameters(
    X,
    y,
    init: KernelSpec,
    bounds: HyperBounds | None = None,
    restarts: int = 5,
    rng: np.random.Generator | None = None,
    maxiter: int = 400,
) -> KernelSpec:
    """Minimise the negative log marginal likelihood over all kernel fields.

    Nelder-Mead runs in log-parameter space from the (clamped) initial spec
    and from ``restarts - 1`` log-uniform random starts inside the box.  The
    result never has a higher NLL than the clamped initial spec.
    """
    bounds = bounds or HyperBounds()
    X = _as_matrix(X)
    y = np.asarray(y, float).reshape(-1)
    box = bounds.log_box(init.dim)
    lo, hi = box[:, 0], box[:, 1]
    rng = rng if rng is not None else np.random.default_rng(0)

    def objective(theta):
        theta = np.clip(theta, lo, hi)
        try:
            return negative_log_likelihood(X, y, _unpack(theta))
        except GPNumericalError:
            return np.inf

    start = np.clip(np.nan_to_num(_pack(init), nan=0.0, posinf=hi.max(), neginf=lo.min()), lo, hi)
    starts = [start] + [rng.uniform(lo, hi) for _ in range(max(restarts, 1) - 1)]
    best_theta, best_val = start, objective(start)
    for x0 in starts:
        try:
            res = minimize(
                objective, x0, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                options={"maxiter": maxiter, "xatol": 1e-4, "fatol": 1e-6},
            )
        except (ValueError, np.linalg.LinAlgError) as exc:
            logger.debug("restart failed: %s", exc)
            continue
        if np.isfinite(res.fun) and res.fun < best_val:
            best_theta, best_val = np.clip(res.x, lo, hi), float(res.fun)
    if not np.isfinite(best_val):
        raise GPNumericalError("no restart produced a finite negative log likelihood")
    return _unpack(best_theta)
