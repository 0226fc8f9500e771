"""Gaussian-process machinery for the safety constraint.

Kernels, the kernel metric, an incrementally factorized GP posterior and
the monotonically intersected confidence bounds consumed by the safe-set
operators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.spatial.distance import cdist

__all__ = ['KernelSpec', 'kernel_eval', 'kernel_matrix', 'kernel_metric',
           'metric_matrix', 'PosteriorModel', 'BetaSchedule',
           'ConfidenceState', 'update_bounds', 'gamma_estimate',
           'NumericalError']

JITTER = 1e-10


class NumericalError(ArithmeticError):
    """Raised when the kernel system cannot be factorized."""


@dataclass(frozen=True)
class KernelSpec:
    """Stationary kernel with a single lengthscale.

    Parameters
    ----------
    family : {'rbf', 'matern52'}
    lengthscale : float
        Lengthscale in input units.
    variance : float
        Prior variance k(x, x).
    """

    family: str = 'rbf'
    lengthscale: float = 0.1
    variance: float = 1.0

    def __post_init__(self):
        if self.family not in ('rbf', 'matern52'):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")
        if not self.variance > 0:
            raise ValueError("variance must be positive")

    def from_distance(self, r):
        """Kernel value as a function of the Euclidean distance."""
        r = np.asarray(r, dtype=float) / self.lengthscale
        if self.family == 'rbf':
            return self.variance * np.exp(-0.5 * r ** 2)
        s = math.sqrt(5.0) * r
        return self.variance * (1.0 + s + s ** 2 / 3.0) * np.exp(-s)


def _as_point_array(x):
    """Coerce to an (n, d) array; 1-D input is read as n scalar points."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x.reshape(-1, 1)
    return x


def kernel_eval(spec: KernelSpec, x, z) -> float:
    """Evaluate k(x, z) for two single points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if x.shape != z.shape or x.ndim != 1:
        raise ValueError(f"dimension mismatch: {x.shape} vs {z.shape}")
    return float(spec.from_distance(np.linalg.norm(x - z)))


def kernel_matrix(spec: KernelSpec, a, b) -> np.ndarray:
    """Cross-covariance matrix between two point sets of shape (n, d)."""
    a = _as_point_array(a)
    b = _as_point_array(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return spec.from_distance(cdist(a, b))


def kernel_metric(spec: KernelSpec, x, z) -> float:
    """Distance induced by the kernel, sqrt(k(x,x) - 2k(x,z) + k(z,z))."""
    kxz = kernel_eval(spec, x, z)
    return math.sqrt(max(2.0 * spec.variance - 2.0 * kxz, 0.0))


def metric_matrix(spec: KernelSpec, points) -> np.ndarray:
    """Pairwise kernel metric between all points; exact zeros on the diagonal."""
    k = kernel_matrix(spec, points, points)
    d = np.sqrt(np.clip(2.0 * spec.variance - 2.0 * k, 0.0, None))
    np.fill_diagonal(d, 0.0)
    return d


class PosteriorModel:
    """GP posterior with an incrementally grown Cholesky factor.

    The factor ``L`` of ``K_t + noise_std**2 I`` is extended by one row per
    observation. When a fixed ``domain`` of points is supplied, the model also
    maintains ``V = L^{-1} K(X, domain)`` so that posterior mean and variance on
    the whole domain are updated in O(t |domain|) per observation.

    Parameters
    ----------
    kernel : KernelSpec
    noise_std : float
        Standard deviation of the Gaussian observation noise.
    domain : array_like, optional
        (n, d) points on which moments are cached.
    prior_mean : float
        Constant prior mean.
    """

    def __init__(self, kernel: KernelSpec, noise_std: float, domain=None,
                 prior_mean: float = 0.0):
        if not noise_std > 0:
            raise ValueError("noise_std must be positive")
        self.kernel = kernel
        self.noise_std = float(noise_std)
        self.prior_mean = float(prior_mean)
        self.points: list[np.ndarray] = []
        self.values: list[float] = []
        self._chol = np.zeros((0, 0))
        self._alpha = np.zeros(0)  # L^{-1} (y - m)
        self.domain = None if domain is None else _as_point_array(domain)
        if self.domain is not None:
            n = self.domain.shape[0]
            self._v = np.zeros((0, n))
            self._mean = np.full(n, self.prior_mean)
            self._var = np.full(n, kernel.variance)

    @property
    def t(self) -> int:
        """Number of observations."""
        return len(self.values)

    @property
    def inputs(self) -> np.ndarray:
        if not self.points:
            dim = 1 if self.domain is None else self.domain.shape[1]
            return np.zeros((0, dim))
        return np.vstack(self.points)

    def add_observation(self, x, y: float, index: Optional[int] = None):
        """Append ``(x, y)`` and extend the factorization by one row.

        ``index`` may name the domain node equal to ``x``, which lets the
        update reuse the cached cross-covariances.
        """
        if index is not None and self.domain is not None:
            x = self.domain[index]
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        noise_var = self.noise_std ** 2
        t = self.t
        if t:
            if index is not None and self.domain is not None:
                l_vec = self._v[:, index].copy()
            else:
                k_vec = kernel_matrix(self.kernel, self.inputs, x[None])[:, 0]
                l_vec = solve_triangular(self._chol, k_vec, lower=True)
        else:
            l_vec = np.zeros(0)
        d2 = self.kernel.variance + noise_var - l_vec @ l_vec
        if d2 <= 0:
            d2 += JITTER * self.kernel.variance
        if d2 <= 0:
            raise NumericalError("kernel system is not positive definite")
        l_diag = math.sqrt(d2)

        chol = np.zeros((t + 1, t + 1))
        chol[:t, :t] = self._chol
        chol[t, :t] = l_vec
        chol[t, t] = l_diag
        self._chol = chol
        a_new = (y - self.prior_mean - l_vec @ self._alpha) / l_diag
        self._alpha = np.append(self._alpha, a_new)
        self.points.append(x)
        self.values.append(float(y))

        if self.domain is not None:
            k_dom = kernel_matrix(self.kernel, x[None], self.domain)[0]
            v_new = (k_dom - l_vec @ self._v) / l_diag
            self._v = np.vstack([self._v, v_new])
            self._mean = self._mean + v_new * a_new
            self._var = self._var - v_new ** 2

    def factorize(self):
        """Recompute the Cholesky factor from scratch.

        On failure a jitter of ``1e-10 * variance`` is added to the diagonal
        and the factorization is retried once.
        """
        x = self.inputs
        k = kernel_matrix(self.kernel, x, x) + self.noise_std ** 2 * np.eye(len(x))
        try:
            chol = cholesky(k, lower=True)
        except LinAlgError:
            k[np.diag_indices_from(k)] += JITTER * self.kernel.variance
            try:
                chol = cholesky(k, lower=True)
            except LinAlgError as err:
                raise NumericalError(str(err)) from err
        return chol

    def refresh(self):
        """Rebuild all cached quantities by full recomputation."""
        chol = self.factorize()
        self._chol = chol
        y = np.asarray(self.values) - self.prior_mean
        self._alpha = solve_triangular(chol, y, lower=True) if self.t else np.zeros(0)
        if self.domain is not None:
            if self.t:
                kx = kernel_matrix(self.kernel, self.inputs, self.domain)
                self._v = solve_triangular(chol, kx, lower=True)
            else:
                self._v = np.zeros((0, self.domain.shape[0]))
            self._mean = self.prior_mean + self._v.T @ self._alpha
            self._var = self.kernel.variance - np.sum(self._v ** 2, axis=0)

    def posterior_at(self, nodes):
        """Posterior mean and variance at arbitrary points.

        Returns
        -------
        mean, var : ndarray
        """
        nodes = _as_point_array(nodes)
        prior = np.full(nodes.shape[0], self.kernel.variance)
        if not self.t:
            return np.full(nodes.shape[0], self.prior_mean), prior
        ks = kernel_matrix(self.kernel, self.inputs, nodes)
        a = solve_triangular(self._chol, ks, lower=True)
        mean = self.prior_mean + a.T @ self._alpha
        var = prior - np.sum(a ** 2, axis=0)
        return mean, np.clip(var, 0.0, None)

    def domain_moments(self):
        """Cached posterior mean and variance over the domain."""
        if self.domain is None:
            raise ValueError("model has no domain")
        return self._mean.copy(), np.clip(self._var, 0.0, None)

    def log_det_ratio(self) -> float:
        """log det(I + noise^-2 K_t)."""
        if not self.t:
            return 0.0
        return 2.0 * float(np.sum(np.log(np.diag(self._chol)))) \
            - 2.0 * self.t * math.log(self.noise_std)


def gamma_estimate(model: PosteriorModel) -> float:
    """Information gain of the observed inputs, 0.5 log det(I + K_t / noise^2)."""
    return max(0.5 * model.log_det_ratio(), 0.0)


@dataclass
class BetaSchedule:
    """Confidence scaling.

    ``scale(t)`` returns the multiplier of the posterior standard deviation,
    i.e. beta_t^(1/2). In constant mode ``value`` is that multiplier. The
    theoretical mode uses B + 4 sigma sqrt(gamma_t + 1 + ln(1/delta)), with
    gamma_t supplied by ``gamma`` or estimated from the model.
    """

    mode: str = 'constant'
    value: float = 3.0
    bound: float = 1.0
    delta: float = 0.05
    noise_std: float = 0.01
    gamma: Optional[Callable[[int], float]] = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ('constant', 'theoretical'):
            raise ValueError(f"unknown beta mode {self.mode!r}")
        if self.mode == 'constant' and not self.value > 0:
            raise ValueError("beta must be positive")
        if self.mode == 'theoretical' and not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    @classmethod
    def constant(cls, value: float) -> 'BetaSchedule':
        return cls(mode='constant', value=value)

    @classmethod
    def theoretical(cls, bound, delta, noise_std, gamma=None) -> 'BetaSchedule':
        return cls(mode='theoretical', bound=bound, delta=delta,
                   noise_std=noise_std, gamma=gamma)

    def scale(self, t: int, model: Optional[PosteriorModel] = None) -> float:
        if self.mode == 'constant':
            return float(self.value)
        if self.gamma is not None:
            g = float(self.gamma(t))
        elif model is not None:
            g = gamma_estimate(model)
        else:
            g = 0.0
        return self.bound + 4.0 * self.noise_std * math.sqrt(
            g + 1.0 + math.log(1.0 / self.delta))

    def beta(self, t: int, model: Optional[PosteriorModel] = None) -> float:
        return self.scale(t, model) ** 2


@dataclass
class ConfidenceState:
    """Per-node lower and upper bounds, intersected over time."""

    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def initial(cls, n: int, seed=None) -> 'ConfidenceState':
        """Unbounded intervals, with lower bound 0 on the seed nodes."""
        lower = np.full(n, -np.inf)
        upper = np.full(n, np.inf)
        if seed is not None:
            lower[np.asarray(seed, dtype=bool)] = 0.0
        return cls(lower, upper)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def copy(self) -> 'ConfidenceState':
        return ConfidenceState(self.lower.copy(), self.upper.copy())

    def intersect(self, mean, std, scale) -> 'ConfidenceState':
        # Clipping against the old interval keeps l <= u and both monotone
        # even when the new interval is disjoint from the old one.
        lower = np.minimum(np.maximum(self.lower, mean - scale * std), self.upper)
        upper = np.maximum(np.minimum(self.upper, mean + scale * std), self.lower)
        return ConfidenceState(lower, upper)


def update_bounds(state: ConfidenceState, model: PosteriorModel,
                  beta: BetaSchedule, t: int) -> ConfidenceState:
    """Intersect the bounds with the current posterior confidence interval."""
    if t < 1:
        raise ValueError("t must be at least 1")
    mean, var = model.domain_moments()
    return state.intersect(mean, np.sqrt(var), beta.scale(t, model))
