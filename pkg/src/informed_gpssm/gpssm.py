"""Weight-space GP dynamics with Mercer kernels built from cosine features.

Each state component ``d`` is an independent model ``f_d(z) = beta_d . Phi_d(z)``
with Gaussian weights. The informed prior takes the learned amplitudes as the
weight means, so the prior predictive equals the embedded nominal model, and
sets the weight variances proportional to them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky

from .data import TrajectoryDataset
from .spectral import SpectralFeatureSet

__all__ = [
    "Gpssm",
    "PosteriorError",
    "PredictiveMoments",
    "WeightPosterior",
    "WeightPrior",
    "condition",
    "condition_arrays",
    "feature_vector",
    "informed_prior",
    "kernel",
    "load_posterior",
    "predict",
    "save_posterior",
    "stationary_prior",
]


class PosteriorError(RuntimeError):
    pass


@dataclass(frozen=True)
class WeightPrior:
    """Independent Gaussian prior ``beta_j ~ N(m_j, v_j)`` for one state component.

    ``sigma_d`` is the process-noise and ``sigma_n`` the observation-noise
    standard deviation. Conditioning uses ``sigma_d**2 + sigma_n**2``.
    """

    mean: np.ndarray
    variances: np.ndarray
    sigma_d: float = 0.01
    sigma_n: float = 0.0
    xi: float = 1.0

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).reshape(-1)
        v = np.asarray(self.variances, dtype=float).reshape(-1)
        if m.shape != v.shape:
            raise ValueError("prior mean and variances differ in length")
        if np.any(v <= 0):
            raise ValueError("prior variances must be positive")
        if not self.sigma_d > 0 or self.sigma_n < 0 or not self.xi > 0:
            raise ValueError("need sigma_d > 0, sigma_n >= 0, xi > 0")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "variances", v)

    @property
    def M(self) -> int:
        return self.mean.shape[0]

    @property
    def noise_var(self) -> float:
        return self.sigma_d**2 + self.sigma_n**2


def informed_prior(features: SpectralFeatureSet, xi: float = 1.0, sigma_d: float = 0.01, sigma_n: float = 0.0) -> WeightPrior:
    """``m_j = S_j`` and ``v_j = max(xi * S_j, eps)``.

    ``eps`` is ``1e-8 * max_j xi * S_j`` (``1e-12`` if every amplitude is zero),
    which keeps the prior covariance invertible.
    """
    if not xi > 0:
        raise ValueError("xi must be > 0")
    m = np.array(features.amplitudes, dtype=float)
    v = xi * m
    top = float(v.max())
    eps = 1e-8 * top if top > 0 else 1e-12
    return WeightPrior(m, np.maximum(v, eps), sigma_d=sigma_d, sigma_n=sigma_n, xi=xi)


def stationary_prior(features: SpectralFeatureSet, signal_var: float, sigma_d: float = 0.01, sigma_n: float = 0.0) -> WeightPrior:
    """Zero-mean prior with variances proportional to ``features.amplitudes``.

    Used with spectrum-assigned amplitudes, this gives the standard non-informed
    GP; variances are scaled so the prior marginal variance is about ``signal_var``.
    """
    S = np.array(features.amplitudes, dtype=float)
    total = float(S.sum())
    if total > 0:
        v = 2.0 * signal_var * S / total
    else:
        v = np.full(S.shape, 2.0 * signal_var / S.size)
    top = float(v.max())
    v = np.maximum(v, 1e-8 * top if top > 0 else 1e-12)
    return WeightPrior(np.zeros_like(S), v, sigma_d=sigma_d, sigma_n=sigma_n)


@dataclass(frozen=True)
class WeightPosterior:
    """``N(mean, cov)`` over the weights of one component, with ``cov = chol @ chol.T``."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    count: int = 0
    sigma_d: float = 0.01
    sigma_n: float = 0.0

    @property
    def M(self) -> int:
        return self.mean.shape[0]

    @property
    def noise_var(self) -> float:
        return self.sigma_d**2 + self.sigma_n**2


@dataclass(frozen=True)
class PredictiveMoments:
    mean: float
    variance: float


def feature_vector(features: SpectralFeatureSet, z) -> np.ndarray:
    return features.features(np.asarray(z, dtype=float))


def kernel(features: SpectralFeatureSet, prior: WeightPrior, z, z2) -> float | np.ndarray:
    """Mercer kernel ``sum_j v_j phi_j(z) phi_j(z2)``; Gram matrix for stacked inputs."""
    P1 = feature_vector(features, z)
    P2 = feature_vector(features, z2)
    if P1.ndim == 1 and P2.ndim == 1:
        return float(np.sum(prior.variances * P1 * P2))
    return np.atleast_2d(P1) @ (prior.variances[:, None] * np.atleast_2d(P2).T)


def _factor(S: np.ndarray) -> np.ndarray:
    S = 0.5 * (S + S.T)
    try:
        return cholesky(S, lower=True)
    except LinAlgError:
        jitter = 1e-12 * max(float(np.trace(S)) / S.shape[0], 1e-300)
        return cholesky(S + jitter * np.eye(S.shape[0]), lower=True)


def condition_arrays(prior: WeightPrior, Phi: np.ndarray, X: np.ndarray, dim: int = 0) -> WeightPosterior:
    """Posterior from a feature matrix ``Phi`` of shape ``(T, M)`` and targets ``X``."""
    M = prior.M
    Phi = np.asarray(Phi, dtype=float).reshape(-1, M)
    X = np.asarray(X, dtype=float).reshape(-1)
    if Phi.shape[0] != X.shape[0]:
        raise ValueError("feature rows and targets differ in length")
    if Phi.shape[0] == 0:
        V = np.diag(prior.variances)
        return WeightPosterior(prior.mean.copy(), V, np.diag(np.sqrt(prior.variances)), 0, prior.sigma_d, prior.sigma_n)
    s2 = prior.noise_var
    vinv = 1.0 / prior.variances
    A = Phi.T @ Phi / s2
    A[np.diag_indices(M)] += vinv
    try:
        cf = cho_factor(A, lower=True)
    except (LinAlgError, ValueError):
        raise PosteriorError(f"posterior precision is not positive definite for dimension {dim}") from None
    mu = cho_solve(cf, vinv * prior.mean + Phi.T @ X / s2)
    cov = cho_solve(cf, np.eye(M))
    cov = 0.5 * (cov + cov.T)
    try:
        L = _factor(cov)
    except LinAlgError:
        raise PosteriorError(f"posterior covariance factorisation failed for dimension {dim}") from None
    return WeightPosterior(mu, cov, L, Phi.shape[0], prior.sigma_d, prior.sigma_n)


def condition(prior: WeightPrior, features: SpectralFeatureSet, data: TrajectoryDataset | None, dim: int) -> WeightPosterior:
    """Exact weight posterior for component ``dim``; ``data=None`` returns the prior."""
    if features.M != prior.M:
        raise ValueError("prior and feature set disagree on M")
    if data is None:
        return condition_arrays(prior, np.empty((0, prior.M)), np.empty(0), dim)
    if not 0 <= dim < data.state_dim:
        raise IndexError(f"dim {dim} out of range")
    return condition_arrays(prior, features.features(data.inputs), data.targets[:, dim], dim)


def predict(post: WeightPosterior, features: SpectralFeatureSet, z) -> PredictiveMoments | tuple[np.ndarray, np.ndarray]:
    """Predictive mean ``mu . Phi`` and variance ``Phi^T Sigma Phi`` of the latent function.

    A single input gives :class:`PredictiveMoments`; a ``(T, D_z)`` batch gives
    arrays ``(means, variances)``.
    """
    if post.M != features.M:
        raise ValueError("posterior and feature set disagree on M")
    P = feature_vector(features, z)
    if P.ndim == 1:
        return PredictiveMoments(float(P @ post.mean), max(float(P @ post.cov @ P), 0.0))
    mean = P @ post.mean
    B = P @ post.chol
    return mean, np.sum(B * B, axis=1)


@dataclass
class Gpssm:
    """Per-dimension feature sets and weight posteriors forming a dynamics model.

    ``wrap_dims`` lists state components that are angles; rollouts wrap them to
    [-pi, pi) and residuals on them are measured on the circle.
    """

    features: list[SpectralFeatureSet]
    posteriors: list[WeightPosterior]
    control_dim: int
    wrap_dims: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if len(self.features) != len(self.posteriors) or not self.features:
            raise ValueError("need one feature set and posterior per state dimension")
        for f, p in zip(self.features, self.posteriors):
            if f.M != p.M or f.input_dim != self.state_dim + self.control_dim:
                raise ValueError("feature set / posterior dimensions are inconsistent")

    @property
    def state_dim(self) -> int:
        return len(self.features)

    @property
    def process_std(self) -> np.ndarray:
        return np.array([p.sigma_d for p in self.posteriors])

    @property
    def obs_std(self) -> np.ndarray:
        return np.array([p.sigma_n for p in self.posteriors])

    @classmethod
    def fit(cls, features, data: TrajectoryDataset, priors, wrap_dims=()) -> "Gpssm":
        posts = [condition(p, f, data, d) for d, (f, p) in enumerate(zip(features, priors))]
        return cls(list(features), posts, data.control_dim, tuple(wrap_dims))

    def predict_mean(self, Z) -> np.ndarray:
        Z = np.atleast_2d(Z)
        return np.column_stack([f.features(Z) @ p.mean for f, p in zip(self.features, self.posteriors)])


def save_posterior(post: WeightPosterior, path) -> None:
    """Header with ``M``/noise values, the mean row, then ``chol`` rows (lower triangle)."""
    with Path(path).open("w") as fh:
        fh.write(f"# M={post.M} sigma_d={post.sigma_d!r} sigma_n={post.sigma_n!r} count={post.count}\n")
        fh.write(",".join(format(v, ".17g") for v in post.mean) + "\n")
        for i in range(post.M):
            fh.write(",".join(format(v, ".17g") for v in post.chol[i, : i + 1]) + "\n")


def load_posterior(path) -> WeightPosterior:
    with Path(path).open() as fh:
        header = fh.readline()
        meta = dict(tok.split("=") for tok in header[1:].split())
        M = int(meta["M"])
        mean = np.array([float(v) for v in fh.readline().split(",")])
        L = np.zeros((M, M))
        for i in range(M):
            L[i, : i + 1] = [float(v) for v in fh.readline().split(",")]
    if mean.shape[0] != M:
        raise ValueError(f"{path}: mean has {mean.shape[0]} entries, header says M={M}")
    return WeightPosterior(mean, L @ L.T, L, int(meta["count"]), float(meta["sigma_d"]), float(meta["sigma_n"]))
