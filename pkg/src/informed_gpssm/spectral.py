"""Learned Fourier representations of a nominal dynamics model.

A component of the nominal model is written as a cosine network

    f(z) = sum_j S_j cos(w_j . z + phi_j)

whose triplets ``(w_j, S_j, phi_j)`` are fitted by minimising the mean squared
reconstruction error plus ``lambda_w * ||W||_F^2``. In ``direct`` mode the
amplitudes and phases are free parameters. In ``encoder`` mode they are the
modulus and argument of a learned quadrature of the Fourier integral, with one
positive integration weight per sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, gammaln

from .data import TrajectoryDataset, wrap_angle

__all__ = [
    "AutoencoderConfig",
    "SpectralFeatureSet",
    "TrainingDivergedError",
    "decode",
    "direct_loss_and_grad",
    "encode_quadrature",
    "encoder_loss_and_grad",
    "load_features",
    "load_loss_trace",
    "matern_spectrum_baseline",
    "reconstruction_loss",
    "save_features",
    "save_loss_trace",
    "softplus",
    "spectral_density",
    "train",
]


class TrainingDivergedError(RuntimeError):
    """The reconstruction loss became non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"reconstruction loss diverged at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class SpectralFeatureSet:
    """Frequencies ``(M, D_z)``, amplitudes ``(M,)`` and phases ``(M,)``."""

    frequencies: np.ndarray
    amplitudes: np.ndarray
    phases: np.ndarray

    def __post_init__(self):
        W = np.atleast_2d(np.array(self.frequencies, dtype=float))
        S = np.array(self.amplitudes, dtype=float).reshape(-1)
        phi = np.array(self.phases, dtype=float).reshape(-1)
        if not (W.shape[0] == S.shape[0] == phi.shape[0]) or W.shape[0] < 1:
            raise ValueError(
                f"frequencies/amplitudes/phases disagree in length: "
                f"{W.shape[0]}, {S.shape[0]}, {phi.shape[0]}"
            )
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(S)) and np.all(np.isfinite(phi))):
            raise ValueError("feature set contains non-finite entries")
        if np.any(S < 0):
            raise ValueError("amplitudes must be non-negative")
        for name, arr in (("frequencies", W), ("amplitudes", S), ("phases", phi)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def M(self) -> int:
        return self.frequencies.shape[0]

    @property
    def input_dim(self) -> int:
        return self.frequencies.shape[1]

    def features(self, Z) -> np.ndarray:
        """Feature matrix ``cos(Z W^T + phi)`` of shape ``(T, M)`` (or ``(M,)`` for one input)."""
        Z = np.asarray(Z, dtype=float)
        if Z.shape[-1] != self.input_dim:
            raise ValueError(f"input has dimension {Z.shape[-1]}, features expect {self.input_dim}")
        return np.cos(Z @ self.frequencies.T + self.phases)

    def __call__(self, Z) -> np.ndarray:
        return self.features(Z) @ self.amplitudes


def decode(features: SpectralFeatureSet, z) -> np.ndarray | float:
    """Evaluate ``sum_j S_j cos(w_j . z + phi_j)``; scalar for a single input."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        z = z.reshape(1)
    out = features(z)
    return float(out) if np.ndim(out) == 0 else out


def _targets(data: TrajectoryDataset, dim: int) -> np.ndarray:
    if not 0 <= dim < data.state_dim:
        raise IndexError(f"dim {dim} out of range for state dimension {data.state_dim}")
    return data.targets[:, dim]


def reconstruction_loss(
    features: SpectralFeatureSet, data: TrajectoryDataset, dim: int, lambda_w: float
) -> float:
    X = _targets(data, dim)
    r = features(data.inputs) - X
    return float(np.mean(r**2) + lambda_w * np.sum(features.frequencies**2))


def direct_loss_and_grad(S, phi, W, Z, X, lambda_w):
    """Loss and gradients ``(dS, dphi, dW)`` with free amplitudes and phases."""
    theta = Z @ W.T + phi
    C, Sn = np.cos(theta), np.sin(theta)
    r = C @ S - X
    T = X.shape[0]
    loss = np.mean(r * r) + lambda_w * np.sum(W * W)
    g = (2.0 / T) * r
    gS = C.T @ g
    Sg = Sn.T @ g
    gphi = -S * Sg
    gW = -S[:, None] * ((Sn * g[:, None]).T @ Z) + 2.0 * lambda_w * W
    return float(loss), (gS, gphi, gW)


def softplus(x):
    return np.logaddexp(0.0, x)


def _quadrature(W, eta, Z, X):
    E = np.exp(1j * (Z @ W.T))
    w = X * eta
    c = np.conj(E).T @ w
    return E, w, c


def encoder_loss_and_grad(W, rho, Z, X, lambda_w):
    """Loss and gradients ``(dW, drho)`` with quadrature weights ``eta = softplus(rho)``.

    The decoder output ``sum_j |c_j| cos(w_j . z + arg c_j)`` equals
    ``Re(sum_j c_j exp(i w_j . z))``, which is smooth in ``c`` even where
    ``|c_j| = 0``.
    """
    eta = softplus(rho)
    E, w, c = _quadrature(W, eta, Z, X)
    f = (E @ c).real
    r = f - X
    T = X.shape[0]
    loss = np.mean(r * r) + lambda_w * np.sum(W * W)
    g = (2.0 / T) * r
    q = E.T @ g
    gw = (np.conj(E) @ q).real
    grho = gw * X * expit(rho)
    gW = (1j * c[:, None] * ((g[:, None] * E).T @ Z)).real
    gW += (-1j * q[:, None] * ((w[:, None] * np.conj(E)).T @ Z)).real
    gW += 2.0 * lambda_w * W
    return float(loss), (gW, grho)


def _amp_phase(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    S = np.abs(c)
    phi = np.where(S > 0, wrap_angle(np.angle(c)), 0.0)
    return S, phi


def encode_quadrature(data: TrajectoryDataset, dim: int, frequencies, weights):
    """Amplitudes and phases of ``c_j = sum_t X_t exp(-i w_j . z_t) eta_t``.

    Phases of zero-modulus coefficients are set to 0.
    """
    X = _targets(data, dim)
    W = np.atleast_2d(np.asarray(frequencies, dtype=float))
    eta = np.asarray(weights, dtype=float).reshape(-1)
    if eta.shape[0] != len(data):
        raise ValueError(f"{eta.shape[0]} quadrature weights for {len(data)} samples")
    if np.any(eta <= 0):
        raise ValueError("quadrature weights must be positive")
    if W.shape[1] != data.input_dim:
        raise ValueError("frequency dimension does not match the dataset inputs")
    _, _, c = _quadrature(W, eta, data.inputs, X)
    return _amp_phase(c)


@dataclass(frozen=True)
class AutoencoderConfig:
    M: int = 1500
    lambda_w: float = 0.1
    epochs: int = 100_000
    learning_rate: float = 0.01
    freq_init: float = 3.0
    mode: str = "direct"
    seed: int = 0
    precision: str = "double"

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.lambda_w < 0:
            raise ValueError("lambda_w must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.freq_init > 0:
            raise ValueError("freq_init must be > 0")
        if self.mode not in ("direct", "encoder"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.precision not in ("double", "single"):
            raise ValueError(f"unknown precision {self.precision!r}")


class _Adam:
    def __init__(self, params, b1=0.9, b2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.b1, self.b2, self.eps = b1, b2, eps
        self.k = 0

    def step(self, params, grads, lr):
        self.k += 1
        c1 = 1.0 - self.b1**self.k
        c2 = 1.0 - self.b2**self.k
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _cosine_lr(lr0: float, epoch: int, epochs: int) -> float:
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / epochs))


def _fit_direct(Z, X, W, a, phi, config: AutoencoderConfig, train_amp_phase=True):
    dt = np.float32 if config.precision == "single" else np.float64
    Zc, Xc = Z.astype(dt), X.astype(dt)
    params = [W, a, phi] if train_amp_phase else [W]
    opt = _Adam(params)
    trace = np.empty(config.epochs)
    for e in range(config.epochs):
        S = np.abs(a)
        loss, (gS, gphi, gW) = direct_loss_and_grad(
            S.astype(dt), phi.astype(dt), W.astype(dt), Zc, Xc, config.lambda_w
        )
        if not math.isfinite(loss):
            raise TrainingDivergedError(e)
        trace[e] = loss
        lr = _cosine_lr(config.learning_rate, e, config.epochs)
        if train_amp_phase:
            grads = [gW.astype(float), (gS * np.sign(a)).astype(float), gphi.astype(float)]
        else:
            grads = [gW.astype(float)]
        opt.step(params, grads, lr)
        if train_amp_phase:
            phi[:] = wrap_angle(phi)
    return W, np.abs(a), wrap_angle(phi), trace


def _initial_eta_scale(W, Z, X) -> float:
    # Best single positive scale for a uniform quadrature, by least squares.
    E, _, c = _quadrature(W, np.ones_like(X), Z, X)
    f1 = (E @ c).real
    denom = float(f1 @ f1)
    scale = float(f1 @ X) / denom if denom > 0 else 0.0
    return scale if scale > 0 else 1.0 / X.shape[0]


def _fit_encoder(Z, X, W, config: AutoencoderConfig):
    dt = np.float32 if config.precision == "single" else np.float64
    Zc, Xc = Z.astype(dt), X.astype(dt)
    eta0 = _initial_eta_scale(W, Z, X)
    rho = np.full(X.shape[0], math.log(math.expm1(eta0)) if eta0 < 30 else eta0)
    params = [W, rho]
    opt = _Adam(params)
    trace = np.empty(config.epochs)
    for e in range(config.epochs):
        loss, (gW, grho) = encoder_loss_and_grad(W.astype(dt), rho.astype(dt), Zc, Xc, config.lambda_w)
        if not math.isfinite(loss):
            raise TrainingDivergedError(e)
        trace[e] = loss
        opt.step(params, [gW.astype(float), grho.astype(float)], _cosine_lr(config.learning_rate, e, config.epochs))
    _, _, c = _quadrature(W, softplus(rho), Z, X)
    S, phi = _amp_phase(c)
    return W, S, phi, trace


def _init_params(rng, M, Dz, X, freq_init):
    W = rng.uniform(-freq_init, freq_init, size=(M, Dz))
    phi = rng.uniform(-np.pi, np.pi, size=M)
    scale = math.sqrt(float(np.mean(X**2))) * math.sqrt(2.0 / M)
    a = np.full(M, scale if scale > 0 else 1.0 / M)
    return W, a, phi


def train(data: TrajectoryDataset, dim: int, config: AutoencoderConfig):
    """Fit a feature set to component ``dim`` of the dataset targets.

    Returns
    -------
    features : SpectralFeatureSet
    trace : ndarray of shape (epochs,)
        Reconstruction loss at the start of each epoch.
    """
    X = _targets(data, dim).copy()
    Z = data.inputs
    rng = np.random.default_rng(config.seed)
    W, a, phi = _init_params(rng, config.M, data.input_dim, X, config.freq_init)
    if config.mode == "direct":
        W, S, phi, trace = _fit_direct(Z, X, W, a, phi, config)
    else:
        W, S, phi, trace = _fit_encoder(Z, X, W, config)
    feats = SpectralFeatureSet(W, S, phi)
    if not all(np.isfinite(feats.frequencies).ravel()):
        raise TrainingDivergedError(config.epochs)
    return feats, trace


def spectral_density(omega, kind: str = "matern", lengthscale: float = 1.0, variance: float = 1.0, nu: float = 1.5):
    """Spectral density of a stationary isotropic kernel over angular frequency.

    Normalised so that ``k(0) = (2 pi)^{-D} * integral S(w) dw = variance``.
    ``kind`` is ``"matern"`` (``nu`` in {1/2, 3/2, 5/2}) or ``"se"``.
    """
    if not lengthscale > 0:
        raise ValueError("lengthscale must be > 0")
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    D = omega.shape[1]
    r2 = np.sum(omega**2, axis=1)
    if kind == "se":
        return variance * (2.0 * np.pi * lengthscale**2) ** (D / 2) * np.exp(-0.5 * lengthscale**2 * r2)
    if kind != "matern":
        raise ValueError(f"unknown spectrum kind {kind!r}")
    if nu not in (0.5, 1.5, 2.5):
        raise ValueError(f"Matern order must be 1/2, 3/2 or 5/2, got {nu}")
    log_c = (
        D * math.log(2.0)
        + 0.5 * D * math.log(math.pi)
        + gammaln(nu + D / 2)
        + nu * math.log(2.0 * nu)
        - gammaln(nu)
        - 2.0 * nu * math.log(lengthscale)
    )
    return variance * np.exp(log_c - (nu + D / 2) * np.log(2.0 * nu / lengthscale**2 + r2))


def matern_spectrum_baseline(
    data: TrajectoryDataset,
    dim: int,
    config: AutoencoderConfig,
    lengthscale: float,
    nu: float = 1.5,
    kind: str = "matern",
    variance: float | None = None,
) -> SpectralFeatureSet:
    """Stationary feature set: random phases, fitted frequencies, spectrum amplitudes.

    Phases are drawn from U(0, 2 pi) and held fixed together with a constant
    amplitude ``sqrt(2/M) * rms(X)`` while the frequencies minimise the
    reconstruction loss. The amplitudes are then replaced by the kernel's
    spectral density at the fitted frequencies. ``variance`` defaults to the
    empirical variance of the targets.
    """
    if not lengthscale > 0:
        raise ValueError("lengthscale must be > 0")
    X = _targets(data, dim).copy()
    rng = np.random.default_rng(config.seed)
    W = rng.uniform(-config.freq_init, config.freq_init, size=(config.M, data.input_dim))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=config.M)
    scale = math.sqrt(float(np.mean(X**2))) * math.sqrt(2.0 / config.M)
    a = np.full(config.M, scale if scale > 0 else 1.0 / config.M)
    W, _, _, _ = _fit_direct(data.inputs, X, W, a, phases.copy(), config, train_amp_phase=False)
    var = float(np.var(X)) if variance is None else float(variance)
    S = spectral_density(W, kind=kind, lengthscale=lengthscale, variance=var, nu=nu)
    return SpectralFeatureSet(W, S, wrap_angle(phases))


def save_features(features: SpectralFeatureSet, path) -> None:
    """One row per feature: ``j, S_j, phi_j, w_j1..w_jDz``."""
    Dz = features.input_dim
    with Path(path).open("w") as fh:
        fh.write(",".join(["j", "S", "phi"] + [f"w{i + 1}" for i in range(Dz)]) + "\n")
        for j in range(features.M):
            vals = [features.amplitudes[j], features.phases[j], *features.frequencies[j]]
            fh.write(str(j) + "," + ",".join(format(v, ".17g") for v in vals) + "\n")


def load_features(path) -> SpectralFeatureSet:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return SpectralFeatureSet(rows[:, 3:], rows[:, 1], rows[:, 2])


def save_loss_trace(trace, path) -> None:
    with Path(path).open("w") as fh:
        fh.write("epoch,loss\n")
        for e, v in enumerate(trace):
            fh.write(f"{e},{format(float(v), '.17g')}\n")


def load_loss_trace(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)[:, 1]


