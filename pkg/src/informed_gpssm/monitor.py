"""Receding-horizon out-of-distribution monitor.

At every tick the monitor rolls the sampled models ``H`` steps from the current
observed state under the executed controls and scores the realised observations
with the Monte-Carlo negative ELBO

    L = (1/R) sum_r sum_h ||x_obs[h] - x_roll[r, h]||^2 / (2 sigma_n^2)

(the Gaussian log-normaliser is dropped). Raw losses are min-max normalised to
[0, 1] and flagged above a threshold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import wrap_angle
from .gpssm import Gpssm
from .rollout import RolloutBundle, draw_models, rollout

__all__ = [
    "MonitorConfig",
    "MonitorTrace",
    "OodReport",
    "flag_reports",
    "normalize",
    "ood_loss",
    "pooled_normalize",
    "run_monitor",
    "save_reports",
]


@dataclass(frozen=True)
class MonitorConfig:
    H: int = 30
    R: int = 20
    sigma_n: float = 0.01
    threshold: float = 0.5
    normalization: str = "offline-minmax"
    bounds: tuple[float, float] | None = None
    rollout_noise: bool = True
    rollout_precision: str = "single"
    seed: int = 0

    def __post_init__(self):
        if self.H < 1 or self.R < 1:
            raise ValueError("H and R must be >= 1")
        if not self.sigma_n > 0:
            raise ValueError("sigma_n must be > 0")
        # 1.0 is allowed and never flags, since normalised losses are <= 1.
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must lie in (0, 1]")
        if self.rollout_precision not in ("double", "single"):
            raise ValueError(f"unknown rollout precision {self.rollout_precision!r}")
        if self.normalization not in ("offline-minmax", "fixed-bounds"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.normalization == "fixed-bounds":
            if self.bounds is None or not self.bounds[1] > self.bounds[0]:
                raise ValueError("fixed-bounds normalization needs bounds with max > min")


@dataclass(frozen=True)
class OodReport:
    t: int
    raw_loss: float
    normalized_loss: float
    flag: bool
    complete: bool = True


def ood_loss(bundle: RolloutBundle | np.ndarray, observed, sigma_n: float, wrap_dims=()) -> float:
    """Monte-Carlo OoD loss of ``observed`` (H, D) against rollouts (R, H, D).

    Residuals on ``wrap_dims`` are taken on the circle.
    """
    traj = bundle.trajectories if isinstance(bundle, RolloutBundle) else np.asarray(bundle, dtype=float)
    obs = np.asarray(observed, dtype=float)
    if traj.ndim != 3 or obs.shape != traj.shape[1:]:
        raise ValueError(f"observed shape {obs.shape} does not match rollouts {traj.shape}")
    if not sigma_n > 0:
        raise ValueError("sigma_n must be > 0")
    res = obs[None] - traj
    if wrap_dims:
        dims = list(wrap_dims)
        res[..., dims] = wrap_angle(res[..., dims])
    return float(np.sum(res * res) / traj.shape[0] / (2.0 * sigma_n**2))


def normalize(raw, mode: str = "offline-minmax", bounds=None) -> np.ndarray:
    """Map losses to [0, 1]; a constant sequence maps to zeros. NaNs pass through."""
    x = np.asarray(raw, dtype=float)
    if x.size == 0:
        raise ValueError("cannot normalize an empty sequence")
    if mode == "fixed-bounds":
        if bounds is None or not bounds[1] > bounds[0]:
            raise ValueError("fixed-bounds mode needs bounds with max > min")
        lo, hi = bounds
        return np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    if mode != "offline-minmax":
        raise ValueError(f"unknown normalization {mode!r}")
    finite = x[np.isfinite(x)]
    if finite.size == 0:
        return x.copy()
    lo, hi = finite.min(), finite.max()
    if hi <= lo:
        return np.where(np.isfinite(x), 0.0, x)
    return (x - lo) / (hi - lo)


def pooled_normalize(runs) -> list[np.ndarray]:
    """Min-max normalise several raw-loss sequences on one shared scale."""
    runs = [np.asarray(r, dtype=float) for r in runs]
    joined = normalize(np.concatenate(runs))
    out, k = [], 0
    for r in runs:
        out.append(joined[k: k + r.size])
        k += r.size
    return out


def flag_reports(t, raw, normalized, threshold: float) -> list[OodReport]:
    reports = []
    for ti, r, n in zip(t, raw, normalized):
        complete = bool(np.isfinite(r))
        reports.append(OodReport(int(ti), float(r), float(n), bool(complete and n > threshold), complete))
    return reports


@dataclass
class MonitorTrace:
    t: np.ndarray
    raw: np.ndarray
    tick_seconds: np.ndarray
    bundles: dict

    @property
    def complete(self) -> np.ndarray:
        return np.isfinite(self.raw)


def run_monitor(
    model: Gpssm,
    states,
    controls,
    config: MonitorConfig,
    keep_bundles=(),
) -> tuple[list[OodReport], MonitorTrace]:
    """Replay aligned streams of observed states ``(T + 1, D)`` and controls ``(T, D_u)``.

    The tick at ``t`` draws ``R`` fresh weight samples, rolls them out under
    ``controls[t:t+H]`` from ``states[t]`` and scores ``states[t+1:t+H+1]``.
    Ticks without ``H`` future observations are reported incomplete and never
    flagged. With ``offline-minmax`` normalisation, the scale is this run's own
    min/max; use :func:`pooled_normalize` on ``trace.raw`` to pool several runs.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    T = controls.shape[0]
    if states.shape[0] != T + 1:
        raise ValueError("need one more observed state than controls")
    H, R = config.H, config.R
    raw = np.full(T, np.nan)
    ticks = np.full(T, np.nan)
    bundles = {}
    keep = set(keep_bundles)
    for t in range(T):
        if t + H > T:
            continue
        draw_seed, noise_seed = np.random.SeedSequence([config.seed, t]).generate_state(2)
        t0 = time.perf_counter()
        models = draw_models(model, R, int(draw_seed))
        b = rollout(
            models,
            states[t],
            controls[t: t + H],
            noise=config.rollout_noise,
            seed=int(noise_seed),
            precision=config.rollout_precision,
        )
        raw[t] = ood_loss(b, states[t + 1: t + H + 1], config.sigma_n, model.wrap_dims)
        ticks[t] = time.perf_counter() - t0
        if t in keep:
            bundles[t] = b
    if config.normalization == "fixed-bounds":
        norm = normalize(raw, "fixed-bounds", config.bounds)
    else:
        norm = normalize(raw)
    trace = MonitorTrace(np.arange(T), raw, ticks, bundles)
    return flag_reports(trace.t, raw, norm, config.threshold), trace


def save_reports(reports, path) -> None:
    """CSV ``t, raw_loss, normalized_loss, flag`` (incomplete ticks have empty losses)."""
    with Path(path).open("w") as fh:
        fh.write("t,raw_loss,normalized_loss,flag\n")
        for r in reports:
            if r.complete:
                fh.write(f"{r.t},{format(r.raw_loss, '.17g')},{format(r.normalized_loss, '.17g')},{int(r.flag)}\n")
            else:
                fh.write(f"{r.t},,,0\n")
