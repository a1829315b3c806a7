"""Ground-truth systems for the studies.

The unicycle stands in for a legged robot: commanded speeds pass through a
first-order actuation lag, observations carry additive sensor noise, and three
perturbation environments disturb the true state (a rope anchored off the
path, a rocky arc of the path, and scheduled pokes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TrajectoryDataset, wrap_angle

__all__ = [
    "Perturbation",
    "Run",
    "UnicycleWorld",
    "WaypointController",
    "apply_perturbation",
    "circle_waypoints",
    "collect_run",
    "elbow_dataset",
    "elbow_eval",
    "random_waypoints",
    "rope_pull",
    "rocky_terrain",
    "poke",
    "save_mask",
    "unicycle_step",
    "waypoint_controller",
]


def elbow_eval(z):
    """``0.8 + (z + 0.2) * (1 - 0.5 / (1 + exp(-2 z)))``."""
    z = np.asarray(z, dtype=float)
    out = 0.8 + (z + 0.2) * (1.0 - 0.5 / (1.0 + np.exp(-2.0 * z)))
    return float(out) if out.ndim == 0 else out


def elbow_dataset(T: int = 50, low: float = -10.0, high: float = 10.0, seed: int = 0) -> TrajectoryDataset:
    """``T`` uniform draws of ``z`` on ``[low, high]`` (sorted) with targets ``f(z)``."""
    z = np.sort(np.random.default_rng(seed).uniform(low, high, size=T))
    return TrajectoryDataset(z[:, None], elbow_eval(z)[:, None], 1, 0, source="elbow", rate_hz=1.0)


def circle_waypoints(n: int = 20, diameter: float = 3.0, center=(0.0, 0.0)) -> np.ndarray:
    """``n`` points on a circle, ordered anticlockwise."""
    a = 2.0 * np.pi * np.arange(n) / n
    r = diameter / 2.0
    return np.column_stack([center[0] + r * np.cos(a), center[1] + r * np.sin(a)])


def random_waypoints(n: int, half_width: float = 2.0, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-half_width, half_width, size=(n, 2))


@dataclass(frozen=True)
class UnicycleWorld:
    """Plant, controller and sensor settings for :func:`collect_run`.

    The speed gain ``kp`` and the 0.5 m ``capture_radius`` keep the weak turn
    gain from spiralling outward or orbiting a missed waypoint. ``start_spread``
    randomises the start pose; ``actuation_noise`` and ``command_dither`` add
    per-step Gaussian noise to the actuated and the commanded speeds.
    """

    dt: float = 0.1
    waypoints: np.ndarray = field(default_factory=circle_waypoints)
    kp: float = 0.1
    angular_gain: float = 0.2
    speed_floor: float = 0.1
    lag: float = 0.3
    sensor_noise: tuple[float, float, float] = (0.005, 0.005, 0.005)
    capture_radius: float = 0.5
    skip_passed: bool = True
    start: tuple[float, float, float] = (1.5, 0.0, math.pi / 2)
    start_spread: float = 0.0
    actuation_noise: tuple[float, float] = (0.0, 0.0)
    command_dither: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        wp = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if wp.shape[0] < 1 or wp.shape[1] != 2:
            raise ValueError("need at least one (x, y) waypoint")
        if min(self.kp, self.angular_gain, self.speed_floor) < 0 or not 0 <= self.lag < 1:
            raise ValueError("gains must be >= 0 and lag in [0, 1)")
        if self.start_spread < 0 or min(self.actuation_noise) < 0 or min(self.sensor_noise) < 0 or min(self.command_dither) < 0:
            raise ValueError("noise scales must be >= 0")
        object.__setattr__(self, "waypoints", wp)


def unicycle_step(state, u, world: UnicycleWorld, actuation=None, rng=None):
    """Advance the true state one step.

    ``actuation`` holds the actuated ``(v, omega)`` from the previous step (the
    command itself when ``None``); it relaxes toward the command by the lag
    factor before integrating. When ``world.actuation_noise`` is nonzero, ``rng``
    perturbs the actuated speeds of this step only. Returns
    ``(next_state, next_actuation)``.
    """
    x, y, a = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    act = u if actuation is None else np.asarray(actuation, dtype=float)
    act = world.lag * act + (1.0 - world.lag) * u
    v, w = act
    if any(world.actuation_noise):
        if rng is None:
            raise ValueError("actuation noise needs an rng")
        v, w = act + np.asarray(world.actuation_noise) * rng.standard_normal(2)
    nxt = np.array([
        x + world.dt * v * math.cos(a),
        y + world.dt * v * math.sin(a),
        float(wrap_angle(a + world.dt * w)),
    ])
    return nxt, act


def waypoint_controller(state, world: UnicycleWorld, index: int = 0) -> np.ndarray:
    """Proportional speed and bearing law toward ``world.waypoints[index]``."""
    x, y, a = np.asarray(state, dtype=float)
    wx, wy = world.waypoints[index % len(world.waypoints)]
    dist = math.hypot(wx - x, wy - y)
    bearing = math.atan2(wy - y, wx - x)
    v = world.speed_floor + world.kp * dist
    w = world.angular_gain * float(wrap_angle(bearing - a))
    return np.array([v, w])


class WaypointController:
    """Stateful wrapper that advances to the next waypoint inside the capture radius."""

    def __init__(self, world: UnicycleWorld, index: int = 0):
        self.world = world
        self.index = index

    def __call__(self, state) -> np.ndarray:
        wps = self.world.waypoints
        here = wps[self.index % len(wps)]
        after = wps[(self.index + 1) % len(wps)]
        d_here = math.hypot(here[0] - state[0], here[1] - state[1])
        d_after = math.hypot(after[0] - state[0], after[1] - state[1])
        # The weak turn gain cannot always hit a waypoint, so also move on once
        # the following one is nearer.
        if d_here < self.world.capture_radius or (self.world.skip_passed and len(wps) > 1 and d_after < d_here):
            self.index += 1
        return waypoint_controller(state, self.world, self.index)


@dataclass(frozen=True)
class Perturbation:
    """Environment disturbance applied to the true state after each step.

    ``params`` per kind:

    * ``rope_pull``: ``anchor`` (x, y), ``length``, ``preload`` (m per step of
      pull once taut) and ``stiffness`` in [0, 1] per metre of stretch
    * ``rocky_terrain``: ``center`` (x, y), ``arc`` (start, end) polar angles,
      ``slip`` fraction of planar travel lost, ``jitter`` position std,
      ``heading_jitter`` std
    * ``poke``: ``times`` (s), ``duration`` steps, ``magnitude`` per step,
      ``seed`` for the push directions (one random direction per poke)
    """

    kind: str
    params: dict

    def __post_init__(self):
        if self.kind not in ("rope_pull", "rocky_terrain", "poke"):
            raise ValueError(f"unknown perturbation {self.kind!r}")
        p = self.params
        if self.kind == "rope_pull" and (p["length"] <= 0 or p["preload"] < 0 or not 0 <= p["stiffness"] <= 1):
            raise ValueError("rope needs length > 0, preload >= 0 and stiffness in [0, 1]")
        if self.kind == "rocky_terrain" and (p["jitter"] < 0 or p["heading_jitter"] < 0 or not 0 <= p["slip"] <= 1):
            raise ValueError("jitter scales must be >= 0 and slip in [0, 1]")
        if self.kind == "poke" and (p["magnitude"] < 0 or p["duration"] < 1):
            raise ValueError("poke needs magnitude >= 0 and duration >= 1")


def rope_pull(anchor=(0.0, -5.0), length=5.97, preload=0.0, stiffness=0.5) -> Perturbation:
    return Perturbation("rope_pull", {"anchor": tuple(anchor), "length": length, "preload": preload, "stiffness": stiffness})


def rocky_terrain(
    center=(0.0, 0.0), arc=(math.pi / 2, 7 * math.pi / 6), slip=0.85, jitter=0.003, heading_jitter=0.01
) -> Perturbation:
    return Perturbation(
        "rocky_terrain",
        {"center": tuple(center), "arc": tuple(arc), "slip": slip, "jitter": jitter, "heading_jitter": heading_jitter},
    )


def poke(times=(15.0, 35.0, 55.0, 75.0, 95.0, 115.0), duration=1, magnitude=0.25, seed=0) -> Perturbation:
    return Perturbation("poke", {"times": tuple(times), "duration": duration, "magnitude": magnitude, "seed": seed})


def _in_arc(angle: float, arc) -> bool:
    lo, hi = arc
    return float(wrap_angle(angle - lo)) % (2 * np.pi) <= float(wrap_angle(hi - lo)) % (2 * np.pi)


def apply_perturbation(pert: Perturbation, state, nominal_next, rng, t: float = 0.0, dt: float = 0.1):
    """Return the disturbed next state; identical to ``nominal_next`` when inactive."""
    nxt = np.array(nominal_next, dtype=float)
    p = pert.params
    if pert.kind == "rope_pull":
        ax, ay = p["anchor"]
        dx, dy = ax - nxt[0], ay - nxt[1]
        dist = math.hypot(dx, dy)
        stretch = dist - p["length"]
        pull = p["preload"] + p["stiffness"] * stretch
        if stretch <= 0 or pull == 0:
            return nxt
        nxt[0] += pull * dx / dist
        nxt[1] += pull * dy / dist
        return nxt
    if pert.kind == "rocky_terrain":
        cx, cy = p["center"]
        if not _in_arc(math.atan2(state[1] - cy, state[0] - cx), p["arc"]):
            return nxt
        if p["slip"] == 0 and p["jitter"] == 0 and p["heading_jitter"] == 0:
            return nxt
        nxt[:2] -= p["slip"] * (nxt[:2] - np.asarray(state[:2], dtype=float))
        nxt[:2] += p["jitter"] * rng.standard_normal(2)
        nxt[2] = float(wrap_angle(nxt[2] + p["heading_jitter"] * rng.standard_normal()))
        return nxt
    # poke: each scheduled push lasts `duration` steps along a direction fixed per poke
    k = _active_poke(p, t, dt)
    if k is None or p["magnitude"] == 0:
        return nxt
    direction = np.random.default_rng([p.get("seed", 0), k]).uniform(0.0, 2.0 * np.pi)
    nxt[0] += p["magnitude"] * math.cos(direction)
    nxt[1] += p["magnitude"] * math.sin(direction)
    return nxt


def _active_poke(p, t: float, dt: float):
    for k, t0 in enumerate(p["times"]):
        start = round(t0 / dt)
        step = round(t / dt)
        if start <= step < start + p["duration"]:
            return k
    return None


@dataclass(frozen=True)
class Run:
    """One closed-loop recording: dataset, observed streams and ground-truth mask."""

    dataset: TrajectoryDataset
    states: np.ndarray  # (T + 1, D) observed, heading wrapped
    controls: np.ndarray  # (T, D_u)
    true_states: np.ndarray  # (T + 1, D)
    mask: np.ndarray  # (T,) perturbation altered transition t
    kinds: tuple[str, ...]


def collect_run(
    world: UnicycleWorld,
    perturbations=(),
    duration: float = 600.0,
    rate: float = 10.0,
    seed: int = 0,
    source: str = "sim",
) -> Run:
    """Simulate ``duration * rate`` closed-loop transitions.

    The controller acts on noisy observations. Heading targets are stored as the
    current observed heading plus the wrapped observed increment, so each target
    is a continuous function of the inputs; the observed state streams keep the
    wrapped heading.
    """
    if not duration > 0 or not rate > 0:
        raise ValueError("duration and rate must be > 0")
    T = int(round(duration * rate))
    if abs(world.dt - 1.0 / rate) > 1e-12:
        world = UnicycleWorld(**{**world.__dict__, "dt": 1.0 / rate})
    rng = np.random.default_rng(seed)
    noise = np.asarray(world.sensor_noise, dtype=float)
    ctrl = WaypointController(world)
    x = np.array(world.start, dtype=float)
    if world.start_spread > 0:
        x[:2] += rng.uniform(-world.start_spread, world.start_spread, 2)
        x[2] = rng.uniform(-np.pi, np.pi)
    act = None
    true = np.empty((T + 1, 3))
    obs = np.empty((T + 1, 3))
    controls = np.empty((T, 2))
    mask = np.zeros(T, dtype=bool)
    kinds = []
    true[0] = x
    obs[0] = x + noise * rng.standard_normal(3)
    obs[0, 2] = wrap_angle(obs[0, 2])
    for t in range(T):
        u = ctrl(obs[t])
        if any(world.command_dither):
            u = u + np.asarray(world.command_dither) * rng.standard_normal(2)
        nominal, act = unicycle_step(x, u, world, act, rng)
        nxt = nominal
        kind = ""
        for pert in perturbations:
            moved = apply_perturbation(pert, x, nxt, rng, t=t * world.dt, dt=world.dt)
            if not np.array_equal(moved, nxt):
                kind = pert.kind
            nxt = moved
        mask[t] = not np.array_equal(nxt, nominal)
        kinds.append(kind if mask[t] else "")
        x = nxt
        controls[t] = u
        true[t + 1] = x
        o = x + noise * rng.standard_normal(3)
        o[2] = wrap_angle(o[2])
        obs[t + 1] = o
    inputs = np.column_stack([obs[:-1], controls])
    targets = obs[1:].copy()
    targets[:, 2] = obs[:-1, 2] + wrap_angle(obs[1:, 2] - obs[:-1, 2])
    ds = TrajectoryDataset(inputs, targets, 3, 2, source=source, rate_hz=rate)
    return Run(ds, obs, controls, true, mask, tuple(kinds))


def save_mask(run: Run, path) -> None:
    with Path(path).open("w") as fh:
        fh.write("t,perturbed,kind\n")
        for t, (m, k) in enumerate(zip(run.mask, run.kinds)):
            fh.write(f"{t},{int(m)},{k}\n")
