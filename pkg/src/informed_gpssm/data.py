"""State-control-next-state datasets: construction, CSV persistence, slicing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DatasetError",
    "TrajectoryDataset",
    "load_dataset",
    "save_dataset",
    "split_fractions",
    "wrap_angle",
]


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset content."""


def wrap_angle(a):
    """Wrap angles to [-pi, pi); values already in range are returned unchanged."""
    a = np.asarray(a, dtype=float)
    inside = (a >= -np.pi) & (a < np.pi)
    return np.where(inside, a, (a + np.pi) % (2.0 * np.pi) - np.pi)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TrajectoryDataset:
    """Ordered tuples ``(z_t, X_{t+1})`` with ``z_t = [x_t; u_t]``.

    Parameters
    ----------
    inputs : array of shape (T, D + D_u)
        State-action vectors, state components first.
    targets : array of shape (T, D)
        Observed next-state components.
    state_dim, control_dim : int
        ``D`` and ``D_u``.
    source : str
        Free-form provenance tag.
    rate_hz : float
        Sample rate of the recording.
    """

    inputs: np.ndarray
    targets: np.ndarray
    state_dim: int
    control_dim: int
    source: str = ""
    rate_hz: float = 10.0
    index: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.asarray(self.targets, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if self.state_dim < 1 or self.control_dim < 0:
            raise DatasetError("state_dim must be >= 1 and control_dim >= 0")
        if z.shape[0] < 1:
            raise DatasetError("empty dataset")
        if z.shape[1] != self.state_dim + self.control_dim:
            raise DatasetError(
                f"inputs have {z.shape[1]} columns, expected {self.state_dim + self.control_dim}"
            )
        if y.shape != (z.shape[0], self.state_dim):
            raise DatasetError(f"targets shape {y.shape} inconsistent with inputs {z.shape}")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y))):
            raise DatasetError("dataset contains non-finite values")
        idx = np.arange(z.shape[0]) if self.index is None else np.asarray(self.index, dtype=int)
        if idx.shape != (z.shape[0],):
            raise DatasetError("index length does not match row count")
        object.__setattr__(self, "inputs", _readonly(z))
        object.__setattr__(self, "targets", _readonly(y))
        idx = idx.copy()
        idx.setflags(write=False)
        object.__setattr__(self, "index", idx)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.control_dim

    @property
    def states(self) -> np.ndarray:
        return self.inputs[:, : self.state_dim]

    @property
    def controls(self) -> np.ndarray:
        return self.inputs[:, self.state_dim:]

    def subset(self, rows) -> "TrajectoryDataset":
        rows = np.asarray(rows, dtype=int)
        return TrajectoryDataset(
            self.inputs[rows],
            self.targets[rows],
            self.state_dim,
            self.control_dim,
            source=self.source,
            rate_hz=self.rate_hz,
            index=self.index[rows],
        )


def _header(D: int, Du: int) -> list[str]:
    return (
        ["t"]
        + [f"x{i + 1}" for i in range(D)]
        + [f"u{i + 1}" for i in range(Du)]
        + [f"y{i + 1}" for i in range(D)]
    )


def save_dataset(data: TrajectoryDataset, path) -> None:
    """Write ``data`` as CSV; floats use 17 significant digits so loads are bit-exact."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# source={data.source}\n")
        fh.write(f"# rate_hz={data.rate_hz!r}\n")
        fh.write(",".join(_header(data.state_dim, data.control_dim)) + "\n")
        for t, z, y in zip(data.index, data.inputs, data.targets):
            vals = [str(int(t))] + [format(v, ".17g") for v in np.concatenate([z, y])]
            fh.write(",".join(vals) + "\n")


def load_dataset(path, dims: tuple[int, int]) -> TrajectoryDataset:
    """Parse a dataset CSV with ``dims = (D, D_u)``.

    Lines starting with ``#`` carry metadata (``source``, ``rate_hz``). An optional
    header line starting with ``t`` is skipped. Errors name the 1-based file line.
    """
    D, Du = dims
    ncol = 1 + D + Du + D
    meta = {"source": "", "rate_hz": 10.0}
    index, rows = [], []
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                key, _, val = text[1:].partition("=")
                key = key.strip()
                if key == "source":
                    meta["source"] = val.strip()
                elif key == "rate_hz":
                    meta["rate_hz"] = float(val)
                continue
            cells = [c.strip() for c in next(csv.reader([text]))]
            if cells[0] == "t":
                if len(cells) != ncol:
                    raise DatasetError(
                        f"line {lineno}: header has {len(cells)} columns, expected {ncol}"
                    )
                continue
            if len(cells) != ncol:
                raise DatasetError(f"line {lineno}: {len(cells)} columns, expected {ncol}")
            try:
                t = int(cells[0])
                vals = [float(c) for c in cells[1:]]
            except ValueError as exc:
                raise DatasetError(f"line {lineno}: malformed value ({exc})") from None
            if not all(math.isfinite(v) for v in vals):
                raise DatasetError(f"line {lineno}: non-finite value")
            index.append(t)
            rows.append(vals)
    if not rows:
        raise DatasetError("empty dataset")
    arr = np.array(rows)
    return TrajectoryDataset(
        arr[:, : D + Du],
        arr[:, D + Du:],
        D,
        Du,
        source=meta["source"],
        rate_hz=meta["rate_hz"],
        index=np.array(index),
    )


def split_fractions(
    data: TrajectoryDataset,
    fractions,
    holdout: float = 0.1,
    seed: int = 0,
) -> tuple[list[TrajectoryDataset], TrajectoryDataset]:
    """Seeded holdout split plus nested training slices.

    A seeded permutation is drawn once; the first ``floor(holdout * T)`` rows form
    the test set and each slice takes the first ``floor(f * n_train)`` of the rest,
    so a smaller fraction's slice is always contained in a larger one's.
    """
    if not 0.0 < holdout < 1.0:
        raise ValueError(f"holdout must be in (0, 1), got {holdout}")
    fractions = [float(f) for f in fractions]
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {f}")
    T = len(data)
    n_test = max(1, math.floor(holdout * T))
    if n_test >= T:
        raise ValueError("holdout leaves no training rows")
    perm = np.random.default_rng(seed).permutation(T)
    test_rows, train_rows = perm[:n_test], perm[n_test:]
    slices = []
    for f in fractions:
        n = math.floor(f * len(train_rows) + 1e-9)
        if n < 1:
            raise ValueError(f"fraction {f} selects no rows")
        slices.append(data.subset(np.sort(train_rows[:n])))
    return slices, data.subset(np.sort(test_rows))
