"""Trajectories, summary observations, parameter bounds and observation sets."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np


@dataclass(frozen=True)
class Trajectory:
    """One episode ``(s_0, a_0, s_1, ..., a_{T-1}, s_T)``.

    States and actions are stored as integer identifiers in the encoding of
    the environment that produced them.
    """

    states: tuple[int, ...]
    actions: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.states) != len(self.actions) + 1:
            raise ValueError(
                f"trajectory needs |states| = |actions| + 1, got "
                f"{len(self.states)} states and {len(self.actions)} actions"
            )

    @property
    def length(self) -> int:
        return len(self.actions)


class GridSummary(NamedTuple):
    """Start cell ``(x, y)`` and number of steps of a grid episode."""

    start: tuple[int, int]
    steps: int


class MenuSummary(NamedTuple):
    """Task completion time (ms) and target-present flag of a menu episode."""

    tct_ms: float
    target_present: bool


@dataclass(frozen=True)
class ThetaBounds:
    """Axis-aligned box Θ of admissible parameter vectors."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise ValueError("lower and upper must be equal-length non-empty vectors")
        if not np.all(lo < hi):
            raise ValueError(f"need lower < upper in every dimension, got {self.lower}, {self.upper}")
        if self.names is not None and len(self.names) != lo.size:
            raise ValueError("names must match the number of dimensions")
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))

    @classmethod
    def cube(cls, dim: int, low: float, high: float) -> "ThetaBounds":
        return cls((low,) * dim, (high,) * dim)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, theta: np.ndarray) -> np.ndarray | bool:
        theta = np.asarray(theta, dtype=float)
        inside = np.all((theta >= self.lo) & (theta <= self.hi), axis=-1)
        return bool(inside) if inside.ndim == 0 else inside

    def clip(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.lo, self.hi)

    def to_unit(self, theta: np.ndarray) -> np.ndarray:
        return (np.asarray(theta, dtype=float) - self.lo) / self.width

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        return self.lo + np.asarray(u, dtype=float) * self.width

    def to_dict(self) -> dict:
        d = {"lower": list(self.lower), "upper": list(self.upper)}
        if self.names is not None:
            d["names"] = list(self.names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ThetaBounds":
        names = d.get("names")
        return cls(tuple(d["lower"]), tuple(d["upper"]), tuple(names) if names else None)


GRID_COLUMNS = ("start_x", "start_y", "steps")
MENU_COLUMNS = ("tct_ms", "target_present")


@dataclass(frozen=True)
class ObservationSet:
    """A homogeneous, non-empty collection of summary observations.

    ``kind`` is ``"grid"`` or ``"menu"``.  Rows keep their insertion order so
    that saved files hash reproducibly.
    """

    summaries: tuple
    kind: str
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in ("grid", "menu"):
            raise ValueError(f"unknown observation kind {self.kind!r}")
        summaries = tuple(self.summaries)
        if not summaries:
            raise ValueError("observation set must be non-empty")
        expected = GridSummary if self.kind == "grid" else MenuSummary
        coerced = []
        for s in summaries:
            if isinstance(s, expected):
                coerced.append(s)
            elif self.kind == "grid":
                start, steps = s
                coerced.append(GridSummary((int(start[0]), int(start[1])), int(steps)))
            else:
                tct, present = s
                coerced.append(MenuSummary(float(tct), bool(present)))
        object.__setattr__(self, "summaries", tuple(coerced))

    def __len__(self) -> int:
        return len(self.summaries)

    def __iter__(self):
        return iter(self.summaries)

    @classmethod
    def grid(cls, summaries: Iterable, **meta) -> "ObservationSet":
        return cls(tuple(summaries), "grid", dict(meta))

    @classmethod
    def menu(cls, summaries: Iterable, **meta) -> "ObservationSet":
        return cls(tuple(summaries), "menu", dict(meta))

    # -- array views -------------------------------------------------------
    def grid_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(start_x, start_y, steps)`` integer arrays."""
        self._require("grid")
        arr = np.array([(s.start[0], s.start[1], s.steps) for s in self.summaries], dtype=np.int64)
        return arr[:, 0], arr[:, 1], arr[:, 2]

    def menu_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(tct_ms, target_present)`` arrays."""
        self._require("menu")
        tct = np.array([s.tct_ms for s in self.summaries], dtype=float)
        present = np.array([s.target_present for s in self.summaries], dtype=bool)
        return tct, present

    def counts(self) -> dict:
        """Multiplicity of every distinct summary (grid only)."""
        self._require("grid")
        out: dict = {}
        for s in self.summaries:
            out[s] = out.get(s, 0) + 1
        return out

    def _require(self, kind: str) -> None:
        if self.kind != kind:
            raise ValueError(f"expected {kind} observations, got {self.kind}")

    # -- delimited text ----------------------------------------------------
    def to_csv(self, path: str | Path | None = None, header: dict | None = None) -> str:
        """Serialize as CSV; ``header`` is embedded as ``# key: json`` lines."""
        buf = io.StringIO()
        for key, value in (header or {}).items():
            buf.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
        writer = csv.writer(buf, lineterminator="\n")
        if self.kind == "grid":
            writer.writerow(GRID_COLUMNS)
            for s in self.summaries:
                writer.writerow((s.start[0], s.start[1], s.steps))
        else:
            writer.writerow(MENU_COLUMNS)
            for s in self.summaries:
                writer.writerow((repr(float(s.tct_ms)), int(s.target_present)))
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path) -> "ObservationSet":
        header, rows = read_commented_csv(Path(path).read_text())
        if not rows:
            raise ValueError(f"{path}: no observations")
        columns = tuple(rows[0])
        body = rows[1:]
        if columns == GRID_COLUMNS:
            summaries = [GridSummary((int(x), int(y)), int(t)) for x, y, t in body]
            return cls(tuple(summaries), "grid", header)
        if columns == MENU_COLUMNS:
            summaries = [MenuSummary(float(t), bool(int(p))) for t, p in body]
            return cls(tuple(summaries), "menu", header)
        raise ValueError(f"{path}: unrecognised columns {columns}")

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()[:16]


def read_commented_csv(text: str) -> tuple[dict, list[list[str]]]:
    """Split ``# key: json`` header lines from CSV rows."""
    header: dict = {}
    lines = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            try:
                header[key.strip()] = json.loads(value)
            except json.JSONDecodeError:
                header[key.strip()] = value.strip()
        elif line.strip():
            lines.append(line)
    return header, list(csv.reader(lines))


def as_theta_array(theta: Sequence[float] | np.ndarray) -> np.ndarray:
    return np.atleast_1d(np.asarray(theta, dtype=float))
