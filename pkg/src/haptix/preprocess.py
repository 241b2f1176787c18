"""Contact detection, acquisition windowing, 64-step gridding, derivatives,
normalization, and feature assembly.

All functions are pure; identical inputs give bitwise-identical outputs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .core import ComplianceClass, Trial
from .errors import (
    DegenerateSeries,
    DegenerateStream,
    DimensionMismatch,
    EmptyTrainingSet,
    NoContact,
)

# Canonical channel order; derivative channels follow in the same order.
ALL_CHANNELS = ("fx", "fy", "fz", "tx", "ty", "tz", "px", "py", "pz", "rx", "ry", "rz")

CHANNEL_GROUPS = {
    "force": ("fx", "fy", "fz"),
    "torque": ("tx", "ty", "tz"),
    "position": ("px", "py", "pz"),
    "rotation": ("rx", "ry", "rz"),
}

# channel -> (stream attribute, column index within the stream array)
_CHANNEL_SOURCE = {
    "fx": ("wrench", 1), "fy": ("wrench", 2), "fz": ("wrench", 3),
    "tx": ("wrench", 4), "ty": ("wrench", 5), "tz": ("wrench", 6),
    "px": ("pose", 1), "py": ("pose", 2), "pz": ("pose", 3),
    "rx": ("pose", 4), "ry": ("pose", 5), "rz": ("pose", 6),
}

GRID_STEPS = 64
DEFAULT_THRESHOLD = 0.5   # Newtons
DEFAULT_HOLD = 0.05       # seconds
DEFAULT_DURATION = 0.82   # seconds
STD_FLOOR = 1e-8

_TOKEN_RE = re.compile(r"\s*([+\-]?)\s*([a-z]+)\s*")


@dataclass(frozen=True)
class FeatureSet:
    """Selected raw channels plus an optional derivative for each.

    channels are stored deduplicated in canonical order, so two specs that
    select the same channels compare equal.
    """

    channels: tuple[str, ...]
    derivatives: bool = False

    def __post_init__(self):
        bad = [c for c in self.channels if c not in ALL_CHANNELS]
        if bad:
            raise ValueError(f"unknown channels {bad}")
        ordered = tuple(c for c in ALL_CHANNELS if c in set(self.channels))
        if not ordered:
            raise ValueError("feature set selects no channels")
        object.__setattr__(self, "channels", ordered)

    @classmethod
    def from_groups(cls, force=False, torque=False, position=False,
                    rotation=False, derivatives=False) -> "FeatureSet":
        chans: list[str] = []
        for flag, group in ((force, "force"), (torque, "torque"),
                            (position, "position"), (rotation, "rotation")):
            if flag:
                chans.extend(CHANNEL_GROUPS[group])
        return cls(channels=tuple(chans), derivatives=derivatives)

    @classmethod
    def parse(cls, text: str) -> "FeatureSet":
        """Parse a spec like "all", "fz", "force+torque+deriv", "all-fz".

        Tokens are channel names, group names (force, torque, position,
        rotation), "all", or "deriv"; '+' (or ',') adds and '-' removes.
        """
        s = text.strip().lower().replace(",", "+")
        if not s:
            raise ValueError("empty feature spec")
        pos = 0
        selected: set[str] = set()
        deriv = False
        while pos < len(s):
            m = _TOKEN_RE.match(s, pos)
            if m is None or (pos > 0 and m.group(1) == ""):
                raise ValueError(f"cannot parse feature spec at {s[pos:]!r}")
            sign, name = m.group(1) or "+", m.group(2)
            pos = m.end()
            if name == "deriv":
                deriv = sign == "+"
                continue
            if name == "all":
                chans = ALL_CHANNELS
            elif name in CHANNEL_GROUPS:
                chans = CHANNEL_GROUPS[name]
            elif name in ALL_CHANNELS:
                chans = (name,)
            else:
                raise ValueError(f"unknown feature token {name!r}")
            if sign == "+":
                selected.update(chans)
            else:
                selected.difference_update(chans)
        if not selected:
            raise ValueError(f"feature spec {text!r} selects no channels")
        return cls(channels=tuple(selected), derivatives=deriv)

    @property
    def channel_names(self) -> tuple[str, ...]:
        if self.derivatives:
            return self.channels + tuple("d" + c for c in self.channels)
        return self.channels

    def spec_string(self) -> str:
        base = "+".join(self.channels) if set(self.channels) != set(ALL_CHANNELS) else "all"
        return base + ("+deriv" if self.derivatives else "")


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Grid of normalized feature values, one column per channel."""

    values: np.ndarray
    channel_names: tuple[str, ...]
    label: Optional[ComplianceClass] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {v.shape}")
        if v.shape[1] != len(self.channel_names):
            raise ValueError(
                f"{v.shape[1]} columns vs {len(self.channel_names)} channel names"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("feature matrix contains non-finite values")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (
            self.channel_names == other.channel_names
            and self.label == other.label
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean/std fitted on training data only."""

    mean: np.ndarray
    std: np.ndarray
    channel_names: tuple[str, ...]

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).copy()
        std = np.asarray(self.std, dtype=np.float64).copy()
        if mean.shape != (len(self.channel_names),) or std.shape != mean.shape:
            raise ValueError("stats shape inconsistent with channel names")
        if np.any(std <= 0.0):
            raise ValueError("std must be positive (floored at fit time)")
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    def apply(self, fm: FeatureMatrix) -> FeatureMatrix:
        if fm.channel_names != self.channel_names:
            raise DimensionMismatch(
                f"feature channels {fm.channel_names} do not match "
                f"normalization channels {self.channel_names}"
            )
        return FeatureMatrix(
            values=(fm.values - self.mean) / self.std,
            channel_names=fm.channel_names,
            label=fm.label,
        )


class WindowedTrial(NamedTuple):
    trial: Trial
    truncated: bool


def detect_contact(trial: Trial, threshold: float = DEFAULT_THRESHOLD,
                   hold: float = DEFAULT_HOLD) -> float:
    """Earliest time where |force| reaches threshold and stays there for hold.

    The hold window must be fully covered by the recording; a crossing too
    close to the end of the trace does not count.
    """
    if threshold <= 0.0:
        raise ValueError("threshold must be > 0")
    if hold < 0.0:
        raise ValueError("hold must be >= 0")
    t = trial.wrench[:, 0]
    mag = np.linalg.norm(trial.wrench[:, 1:4], axis=1)
    above = mag >= threshold
    t_end = t[-1]
    for i in np.flatnonzero(above):
        ti = t[i]
        if ti + hold > t_end:
            break
        window = (t >= ti) & (t <= ti + hold)
        if np.all(above[window]):
            return float(ti)
    raise NoContact(
        f"no sustained force above {threshold} N for {hold} s in trial {trial.id}"
    )


def extract_window(trial: Trial, t0: float,
                   duration: float = DEFAULT_DURATION) -> WindowedTrial:
    """Restrict both streams to [t0, t0 + duration], timestamps rebased to 0.

    truncated is set when the recording does not extend past the window end.
    """
    if duration <= 0.0:
        raise ValueError("duration must be > 0")
    if t0 < 0.0:
        raise ValueError("t0 must be >= 0")
    t1 = t0 + duration

    def cut(stream, name):
        t = stream[:, 0]
        keep = (t >= t0) & (t <= t1)
        seg = stream[keep].copy()
        if seg.shape[0] < 2:
            raise DegenerateStream(
                f"{name} stream of trial {trial.id} has {seg.shape[0]} samples "
                f"in window [{t0}, {t1}]"
            )
        seg[:, 0] -= t0
        return seg

    wrench = cut(trial.wrench, "wrench")
    pose = cut(trial.pose, "pose")
    truncated = min(trial.wrench[-1, 0], trial.pose[-1, 0]) <= t1
    seg = Trial(
        id=trial.id,
        subject=trial.subject,
        session=trial.session,
        food_item=trial.food_item,
        label=trial.label,
        wrench=wrench,
        pose=pose,
        source=trial.source,
    )
    return WindowedTrial(trial=seg, truncated=truncated)


def resample_linear(series, n: int = GRID_STEPS) -> np.ndarray:
    """Linear interpolation of a (t, value) series onto a uniform n-grid.

    Grid point i sits at t_first + i * (t_last - t_first) / (n - 1); the
    endpoints reproduce the input exactly, and input already on the grid
    passes through unchanged.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"series must be (m, 2) pairs, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise DegenerateSeries(f"series has {arr.shape[0]} points, need >= 2")
    t, v = arr[:, 0], arr[:, 1]
    if np.any(np.diff(t) <= 0.0):
        raise ValueError("series times must be strictly increasing")
    if t[-1] == t[0]:
        raise DegenerateSeries("series spans zero time")
    grid = np.linspace(t[0], t[-1], n)
    if arr.shape[0] == n and np.array_equal(t, grid):
        return v.copy()
    out = np.interp(grid, t, v)
    out[0] = v[0]
    out[-1] = v[-1]
    return out


def first_derivative(grid_values, dt: float) -> np.ndarray:
    """Finite-difference derivative on a uniform grid, same length as input.

    Central differences inside, second-order one-sided stencils at the ends
    (plain one-sided when only two points exist).
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    v = np.asarray(grid_values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 2:
        raise ValueError("grid_values must be 1-D with >= 2 points")
    if v.shape[0] == 2:
        d = (v[1] - v[0]) / dt
        return np.array([d, d])
    return np.gradient(v, dt, edge_order=2)


def fit_norm(train: Sequence[FeatureMatrix]) -> NormStats:
    """Per-channel mean/std pooled over all rows of all training matrices."""
    train = list(train)
    if not train:
        raise EmptyTrainingSet("fit_norm requires at least one feature matrix")
    names = train[0].channel_names
    for fm in train[1:]:
        if fm.channel_names != names:
            raise DimensionMismatch(
                f"mixed channel sets in training data: {fm.channel_names} vs {names}"
            )
    pooled = np.concatenate([fm.values for fm in train], axis=0)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    std = np.maximum(std, STD_FLOOR)
    return NormStats(mean=mean, std=std, channel_names=names)


def assemble_features(trial: Trial, fs: FeatureSet,
                      stats: Optional[NormStats] = None,
                      n: int = GRID_STEPS) -> FeatureMatrix:
    """Resample each selected channel to the n-grid and stack columns.

    Derivative channels (when enabled) are computed on the grid from the
    resampled values; z-scoring is applied only when stats is given.
    """
    cols = []
    derivs = []
    for name in fs.channels:
        attr, idx = _CHANNEL_SOURCE[name]
        stream = getattr(trial, attr)
        series = np.column_stack([stream[:, 0], stream[:, idx]])
        vals = resample_linear(series, n)
        cols.append(vals)
        if fs.derivatives:
            span = stream[-1, 0] - stream[0, 0]
            derivs.append(first_derivative(vals, span / (n - 1)))
    values = np.column_stack(cols + derivs)
    fm = FeatureMatrix(values=values, channel_names=fs.channel_names,
                       label=trial.label)
    if stats is not None:
        fm = stats.apply(fm)
    return fm


@dataclass(frozen=True)
class PreprocConfig:
    """Windowing and gridding parameters for the trial -> features pipeline.

    duration None means the full post-contact phase instead of a fixed prefix.
    """

    threshold: float = DEFAULT_THRESHOLD
    hold: float = DEFAULT_HOLD
    duration: Optional[float] = DEFAULT_DURATION
    grid: int = GRID_STEPS

    def __post_init__(self):
        if self.threshold <= 0 or self.hold < 0 or self.grid < 2:
            raise ValueError("invalid preprocessing parameters")
        if self.duration is not None and self.duration <= 0:
            raise ValueError("duration must be > 0")


def prepare_trial(trial: Trial, fs: FeatureSet,
                  stats: Optional[NormStats] = None,
                  cfg: PreprocConfig = PreprocConfig()) -> FeatureMatrix:
    """Full chain: contact detection, windowing, gridding, normalization."""
    t0 = detect_contact(trial, cfg.threshold, cfg.hold)
    if cfg.duration is None:
        duration = max(trial.wrench[-1, 0], trial.pose[-1, 0]) - t0
        if duration <= 0.0:
            raise DegenerateStream(f"trial {trial.id} ends at contact")
    else:
        duration = cfg.duration
    seg = extract_window(trial, t0, duration).trial
    return assemble_features(seg, fs, stats, cfg.grid)
