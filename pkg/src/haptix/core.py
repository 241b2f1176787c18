"""Domain model, trial file I/O, and stream time-alignment.

A trial is one feeding attempt: a wrench stream (force/torque in the fork's
local frame, z along the tines) and a pose stream (position in meters,
fixed-axis XYZ rotations in radians, global frame), plus the food item and
its compliance label.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import (
    DegenerateStream,
    EmptyDataset,
    MalformedRecord,
    UnknownFoodItem,
)

# Measured lag of the pose stream behind the force/torque stream (seconds).
DEFAULT_STREAM_DELAY = 0.030


class ComplianceClass(enum.IntEnum):
    """Four compliance categories, totally ordered by stiffness.

    Enum values encode the stiffness rank so that
    HARD_SKIN > HARD > MEDIUM > SOFT, and |a - b| is the adjacency
    distance used in confusion analysis.
    """

    HARD_SKIN = 3
    HARD = 2
    MEDIUM = 1
    SOFT = 0

    @property
    def label(self) -> str:
        return _CLASS_LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "ComplianceClass":
        try:
            return _CLASS_BY_LABEL[label.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown compliance class {label!r}") from None


_CLASS_LABELS = {
    ComplianceClass.HARD_SKIN: "hard-skin",
    ComplianceClass.HARD: "hard",
    ComplianceClass.MEDIUM: "medium",
    ComplianceClass.SOFT: "soft",
}
_CLASS_BY_LABEL = {v: k for k, v in _CLASS_LABELS.items()}

# Canonical reporting / tie-break order.
CLASS_ORDER = (
    ComplianceClass.HARD_SKIN,
    ComplianceClass.HARD,
    ComplianceClass.MEDIUM,
    ComplianceClass.SOFT,
)


def class_index(c: ComplianceClass) -> int:
    """Position of a class in CLASS_ORDER (0 = hard-skin ... 3 = soft)."""
    return 3 - int(c)


class Source(enum.Enum):
    HUMAN = "human"
    ROBOT = "robot"


# The twelve solid food items and their compliance categories.
ITEM_CLASSES = {
    "bell pepper": ComplianceClass.HARD_SKIN,
    "cherry tomato": ComplianceClass.HARD_SKIN,
    "grape": ComplianceClass.HARD_SKIN,
    "carrot": ComplianceClass.HARD,
    "celery": ComplianceClass.HARD,
    "apple": ComplianceClass.HARD,
    "cantaloupe": ComplianceClass.MEDIUM,
    "watermelon": ComplianceClass.MEDIUM,
    "strawberry": ComplianceClass.MEDIUM,
    "banana": ComplianceClass.SOFT,
    "blackberry": ComplianceClass.SOFT,
    "egg": ComplianceClass.SOFT,
}

ITEM_ORDER = tuple(ITEM_CLASSES)

ITEMS_BY_CLASS = {
    c: tuple(item for item, cls in ITEM_CLASSES.items() if cls is c)
    for c in CLASS_ORDER
}

WRENCH_COLUMNS = ("t", "fx", "fy", "fz", "tx", "ty", "tz")
POSE_COLUMNS = ("t", "px", "py", "pz", "rx", "ry", "rz")


class WrenchSample(NamedTuple):
    t: float
    fx: float
    fy: float
    fz: float
    tx: float
    ty: float
    tz: float


class PoseSample(NamedTuple):
    t: float
    px: float
    py: float
    pz: float
    rx: float
    ry: float
    rz: float


def normalize_item_name(name: str) -> str:
    return " ".join(name.replace("_", " ").replace("-", " ").lower().split())


def item_class(name: str) -> ComplianceClass:
    """Map a food item name to its compliance class; reject unknown items."""
    key = normalize_item_name(name)
    if key not in ITEM_CLASSES:
        raise UnknownFoodItem(name)
    return ITEM_CLASSES[key]


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]. Values already in range pass through."""
    if -math.pi < a <= math.pi:
        return a
    a = a - 2.0 * math.pi * round(a / (2.0 * math.pi))
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


def quaternion_to_fixed_xyz(qw: float, qx: float, qy: float, qz: float):
    """Convert a unit quaternion to fixed-axis XYZ rotation angles."""
    n = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    if n == 0.0 or not math.isfinite(n):
        raise ValueError("quaternion has zero or non-finite norm")
    qw, qx, qy, qz = qw / n, qx / n, qy / n, qz / n
    rx = math.atan2(2.0 * (qw * qx + qy * qz), 1.0 - 2.0 * (qx * qx + qy * qy))
    s = max(-1.0, min(1.0, 2.0 * (qw * qy - qz * qx)))
    ry = math.asin(s)
    rz = math.atan2(2.0 * (qw * qz + qx * qy), 1.0 - 2.0 * (qy * qy + qz * qz))
    return wrap_angle(rx), wrap_angle(ry), wrap_angle(rz)


def _validate_stream(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 7:
        raise ValueError(f"{name} stream must be (n, 7), got {arr.shape}")
    if arr.shape[0] < 2:
        raise DegenerateStream(f"{name} stream has {arr.shape[0]} samples, need >= 2")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} stream contains non-finite values")
    t = arr[:, 0]
    if t[0] < 0.0:
        raise ValueError(f"{name} stream starts at negative time {t[0]}")
    if np.any(np.diff(t) <= 0.0):
        raise ValueError(f"{name} stream timestamps are not strictly increasing")
    return arr


@dataclass(frozen=True, eq=False)
class Trial:
    """One feeding attempt. Immutable after construction."""

    id: str
    subject: str
    session: int
    food_item: str
    label: ComplianceClass
    wrench: np.ndarray  # (n, 7) columns t, fx, fy, fz, tx, ty, tz
    pose: np.ndarray  # (m, 7) columns t, px, py, pz, rx, ry, rz
    source: Source = Source.HUMAN

    def __post_init__(self):
        if self.session < 1:
            raise ValueError(f"session must be >= 1, got {self.session}")
        w = _validate_stream(self.wrench, "wrench").copy()
        p = _validate_stream(self.pose, "pose").copy()
        w.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "wrench", w)
        object.__setattr__(self, "pose", p)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trial):
            return NotImplemented
        return (
            self.id == other.id
            and self.subject == other.subject
            and self.session == other.session
            and self.food_item == other.food_item
            and self.label is other.label
            and self.source is other.source
            and np.array_equal(self.wrench, other.wrench)
            and np.array_equal(self.pose, other.pose)
        )

    def wrench_samples(self) -> Iterable[WrenchSample]:
        return (WrenchSample(*row) for row in self.wrench)

    def pose_samples(self) -> Iterable[PoseSample]:
        return (PoseSample(*row) for row in self.pose)


@dataclass(frozen=True, eq=False)
class Dataset:
    trials: tuple[Trial, ...]
    class_counts: dict[ComplianceClass, int] = field(default_factory=dict)

    def __post_init__(self):
        trials = tuple(self.trials)
        counts = {c: 0 for c in CLASS_ORDER}
        for t in trials:
            counts[t.label] += 1
        if self.class_counts and dict(self.class_counts) != counts:
            raise ValueError("class_counts inconsistent with trials")
        object.__setattr__(self, "trials", trials)
        object.__setattr__(self, "class_counts", counts)

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.trials == other.trials


def _parse_pose_row(row, lineno: int) -> list[float]:
    if len(row) == 8:
        # t, px, py, pz followed by a quaternion (w, x, y, z).
        t, px, py, pz, qw, qx, qy, qz = (float(v) for v in row)
        try:
            rx, ry, rz = quaternion_to_fixed_xyz(qw, qx, qy, qz)
        except ValueError as exc:
            raise MalformedRecord(lineno, str(exc)) from None
        return [t, px, py, pz, rx, ry, rz]
    if len(row) == 7:
        vals = [float(v) for v in row]
        vals[4] = wrap_angle(vals[4])
        vals[5] = wrap_angle(vals[5])
        vals[6] = wrap_angle(vals[6])
        return vals
    raise MalformedRecord(lineno, f"pose row has {len(row)} fields, expected 7 or 8")


def _trial_from_record(rec: dict, lineno: int) -> Trial:
    for key in ("id", "subject", "session", "food_item", "wrench", "pose"):
        if key not in rec:
            raise MalformedRecord(lineno, f"missing field {key!r}")
    label = item_class(str(rec["food_item"]))
    source_raw = str(rec.get("source", "human")).lower()
    try:
        source = Source(source_raw)
    except ValueError:
        raise MalformedRecord(lineno, f"unknown source {rec['source']!r}") from None

    def rows_to_array(rows, width, name):
        out = []
        for row in rows:
            if not isinstance(row, (list, tuple)) or len(row) != width:
                raise MalformedRecord(
                    lineno, f"{name} row must have {width} numbers: {row!r}"
                )
            vals = [float(v) for v in row]
            if not all(math.isfinite(v) for v in vals):
                raise MalformedRecord(lineno, f"{name} row contains NaN/Inf")
            out.append(vals)
        return np.asarray(out, dtype=np.float64)

    wrench = rows_to_array(rec["wrench"], 7, "wrench")
    pose_rows = rec["pose"]
    if not isinstance(pose_rows, list):
        raise MalformedRecord(lineno, "pose must be a list of rows")
    pose = []
    for row in pose_rows:
        if not isinstance(row, (list, tuple)):
            raise MalformedRecord(lineno, f"pose row must be a list: {row!r}")
        vals = _parse_pose_row(row, lineno)
        if not all(math.isfinite(v) for v in vals):
            raise MalformedRecord(lineno, "pose row contains NaN/Inf")
        pose.append(vals)
    pose = np.asarray(pose, dtype=np.float64)
    try:
        return Trial(
            id=str(rec["id"]),
            subject=str(rec["subject"]),
            session=int(rec["session"]),
            food_item=str(rec["food_item"]),
            label=label,
            wrench=wrench,
            pose=pose,
            source=source,
        )
    except (ValueError, DegenerateStream) as exc:
        raise MalformedRecord(lineno, str(exc)) from None


def load_trials(path) -> Dataset:
    """Load a JSON-lines trial file. Raises on the first invalid record."""
    path = Path(path)
    trials = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise MalformedRecord(lineno, "record is not a JSON object")
            trials.append(_trial_from_record(rec, lineno))
    if not trials:
        raise EmptyDataset(f"no trials in {path}")
    return Dataset(trials=tuple(trials))


def save_trials(dataset: Dataset, path) -> None:
    """Write a Dataset in the JSON-lines trial format (round-trip exact)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for t in dataset.trials:
            rec = {
                "id": t.id,
                "subject": t.subject,
                "session": t.session,
                "food_item": t.food_item,
                "source": t.source.value,
                "wrench": t.wrench.tolist(),
                "pose": t.pose.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def align_streams(trial: Trial, delay: float = DEFAULT_STREAM_DELAY) -> Trial:
    """Shift pose timestamps by -delay so both streams share one timeline.

    Samples whose shifted time falls below zero are dropped.
    """
    if not math.isfinite(delay):
        raise ValueError("delay must be finite")
    if delay == 0.0:
        return trial
    pose = trial.pose.copy()
    pose[:, 0] -= delay
    pose = pose[pose[:, 0] >= 0.0]
    if pose.shape[0] < 2:
        raise DegenerateStream(
            f"pose stream of trial {trial.id} has {pose.shape[0]} samples after "
            f"alignment with delay {delay}"
        )
    return Trial(
        id=trial.id,
        subject=trial.subject,
        session=trial.session,
        food_item=trial.food_item,
        label=trial.label,
        wrench=trial.wrench,
        pose=pose,
        source=trial.source,
    )
