"""Linear one-vs-rest SVM on flattened feature matrices.

Training minimizes, per class,

    (1/n) sum_i max(0, 1 - y_i (w.x_i + b)) + ||w||^2 / (2 C n)

by stochastic subgradient descent with step 1/(lambda t), lambda = 1/(C n),
over deterministically shuffled epochs; the returned model is the iterate at
the end of the last epoch (no averaging). The step counter is warm-started
at t = n: a cold start makes the first step size C*n, which slams the
unregularized bias to a huge value that later steps cannot undo once the
training margins are met.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import CLASS_ORDER, ComplianceClass
from .errors import DimensionMismatch, SingleClassData


def flatten(fm) -> np.ndarray:
    """Concatenate channels into one vector: element 64*j + i is fm[i][j]."""
    values = np.asarray(getattr(fm, "values", fm), dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {values.shape}")
    return values.T.ravel().copy()


def unflatten(vec, n_channels: int) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    if v.size % n_channels != 0:
        raise ValueError(f"vector of size {v.size} not divisible by {n_channels}")
    return v.reshape(n_channels, -1).T.copy()


@dataclass(frozen=True)
class SvmModel:
    """Per-class weights/biases, ordered like `classes`."""

    W: np.ndarray                 # (n_classes, D)
    b: np.ndarray                 # (n_classes,)
    C: float
    classes: tuple = CLASS_ORDER
    channel_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ValueError("W must be (n_classes, D) with matching biases")
        if W.shape[0] != len(self.classes):
            raise ValueError("one weight vector per class required")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("weights must be finite")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.channel_names is not None:
            object.__setattr__(self, "channel_names", tuple(self.channel_names))


def hinge_objective(w: np.ndarray, b: float, X: np.ndarray, ybin: np.ndarray,
                    C: float) -> float:
    """The per-class primal objective used by training."""
    n = X.shape[0]
    margins = ybin * (X @ w + b)
    return float(np.mean(np.maximum(0.0, 1.0 - margins)) + w @ w / (2.0 * C * n))


def _infer_classes(y) -> tuple:
    labels = list(y)
    if all(isinstance(v, ComplianceClass) for v in labels):
        present = set(labels)
        return tuple(c for c in CLASS_ORDER if c in present)
    return tuple(sorted(set(labels)))


def train_svm(X, y, C: float = 1.0, epochs: int = 200, seed: int = 0,
              classes: Optional[tuple] = None,
              channel_names: Optional[tuple[str, ...]] = None,
              return_history: bool = False):
    """One-vs-rest training. Deterministic given (X, y, C, epochs, seed)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"X must be (n, D) and non-empty, got {X.shape}")
    y = list(y)
    if len(y) != X.shape[0]:
        raise ValueError("X and y lengths differ")
    if C <= 0 or epochs < 1:
        raise ValueError("need C > 0 and epochs >= 1")
    if classes is None:
        classes = _infer_classes(y)
    if len(set(y)) < 2 or len(classes) < 2:
        raise SingleClassData("training data must contain at least two classes")
    index = {c: k for k, c in enumerate(classes)}
    try:
        yi = np.array([index[v] for v in y], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} not in classes") from None

    n, D = X.shape
    lam = 1.0 / (C * n)
    W = np.zeros((len(classes), D))
    B = np.zeros(len(classes))
    history: dict = {c: [] for c in classes}
    for k, c in enumerate(classes):
        ybin = np.where(yi == k, 1.0, -1.0)
        rng = np.random.default_rng([seed, k])
        w = np.zeros(D)
        b = 0.0
        t = n  # warm start; see module docstring
        for _ in range(epochs):
            order = rng.permutation(n)
            for idx in order:
                t += 1
                eta = 1.0 / (lam * t)
                margin = ybin[idx] * (X[idx] @ w + b)
                w *= 1.0 - eta * lam
                if margin < 1.0:
                    w += eta * ybin[idx] * X[idx]
                    b += eta * ybin[idx]
            if return_history:
                history[c].append(hinge_objective(w, b, X, ybin, C))
        W[k] = w
        B[k] = b
    model = SvmModel(W=W, b=B, C=C, classes=classes, channel_names=channel_names)
    if return_history:
        return model, history
    return model


def predict_svm(model: SvmModel, x):
    """(winning class, per-class scores); first class wins ties."""
    v = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if v.ndim == 2:
        v = flatten(v)
    if v.shape != (model.W.shape[1],):
        raise DimensionMismatch(
            f"input dimension {v.shape} does not match model ({model.W.shape[1]},)"
        )
    scores = model.W @ v + model.b
    return model.classes[int(np.argmax(scores))], scores


def model_to_dict(model: SvmModel) -> dict:
    classes = [
        c.label if isinstance(c, ComplianceClass) else c for c in model.classes
    ]
    return {
        "kind": "svm",
        "C": model.C,
        "classes": classes,
        "W": model.W.tolist(),
        "b": model.b.tolist(),
        "channel_names": list(model.channel_names) if model.channel_names else None,
    }


def model_from_dict(d: dict) -> SvmModel:
    raw = d["classes"]
    try:
        classes = tuple(ComplianceClass.from_label(v) for v in raw)
    except (ValueError, TypeError):
        classes = tuple(raw)
    names = d.get("channel_names")
    return SvmModel(W=np.array(d["W"], dtype=np.float64),
                    b=np.array(d["b"], dtype=np.float64),
                    C=float(d["C"]), classes=classes,
                    channel_names=tuple(names) if names else None)


def save_model(model: SvmModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n", encoding="utf-8")


def load_model(path) -> SvmModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
