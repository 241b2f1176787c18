"""Temporal CNN and stacked-LSTM classifiers with hand-derived gradients.

Everything runs in double precision on plain numpy arrays so finite-difference
gradient checks are meaningful. Models hold their parameters in a flat dict;
training is mini-batch gradient descent (plain or adaptive-moment) on mean
cross-entropy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .core import class_index
from .errors import DimensionMismatch, NonFiniteLoss

PROB_CLAMP = 1e-12


def softmax(logits) -> np.ndarray:
    """Stable softmax along the last axis (max-subtraction)."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probabilities, label: int) -> float:
    """-log p[label], with p clamped at 1e-12 before the log."""
    p = np.asarray(probabilities, dtype=np.float64)
    return float(-np.log(max(p[label], PROB_CLAMP)))


def _batch_ce(logits: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over a batch plus the logits gradient.

    Non-finite logits propagate to a non-finite loss (no exception here) so
    the training loop can abort with a NonFiniteLoss diagnostic.
    """
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        n = logits.shape[0]
        picked = np.maximum(p[np.arange(n), y], PROB_CLAMP)
        loss = float(-np.log(picked).mean())
    dlogits = p.copy()
    dlogits[np.arange(n), y] -= 1.0
    return loss, dlogits / n


def _as_batch(x) -> np.ndarray:
    values = getattr(x, "values", x)
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (B, T, F) or (T, F) input, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"  # "adam" or "sgd"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class TcnModel:
    """Stack of 1-D temporal conv layers (kernel 5, same padding), each with
    ReLU and width-2 max pooling, then flatten -> ReLU -> linear logits.

    With the 64-step grid and depth 4 the temporal length shrinks
    64 -> 32 -> 16 -> 8 -> 4, so the flatten size is 4 * channels.
    """

    kind = "tcn"

    def __init__(self, in_channels: int, n_classes: int = 4, channels: int = 32,
                 depth: int = 4, kernel: int = 5, grid: int = 64, seed: int = 0):
        if kernel % 2 != 1:
            raise ValueError("kernel width must be odd for same padding")
        if depth < 0:
            raise ValueError("depth must be >= 0")
        if grid % (2 ** depth) != 0 or grid // (2 ** depth) < 1:
            raise ValueError(f"grid {grid} not divisible by 2^{depth}")
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.channels = channels
        self.depth = depth
        self.kernel = kernel
        self.grid = grid
        self.flat_dim = (grid // (2 ** depth)) * (channels if depth else in_channels)
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        ci = in_channels
        for layer in range(depth):
            scale = np.sqrt(2.0 / (kernel * ci))
            self.params[f"conv{layer}_W"] = rng.standard_normal((channels, kernel, ci)) * scale
            self.params[f"conv{layer}_b"] = np.zeros(channels)
            ci = channels
        self.params["head_W"] = rng.standard_normal((n_classes, self.flat_dim)) * np.sqrt(1.0 / self.flat_dim)
        self.params["head_b"] = np.zeros(n_classes)

    def _check(self, x: np.ndarray):
        if x.shape[1] != self.grid or x.shape[2] != self.in_channels:
            raise DimensionMismatch(
                f"input {x.shape[1:]} does not match model "
                f"({self.grid}, {self.in_channels})"
            )

    def _forward(self, x: np.ndarray):
        self._check(x)
        pad = self.kernel // 2
        caches = []
        out = x
        for layer in range(self.depth):
            W = self.params[f"conv{layer}_W"]
            b = self.params[f"conv{layer}_b"]
            B, T, ci = out.shape
            xpad = np.zeros((B, T + 2 * pad, ci))
            xpad[:, pad:pad + T, :] = out
            cols = np.stack([xpad[:, k:k + T, :] for k in range(self.kernel)], axis=2)
            cols = cols.reshape(B, T, self.kernel * ci)
            z = cols @ W.reshape(W.shape[0], -1).T + b
            r = np.maximum(z, 0.0)
            v = r.reshape(B, T // 2, 2, W.shape[0])
            idx = v.argmax(axis=2)
            pooled = np.take_along_axis(v, idx[:, :, None, :], axis=2)[:, :, 0, :]
            caches.append((cols, z, v.shape, idx, ci))
            out = pooled
        B = out.shape[0]
        flat = out.reshape(B, self.flat_dim)
        h = np.maximum(flat, 0.0)
        logits = h @ self.params["head_W"].T + self.params["head_b"]
        return logits, (caches, flat, h, out.shape)

    def forward(self, x) -> np.ndarray:
        """Logits for a (T, F) matrix or (B, T, F) batch."""
        xb = _as_batch(x)
        logits, _ = self._forward(xb)
        return logits[0] if np.asarray(getattr(x, "values", x)).ndim == 2 else logits

    def loss(self, x, y) -> float:
        logits, _ = self._forward(_as_batch(x))
        return _batch_ce(logits, np.asarray(y))[0]

    def loss_and_grads(self, x, y):
        xb = _as_batch(x)
        yb = np.asarray(y)
        logits, (caches, flat, h, out_shape) = self._forward(xb)
        loss, dlogits = _batch_ce(logits, yb)
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        grads["head_W"] = dlogits.T @ h
        grads["head_b"] = dlogits.sum(axis=0)
        dh = dlogits @ self.params["head_W"]
        dflat = dh * (flat > 0.0)
        dout = dflat.reshape(out_shape)
        pad = self.kernel // 2
        for layer in range(self.depth - 1, -1, -1):
            cols, z, vshape, idx, ci = caches[layer]
            W = self.params[f"conv{layer}_W"]
            B, T = z.shape[0], z.shape[1]
            dv = np.zeros(vshape)
            np.put_along_axis(dv, idx[:, :, None, :], dout[:, :, None, :], axis=2)
            dz = dv.reshape(B, T, W.shape[0]) * (z > 0.0)
            grads[f"conv{layer}_W"] = np.einsum("bto,btm->om", dz, cols).reshape(W.shape)
            grads[f"conv{layer}_b"] = dz.sum(axis=(0, 1))
            dcols = (dz @ W.reshape(W.shape[0], -1)).reshape(B, T, self.kernel, ci)
            dxpad = np.zeros((B, T + 2 * pad, ci))
            for k in range(self.kernel):
                dxpad[:, k:k + T, :] += dcols[:, :, k, :]
            dout = dxpad[:, pad:pad + T, :]
        return loss, grads

    def predict(self, x) -> np.ndarray:
        logits, _ = self._forward(_as_batch(x))
        return logits.argmax(axis=1)

    def arch(self) -> dict:
        return {
            "kind": self.kind, "in_channels": self.in_channels,
            "n_classes": self.n_classes, "channels": self.channels,
            "depth": self.depth, "kernel": self.kernel, "grid": self.grid,
        }


class LstmModel:
    """Stacked LSTM (2 layers, hidden 50 by default); the top layer's final
    hidden state goes through ReLU and a linear layer to the logits.

    per_step averages the head loss over every time step instead of using
    only the final state.
    """

    kind = "lstm"

    def __init__(self, in_channels: int, n_classes: int = 4, hidden: int = 50,
                 layers: int = 2, seed: int = 0, per_step: bool = False):
        if layers < 1 or hidden < 1:
            raise ValueError("need layers >= 1 and hidden >= 1")
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.hidden = hidden
        self.layers = layers
        self.per_step = per_step
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        din = in_channels
        for layer in range(layers):
            self.params[f"l{layer}_Wx"] = rng.standard_normal((4 * hidden, din)) / np.sqrt(din)
            self.params[f"l{layer}_Wh"] = rng.standard_normal((4 * hidden, hidden)) / np.sqrt(hidden)
            b = np.zeros(4 * hidden)
            b[hidden:2 * hidden] = 1.0  # open the forget gate at start
            self.params[f"l{layer}_b"] = b
            din = hidden
        self.params["head_W"] = rng.standard_normal((n_classes, hidden)) / np.sqrt(hidden)
        self.params["head_b"] = np.zeros(n_classes)

    def _check(self, x: np.ndarray):
        if x.shape[2] != self.in_channels:
            raise DimensionMismatch(
                f"input has {x.shape[2]} channels, model expects {self.in_channels}"
            )

    def _forward(self, x: np.ndarray):
        self._check(x)
        B, T, _ = x.shape
        H = self.hidden
        inp = x
        caches = []
        for layer in range(self.layers):
            Wx = self.params[f"l{layer}_Wx"]
            Wh = self.params[f"l{layer}_Wh"]
            b = self.params[f"l{layer}_b"]
            pre = inp @ Wx.T + b
            gi = np.empty((B, T, H)); gf = np.empty((B, T, H))
            gg = np.empty((B, T, H)); go = np.empty((B, T, H))
            cs = np.empty((B, T, H)); tcs = np.empty((B, T, H))
            hs = np.empty((B, T, H))
            h = np.zeros((B, H)); c = np.zeros((B, H))
            for t in range(T):
                a = pre[:, t] + h @ Wh.T
                i = expit(a[:, :H]); f = expit(a[:, H:2 * H])
                g = np.tanh(a[:, 2 * H:3 * H]); o = expit(a[:, 3 * H:])
                c = f * c + i * g
                tc = np.tanh(c)
                h = o * tc
                gi[:, t] = i; gf[:, t] = f; gg[:, t] = g; go[:, t] = o
                cs[:, t] = c; tcs[:, t] = tc; hs[:, t] = h
            caches.append((inp, gi, gf, gg, go, cs, tcs, hs))
            inp = hs
        if self.per_step:
            feats = inp                      # (B, T, H)
        else:
            feats = inp[:, -1]               # (B, H)
        relu_in = feats
        hrelu = np.maximum(relu_in, 0.0)
        logits = hrelu @ self.params["head_W"].T + self.params["head_b"]
        return logits, (caches, relu_in, hrelu)

    def forward(self, x) -> np.ndarray:
        xb = _as_batch(x)
        logits, _ = self._forward(xb)
        if self.per_step:
            logits = logits.mean(axis=1)
        return logits[0] if np.asarray(getattr(x, "values", x)).ndim == 2 else logits

    def _head_loss(self, logits, y):
        if not self.per_step:
            return _batch_ce(logits, y)
        B, T, C = logits.shape
        loss, dflat = _batch_ce(logits.reshape(B * T, C), np.repeat(y, T))
        return loss, dflat.reshape(B, T, C)

    def loss(self, x, y) -> float:
        logits, _ = self._forward(_as_batch(x))
        return self._head_loss(logits, np.asarray(y))[0]

    def loss_and_grads(self, x, y):
        xb = _as_batch(x)
        yb = np.asarray(y)
        B, T, _ = xb.shape
        H = self.hidden
        logits, (caches, relu_in, hrelu) = self._forward(xb)
        loss, dlogits = self._head_loss(logits, yb)
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        W_head = self.params["head_W"]
        if self.per_step:
            grads["head_W"] = np.einsum("btc,bth->ch", dlogits, hrelu)
            grads["head_b"] = dlogits.sum(axis=(0, 1))
            dh_seq_top = (dlogits @ W_head) * (relu_in > 0.0)
        else:
            grads["head_W"] = dlogits.T @ hrelu
            grads["head_b"] = dlogits.sum(axis=0)
            dh_seq_top = np.zeros((B, T, H))
            dh_seq_top[:, -1] = (dlogits @ W_head) * (relu_in > 0.0)

        dh_seq = dh_seq_top
        for layer in range(self.layers - 1, -1, -1):
            inp, gi, gf, gg, go, cs, tcs, hs = caches[layer]
            Wx = self.params[f"l{layer}_Wx"]
            Wh = self.params[f"l{layer}_Wh"]
            dWx = np.zeros_like(Wx); dWh = np.zeros_like(Wh)
            db = np.zeros(4 * H)
            dinp = np.zeros_like(inp)
            dh_next = np.zeros((B, H)); dc_next = np.zeros((B, H))
            for t in range(T - 1, -1, -1):
                i = gi[:, t]; f = gf[:, t]; g = gg[:, t]; o = go[:, t]
                tc = tcs[:, t]
                c_prev = cs[:, t - 1] if t > 0 else np.zeros((B, H))
                h_prev = hs[:, t - 1] if t > 0 else np.zeros((B, H))
                dh = dh_seq[:, t] + dh_next
                do = dh * tc
                dc = dc_next + dh * o * (1.0 - tc * tc)
                di = dc * g
                dg = dc * i
                df = dc * c_prev
                dc_next = dc * f
                da = np.concatenate([
                    di * i * (1.0 - i),
                    df * f * (1.0 - f),
                    dg * (1.0 - g * g),
                    do * o * (1.0 - o),
                ], axis=1)
                dWx += da.T @ inp[:, t]
                dWh += da.T @ h_prev
                db += da.sum(axis=0)
                dinp[:, t] = da @ Wx
                dh_next = da @ Wh
            grads[f"l{layer}_Wx"] = dWx
            grads[f"l{layer}_Wh"] = dWh
            grads[f"l{layer}_b"] = db
            dh_seq = dinp
        return loss, grads

    def predict(self, x) -> np.ndarray:
        logits, _ = self._forward(_as_batch(x))
        if self.per_step:
            logits = logits.mean(axis=1)
        return logits.argmax(axis=1)

    def arch(self) -> dict:
        return {
            "kind": self.kind, "in_channels": self.in_channels,
            "n_classes": self.n_classes, "hidden": self.hidden,
            "layers": self.layers, "per_step": self.per_step,
        }


def _labels_from(data: Sequence, labels) -> np.ndarray:
    if labels is not None:
        return np.asarray(labels, dtype=np.int64)
    out = []
    for fm in data:
        if fm.label is None:
            raise ValueError("training matrices must carry labels")
        out.append(class_index(fm.label))
    return np.asarray(out, dtype=np.int64)


def train(model, data: Sequence, cfg: TrainConfig = TrainConfig(),
          labels=None):
    """Mini-batch cross-entropy training; returns (model, per-epoch mean loss).

    labels may override the FeatureMatrix labels with integer class indices
    (0-based, in the model's output order).
    """
    X = np.stack([np.asarray(getattr(fm, "values", fm), dtype=np.float64) for fm in data])
    y = _labels_from(data, labels)
    if X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ValueError("data and labels must be non-empty and aligned")
    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    state = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in model.params.items()}
    step = 0
    curve = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for bstart in range(0, n, cfg.batch_size):
            sel = perm[bstart:bstart + cfg.batch_size]
            loss, grads = model.loss_and_grads(X[sel], y[sel])
            if not np.isfinite(loss):
                raise NonFiniteLoss(epoch, bstart // cfg.batch_size, loss)
            total += loss * len(sel)
            step += 1
            for name, g in grads.items():
                p = model.params[name]
                if cfg.optimizer == "sgd":
                    p -= cfg.learning_rate * g
                else:
                    m, v = state[name]
                    m *= 0.9
                    m += 0.1 * g
                    v *= 0.999
                    v += 0.001 * g * g
                    mhat = m / (1.0 - 0.9 ** step)
                    vhat = v / (1.0 - 0.999 ** step)
                    p -= cfg.learning_rate * mhat / (np.sqrt(vhat) + 1e-8)
        curve.append(total / n)
    return model, curve


def grad_check(model, sample, eps: float = 1e-5, n_coords: int = 200,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks a random subset of at least n_coords parameter coordinates (all of
    them if the model is smaller); denominator floored at 1e-8.
    """
    if not (1e-6 <= eps <= 1e-4):
        raise ValueError("eps must lie in [1e-6, 1e-4]")
    if hasattr(sample, "values"):
        x = sample.values
        y = class_index(sample.label) if sample.label is not None else 0
    else:
        x, y = sample
    X = _as_batch(x)
    yb = np.asarray([int(y)])
    _, grads = model.loss_and_grads(X, yb)
    names = sorted(model.params)
    sizes = [model.params[k].size for k in names]
    total = int(np.sum(sizes))
    rng = np.random.default_rng(seed)
    count = min(max(n_coords, 200), total)
    coords = rng.choice(total, size=count, replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for flat_idx in coords:
        which = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        name = names[which]
        local = int(flat_idx - offsets[which])
        p = model.params[name]
        orig = p.flat[local]
        p.flat[local] = orig + eps
        f_plus = model.loss(X, yb)
        p.flat[local] = orig - eps
        f_minus = model.loss(X, yb)
        p.flat[local] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        analytic = grads[name].flat[local]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


def model_to_dict(model) -> dict:
    d = model.arch()
    d["params"] = {k: v.tolist() for k, v in model.params.items()}
    return d


def model_from_dict(d: dict):
    kind = d["kind"]
    if kind == "tcn":
        model = TcnModel(in_channels=d["in_channels"], n_classes=d["n_classes"],
                         channels=d["channels"], depth=d["depth"],
                         kernel=d["kernel"], grid=d["grid"])
    elif kind == "lstm":
        model = LstmModel(in_channels=d["in_channels"], n_classes=d["n_classes"],
                          hidden=d["hidden"], layers=d["layers"],
                          per_step=d.get("per_step", False))
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    for k, v in d["params"].items():
        arr = np.asarray(v, dtype=np.float64)
        if arr.shape != model.params[k].shape:
            raise ValueError(f"parameter {k} has shape {arr.shape}")
        model.params[k] = arr
    return model


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n", encoding="utf-8")


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_loss_curve(curve: Sequence[float], path) -> None:
    lines = ["epoch,mean_loss"]
    lines += [f"{i},{repr(float(v))}" for i, v in enumerate(curve)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
