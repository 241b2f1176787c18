"""Per-class generative hidden Markov models with diagonal-Gaussian emissions.

Forward likelihoods run entirely in log space; training is multi-sequence
Baum-Welch with the initial state distribution held uniform (it can be
re-estimated behind a flag). Classification picks the class whose model
maximizes the observation log-likelihood.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import CLASS_ORDER, ComplianceClass
from .errors import DimensionMismatch, EmptyTrainingSet, MissingClass

VARIANCE_FLOOR = 1e-6
_STOCHASTIC_TOL = 1e-9


def _logsumexp(a: np.ndarray, axis=None) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m_safe), axis=axis, keepdims=True)) + m_safe
    if axis is None:
        return out.item()
    return np.squeeze(out, axis=axis)


def _obs_values(obs) -> np.ndarray:
    values = getattr(obs, "values", obs)
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"observations must be (T, F) with T >= 1, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class HmmModel:
    """lambda = (A, pi, Gaussian emissions with diagonal covariance)."""

    A: np.ndarray          # (K, K) row-stochastic
    pi: np.ndarray         # (K,)
    means: np.ndarray      # (K, F)
    variances: np.ndarray  # (K, F), floored
    channel_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        pi = np.array(self.pi, dtype=np.float64)
        means = np.array(self.means, dtype=np.float64)
        variances = np.array(self.variances, dtype=np.float64)
        K = A.shape[0]
        if A.shape != (K, K):
            raise ValueError(f"A must be square, got {A.shape}")
        if pi.shape != (K,) or means.ndim != 2 or means.shape[0] != K:
            raise ValueError("pi/means shapes inconsistent with A")
        if variances.shape != means.shape:
            raise ValueError("variances shape must match means")
        if np.any(A < 0) or np.any(pi < 0):
            raise ValueError("probabilities must be non-negative")
        if np.any(np.abs(A.sum(axis=1) - 1.0) > _STOCHASTIC_TOL):
            raise ValueError("rows of A must sum to 1")
        if abs(pi.sum() - 1.0) > _STOCHASTIC_TOL:
            raise ValueError("pi must sum to 1")
        if np.any(variances < VARIANCE_FLOOR * (1.0 - 1e-12)):
            raise ValueError(f"variances below floor {VARIANCE_FLOOR}")
        for arr in (A, pi, means, variances):
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)
        if self.channel_names is not None:
            object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def F(self) -> int:
        return self.means.shape[1]


def _log_emissions(model_means, model_vars, obs: np.ndarray) -> np.ndarray:
    """(T, K) matrix of log N(obs_t; mu_k, diag var_k)."""
    diff = obs[:, None, :] - model_means[None, :, :]
    quad = np.sum(diff * diff / model_vars[None, :, :], axis=2)
    logdet = np.sum(np.log(model_vars), axis=1)
    F = obs.shape[1]
    return -0.5 * (F * np.log(2.0 * np.pi) + logdet[None, :] + quad)


def forward_loglik(model: HmmModel, obs) -> float:
    """log P(O | lambda) by the forward recursion in log space."""
    x = _obs_values(obs)
    if x.shape[1] != model.F:
        raise DimensionMismatch(
            f"observation has {x.shape[1]} channels, model expects {model.F}"
        )
    lb = _log_emissions(model.means, model.variances, x)
    with np.errstate(divide="ignore"):
        la = np.log(model.A)
        alpha = np.log(model.pi) + lb[0]
    for t in range(1, x.shape[0]):
        alpha = _logsumexp(alpha[:, None] + la, axis=0) + lb[t]
    return float(_logsumexp(alpha))


def _forward_backward(la, lpi, lb):
    """Log-space alpha/beta passes; returns (alpha, beta, loglik)."""
    T, K = lb.shape
    alpha = np.empty((T, K))
    beta = np.zeros((T, K))
    alpha[0] = lpi + lb[0]
    for t in range(1, T):
        alpha[t] = _logsumexp(alpha[t - 1][:, None] + la, axis=0) + lb[t]
    for t in range(T - 2, -1, -1):
        beta[t] = _logsumexp(la + (lb[t + 1] + beta[t + 1])[None, :], axis=1)
    return alpha, beta, float(_logsumexp(alpha[-1]))


def _uniform_pi(K: int) -> np.ndarray:
    return np.full(K, 1.0 / K)


def _init_params(seqs, K: int, seed: Optional[int]):
    pooled = np.concatenate(seqs, axis=0)
    g_mean = pooled.mean(axis=0)
    g_var = np.maximum(pooled.var(axis=0), VARIANCE_FLOOR)
    if seed is None:
        # Deterministic: state k's mean is the pooled average of the k-th
        # contiguous block of every sequence.
        sums = np.zeros((K, pooled.shape[1]))
        counts = np.zeros(K)
        for seq in seqs:
            for k, block in enumerate(np.array_split(seq, K, axis=0)):
                if block.shape[0]:
                    sums[k] += block.sum(axis=0)
                    counts[k] += block.shape[0]
        means = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None],
                         g_mean[None, :])
        if K == 1:
            A = np.array([[1.0]])
        else:
            A = np.full((K, K), 0.2 / (K - 1))
            np.fill_diagonal(A, 0.8)
    else:
        rng = np.random.default_rng(seed)
        means = g_mean[None, :] + rng.standard_normal((K, pooled.shape[1])) * np.sqrt(g_var)[None, :]
        A = rng.dirichlet(np.full(K, 5.0), size=K)
    variances = np.tile(g_var, (K, 1))
    return A, means, variances


def baum_welch(trials: Sequence, K: int = 3, max_iter: int = 100,
               tol: float = 1e-4, seed: Optional[int] = None,
               estimate_pi: bool = False,
               channel_names: Optional[tuple[str, ...]] = None) -> HmmModel:
    """Multi-sequence EM. pi stays uniform unless estimate_pi is set.

    seed None gives the deterministic contiguous-block initialization;
    an integer seed draws a random initialization instead.
    """
    seqs = [_obs_values(t) for t in trials]
    if not seqs:
        raise EmptyTrainingSet("baum_welch requires at least one sequence")
    F = seqs[0].shape[1]
    for s in seqs[1:]:
        if s.shape[1] != F:
            raise DimensionMismatch(
                f"sequences mix {F} and {s.shape[1]} channels"
            )
    if K < 1:
        raise ValueError("K must be >= 1")
    if channel_names is None:
        names = getattr(trials[0], "channel_names", None)
        channel_names = tuple(names) if names is not None else None

    A, means, variances = _init_params(seqs, K, seed)
    pi = _uniform_pi(K)
    ll_prev = None
    for _ in range(max_iter):
        with np.errstate(divide="ignore"):
            la = np.log(A)
            lpi = np.log(pi)
        gamma_list = []
        A_num = np.zeros((K, K))
        pi_num = np.zeros(K)
        total_ll = 0.0
        for seq in seqs:
            lb = _log_emissions(means, variances, seq)
            alpha, beta, ll = _forward_backward(la, lpi, lb)
            total_ll += ll
            gamma = np.exp(alpha + beta - ll)
            gamma_list.append(gamma)
            pi_num += gamma[0]
            for t in range(seq.shape[0] - 1):
                A_num += np.exp(
                    alpha[t][:, None] + la + (lb[t + 1] + beta[t + 1])[None, :] - ll
                )
        if ll_prev is not None and abs(total_ll - ll_prev) <= tol * max(abs(ll_prev), 1e-12):
            break
        ll_prev = total_ll

        row = A_num.sum(axis=1)
        new_A = A.copy()
        nz = row > 1e-300
        new_A[nz] = A_num[nz] / row[nz, None]
        A = new_A
        if estimate_pi:
            pi = pi_num / pi_num.sum()
        occ = np.zeros(K)
        wsum = np.zeros((K, F))
        for seq, gamma in zip(seqs, gamma_list):
            occ += gamma.sum(axis=0)
            wsum += gamma.T @ seq
        safe_occ = np.maximum(occ, 1e-300)
        new_means = np.where(occ[:, None] > 1e-12, wsum / safe_occ[:, None], means)
        vsum = np.zeros((K, F))
        for seq, gamma in zip(seqs, gamma_list):
            diff = seq[:, None, :] - new_means[None, :, :]
            vsum += np.einsum("tk,tkf->kf", gamma, diff * diff)
        new_vars = np.where(occ[:, None] > 1e-12, vsum / safe_occ[:, None], variances)
        means = new_means
        variances = np.maximum(new_vars, VARIANCE_FLOOR)
    return HmmModel(A=A, pi=pi, means=means, variances=variances,
                    channel_names=channel_names)


@dataclass(frozen=True)
class HmmClassifier:
    """One generative model per compliance class."""

    models: dict

    def __post_init__(self):
        if not self.models:
            raise ValueError("classifier needs at least one model")
        ms = list(self.models.values())
        K, F = ms[0].K, ms[0].F
        for m in ms[1:]:
            if m.K != K or m.F != F:
                raise ValueError("all per-class models must share K and F")
        object.__setattr__(self, "models", dict(self.models))


def train_hmm_classifier(train: Sequence, K: int = 3, max_iter: int = 100,
                         tol: float = 1e-4, estimate_pi: bool = False) -> HmmClassifier:
    """One Baum-Welch model per compliance class found in the labels."""
    by_class: dict[ComplianceClass, list] = {c: [] for c in CLASS_ORDER}
    for fm in train:
        if fm.label is None:
            raise ValueError("training matrices must carry labels")
        by_class[fm.label].append(fm)
    models = {}
    for c in CLASS_ORDER:
        if not by_class[c]:
            raise MissingClass(c.label)
        models[c] = baum_welch(by_class[c], K=K, max_iter=max_iter, tol=tol,
                               estimate_pi=estimate_pi)
    return HmmClassifier(models=models)


def classify_hmm(clf: HmmClassifier, obs):
    """argmax over per-class log-likelihoods; fixed-order tie-break."""
    scores = {}
    best = None
    for c in CLASS_ORDER:
        if c not in clf.models:
            continue
        ll = forward_loglik(clf.models[c], obs)
        scores[c] = ll
        if best is None or ll > scores[best]:
            best = c
    return best, scores


def model_to_dict(model: HmmModel) -> dict:
    return {
        "K": model.K,
        "A": model.A.tolist(),
        "pi": model.pi.tolist(),
        "means": model.means.tolist(),
        "variances": model.variances.tolist(),
        "channel_names": list(model.channel_names) if model.channel_names else None,
    }


def model_from_dict(d: dict) -> HmmModel:
    names = d.get("channel_names")
    return HmmModel(
        A=np.array(d["A"], dtype=np.float64),
        pi=np.array(d["pi"], dtype=np.float64),
        means=np.array(d["means"], dtype=np.float64),
        variances=np.array(d["variances"], dtype=np.float64),
        channel_names=tuple(names) if names else None,
    )


def save_hmm_classifier(clf: HmmClassifier, path) -> None:
    payload = {
        "kind": "hmm",
        "models": {c.label: model_to_dict(m) for c, m in clf.models.items()},
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_hmm_classifier(path) -> HmmClassifier:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    models = {
        ComplianceClass.from_label(lbl): model_from_dict(d)
        for lbl, d in payload["models"].items()
    }
    return HmmClassifier(models=models)
