"""Cross-validation harness, confusion/ablation/cross-domain reports, and the
statistical tests (one-way ANOVA, Tukey HSD, Welch t-test).

Fold hygiene: normalization statistics and classifier parameters are fitted
on training folds only; the held-out fold never touches them.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import betainc, gammaln, ndtr

from . import hmm as hmm_mod
from . import nn as nn_mod
from . import svm as svm_mod
from .core import (
    CLASS_ORDER,
    ComplianceClass,
    Dataset,
    DEFAULT_STREAM_DELAY,
    ITEM_CLASSES,
    ITEM_ORDER,
    align_streams,
    class_index,
    normalize_item_name,
)
from .errors import (
    DataError,
    DegenerateGroups,
    DimensionMismatch,
    HaptixError,
    MissingClass,
    TooFewTrials,
)
from .preprocess import FeatureSet, NormStats, PreprocConfig, fit_norm, prepare_trial

CLASS_LABELS = tuple(c.label for c in CLASS_ORDER)
_MSW_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# fold assignment

@dataclass(frozen=True)
class FoldSplit:
    k: int
    assignments: dict  # trial id -> fold index
    seed: int
    stratified: bool = True

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        folds = set(self.assignments.values())
        if folds and (min(folds) < 0 or max(folds) >= self.k):
            raise ValueError("fold indices out of range")
        object.__setattr__(self, "assignments", dict(self.assignments))


def kfold_split(ds: Dataset, k: int, seed: int = 0, stratified: bool = True,
                group_by: Optional[str] = None) -> FoldSplit:
    """Deterministic fold assignment, stratified by class unless grouping.

    group_by "subject" keeps all of a subject's trials in one fold (and
    disables stratification).
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    ids = [t.id for t in ds.trials]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate trial ids prevent fold assignment")
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    if group_by is not None:
        if group_by != "subject":
            raise ValueError(f"unsupported group_by {group_by!r}")
        subjects = sorted({t.subject for t in ds.trials})
        if len(subjects) < k:
            raise TooFewTrials("subject", k, len(subjects))
        order = list(rng.permutation(len(subjects)))
        fold_of = {subjects[j]: i % k for i, j in enumerate(order)}
        for t in ds.trials:
            assignments[t.id] = fold_of[t.subject]
        return FoldSplit(k=k, assignments=assignments, seed=seed, stratified=False)
    if stratified:
        for offset, c in enumerate(CLASS_ORDER):
            members = [t.id for t in ds.trials if t.label is c]
            if len(members) < k:
                raise TooFewTrials(c.label, k, len(members))
            perm = rng.permutation(len(members))
            for j, idx in enumerate(perm):
                assignments[members[idx]] = (j + offset) % k
    else:
        perm = rng.permutation(len(ids))
        for j, idx in enumerate(perm):
            assignments[ids[idx]] = j % k
    return FoldSplit(k=k, assignments=assignments, seed=seed, stratified=stratified)


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True, eq=False)
class EvalReport:
    classifier: str
    feature_set: str
    k: int
    seed: int
    per_fold: tuple
    confusion: np.ndarray             # (L, L) counts, rows true
    labels: tuple
    item_confusion: Optional[np.ndarray] = None
    item_labels: Optional[tuple] = None

    def __post_init__(self):
        counts = np.array(self.confusion, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if counts.shape[0] != len(self.labels):
            raise ValueError("labels do not match confusion size")
        counts.setflags(write=False)
        object.__setattr__(self, "confusion", counts)
        object.__setattr__(self, "per_fold", tuple(float(a) for a in self.per_fold))
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.item_confusion is not None:
            ic = np.array(self.item_confusion, dtype=np.int64)
            ic.setflags(write=False)
            object.__setattr__(self, "item_confusion", ic)
            object.__setattr__(self, "item_labels", tuple(self.item_labels))

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.per_fold))

    @property
    def std_accuracy(self) -> float:
        if len(self.per_fold) < 2:
            return 0.0
        return float(np.std(self.per_fold, ddof=1))

    @property
    def pooled_accuracy(self) -> float:
        total = int(self.confusion.sum())
        return float(np.trace(self.confusion)) / total if total else 0.0

    @property
    def confusion_normalized(self) -> np.ndarray:
        counts = self.confusion.astype(np.float64)
        sums = counts.sum(axis=1, keepdims=True)
        out = np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)
        return out


def report_to_dict(report: EvalReport) -> dict:
    d = {
        "classifier": report.classifier,
        "feature_set": report.feature_set,
        "k": report.k,
        "seed": report.seed,
        "per_fold": list(report.per_fold),
        "mean_accuracy": report.mean_accuracy,
        "std_accuracy": report.std_accuracy,
        "pooled_accuracy": report.pooled_accuracy,
        "labels": list(report.labels),
        "confusion": report.confusion.tolist(),
        "confusion_normalized": report.confusion_normalized.tolist(),
    }
    if report.item_confusion is not None:
        d["item_labels"] = list(report.item_labels)
        d["item_confusion"] = report.item_confusion.tolist()
    return d


def report_from_dict(d: dict) -> EvalReport:
    return EvalReport(
        classifier=d["classifier"], feature_set=d["feature_set"], k=d["k"],
        seed=d["seed"], per_fold=tuple(d["per_fold"]),
        confusion=np.array(d["confusion"], dtype=np.int64),
        labels=tuple(d["labels"]),
        item_confusion=(np.array(d["item_confusion"], dtype=np.int64)
                        if "item_confusion" in d else None),
        item_labels=tuple(d["item_labels"]) if "item_labels" in d else None,
    )


def write_confusion_csv(report: EvalReport, path) -> None:
    lines = ["section,true," + ",".join(str(l) for l in report.labels)]
    for name, row in zip(report.labels, report.confusion):
        lines.append("count," + str(name) + "," + ",".join(str(int(v)) for v in row))
    for name, row in zip(report.labels, report.confusion_normalized):
        lines.append("norm," + str(name) + "," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_folds_csv(report: EvalReport, path) -> None:
    lines = ["fold,accuracy"]
    lines += [f"{i},{repr(a)}" for i, a in enumerate(report.per_fold)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_ablation_csv(rows: Sequence[dict], path) -> None:
    lines = ["feature_set,mean_accuracy,std_accuracy"]
    for row in rows:
        lines.append(
            f"{row['feature_set']},{repr(row['mean_accuracy'])},{repr(row['std_accuracy'])}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# classifier trainers (label-index agnostic)

@dataclass(frozen=True)
class ClassifierSpec:
    kind: str  # hmm | svm | tcn | lstm
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("hmm", "svm", "tcn", "lstm"):
            raise ValueError(f"unknown classifier {self.kind!r}")
        object.__setattr__(self, "params", dict(self.params))


def _fit_predict_hmm(train_fms, y, n_labels, test_fms, seed, params):
    K = int(params.get("states", 3))
    max_iter = int(params.get("max_iter", 100))
    tol = float(params.get("tol", 1e-4))
    estimate_pi = bool(params.get("estimate_pi", False))
    groups = [[] for _ in range(n_labels)]
    for fm, lbl in zip(train_fms, y):
        groups[lbl].append(fm)
    models = []
    for lbl, group in enumerate(groups):
        if not group:
            raise MissingClass(str(lbl))
        models.append(hmm_mod.baum_welch(group, K=K, max_iter=max_iter, tol=tol,
                                         estimate_pi=estimate_pi))
    out = []
    for fm in test_fms:
        lls = [hmm_mod.forward_loglik(m, fm) for m in models]
        out.append(int(np.argmax(lls)))
    return out


def _fit_predict_svm(train_fms, y, n_labels, test_fms, seed, params):
    C = float(params.get("C", 1.0))
    epochs = int(params.get("epochs", 200))
    X = np.stack([svm_mod.flatten(fm) for fm in train_fms])
    model = svm_mod.train_svm(X, list(y), C=C, epochs=epochs, seed=seed,
                              classes=tuple(range(n_labels)))
    return [int(predicted) for predicted, _ in
            (svm_mod.predict_svm(model, svm_mod.flatten(fm)) for fm in test_fms)]


def _nn_config(seed, params):
    return nn_mod.TrainConfig(
        learning_rate=float(params.get("lr", 1e-3)),
        epochs=int(params.get("epochs", 100)),
        batch_size=int(params.get("batch_size", 32)),
        seed=seed,
        optimizer=str(params.get("optimizer", "adam")),
    )


def _fit_predict_tcn(train_fms, y, n_labels, test_fms, seed, params):
    grid, F = train_fms[0].values.shape
    model = nn_mod.TcnModel(
        in_channels=F, n_classes=n_labels,
        channels=int(params.get("channels", 32)),
        depth=int(params.get("depth", 4)),
        kernel=int(params.get("kernel", 5)),
        grid=grid, seed=seed,
    )
    nn_mod.train(model, train_fms, _nn_config(seed, params), labels=y)
    X = np.stack([fm.values for fm in test_fms])
    return [int(v) for v in model.predict(X)]


def _fit_predict_lstm(train_fms, y, n_labels, test_fms, seed, params):
    F = train_fms[0].values.shape[1]
    model = nn_mod.LstmModel(
        in_channels=F, n_classes=n_labels,
        hidden=int(params.get("hidden", 50)),
        layers=int(params.get("layers", 2)),
        seed=seed, per_step=bool(params.get("per_step", False)),
    )
    nn_mod.train(model, train_fms, _nn_config(seed, params), labels=y)
    X = np.stack([fm.values for fm in test_fms])
    return [int(v) for v in model.predict(X)]


_TRAINERS: dict[str, Callable] = {
    "hmm": _fit_predict_hmm,
    "svm": _fit_predict_svm,
    "tcn": _fit_predict_tcn,
    "lstm": _fit_predict_lstm,
}


# ---------------------------------------------------------------------------
# cross validation

def _features_for(ds: Dataset, fs: FeatureSet, preproc: PreprocConfig,
                  delay: float):
    fms = []
    for trial in ds.trials:
        t = align_streams(trial, delay) if delay != 0.0 else trial
        fms.append(prepare_trial(t, fs, None, preproc))
    return fms


def _item_index(trial) -> int:
    return ITEM_ORDER.index(normalize_item_name(trial.food_item))

_ITEM_TO_CLASS_IDX = tuple(class_index(ITEM_CLASSES[i]) for i in ITEM_ORDER)


def run_cv(ds: Dataset, spec: ClassifierSpec, fs: FeatureSet, split: FoldSplit,
           preproc: PreprocConfig = PreprocConfig(),
           delay: float = DEFAULT_STREAM_DELAY,
           workers: int = 1, per_item: bool = False,
           trainer: Optional[Callable] = None) -> EvalReport:
    """k-fold cross validation with per-fold normalization statistics.

    per_item trains a 12-way item classifier; item predictions are collapsed
    to compliance classes for the headline accuracy and 4x4 confusion, and
    the raw 12x12 item confusion is attached to the report.
    """
    for trial in ds.trials:
        if trial.id not in split.assignments:
            raise ValueError(f"trial {trial.id} missing from fold assignments")
    fit = trainer if trainer is not None else _TRAINERS[spec.kind]
    raw = _features_for(ds, fs, preproc, delay)
    if per_item:
        y_all = [_item_index(t) for t in ds.trials]
        n_labels = len(ITEM_ORDER)
    else:
        y_all = [class_index(t.label) for t in ds.trials]
        n_labels = len(CLASS_ORDER)

    def one_fold(fold: int):
        train_idx = [i for i, t in enumerate(ds.trials)
                     if split.assignments[t.id] != fold]
        test_idx = [i for i, t in enumerate(ds.trials)
                    if split.assignments[t.id] == fold]
        if not train_idx or not test_idx:
            raise TooFewTrials("fold", 1, 0)
        stats = fit_norm([raw[i] for i in train_idx])
        train_fms = [stats.apply(raw[i]) for i in train_idx]
        test_fms = [stats.apply(raw[i]) for i in test_idx]
        y_train = [y_all[i] for i in train_idx]
        fold_seed = split.seed * 100003 + fold * 17 + 1
        try:
            pred = fit(train_fms, y_train, n_labels, test_fms, fold_seed,
                       spec.params)
        except HaptixError as exc:
            exc.args = (f"fold {fold}: {exc}",)
            raise
        if len(pred) != len(test_idx):
            raise ValueError("trainer returned wrong number of predictions")
        return test_idx, [int(p) for p in pred]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_fold, range(split.k)))
    else:
        results = [one_fold(f) for f in range(split.k)]

    L = len(CLASS_ORDER)
    confusion = np.zeros((L, L), dtype=np.int64)
    item_conf = np.zeros((len(ITEM_ORDER),) * 2, dtype=np.int64) if per_item else None
    per_fold = []
    for test_idx, pred in results:
        hits = 0
        for i, p in zip(test_idx, pred):
            if per_item:
                item_conf[y_all[i], p] += 1
                t_cls = _ITEM_TO_CLASS_IDX[y_all[i]]
                p_cls = _ITEM_TO_CLASS_IDX[p]
            else:
                t_cls, p_cls = y_all[i], p
            confusion[t_cls, p_cls] += 1
            hits += t_cls == p_cls
        per_fold.append(hits / len(test_idx))
    return EvalReport(
        classifier=spec.kind, feature_set=fs.spec_string(), k=split.k,
        seed=split.seed, per_fold=tuple(per_fold), confusion=confusion,
        labels=CLASS_LABELS,
        item_confusion=item_conf,
        item_labels=ITEM_ORDER if per_item else None,
    )


def ablate_features(ds: Dataset, spec: ClassifierSpec,
                    feature_sets: Sequence[FeatureSet], split: FoldSplit,
                    preproc: PreprocConfig = PreprocConfig(),
                    delay: float = DEFAULT_STREAM_DELAY,
                    workers: int = 1) -> list[dict]:
    """One run_cv per feature set on identical folds, best first."""
    if not feature_sets:
        raise ValueError("need at least one feature set")
    rows = []
    widths = {}
    for fs in feature_sets:
        report = run_cv(ds, spec, fs, split, preproc, delay, workers)
        rows.append({
            "feature_set": fs.spec_string(),
            "mean_accuracy": report.mean_accuracy,
            "std_accuracy": report.std_accuracy,
            "per_fold": list(report.per_fold),
        })
        widths[fs.spec_string()] = len(fs.channel_names)
    # Ties go to the narrower set: equal accuracy from fewer channels says
    # more about where the information lives.
    rows.sort(key=lambda r: (-r["mean_accuracy"], widths[r["feature_set"]],
                             r["feature_set"]))
    return rows


def cross_domain_eval(train_ds: Dataset, test_ds: Dataset, spec: ClassifierSpec,
                      fs: FeatureSet, preproc: PreprocConfig = PreprocConfig(),
                      delay: float = DEFAULT_STREAM_DELAY,
                      seed: int = 0,
                      trainer: Optional[Callable] = None) -> EvalReport:
    """Train once on all of train_ds, evaluate on all of test_ds."""
    fit = trainer if trainer is not None else _TRAINERS[spec.kind]
    raw_train = _features_for(train_ds, fs, preproc, delay)
    raw_test = _features_for(test_ds, fs, preproc, delay)
    stats = fit_norm(raw_train)
    train_fms = [stats.apply(fm) for fm in raw_train]
    test_fms = [stats.apply(fm) for fm in raw_test]
    y_train = [class_index(t.label) for t in train_ds.trials]
    y_test = [class_index(t.label) for t in test_ds.trials]
    pred = fit(train_fms, y_train, len(CLASS_ORDER), test_fms, seed, spec.params)
    L = len(CLASS_ORDER)
    confusion = np.zeros((L, L), dtype=np.int64)
    hits = 0
    for yt, yp in zip(y_test, pred):
        confusion[yt, int(yp)] += 1
        hits += yt == int(yp)
    acc = hits / len(y_test)
    return EvalReport(classifier=spec.kind, feature_set=fs.spec_string(),
                      k=1, seed=seed, per_fold=(acc,), confusion=confusion,
                      labels=CLASS_LABELS)


# ---------------------------------------------------------------------------
# statistics

def _as_groups(groups, min_groups: int = 2, min_size: int = 2):
    arrays = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(arrays) < min_groups:
        raise DegenerateGroups(f"need at least {min_groups} groups")
    for g in arrays:
        if g.size < min_size:
            raise DegenerateGroups(f"every group needs >= {min_size} samples")
        if not np.all(np.isfinite(g)):
            raise DegenerateGroups("groups must contain finite values")
    return arrays


def _anova_decomposition(arrays):
    N = sum(g.size for g in arrays)
    k = len(arrays)
    grand = sum(g.sum() for g in arrays) / N
    ssb = sum(g.size * (g.mean() - grand) ** 2 for g in arrays)
    ssw = sum(((g - g.mean()) ** 2).sum() for g in arrays)
    return ssb, ssw, k - 1, N - k


def anova_oneway(groups) -> tuple[float, float]:
    """Classic one-way ANOVA; p is the F-distribution survival probability."""
    arrays = _as_groups(groups)
    ssb, ssw, df1, df2 = _anova_decomposition(arrays)
    if df2 < 1:
        raise DegenerateGroups("no within-group degrees of freedom")
    if ssb <= 0.0 and ssw <= 0.0:
        return 0.0, 1.0
    msb = ssb / df1
    msw = max(ssw / df2, _MSW_FLOOR)
    F = msb / msw
    p = float(betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * F)))
    return float(F), min(max(p, 0.0), 1.0)


_OUTER_X, _OUTER_XW = np.polynomial.legendre.leggauss(160)
_INNER_Z, _INNER_W = (lambda xw: (8.0 * xw[0], 8.0 * xw[1]))(
    np.polynomial.legendre.leggauss(96)
)


def _srange_outer_nodes(df: float):
    """Outer nodes covering the mass of the scaled-chi density for this df.

    The density of s = sqrt(chi2_df / df) concentrates around 1 with spread
    ~ 1/sqrt(2 df), so the window [1 - 12/sqrt(2 df), 1 + 12/sqrt(2 df)]
    (clipped to (0, 6]) captures it to far below the 1e-6 target.
    """
    half = 12.0 / np.sqrt(2.0 * df)
    lo = max(0.0, 1.0 - half)
    hi = min(6.0, 1.0 + half)
    mid, span = 0.5 * (hi + lo), 0.5 * (hi - lo)
    return mid + span * _OUTER_X, span * _OUTER_XW


def _phi(z):
    return np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)


def _range_cdf(w, k: int):
    """P(range of k iid standard normals <= w), vectorized over w."""
    w = np.asarray(w, dtype=np.float64)
    z = _INNER_Z[None, :]
    inner = _phi(z) * np.power(
        np.clip(ndtr(z) - ndtr(z - w[:, None]), 0.0, 1.0), k - 1
    )
    return k * (inner @ _INNER_W)


def studentized_range_cdf(q: float, k: int, df: float) -> float:
    """P(Q <= q) for the studentized range with k groups and df error dof.

    Double Gauss-Legendre quadrature: the outer integral is over the scaled
    chi distribution of the pooled standard deviation, the inner one over
    the range distribution of k standard normals.
    """
    if k < 2 or df < 1:
        raise DegenerateGroups("studentized range needs k >= 2 and df >= 1")
    if q <= 0.0:
        return 0.0
    s, sw = _srange_outer_nodes(df)
    with np.errstate(divide="ignore"):
        log_f = ((df / 2.0) * np.log(df) - gammaln(df / 2.0)
                 - (df / 2.0 - 1.0) * np.log(2.0)
                 + (df - 1.0) * np.log(s) - df * s * s / 2.0)
    dens = np.exp(log_f)
    cdf = float(np.sum(sw * dens * _range_cdf(q * s, k)))
    return min(max(cdf, 0.0), 1.0)


def tukey_hsd(groups, alpha: float = 0.05) -> list[dict]:
    """All pairwise comparisons; p-values from the studentized range."""
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must be in (0, 1)")
    arrays = _as_groups(groups)
    ssb, ssw, df1, df2 = _anova_decomposition(arrays)
    if df2 < 1:
        raise DegenerateGroups("no within-group degrees of freedom")
    msw = max(ssw / df2, _MSW_FLOOR)
    k = len(arrays)
    rows = []
    for i in range(k):
        for j in range(i + 1, k):
            diff = float(arrays[i].mean() - arrays[j].mean())
            se = np.sqrt(msw / 2.0 * (1.0 / arrays[i].size + 1.0 / arrays[j].size))
            q = abs(diff) / max(se, 1e-300)
            p = 1.0 - studentized_range_cdf(q, k, df2)
            p = min(max(p, 0.0), 1.0)
            rows.append({
                "group_i": i, "group_j": j, "mean_diff": diff,
                "q": float(q), "p": p, "significant": bool(p < alpha),
            })
    return rows


def ttest_2tailed(a, b) -> tuple[float, float]:
    """Welch's unequal-variance two-sided t-test."""
    ga, gb = _as_groups([a, b])
    na, nb = ga.size, gb.size
    va, vb = ga.var(ddof=1), gb.var(ddof=1)
    se2 = va / na + vb / nb
    if se2 <= 0.0:
        if ga.mean() == gb.mean():
            return 0.0, 1.0
        se2 = _MSW_FLOOR
    t = (ga.mean() - gb.mean()) / np.sqrt(se2)
    denom = (va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1)
    if denom <= 0.0:
        df = na + nb - 2
    else:
        df = se2 * se2 / denom
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t))) if t != 0.0 else 1.0
    return float(t), min(max(p, 0.0), 1.0)
