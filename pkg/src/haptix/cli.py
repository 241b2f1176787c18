"""Command-line front end.

Subcommands: ingest, synth, train, evaluate, ablate, cross-domain, report.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Configuration precedence: command-line flags > --config key=value file >
environment (HAPTIX_WORKERS) > built-in defaults. Every run writes a
run.json with the fully resolved configuration; `evaluate --from-run`
re-executes one exactly.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import hmm as hmm_mod
from . import nn as nn_mod
from . import svm as svm_mod
from .core import (
    CLASS_ORDER,
    Source,
    align_streams,
    load_trials,
    save_trials,
)
from .errors import DataError, NumericalError
from .preprocess import FeatureSet, PreprocConfig, fit_norm, prepare_trial
from .synthgen import GenConfig, generate


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# Builtin defaults for everything the pipeline commands share. None means
# "defer to the component's own default" (left out of hyperparameters).
_PIPELINE_DEFAULTS = {
    "features": "all",
    "k": 3,
    "seed": 0,
    "threshold": 0.5,
    "hold": 0.05,
    "duration": 0.82,
    "full_phase": False,
    "grid": 64,
    "delay": 0.030,
    "workers": None,
    "per_item": False,
    "group_by": None,
    "states": 3,
    "max_iter": 100,
    "tol": 1e-4,
    "estimate_pi": False,
    "svm_c": 1.0,
    "epochs": None,
    "lr": 1e-3,
    "batch_size": 32,
    "optimizer": "adam",
    "hidden": 50,
    "layers": 2,
    "per_step": False,
    "channels": 32,
    "depth": 4,
    "kernel": 5,
}

_SYNTH_DEFAULTS = {
    "per_class": 60,
    "seed": 0,
    "noise": 0.05,
    "rate": 120.0,
    "duration": 1.5,
    "domain_shift": 1.0,
    "fz_only": False,
    "source": "human",
}

_BOOL_KEYS = {"full_phase", "per_item", "estimate_pi", "per_step", "fz_only"}


def _add_pipeline_flags(p: _Parser, with_folds: bool = True):
    p.add_argument("--features", default=None)
    if with_folds:
        p.add_argument("--k", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--hold", type=float, default=None)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--full-phase", action="store_const", const=True, default=None)
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--delay", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--states", type=int, default=None, help="HMM state count")
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--estimate-pi", action="store_const", const=True, default=None)
    p.add_argument("--svm-c", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--per-step", action="store_const", const=True, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--kernel", type=int, default=None)
    p.add_argument("--config", default=None, help="flat key=value config file")


def build_parser() -> _Parser:
    top = _Parser(prog="haptix", description=__doc__)
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[], help="validate and canonicalize a trial file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--rate", type=float, default=None)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--domain-shift", type=float, default=None)
    p.add_argument("--fz-only", action="store_const", const=True, default=None)
    p.add_argument("--source", choices=("human", "robot"), default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="output trial file (JSON lines)")

    p = sub.add_parser("train", help="train one classifier on a full dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--clf", required=True, choices=("hmm", "svm", "tcn", "lstm"))
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p, with_folds=False)

    p = sub.add_parser("evaluate", help="k-fold cross-validated evaluation")
    p.add_argument("--data", default=None)
    p.add_argument("--clf", choices=("hmm", "svm", "tcn", "lstm"), default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--per-item", action="store_const", const=True, default=None)
    p.add_argument("--group-by", choices=("subject",), default=None)
    p.add_argument("--states-sweep", default=None,
                   help="comma list of HMM state counts to evaluate")
    p.add_argument("--from-run", default=None,
                   help="re-execute the configuration of an emitted run.json")
    _add_pipeline_flags(p)

    p = sub.add_parser("ablate", help="feature-set ablation on identical folds")
    p.add_argument("--data", required=True)
    p.add_argument("--clf", required=True, choices=("hmm", "svm", "tcn", "lstm"))
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)

    p = sub.add_parser("cross-domain", help="train on one dataset, test on another")
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--clf", required=True, choices=("hmm", "svm", "tcn", "lstm"))
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p, with_folds=False)

    p = sub.add_parser("report", help="print or re-export an evaluation report")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", default=None, help="directory for re-exported CSVs")
    return top


def _read_config_file(path) -> dict:
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


def _coerce(key: str, value, template):
    """Parse a config-file string into the type of the builtin default."""
    if value is None or not isinstance(value, str):
        return value
    if key in _BOOL_KEYS:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key}: expected a boolean, got {value!r}")
    if template is None:
        for caster in (int, float):
            try:
                return caster(value)
            except ValueError:
                pass
        return value
    if isinstance(template, bool):
        return _coerce(key, value, None)
    try:
        return type(template)(value)
    except ValueError:
        raise UsageError(f"config key {key}: cannot parse {value!r}") from None


def _resolve(args: argparse.Namespace, defaults: dict, extra_keys=()) -> dict:
    """flags > config file > environment > builtin defaults."""
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = _read_config_file(args.config)
    resolved = {}
    keys = list(defaults) + list(extra_keys)
    for key in keys:
        default = defaults.get(key)
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            resolved[key] = flag_val
        elif key in file_cfg:
            resolved[key] = _coerce(key, file_cfg[key], default)
        elif key == "workers" and os.environ.get("HAPTIX_WORKERS"):
            resolved[key] = int(os.environ["HAPTIX_WORKERS"])
        else:
            resolved[key] = default
    if resolved.get("workers") is None:
        resolved["workers"] = 1
    return resolved


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} {p} does not exist")
    return p


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_json(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _preproc_from(cfg: dict) -> PreprocConfig:
    duration = None if cfg["full_phase"] else cfg["duration"]
    return PreprocConfig(threshold=cfg["threshold"], hold=cfg["hold"],
                         duration=duration, grid=cfg["grid"])


def _params_from(cfg: dict) -> dict:
    params = {
        "states": cfg["states"], "max_iter": cfg["max_iter"], "tol": cfg["tol"],
        "estimate_pi": cfg["estimate_pi"], "C": cfg["svm_c"], "lr": cfg["lr"],
        "batch_size": cfg["batch_size"], "optimizer": cfg["optimizer"],
        "hidden": cfg["hidden"], "layers": cfg["layers"],
        "per_step": cfg["per_step"], "channels": cfg["channels"],
        "depth": cfg["depth"], "kernel": cfg["kernel"],
    }
    if cfg["epochs"] is not None:
        params["epochs"] = cfg["epochs"]
    return params


def _cmd_ingest(args) -> int:
    ds = load_trials(_require_file(args.data, "trial file"))
    out = _outdir(args.out)
    save_trials(ds, out / "dataset.jsonl")
    _write_run_json({"command": "ingest", "data": str(args.data),
                     "out": str(args.out)}, out / "run.json")
    counts = " ".join(f"{c.label}={ds.class_counts[c]}" for c in CLASS_ORDER)
    print(f"ingested {len(ds)} trials: {counts}")
    return 0


def _cmd_synth(args) -> int:
    cfg = _resolve(args, _SYNTH_DEFAULTS)
    gen = GenConfig(
        trials_per_class=cfg["per_class"], noise_std=cfg["noise"],
        sample_rate=cfg["rate"], duration=cfg["duration"],
        domain_shift=cfg["domain_shift"], seed=cfg["seed"],
        fz_only=bool(cfg["fz_only"]), source=Source(cfg["source"]),
    )
    ds = generate(gen)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    save_trials(ds, out)
    run = dict(cfg)
    run["command"] = "synth"
    run["out"] = str(out)
    _write_run_json(run, str(out) + ".run.json")
    print(f"wrote {len(ds)} trials to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve(args, _PIPELINE_DEFAULTS)
    cfg.pop("k", None)
    data = _require_file(args.data, "trial file")
    ds = load_trials(data)
    fs = FeatureSet.parse(cfg["features"])
    preproc = _preproc_from(cfg)
    raw = []
    for trial in ds.trials:
        t = align_streams(trial, cfg["delay"]) if cfg["delay"] else trial
        raw.append(prepare_trial(t, fs, None, preproc))
    stats = fit_norm(raw)
    fms = [stats.apply(fm) for fm in raw]
    out = _outdir(args.out)
    params = _params_from(cfg)
    seed = cfg["seed"]
    if args.clf == "hmm":
        clf = hmm_mod.train_hmm_classifier(
            fms, K=params["states"], max_iter=params["max_iter"],
            tol=params["tol"], estimate_pi=params["estimate_pi"])
        hmm_mod.save_hmm_classifier(clf, out / "model.json")
    elif args.clf == "svm":
        X = np.stack([svm_mod.flatten(fm) for fm in fms])
        y = [fm.label for fm in fms]
        model = svm_mod.train_svm(
            X, y, C=params["C"], epochs=params.get("epochs", 200), seed=seed,
            channel_names=fms[0].channel_names)
        svm_mod.save_model(model, out / "model.json")
    else:
        grid, F = fms[0].values.shape
        if args.clf == "tcn":
            model = nn_mod.TcnModel(in_channels=F, channels=params["channels"],
                                    depth=params["depth"], kernel=params["kernel"],
                                    grid=grid, seed=seed)
        else:
            model = nn_mod.LstmModel(in_channels=F, hidden=params["hidden"],
                                     layers=params["layers"], seed=seed,
                                     per_step=params["per_step"])
        tc = nn_mod.TrainConfig(learning_rate=params["lr"],
                                epochs=params.get("epochs", 100),
                                batch_size=params["batch_size"], seed=seed,
                                optimizer=params["optimizer"])
        _, curve = nn_mod.train(model, fms, tc)
        nn_mod.save_model(model, out / "model.json")
        nn_mod.save_loss_curve(curve, out / "loss_curve.csv")
    norm = {"mean": stats.mean.tolist(), "std": stats.std.tolist(),
            "channel_names": list(stats.channel_names)}
    (out / "norm.json").write_text(json.dumps(norm) + "\n", encoding="utf-8")
    run = dict(cfg)
    run.update(command="train", data=str(data), clf=args.clf, out=str(args.out))
    _write_run_json(run, out / "run.json")
    print(f"trained {args.clf} on {len(ds)} trials -> {out / 'model.json'}")
    return 0


def _evaluate_with_cfg(cfg: dict) -> int:
    data = _require_file(cfg["data"], "trial file")
    ds = load_trials(data)
    fs = FeatureSet.parse(cfg["features"])
    preproc = _preproc_from(cfg)
    split = ev.kfold_split(ds, cfg["k"], seed=cfg["seed"],
                           group_by=cfg.get("group_by"))
    out = _outdir(cfg["out"])
    params = _params_from(cfg)
    sweep = cfg.get("states_sweep")
    if sweep:
        if cfg["clf"] != "hmm":
            raise UsageError("--states-sweep only applies to --clf hmm")
        lines = ["states,mean_accuracy,std_accuracy"]
        for states in [int(s) for s in str(sweep).split(",")]:
            p = dict(params, states=states)
            report = ev.run_cv(ds, ev.ClassifierSpec("hmm", p), fs, split,
                               preproc, cfg["delay"], cfg["workers"])
            lines.append(f"{states},{repr(report.mean_accuracy)},{repr(report.std_accuracy)}")
            print(f"hmm[K={states}] {report.feature_set} "
                  f"{report.mean_accuracy:.4f} ± {report.std_accuracy:.4f}")
        (out / "states_sweep.csv").write_text("\n".join(lines) + "\n",
                                              encoding="utf-8")
        _write_run_json(cfg, out / "run.json")
        return 0
    spec = ev.ClassifierSpec(cfg["clf"], params)
    report = ev.run_cv(ds, spec, fs, split, preproc, cfg["delay"],
                       cfg["workers"], per_item=bool(cfg["per_item"]))
    (out / "report.json").write_text(
        json.dumps(ev.report_to_dict(report), indent=2) + "\n", encoding="utf-8")
    ev.write_confusion_csv(report, out / "confusion.csv")
    ev.write_folds_csv(report, out / "folds.csv")
    _write_run_json(cfg, out / "run.json")
    print(f"{report.classifier} {report.feature_set} "
          f"{report.mean_accuracy:.4f} ± {report.std_accuracy:.4f}")
    return 0


def _cmd_evaluate(args) -> int:
    if args.from_run:
        stored = json.loads(_require_file(args.from_run, "run file")
                            .read_text(encoding="utf-8"))
        if stored.get("command") != "evaluate":
            raise UsageError("--from-run expects a run.json from an evaluate run")
        cfg = dict(stored)
        if args.out is not None:
            cfg["out"] = args.out
        return _evaluate_with_cfg(cfg)
    cfg = _resolve(args, _PIPELINE_DEFAULTS,
                   extra_keys=("per_item", "group_by", "states_sweep"))
    for key in ("data", "clf", "out"):
        if getattr(args, key) is None:
            raise UsageError(f"--{key} is required (or use --from-run)")
        cfg[key] = getattr(args, key)
    cfg["per_item"] = bool(cfg.get("per_item"))
    cfg["command"] = "evaluate"
    return _evaluate_with_cfg(cfg)


def _cmd_ablate(args) -> int:
    cfg = _resolve(args, _PIPELINE_DEFAULTS)
    data = _require_file(args.data, "trial file")
    ds = load_trials(data)
    sets = [FeatureSet.parse(tok) for tok in str(cfg["features"]).split(",") if tok]
    if not sets:
        raise UsageError("--features must list at least one feature set")
    preproc = _preproc_from(cfg)
    split = ev.kfold_split(ds, cfg["k"], seed=cfg["seed"])
    spec = ev.ClassifierSpec(args.clf, _params_from(cfg))
    rows = ev.ablate_features(ds, spec, sets, split, preproc, cfg["delay"],
                              cfg["workers"])
    out = _outdir(args.out)
    ev.write_ablation_csv(rows, out / "ablation.csv")
    run = dict(cfg)
    run.update(command="ablate", data=str(data), clf=args.clf, out=str(args.out))
    _write_run_json(run, out / "run.json")
    for row in rows:
        print(f"{args.clf} {row['feature_set']} "
              f"{row['mean_accuracy']:.4f} ± {row['std_accuracy']:.4f}")
    return 0


def _cmd_cross_domain(args) -> int:
    cfg = _resolve(args, _PIPELINE_DEFAULTS)
    cfg.pop("k", None)
    train_path = _require_file(args.train_data, "trial file")
    test_path = _require_file(args.test_data, "trial file")
    train_ds = load_trials(train_path)
    test_ds = load_trials(test_path)
    fs = FeatureSet.parse(cfg["features"])
    spec = ev.ClassifierSpec(args.clf, _params_from(cfg))
    report = ev.cross_domain_eval(train_ds, test_ds, spec, fs,
                                  _preproc_from(cfg), cfg["delay"], cfg["seed"])
    out = _outdir(args.out)
    (out / "report.json").write_text(
        json.dumps(ev.report_to_dict(report), indent=2) + "\n", encoding="utf-8")
    ev.write_confusion_csv(report, out / "confusion.csv")
    run = dict(cfg)
    run.update(command="cross-domain", train_data=str(train_path),
               test_data=str(test_path), clf=args.clf, out=str(args.out))
    _write_run_json(run, out / "run.json")
    print(f"{report.classifier} {report.feature_set} "
          f"{report.mean_accuracy:.4f} ± {report.std_accuracy:.4f}")
    return 0


def _cmd_report(args) -> int:
    payload = json.loads(_require_file(args.in_path, "report file")
                         .read_text(encoding="utf-8"))
    report = ev.report_from_dict(payload)
    print(f"{report.classifier} {report.feature_set} "
          f"{report.mean_accuracy:.4f} ± {report.std_accuracy:.4f} "
          f"(pooled {report.pooled_accuracy:.4f}, k={report.k})")
    width = max(len(str(l)) for l in report.labels)
    for name, row in zip(report.labels, report.confusion):
        cells = " ".join(f"{int(v):5d}" for v in row)
        print(f"  {str(name):>{width}} {cells}")
    if args.out:
        out = _outdir(args.out)
        ev.write_confusion_csv(report, out / "confusion.csv")
        ev.write_folds_csv(report, out / "folds.csv")
        print(f"re-exported CSVs to {out}")
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "cross-domain": _cmd_cross_domain,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
