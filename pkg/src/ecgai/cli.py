"""ecgai command-line pipeline.

    ecgai --out DIR [--seed N] [--scale desk|paper] [--config FILE] <stage> ...

Stages communicate only through files in their output directories.  Every
run writes ``run_config.json`` holding the resolved settings.  Failures
print one line ``ecgai: error stage=<stage> kind=<Type> msg=<json string>``
to stderr and exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import gbm, hmm, measure, nnseg, synth
from .core import (extract_window, read_label_file, read_record_file,
                   resample_to_1khz, write_label_file, write_record_file)

MANIFEST_NAME = "manifest.json"
TARGET_COLUMNS = ("record_id", "patient_id", "case_flag", "severity", "mass_index")


class CliError(Exception):
    pass


# -- config ------------------------------------------------------------------------

def parse_config_text(text: str) -> dict:
    """Flat ``key=value`` lines; '#' starts a comment.  Values are parsed as JSON when possible."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line {n} is not key=value: {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise CliError(f"config line {n} has an empty key")
        out[key] = _parse_value(value)
    return out


def _parse_value(text: str):
    if "," in text and not text.startswith(("[", "{", '"')):
        return [_parse_value(t.strip()) for t in text.split(",")]
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _take(cfg: dict, key: str, default, kind=None):
    if key not in cfg:
        return default
    value = cfg[key]
    if kind is tuple:
        return tuple(value) if isinstance(value, list) else (value,)
    return kind(value) if kind is not None else value


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _rel(path, start) -> str:
    return Path(os.path.relpath(path, start)).as_posix()


# -- manifests ---------------------------------------------------------------------

def read_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        rows = json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: malformed manifest ({exc.msg})") from None
    if not isinstance(rows, list):
        raise CliError(f"{path}: manifest must be a JSON array")
    base = path.parent
    out = []
    for row in rows:
        entry = dict(row)
        for key in ("record_file", "label_file"):
            if entry.get(key):
                entry[key] = str(base / entry[key])
        out.append(entry)
    return out


def write_manifest(rows: list[dict], path) -> None:
    base = Path(path).parent
    out = []
    for row in rows:
        entry = dict(row)
        for key in ("record_file", "label_file"):
            if entry.get(key):
                entry[key] = _rel(entry[key], base)
        out.append(entry)
    _write_json(out, path)


# -- stages ------------------------------------------------------------------------

def cmd_synth(args, cfg, out: Path) -> dict:
    try:
        spec_obj = json.loads(Path(args.spec).read_text()) if args.spec else {}
    except FileNotFoundError:
        raise CliError(f"spec file not found: {args.spec}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{args.spec}: malformed spec ({exc.msg})") from None
    if not isinstance(spec_obj, dict):
        raise CliError("spec must be a JSON object")
    spec_obj = {**spec_obj, **cfg}
    spec_obj.setdefault("seed", args.seed)
    kind = spec_obj.pop("kind", "cohort")
    mass_noise = float(spec_obj.pop("mass_noise_sd", 4.0))
    if kind == "cohort":
        spec = synth.CohortSpec.from_dict(spec_obj)
        members = synth.generate_cohort(spec)
        resolved = {"kind": kind, **spec.to_dict()}
    elif kind == "tracking":
        allowed = {"n_patients", "n_years", "ecgs_per_year", "disease_kind", "severity_range",
                   "start_year", "duration_ms", "noise_sd", "seed"}
        unknown = set(spec_obj) - allowed
        if unknown:
            raise CliError(f"unknown tracking spec field(s): {', '.join(sorted(unknown))}")
        if "n_patients" not in spec_obj:
            raise CliError("tracking spec needs n_patients")
        kw = dict(spec_obj)
        if "severity_range" in kw:
            kw["severity_range"] = tuple(kw["severity_range"])
        if "disease_kind" in kw:
            kw["disease_kind"] = synth.DiseaseKind(kw["disease_kind"])
        members = synth.generate_tracking_cohort(**kw)
        resolved = {"kind": kind, **{k: (v.value if isinstance(v, synth.DiseaseKind) else v)
                                     for k, v in kw.items()}}
    else:
        raise CliError(f"unknown spec kind {kind!r} (expected cohort or tracking)")
    resolved["mass_noise_sd"] = mass_noise

    (out / "records").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    mass_rng = np.random.default_rng([int(spec_obj["seed"]), 23])
    rows, targets = [], []
    for m in members:
        rid = m.record.record_id
        rec_path, lab_path = out / "records" / f"{rid}.json", out / "labels" / f"{rid}.json"
        write_record_file(m.record, rec_path)
        write_label_file(m.labels, lab_path)
        rows.append({"record_id": rid, "record_file": str(rec_path), "label_file": str(lab_path),
                     "case_flag": bool(m.case_flag), "severity": m.severity,
                     "age": m.demographics.age, "sex": m.demographics.sex,
                     "study_year": m.demographics.study_year, "patient_id": m.record.patient_id,
                     "acquired_date": m.record.acquired_date.isoformat(),
                     "matched_to": m.matched_to})
        targets.append((rid, m.record.patient_id, int(m.case_flag), m.severity,
                        synth.mass_index_analog(m.params, mass_rng, mass_noise)))
    write_manifest(rows, out / MANIFEST_NAME)
    with open(out / "targets.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TARGET_COLUMNS)
        for rid, pid, flag, sev, mass in targets:
            w.writerow([rid, pid, flag, repr(float(sev)), repr(float(mass))])
    return {"spec": resolved, "n_records": len(rows)}


def _training_windows(rows, n_windows: int, window_ms: int, seed: int):
    if not rows:
        raise CliError("manifest lists no records")
    rng = np.random.default_rng([seed, 31])
    X, Y = [], []
    for i in range(n_windows):
        row = rows[i % len(rows)]
        if not row.get("label_file"):
            raise CliError(f"record {row['record_id']} has no label file")
        rec = resample_to_1khz(read_record_file(row["record_file"]))
        lab = read_label_file(row["label_file"])
        if rec.n_samples < window_ms or lab.length != rec.n_samples:
            raise CliError(f"record {row['record_id']} is shorter than {window_ms} ms or "
                           f"its labels do not cover it")
        start = int(rng.integers(0, rec.n_samples - window_ms + 1))
        X.append(extract_window(rec, start, window_ms))
        Y.append(lab.classes[start:start + window_ms])
    return np.stack(X), np.stack(Y).astype(np.int64)


def cmd_train_seg(args, cfg, out: Path) -> dict:
    rows = read_manifest(args.manifest)
    if args.scale == "paper":
        unet_cfg = nnseg.UNetConfig.paper()
        train_cfg = nnseg.TrainConfig.paper(seed=args.seed)
    else:
        filters = _take(cfg, "filters", (4, 8), tuple)
        unet_cfg = nnseg.UNetConfig.desk(_take(cfg, "input_len", 2000, int), tuple(filters))
        train_cfg = nnseg.TrainConfig.desk(seed=args.seed)
    train_kw = {k: cfg[k] for k in ("learning_rate", "batch_size", "weight_decay", "dropout_p",
                                    "epochs", "beta1", "beta2", "eps") if k in cfg}
    train_cfg = nnseg.TrainConfig(**{**train_cfg.__dict__, **train_kw})
    n_windows = _take(cfg, "n_windows", 200, int)
    X, Y = _training_windows(rows, n_windows, unet_cfg.input_len, args.seed)
    model = nnseg.UNetModel.init(unet_cfg, args.seed)
    model, trace = nnseg.train(model, (X, Y), train_cfg)
    preds = [p.argmax(axis=1) for p in nnseg.predict_proba(model, X)]
    params = hmm.fit_hmm(list(Y), preds, _take(cfg, "hmm_floor", hmm.DEFAULT_FLOOR, float))
    nnseg.save_model(model, out / "unet.json")
    hmm.save_hmm(params, out / "hmm.json")
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for e, loss in enumerate(trace):
            w.writerow([e, repr(loss)])
    return {"unet": unet_cfg.to_dict(), "train": dict(train_cfg.__dict__), "n_windows": n_windows}


def cmd_segment(args, cfg, out: Path) -> dict:
    rows = read_manifest(args.manifest)
    model = nnseg.load_model(args.unet)
    params = hmm.load_hmm(args.hmm)
    min_ms = _take(cfg, "min_ms", 10, int)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    new_rows = []
    for row in rows:
        rec = resample_to_1khz(read_record_file(row["record_file"]))
        labels = hmm.segment(model, params, rec, min_ms=min_ms)
        path = out / "labels" / f"{row['record_id']}.json"
        write_label_file(labels, path)
        new_rows.append({**row, "label_file": str(path)})
    write_manifest(new_rows, out / MANIFEST_NAME)
    return {"min_ms": min_ms, "n_records": len(new_rows)}


def cmd_profile(args, cfg, out: Path) -> dict:
    rows = read_manifest(args.manifest)
    profiles, failures = [], []
    for row in rows:
        if not row.get("label_file"):
            failures.append((row["record_id"], "no label file"))
            continue
        rec = resample_to_1khz(read_record_file(row["record_file"]))
        labels = read_label_file(row["label_file"])
        try:
            profiles.append(measure.build_profile(rec, labels))
        except measure.MeasureError as exc:
            failures.append((row["record_id"], str(exc)))
    if not profiles:
        raise CliError("no record produced a profile")
    measure.write_profile_table(profiles, out / "profiles.csv")
    with open(out / "profile_failures.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "reason"])
        w.writerows(failures)
    return {"n_profiles": len(profiles), "n_failures": len(failures),
            "layout_version": measure.LAYOUT_VERSION}


def read_targets(path) -> dict[str, dict]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise CliError(f"targets file not found: {path}") from None
    if not rows or "record_id" not in rows[0]:
        raise CliError(f"{path}: targets CSV needs a record_id column")
    return {r["record_id"]: r for r in rows}


def _read_table(path) -> measure.ProfileTable:
    if not Path(path).exists():
        raise CliError(f"profile table not found: {path}")
    return measure.read_profile_table(path)


def _grid_from_cfg(cfg) -> gbm.TuneGrid:
    default = gbm.TuneGrid()
    return gbm.TuneGrid(
        n_trees=tuple(int(v) for v in _take(cfg, "n_trees", default.n_trees, tuple)),
        max_depth=tuple(int(v) for v in _take(cfg, "max_depth", default.max_depth, tuple)),
        shrinkage=tuple(float(v) for v in _take(cfg, "shrinkage", default.shrinkage, tuple)),
        min_leaf=tuple(int(v) for v in _take(cfg, "min_leaf", default.min_leaf, tuple)))


def cmd_train_model(args, cfg, out: Path) -> dict:
    table = _read_table(args.profiles)
    targets = read_targets(args.targets)
    missing = [r for r in table.record_ids if r not in targets]
    if missing:
        raise CliError(f"{len(missing)} profile(s) have no target row, e.g. {missing[0]}")
    if args.target not in next(iter(targets.values())):
        raise CliError(f"targets file has no column {args.target!r}")
    y = np.array([float(targets[r][args.target]) for r in table.record_ids])
    keep = np.ones(y.size, dtype=bool)
    loss = args.loss
    if args.dichotomize:
        case, keep = gbm.make_dichotomous_labels(y, args.dichotomize)
        y = case.astype(np.float64)
        loss = "logistic"
    X = table.X[keep]
    y = y[keep]
    ids = [r for r, k in zip(table.record_ids, keep) if k]
    pids = [p for p, k in zip(table.patient_ids, keep) if k]
    grid = _grid_from_cfg(cfg)
    plan = gbm.CvPlan(_take(cfg, "tune_folds", 3, int), _take(cfg, "assess_folds", 5, int),
                      args.seed)
    res = gbm.tune_and_assess(X, y, pids, loss, grid, plan)
    gbm.save_gbm(res.final_model, out / "model.json")
    with open(out / "oof.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "patient_id", "target", "prediction", "fold"])
        for rid, pid, t, p, f in zip(ids, pids, y, res.oof, res.folds):
            w.writerow([rid, pid, repr(float(t)), repr(float(p)), int(f)])
    report = gbm.variable_importance(res.fold_models)
    with open(out / "importance.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "importance"])
        for name, value in zip(report.names, report.binned):
            w.writerow([name, repr(float(value))])
    hp = res.best_hyperparams
    metrics = {"loss": loss, "n_records": int(y.size),
               "best_hyperparams": {"n_trees": hp.n_trees, "max_depth": hp.max_depth,
                                    "shrinkage": hp.shrinkage, "min_leaf": hp.min_leaf},
               "top_features": [[n, v] for n, v in report.top(10)]}
    if loss == "logistic":
        area, lo, hi = ev.delong_ci(res.oof, y > 0.5)
        roc = ev.auroc(res.oof, y > 0.5)
        roc.write_csv(out / "roc.csv")
        metrics.update(auroc=area, auroc_ci=[lo, hi], threshold=ev.threshold_for(roc))
    else:
        metrics["abs_dev_pct"] = ev.abs_dev_percentiles(res.oof, y)
    _write_json(metrics, out / "metrics.json")
    return {"target": args.target, "loss": loss, "dichotomize": args.dichotomize,
            "grid": {"n_trees": list(grid.n_trees), "max_depth": list(grid.max_depth),
                     "shrinkage": list(grid.shrinkage), "min_leaf": list(grid.min_leaf)},
            "tune_folds": plan.tune_folds, "assess_folds": plan.assess_folds}


def cmd_eval(args, cfg, out: Path) -> dict:
    if not (args.estimates and args.references) and not args.oof:
        raise CliError("eval needs --estimates and --references, or --oof")
    metrics = {}
    if args.estimates and args.references:
        est, ref = _read_table(args.estimates), _read_table(args.references)
        ref_index = {r: i for i, r in enumerate(ref.record_ids)}
        pairs = [(i, ref_index[r]) for i, r in enumerate(est.record_ids) if r in ref_index]
        if not pairs:
            raise CliError("estimate and reference tables share no record_id")
        ei, ri = (np.array(v) for v in zip(*pairs))
        intervals = {}
        for j, name in enumerate(measure.INTERVAL_NAMES):
            e, r = est.X[ei, j], ref.X[ri, j]
            entry = ev.abs_dev_percentiles(e, r)
            if e.size >= 4:
                ba = ev.bland_altman_bands(e, r)
                ba.write_csv(out / f"bland_altman_{name}.csv")
                if args.svg:
                    ba.write_svg(out / f"bland_altman_{name}.svg")
                entry["bland_altman"] = ba.to_dict()
            intervals[name] = entry
        metrics["intervals"] = intervals
        metrics["n_pairs"] = len(pairs)
    if args.oof:
        with open(args.oof, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise CliError(f"{args.oof}: no rows")
        scores = np.array([float(r["prediction"]) for r in rows])
        flags = np.array([float(r["target"]) > 0.5 for r in rows])
        roc = ev.auroc(scores, flags)
        roc.write_csv(out / "roc.csv")
        area, lo, hi = ev.delong_ci(scores, flags)
        metrics["roc"] = {"auroc": area, "ci": [lo, hi], "n_cases": roc.n_cases,
                          "n_controls": roc.n_controls,
                          "threshold": ev.threshold_for(roc, args.min_sens, args.min_spec)}
    _write_json(metrics, out / "metrics.json")
    return {"min_sens": args.min_sens, "min_spec": args.min_spec}


def cmd_track(args, cfg, out: Path) -> dict:
    table = _read_table(args.profiles)
    model = gbm.load_gbm(args.model)
    scores = gbm.predict(model, table.X)
    if any(d is None for d in table.dates):
        raise CliError("every tracked profile needs an acquired_date")
    series = ev.track_scores(scores, table.patient_ids, table.dates)
    series.write_csv(out / "trajectories.csv")
    if args.svg:
        series.write_svg(out / "trajectories.svg")
    rho = series.spearman()
    summary = {"n_patients": len(series.series), "spearman": rho,
               "excluded_patients": sorted(set(table.patient_ids) - set(series.series))}
    if args.threshold is not None:
        summary["threshold"] = args.threshold
        summary["above_threshold_by_year"] = {
            pid: [[y, bool(v >= args.threshold)] for y, v in pts]
            for pid, pts in series.series.items()}
    _write_json(summary, out / "tracking.json")
    return {"threshold": args.threshold}


# -- entry point -------------------------------------------------------------------

STAGES = {
    "synth": cmd_synth,
    "train-seg": cmd_train_seg,
    "segment": cmd_segment,
    "profile": cmd_profile,
    "train-model": cmd_train_model,
    "eval": cmd_eval,
    "track": cmd_track,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ecgai", description="ECG segmentation and profile modeling pipeline")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p.add_argument("--config", help="flat key=value override file")
    sub = p.add_subparsers(dest="stage", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--spec", help="JSON cohort spec (kind: cohort | tracking)")

    s = sub.add_parser("train-seg", help="train the U-net and fit the HMM")
    s.add_argument("--manifest", required=True)

    s = sub.add_parser("segment", help="label records with U-net + HMM + duration filter")
    s.add_argument("--manifest", required=True)
    s.add_argument("--unet", required=True)
    s.add_argument("--hmm", required=True)

    s = sub.add_parser("profile", help="build the 725-feature profile table")
    s.add_argument("--manifest", required=True)

    s = sub.add_parser("train-model", help="tune, assess and fit a GBM on profiles")
    s.add_argument("--profiles", required=True)
    s.add_argument("--targets", required=True)
    s.add_argument("--target", required=True, help="column of the targets CSV")
    s.add_argument("--loss", choices=gbm.LOSSES, default="squared")
    s.add_argument("--dichotomize", choices=("high_is_case", "low_is_case"))

    s = sub.add_parser("eval", help="interval agreement and ROC metrics")
    s.add_argument("--estimates")
    s.add_argument("--references")
    s.add_argument("--oof", help="out-of-fold CSV from train-model")
    s.add_argument("--min-sens", type=float, default=0.80)
    s.add_argument("--min-spec", type=float, default=0.90)
    s.add_argument("--svg", action="store_true")

    s = sub.add_parser("track", help="per-patient yearly score trajectories")
    s.add_argument("--profiles", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--svg", action="store_true")
    return p


def _error_line(stage, exc) -> str:
    return f"ecgai: error stage={stage} kind={type(exc).__name__} msg={json.dumps(str(exc))}"


def main(argv=None) -> int:
    stage = "args"
    try:
        args = build_parser().parse_args(argv)
        stage = args.stage
        cfg = {}
        if args.config:
            try:
                cfg = parse_config_text(Path(args.config).read_text())
            except FileNotFoundError:
                raise CliError(f"config file not found: {args.config}") from None
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            resolved = STAGES[stage](args, cfg, out)
        for w in caught:
            print(f"ecgai: warning stage={stage} msg={json.dumps(str(w.message))}", file=sys.stderr)
        flags = {k: v for k, v in vars(args).items() if k not in ("out", "config")}
        _write_json({"stage": stage, "flags": flags, "overrides": cfg, "resolved": resolved,
                     "layout_version": measure.LAYOUT_VERSION}, out / "run_config.json")
        return 0
    except (CliError, ValueError, RuntimeError, OSError, KeyError) as exc:
        print(_error_line(stage, exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
