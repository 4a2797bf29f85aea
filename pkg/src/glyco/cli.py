"""Experiment runner: preprocess -> fit (grid search) -> predict -> report.

Subcommands mirror the pipeline stages so every intermediate artifact can
be inspected:

    glyco synth      --config c.json        write raw synthetic patient CSVs
    glyco preprocess --config c.json        clean/resample/split, write per-patient CSVs
    glyco train      --config c.json        grid-search fits, write model files
    glyco evaluate   --config c.json        traces, smoothing, CG-EGA reports
    glyco report     --config c.json        summary table and SVG figures
    glyco grid       --config c.json        all of the above in one run

Exit codes: 0 success, 1 partial failure (some patients aborted), 2 invalid
config.  The output directory resolves as --out > config "output_dir" >
$GLYCO_OUT > ./glyco-out.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from . import render
from .data_model import PatientRecord, export_csv, ingest_csv, validate
from .errors import ConfigError, GlycoError
from .metrics import (
    CgEgaReport,
    PredictionTrace,
    cg_ega_report,
    rmse,
    score_trace,
    trace_from_csv,
    trace_to_csv,
)
from .models import (
    ElmConfig,
    ElmRegressor,
    GpConfig,
    GpRegressor,
    LstmModelConfig,
    LstmPredictor,
    NaivePredictor,
    Predictor,
    SvrConfig,
    SvrRegressor,
    load_model,
    predict_trace,
    save_model,
)
from .nnet import loss_cmse
from .postprocess import SmoothingConfig, moving_average
from .preprocess import (
    SplitSpec,
    WindowConfig,
    WindowedPatient,
    export_preprocessed_csv,
    load_preprocessed_csv,
    preprocess_record,
    standardize_and_window,
)
from .synth import SynthConfig, generate_cohort

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2

MODEL_PARAM_KEYS = {
    "naive": set(),
    "elm": {"hidden_neurons", "l2", "seed"},
    "gp": {"sigma0_sq", "noise"},
    "svr": {"gamma", "epsilon", "c", "tol"},
    "lstm": {"units", "learning_rate", "batch_size", "l2_penalty",
             "max_epochs", "patience", "seed"},
    "pclstm": {"units", "coherence", "learning_rate", "batch_size", "l2_penalty",
               "max_epochs", "patience", "seed"},
}

_SYNTH_KEYS = {f.name for f in SynthConfig.__dataclass_fields__.values()} | {"patients"}


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: Path
    synthetic: dict | None
    csv_dir: Path | None
    window: WindowConfig
    split: SplitSpec
    spike_threshold: float
    model_specs: list[dict]
    smoothing_window: int
    smoothing_enabled: bool
    jobs: int = 1

    def as_dict(self) -> dict:
        """Primitive form for worker processes."""
        return {
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "synthetic": self.synthetic,
            "csv_dir": str(self.csv_dir) if self.csv_dir else None,
            "window": {"history_steps": self.window.history_steps,
                       "horizon_steps": self.window.horizon_steps},
            "split": {"train_fraction": self.split.train_fraction,
                      "valid_fraction": self.split.valid_fraction,
                      "test_fraction": self.split.test_fraction,
                      "seed": self.split.seed},
            "spike_threshold": self.spike_threshold,
            "model_specs": self.model_specs,
            "smoothing_window": self.smoothing_window,
            "smoothing_enabled": self.smoothing_enabled,
            "jobs": 1,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return cls(
            seed=raw["seed"],
            output_dir=Path(raw["output_dir"]),
            synthetic=raw["synthetic"],
            csv_dir=Path(raw["csv_dir"]) if raw["csv_dir"] else None,
            window=WindowConfig(**raw["window"]),
            split=SplitSpec(**raw["split"]),
            spike_threshold=raw["spike_threshold"],
            model_specs=raw["model_specs"],
            smoothing_window=raw["smoothing_window"],
            smoothing_enabled=raw["smoothing_enabled"],
            jobs=raw.get("jobs", 1),
        )


def load_config(path: str | Path, out_override: str | None = None,
                seed_override: int | None = None, jobs: int = 1) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")

    data = raw.get("data")
    if not isinstance(data, dict) or len(set(data) & {"synthetic", "csv_dir"}) != 1:
        raise ConfigError('config "data" must contain exactly one of "synthetic" or "csv_dir"')
    synthetic = data.get("synthetic")
    if synthetic is not None:
        unknown = set(synthetic) - _SYNTH_KEYS
        if unknown:
            raise ConfigError(f"unknown synthetic data keys: {sorted(unknown)}")
    csv_dir = Path(data["csv_dir"]) if "csv_dir" in data else None

    specs = raw.get("models")
    if not isinstance(specs, list) or not specs:
        raise ConfigError('config "models" must be a non-empty list')
    for spec in specs:
        if not isinstance(spec, dict) or "kind" not in spec:
            raise ConfigError('every model spec needs a "kind"')
        kind = spec["kind"]
        if kind not in MODEL_PARAM_KEYS:
            raise ConfigError(f"unknown model kind {kind!r}")
        unknown = set(spec) - MODEL_PARAM_KEYS[kind] - {"kind"}
        if unknown:
            raise ConfigError(f"unknown parameters for {kind}: {sorted(unknown)}")
        for key, value in spec.items():
            if isinstance(value, list) and not value:
                raise ConfigError(f"{kind}.{key}: grid list must be non-empty")

    smoothing = raw.get("smoothing", {})
    window_cfg = raw.get("window", {})
    split_cfg = raw.get("split", {})
    try:
        window = WindowConfig(**window_cfg)
        split = SplitSpec(**split_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad window/split config: {exc}") from exc

    out_dir = (out_override or raw.get("output_dir")
               or os.environ.get("GLYCO_OUT") or "glyco-out")
    seed = seed_override if seed_override is not None else int(raw.get("seed", 0))
    return ExperimentConfig(
        seed=seed,
        output_dir=Path(out_dir),
        synthetic=synthetic,
        csv_dir=csv_dir,
        window=window,
        split=split,
        spike_threshold=float(raw.get("spike_threshold", 40.0)),
        model_specs=specs,
        smoothing_window=int(smoothing.get("window", 3)),
        smoothing_enabled=bool(smoothing.get("enabled", True)),
        jobs=max(1, jobs),
    )


def _load_patients(cfg: ExperimentConfig) -> list[PatientRecord]:
    if cfg.synthetic is not None:
        params = dict(cfg.synthetic)
        n = int(params.pop("patients", 1))
        params.setdefault("seed", cfg.seed)
        return generate_cohort(n, SynthConfig(**params), seed=cfg.seed)
    records = []
    files = sorted(cfg.csv_dir.glob("*.csv"))
    if not files:
        raise ConfigError(f"no CSV files in {cfg.csv_dir}")
    for f in files:
        record = ingest_csv(f)
        problems = validate(record)
        if problems:
            raise GlycoError(f"{f}: invalid record: {problems[0]}")
        records.append(record)
    return records


def expand_grid(spec: dict) -> list[dict]:
    """Cartesian product over list-valued parameters, fixed order."""
    fixed = {k: v for k, v in spec.items() if k != "kind" and not isinstance(v, list)}
    axes = {k: v for k, v in spec.items() if isinstance(v, list)}
    if not axes:
        return [fixed]
    keys = sorted(axes)
    cells = []
    for combo in product(*(axes[k] for k in keys)):
        cell = dict(fixed)
        cell.update(dict(zip(keys, combo)))
        cells.append(cell)
    return cells


def build_model(kind: str, params: dict, default_seed: int) -> Predictor:
    params = dict(params)
    if kind == "naive":
        return NaivePredictor()
    if kind == "elm":
        params.setdefault("seed", default_seed)
        return ElmRegressor(ElmConfig(**params))
    if kind == "gp":
        return GpRegressor(GpConfig(**params))
    if kind == "svr":
        return SvrRegressor(SvrConfig(**params))
    if kind in ("lstm", "pclstm"):
        params.setdefault("seed", default_seed)
        if kind == "lstm":
            params["coherence"] = 0.0
        else:
            params.setdefault("coherence", 2.0)
        return LstmPredictor(LstmModelConfig(**params), kind=kind)
    raise ConfigError(f"unknown model kind {kind!r}")


def _cell_score(kind: str, model: Predictor, windowed: WindowedPatient,
                window: WindowConfig) -> float:
    """Validation objective: cMSE for the pcLSTM, RMSE (mg/dL) otherwise."""
    if kind == "pclstm":
        preds = model.predict(windowed.valid)
        targets = [(w.target_prev, w.target_final) for w in windowed.valid]
        return loss_cmse(preds, targets, model.config.coherence)
    trace = predict_trace(model, windowed.valid, windowed.scaler, window)
    return rmse(trace)


def fit_best_model(kind: str, spec: dict, windowed: WindowedPatient,
                   window: WindowConfig, patient_seed: int):
    """Fit every grid cell, score on validation, keep the best fitted model."""
    cells = expand_grid(spec)
    best = None
    rows = []
    for i, cell in enumerate(cells):
        model = build_model(kind, cell, patient_seed)
        model.fit(windowed.train, windowed.valid)
        score = _cell_score(kind, model, windowed, window)
        rows.append({"cell": i, "params": json.dumps(cell, sort_keys=True), "score": score})
        if best is None or score < best[0]:
            best = (score, i, model)
    for row in rows:
        row["selected"] = int(row["cell"] == best[1])
    return best[2], rows


# ---------------------------------------------------------------- stages

def _dirs(cfg: ExperimentConfig) -> dict[str, Path]:
    base = cfg.output_dir
    return {name: base / name for name in
            ("raw", "preprocessed", "models", "traces", "ega", "reports", "figures")}


def stage_synth(cfg: ExperimentConfig) -> list[str]:
    if cfg.synthetic is None:
        raise ConfigError("synth stage needs a synthetic data source")
    d = _dirs(cfg)
    ids = []
    for record in _load_patients(cfg):
        export_csv(record, d["raw"] / f"{record.patient_id}.csv")
        for warning in record.warnings:
            print(f"[synth] {record.patient_id}: {warning}", file=sys.stderr)
        ids.append(record.patient_id)
    return ids


def stage_preprocess(cfg: ExperimentConfig) -> tuple[list[str], list[str]]:
    d = _dirs(cfg)
    done, failed = [], []
    for record in _load_patients(cfg):
        try:
            pre = preprocess_record(record, cfg.split, cfg.spike_threshold)
            export_preprocessed_csv(pre, d["preprocessed"] / f"{record.patient_id}.csv")
            done.append(record.patient_id)
        except GlycoError as exc:
            print(f"[preprocess] {record.patient_id} failed: {exc}", file=sys.stderr)
            failed.append(record.patient_id)
    return done, failed


def _preprocessed_files(cfg: ExperimentConfig) -> list[Path]:
    d = _dirs(cfg)
    files = sorted(d["preprocessed"].glob("*.csv"))
    if not files:
        raise ConfigError(
            f"no preprocessed patients under {d['preprocessed']}; run `glyco preprocess` first")
    return files


def _patient_seed(cfg_seed: int, patient_index: int) -> int:
    return cfg_seed + 1009 * patient_index


def _train_one_patient(raw_cfg: dict, path_str: str, patient_index: int) -> list[dict]:
    cfg = ExperimentConfig.from_dict(raw_cfg)
    d = _dirs(cfg)
    path = Path(path_str)
    pre = load_preprocessed_csv(path)
    windowed = standardize_and_window(pre, cfg.window)
    seed = _patient_seed(cfg.seed, patient_index)
    grid_rows = []
    for spec in cfg.model_specs:
        kind = spec["kind"]
        model, rows = fit_best_model(kind, spec, windowed, cfg.window, seed)
        save_model(model, cfg.window, d["models"] / f"{pre.patient_id}_{kind}.bin")
        for row in rows:
            row.update({"patient": pre.patient_id, "model": kind})
            grid_rows.append(row)
    grid_path = d["reports"] / f"grid_{pre.patient_id}.csv"
    grid_path.parent.mkdir(parents=True, exist_ok=True)
    with open(grid_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient", "model", "cell", "params", "score", "selected"])
        for row in grid_rows:
            writer.writerow([row["patient"], row["model"], row["cell"], row["params"],
                             f"{row['score']:.6f}", row["selected"]])
    return grid_rows


def stage_train(cfg: ExperimentConfig) -> tuple[list[str], list[str]]:
    files = _preprocessed_files(cfg)
    done, failed = [], []
    tasks = [(cfg.as_dict(), str(path), i) for i, path in enumerate(files)]
    results = _run_tasks(_train_one_patient, tasks, cfg.jobs)
    for path, result in zip(files, results):
        patient = path.stem
        if isinstance(result, Exception):
            print(f"[train] {patient} failed: {result}", file=sys.stderr)
            failed.append(patient)
        else:
            done.append(patient)
    return done, failed


def _report_row(patient: str, model: str, smoothing: str, report: CgEgaReport) -> dict:
    row = {
        "patient": patient, "model": model, "smoothing": smoothing,
        "rmse": report.rmse, "drmse": report.drmse,
        "ap": report.overall.ap, "be": report.overall.be, "ep": report.overall.ep,
        "n_scored": report.overall.n,
    }
    for region in ("hypo", "eu", "hyper"):
        rates = report.per_region[region]
        for metric in ("ap", "be", "ep"):
            row[f"{region}_{metric}"] = getattr(rates, metric) if rates else ""
    return row


_REPORT_COLUMNS = ["patient", "model", "smoothing", "rmse", "drmse", "ap", "be", "ep",
                   "hypo_ap", "hypo_be", "hypo_ep", "eu_ap", "eu_be", "eu_ep",
                   "hyper_ap", "hyper_be", "hyper_ep", "n_scored"]


def _evaluate_one_patient(raw_cfg: dict, path_str: str, patient_index: int) -> list[dict]:
    cfg = ExperimentConfig.from_dict(raw_cfg)
    d = _dirs(cfg)
    pre = load_preprocessed_csv(Path(path_str))
    windowed = standardize_and_window(pre, cfg.window)
    rows = []
    for spec in cfg.model_specs:
        kind = spec["kind"]
        model_path = d["models"] / f"{pre.patient_id}_{kind}.bin"
        if not model_path.is_file():
            raise GlycoError(f"missing model file {model_path}; run `glyco train` first")
        model, window = load_model(model_path)
        trace = predict_trace(model, windowed.test, windowed.scaler, window)
        trace_to_csv(trace, d["traces"] / f"{pre.patient_id}_{kind}_raw.csv")
        rows.append(_report_row(pre.patient_id, kind, "raw", cg_ega_report(trace)))
        _scatter(trace, d["ega"] / f"{pre.patient_id}_{kind}_raw_scatter.csv")
        if cfg.smoothing_enabled:
            smoothed = moving_average(trace, SmoothingConfig(window=cfg.smoothing_window))
            trace_to_csv(smoothed, d["traces"] / f"{pre.patient_id}_{kind}_smoothed.csv")
            rows.append(_report_row(pre.patient_id, kind, "smoothed", cg_ega_report(smoothed)))
            _scatter(smoothed, d["ega"] / f"{pre.patient_id}_{kind}_smoothed_scatter.csv")
    return rows


def _scatter(trace, path: Path) -> None:
    from .metrics import scatter_to_csv
    scatter_to_csv(score_trace(trace), path)


def stage_evaluate(cfg: ExperimentConfig) -> tuple[list[str], list[str]]:
    files = _preprocessed_files(cfg)
    done, failed = [], []
    tasks = [(cfg.as_dict(), str(path), i) for i, path in enumerate(files)]
    results = _run_tasks(_evaluate_one_patient, tasks, cfg.jobs)
    all_rows: list[dict] = []
    for path, result in zip(files, results):
        patient = path.stem
        if isinstance(result, Exception):
            print(f"[evaluate] {patient} failed: {result}", file=sys.stderr)
            failed.append(patient)
        else:
            done.append(patient)
            all_rows.extend(result)
    if all_rows:
        _write_report_csv(cfg, all_rows)
        _write_summary_csv(cfg, all_rows)
    return done, failed


def _fmt(value) -> str:
    if value == "":
        return ""
    return f"{float(value):.6f}"


def _write_report_csv(cfg: ExperimentConfig, rows: list[dict]) -> None:
    d = _dirs(cfg)
    path = d["reports"] / "report.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: (r["patient"], r["model"], r["smoothing"]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_REPORT_COLUMNS)
        for row in rows:
            writer.writerow([
                row["patient"], row["model"], row["smoothing"],
                *[_fmt(row[c]) for c in _REPORT_COLUMNS[3:-1]],
                row["n_scored"],
            ])


def summarize_rows(rows: list[dict]) -> list[dict]:
    """Cohort mean/std (population) per model and smoothing state."""
    keys = sorted({(r["model"], r["smoothing"]) for r in rows})
    out = []
    for model, smoothing in keys:
        group = [r for r in rows if r["model"] == model and r["smoothing"] == smoothing]
        entry = {"model": model, "smoothing": smoothing, "patients": len(group)}
        for metric in ("rmse", "drmse", "ap", "be", "ep"):
            values = np.array([float(r[metric]) for r in group])
            entry[f"{metric}_mean"] = float(np.mean(values))
            entry[f"{metric}_std"] = float(np.std(values))
        out.append(entry)
    return out


def _write_summary_csv(cfg: ExperimentConfig, rows: list[dict]) -> None:
    d = _dirs(cfg)
    path = d["reports"] / "summary.csv"
    entries = summarize_rows(rows)
    columns = ["model", "smoothing", "patients"]
    for metric in ("rmse", "drmse", "ap", "be", "ep"):
        columns += [f"{metric}_mean", f"{metric}_std"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for e in entries:
            writer.writerow([e["model"], e["smoothing"], e["patients"],
                             *[_fmt(e[c]) for c in columns[3:]]])


def stage_report(cfg: ExperimentConfig) -> None:
    d = _dirs(cfg)
    report_path = d["reports"] / "report.csv"
    if not report_path.is_file():
        raise GlycoError(f"missing {report_path}; run `glyco evaluate` first")
    with open(report_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise GlycoError(f"{report_path} is empty")

    entries = summarize_rows(rows)
    lines = [f"{'model':<8} {'smooth':<9} {'RMSE':>15} {'dRMSE':>14} "
             f"{'AP %':>15} {'BE %':>14} {'EP %':>14}"]
    for e in entries:
        lines.append(
            f"{e['model']:<8} {e['smoothing']:<9} "
            f"{e['rmse_mean']:>7.2f} ± {e['rmse_std']:<5.2f} "
            f"{e['drmse_mean']:>6.2f} ± {e['drmse_std']:<5.2f} "
            f"{e['ap_mean']:>7.2f} ± {e['ap_std']:<5.2f} "
            f"{e['be_mean']:>6.2f} ± {e['be_std']:<5.2f} "
            f"{e['ep_mean']:>6.2f} ± {e['ep_std']:<5.2f}")
    table = "\n".join(lines) + "\n"
    (d["reports"] / "table.txt").write_text(table, encoding="utf-8")
    print(table)

    patients = sorted({r["patient"] for r in rows})
    models = sorted({r["model"] for r in rows})
    patient = patients[0]
    for model in models:
        trace_path = d["traces"] / f"{patient}_{model}_raw.csv"
        if not trace_path.is_file():
            continue
        trace = trace_from_csv(trace_path)
        segments = trace.segments()
        if segments:
            day = segments[0]
            day_trace = PredictionTrace(
                [trace.timestamps[i] for i in day],
                trace.y_true[day], trace.y_pred[day], trace.segment_ids[day])
            render.render_trace_svg(
                day_trace, d["figures"] / f"{patient}_{model}_day.svg",
                title=f"{patient} {model} (first test day)")
        points = score_trace(trace)
        render.render_p_ega_svg(points, d["figures"] / f"{patient}_{model}_pega.svg",
                                title=f"P-EGA {patient} {model}")
        render.render_r_ega_svg(points, d["figures"] / f"{patient}_{model}_rega.svg",
                                title=f"R-EGA {patient} {model}")


def _run_tasks(fn, tasks, jobs: int):
    """Run per-patient tasks, inline or in a process pool; order preserved."""
    if jobs <= 1 or len(tasks) <= 1:
        results = []
        for task in tasks:
            try:
                results.append(fn(*task))
            except Exception as exc:  # surfaced per patient by the caller
                results.append(exc)
        return results
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *task) for task in tasks]
        results = []
        for future in futures:
            try:
                results.append(future.result())
            except Exception as exc:
                results.append(exc)
        return results


def run_experiment(cfg: ExperimentConfig) -> int:
    """Full pipeline; returns the process exit code."""
    if cfg.synthetic is not None:
        stage_synth(cfg)
    done, failed = stage_preprocess(cfg)
    if not done:
        return EXIT_PARTIAL
    _, failed_train = stage_train(cfg)
    _, failed_eval = stage_evaluate(cfg)
    stage_report(cfg)
    return EXIT_PARTIAL if (failed or failed_train or failed_eval) else EXIT_OK


# ---------------------------------------------------------------- entry

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glyco", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "preprocess", "train", "evaluate", "report", "grid"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON config")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--jobs", type=int, default=1, help="parallel patient workers")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, out_override=args.out,
                          seed_override=args.seed, jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "synth":
            stage_synth(cfg)
            return EXIT_OK
        if args.command == "preprocess":
            done, failed = stage_preprocess(cfg)
            return EXIT_PARTIAL if failed or not done else EXIT_OK
        if args.command == "train":
            done, failed = stage_train(cfg)
            return EXIT_PARTIAL if failed or not done else EXIT_OK
        if args.command == "evaluate":
            done, failed = stage_evaluate(cfg)
            return EXIT_PARTIAL if failed or not done else EXIT_OK
        if args.command == "report":
            stage_report(cfg)
            return EXIT_OK
        if args.command == "grid":
            return run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GlycoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
