"""Experiment orchestration: dataset prep, CAE, decomposition, strategy sweep.

One run executes the shared pipeline once, then each strategy against the
same granularity sequence. Every run directory receives a manifest (written
on success and on failure), a metrics CSV, a results JSON, per-strategy
stage logs, and model checkpoints.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from clogcd import __version__
from clogcd.cae import encode_dataset, save_encoder, train_cae
from clogcd.config import RunConfig, config_echo, strategy_curriculum
from clogcd.curriculum import CurriculumResult, build_schedule, run_curriculum
from clogcd.data import (
    LabeledDataset,
    augment,
    generate_synthetic,
    load_image_folder,
    resize_dataset,
    split_dataset,
)
from clogcd.decomposition import build_granularity_sequence, write_manifest
from clogcd.errors import ClogcdError, ConfigError, DataError
from clogcd.evaluation import (
    METRICS_CSV_HEADER,
    confidence_interval,
    curve_points,
    polyfit_curve,
    record_csv_row,
)
from clogcd.seeding import component_seed
from clogcd.trainer import save_model

log = logging.getLogger(__name__)

STAGE_LOG_HEADER = "pass,level,epoch,lr,train_loss,train_acc,val_acc"
CURVES_CSV_HEADER = "run_id,strategy,pass,fitted_acc"


# ---------------------------------------------------------------------------
# shared pipeline pieces
# ---------------------------------------------------------------------------

def prepare_dataset(cfg: RunConfig) -> LabeledDataset:
    """Load or generate, resize to the configured shape, split, and augment."""
    if cfg.dataset.kind == "synthetic":
        ds = generate_synthetic(cfg.dataset.classes, image_size=cfg.image_size,
                                noise_std=cfg.dataset.noise_std,
                                seed=component_seed(cfg.seed, "synth"))
    else:
        ds = load_image_folder(cfg.dataset.path)
    sample_shape = ds.samples[0].pixels.shape
    if sample_shape != tuple(cfg.image_size):
        ds = resize_dataset(ds, cfg.image_size[0], cfg.image_size[1])
    ds = split_dataset(ds, cfg.split, component_seed(cfg.seed, "split"))
    if cfg.augment:
        train = [s for s in ds.samples if s.split == "train"]
        extra = augment(train, cfg.augment, component_seed(cfg.seed, "augment"),
                        copies=cfg.augment_copies)
        added = [s for s in extra if s.id not in {t.id for t in train}]
        ds = LabeledDataset(samples=ds.samples + added, class_count=ds.class_count,
                            class_names=ds.class_names)
    return ds


def fit_encoder_and_decompose(cfg: RunConfig, ds: LabeledDataset):
    """Train the CAE on the train split and build the granularity sequence."""
    ids, images, labels = ds.arrays("train")
    encoder = train_cae(images, cfg.cae, component_seed(cfg.seed, "cae"))
    latents = encode_dataset(encoder, images)
    granularity = build_granularity_sequence(latents, labels, list(ids), cfg.k,
                                             component_seed(cfg.seed, "kmeans"),
                                             class_count=ds.class_count)
    return encoder, latents, granularity


def _execute_strategy(name: str, cfg: RunConfig, ds: LabeledDataset,
                      granularity) -> tuple[str, CurriculumResult, float]:
    t0 = time.monotonic()
    curriculum_cfg = strategy_curriculum(name, cfg)
    schedule = build_schedule(curriculum_cfg, cfg.epochs_per_stage)
    train_cfg = replace(cfg.train, seed=component_seed(cfg.seed, "train"))
    result = run_curriculum(schedule, ds, granularity, arch=cfg.model,
                            train_cfg=train_cfg,
                            model_seed=component_seed(cfg.seed, "model"),
                            selection=cfg.selection)
    return name, result, time.monotonic() - t0


def _strategy_worker(args):
    return _execute_strategy(*args)


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------

def _fmt_float(x: float) -> str:
    return f"{x:.6f}"


def _write_stage_log(path: Path, result: CurriculumResult):
    lines = [STAGE_LOG_HEADER]
    for s in result.stage_logs:
        val = _fmt_float(s.val_acc) if s.val_acc is not None else ""
        lines.append(f"{s.pass_index},{s.level},{s.epoch},{s.lr:.8g},"
                     f"{_fmt_float(s.train_loss)},{_fmt_float(s.train_acc)},{val}")
    path.write_text("\n".join(lines) + "\n")


def _record_json(rec) -> dict:
    return {"pass": rec.pass_index, "direction": rec.direction,
            "end_level": rec.end_level, "split": rec.split,
            "metrics": {k: round(v, 10) for k, v in rec.report.as_dict().items()},
            "confusion": rec.matrix.counts.tolist()}


def _strategy_results(cfg: RunConfig, name: str, result: CurriculumResult,
                      seconds: float) -> dict:
    test_recs = result.records_for("test")
    accs = [r.report.accuracy for r in test_recs]
    entry = {
        "strategy": name,
        "best_pass": result.best_pass,
        "selection": result.selection,
        "head_reinits": result.head_reinits,
        "seconds": round(seconds, 3),
        "records": [_record_json(r) for r in result.records],
        "ci": None,
        "curve_coeffs": None,
    }
    if len(accs) >= 2:
        ci = confidence_interval(accs, seed=component_seed(cfg.seed, "bootstrap"))
        entry["ci"] = {"metric": "test_acc", "level": ci.level,
                       "lower": round(ci.lower, 10), "upper": round(ci.upper, 10),
                       "method": ci.method}
    if len(accs) >= 4:
        coeffs = polyfit_curve(accs, degree=3)
        entry["curve_coeffs"] = [float(c) for c in coeffs]
    return entry


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def execute_run(cfg: RunConfig, parallel_strategies: bool = False) -> Path:
    """Run the full pipeline; returns the output directory.

    The manifest is written even when a strategy fails, with status set to
    "failed" and the error recorded; partial artifacts stay on disk.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_id = cfg.run_id()
    manifest = {
        "run_id": run_id,
        "version": __version__,
        "status": "running",
        "error": None,
        "config": config_echo(cfg),
        "timings": {"strategies": {}},
        "artifacts": {},
        "strategies_completed": [],
    }
    t_start = time.monotonic()
    try:
        t0 = time.monotonic()
        ds = prepare_dataset(cfg)
        manifest["timings"]["dataset"] = round(time.monotonic() - t0, 3)

        t0 = time.monotonic()
        encoder, latents, granularity = fit_encoder_and_decompose(cfg, ds)
        manifest["timings"]["cae_and_decomposition"] = round(time.monotonic() - t0, 3)

        save_encoder(out / "encoder.npz", encoder)
        manifest["artifacts"]["encoder"] = "encoder.npz"
        write_manifest(out / "granularity.json", granularity)
        manifest["artifacts"]["granularity"] = "granularity.json"

        schedule_dump = {
            name: build_schedule(strategy_curriculum(name, cfg),
                                 cfg.epochs_per_stage).to_json()
            for name in cfg.strategies
        }
        (out / "schedule.json").write_text(json.dumps(schedule_dump, indent=2))
        manifest["artifacts"]["schedule"] = "schedule.json"

        if parallel_strategies and len(cfg.strategies) > 1:
            with ProcessPoolExecutor(max_workers=min(4, len(cfg.strategies))) as pool:
                outcomes = list(pool.map(_strategy_worker,
                                         [(n, cfg, ds, granularity)
                                          for n in cfg.strategies]))
        else:
            outcomes = [_execute_strategy(n, cfg, ds, granularity)
                        for n in cfg.strategies]

        metrics_lines = [METRICS_CSV_HEADER]
        curve_lines = [CURVES_CSV_HEADER]
        results = {"run_id": run_id, "version": __version__, "seed": cfg.seed,
                   "strategies": {}}
        stage_logs = {}
        checkpoints = {}
        for name, result, seconds in outcomes:
            for rec in result.records:
                metrics_lines.append(record_csv_row(run_id, name, rec))
            entry = _strategy_results(cfg, name, result, seconds)
            results["strategies"][name] = entry
            if entry["curve_coeffs"] is not None:
                xs = np.arange(1, len(result.records_for("test")) + 1, dtype=float)
                fitted = curve_points(np.array(entry["curve_coeffs"]), xs)
                for p, y in zip(range(len(xs)), fitted):
                    curve_lines.append(f"{run_id},{name},{p},{_fmt_float(float(y))}")
            log_name = f"stage_log_{name}.csv"
            _write_stage_log(out / log_name, result)
            stage_logs[name] = log_name
            ckpt_name = f"model_{name}.npz"
            save_model(out / ckpt_name, result.best_model)
            checkpoints[name] = ckpt_name
            manifest["timings"]["strategies"][name] = round(seconds, 3)
            manifest["strategies_completed"].append(name)

        (out / "metrics.csv").write_text("\n".join(metrics_lines) + "\n")
        manifest["artifacts"]["metrics_csv"] = "metrics.csv"
        (out / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True))
        manifest["artifacts"]["results_json"] = "results.json"
        if len(curve_lines) > 1:
            (out / "curves.csv").write_text("\n".join(curve_lines) + "\n")
            manifest["artifacts"]["curves_csv"] = "curves.csv"
        manifest["artifacts"]["stage_logs"] = stage_logs
        manifest["artifacts"]["checkpoints"] = checkpoints
        manifest["status"] = "completed"
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest["timings"]["total"] = round(time.monotonic() - t_start, 3)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def execute_decompose(cfg: RunConfig) -> Path:
    """Dataset prep + CAE + decomposition only; emits the granularity manifest."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = prepare_dataset(cfg)
    encoder, _, granularity = fit_encoder_and_decompose(cfg, ds)
    save_encoder(out / "encoder.npz", encoder)
    write_manifest(out / "granularity.json", granularity)
    summary = {
        "run_id": cfg.run_id(),
        "version": __version__,
        "k": cfg.k,
        "class_count": ds.class_count,
        "sublabel_counts": {str(l.level): l.sublabel_count for l in granularity.levels},
        "artifacts": {"encoder": "encoder.npz", "granularity": "granularity.json"},
    }
    (out / "manifest.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return out


def execute_encode(cfg: RunConfig, encoder_path: str | None = None) -> Path:
    """Dataset prep + CAE (or a saved encoder); emits train-split latents."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = prepare_dataset(cfg)
    ids, images, labels = ds.arrays("train")
    if encoder_path is not None:
        from clogcd.cae import load_encoder
        encoder = load_encoder(encoder_path)
    else:
        encoder = train_cae(images, cfg.cae, component_seed(cfg.seed, "cae"))
        save_encoder(out / "encoder.npz", encoder)
    latents = encode_dataset(encoder, images)
    np.savez(out / "latents.npz", ids=np.array(list(ids)), labels=labels,
             latents=latents)
    return out


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def _load_run_outputs(run_dir: Path) -> tuple[dict, dict]:
    manifest_path = run_dir / "manifest.json"
    results_path = run_dir / "results.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json in {run_dir}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest in {run_dir}: {exc}")
    if not results_path.exists():
        raise DataError(f"no results.json in {run_dir} (incomplete run?)")
    try:
        results = json.loads(results_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt results.json in {run_dir}: {exc}")
    return manifest, results


COMPARE_CSV_HEADER = "run_id,strategy,acc,pr,re,f1,ci_lower,ci_upper,best"


def compare_runs(run_dirs: list[str | Path]) -> tuple[str, str]:
    """Consolidate completed runs into (csv_text, aligned_text_table).

    One row per (run, strategy) showing the reported test metrics; the
    highest-accuracy strategy within each run is flagged.
    """
    if not run_dirs:
        raise ClogcdError("compare needs at least one run directory")
    rows = []
    for run_dir in run_dirs:
        manifest, results = _load_run_outputs(Path(run_dir))
        run_id = results.get("run_id", manifest.get("run_id", "?"))
        for name, entry in sorted(results.get("strategies", {}).items()):
            best_pass = entry["best_pass"]
            at_best = [r for r in entry["records"] if r["pass"] == best_pass]
            by_split = {r["split"]: r for r in at_best}
            test = by_split.get("test") or by_split.get("val") or by_split.get("train")
            if test is None:
                raise DataError(f"{run_dir}: strategy {name} has no record "
                                f"for best pass {best_pass}")
            m = test["metrics"]
            ci = entry.get("ci") or {}
            rows.append({"run_id": run_id, "strategy": name,
                         "acc": m["acc"], "pr": m["pr"], "re": m["re"], "f1": m["f1"],
                         "ci_lower": ci.get("lower"), "ci_upper": ci.get("upper")})
    rows.sort(key=lambda r: (r["run_id"], r["strategy"]))
    best_by_run = {}
    for r in rows:
        cur = best_by_run.get(r["run_id"])
        if cur is None or r["acc"] > cur:
            best_by_run[r["run_id"]] = r["acc"]
    for r in rows:
        r["best"] = "*" if r["acc"] == best_by_run[r["run_id"]] else ""

    def fmt(v):
        return "" if v is None else _fmt_float(v)

    csv_lines = [COMPARE_CSV_HEADER]
    for r in rows:
        csv_lines.append(f"{r['run_id']},{r['strategy']},{fmt(r['acc'])},{fmt(r['pr'])},"
                         f"{fmt(r['re'])},{fmt(r['f1'])},{fmt(r['ci_lower'])},"
                         f"{fmt(r['ci_upper'])},{r['best']}")

    headers = ["run_id", "strategy", "acc", "pr", "re", "f1", "ci", "best"]
    table_rows = [[r["run_id"], r["strategy"], fmt(r["acc"]), fmt(r["pr"]), fmt(r["re"]),
                   fmt(r["f1"]),
                   (f"[{fmt(r['ci_lower'])}, {fmt(r['ci_upper'])}]"
                    if r["ci_lower"] is not None else "-"),
                   r["best"]] for r in rows]
    widths = [max(len(h), *(len(row[i]) for row in table_rows)) if table_rows else len(h)
              for i, h in enumerate(headers)]
    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    text = "\n".join([line(headers), line(["-" * w for w in widths])]
                     + [line(row) for row in table_rows])
    return "\n".join(csv_lines) + "\n", text + "\n"
