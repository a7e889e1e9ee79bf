"""Tests for the experiment runner: pipeline wiring, artifacts, and compare."""

import json

import numpy as np
import pytest
from PIL import Image

from clogcd.config import parse_run_config
from clogcd.errors import ClogcdError, DataError, TrainingDivergedError
from clogcd.evaluation import METRICS_CSV_HEADER
from clogcd.runner import (
    COMPARE_CSV_HEADER,
    STAGE_LOG_HEADER,
    compare_runs,
    execute_decompose,
    execute_encode,
    execute_run,
    prepare_dataset,
)


def _doc(out_dir, **overrides):
    doc = {
        "dataset": {"kind": "synthetic",
                    "classes": [
                        {"name": "a", "modes": [{"center": [0.3, 0.3], "count": 40}]},
                        {"name": "b", "modes": [{"center": [0.7, 0.7], "count": 30}]}],
                    "noise_std": 0.05},
        "image_size": [8, 8],
        "cae": {"epochs": 2, "batch_size": 20, "filters": [4, 2]},
        "k": 3,
        "strategies": ["baseline", "deg", "osc-d1"],
        "curriculum": {"iterations": 4},
        "train": {"lr0": 0.05, "decay_factor": 1.0, "batch_size": 20},
        "epochs_per_stage": 1,
        "model": "mlp",
        "seed": 7,
        "output_dir": str(out_dir),
    }
    doc.update(overrides)
    return doc


def _write_folder_dataset(root, per_class=4, size=10):
    for cls, base in (("dark", 40), ("light", 200)):
        d = root / cls
        d.mkdir(parents=True)
        for i in range(per_class):
            arr = np.full((size, size), base + i, dtype=np.uint8)
            Image.fromarray(arr, mode="L").save(d / f"img{i}.png")


# ---------------------------------------------------------------------------
# prepare_dataset
# ---------------------------------------------------------------------------

def test_prepare_dataset_synthetic_split_counts(tmp_path):
    cfg = parse_run_config(_doc(tmp_path / "o"))
    ds = prepare_dataset(cfg)
    splits = {"train": 0, "val": 0, "test": 0}
    for s in ds.samples:
        splits[s.split] += 1
    # per class: floor(n * 0.2) val, floor(n * 0.1) test, rest train
    assert splits == {"train": 28 + 21, "val": 8 + 6, "test": 4 + 3}
    assert ds.samples[0].pixels.shape == (8, 8)


def test_prepare_dataset_resizes_folder_images(tmp_path):
    _write_folder_dataset(tmp_path / "imgs", per_class=6, size=10)
    cfg = parse_run_config(_doc(tmp_path / "o"))
    cfg = type(cfg)(**{**cfg.__dict__,
                       "dataset": type(cfg.dataset)(kind="folder",
                                                    path=str(tmp_path / "imgs"))})
    ds = prepare_dataset(cfg)
    assert ds.samples[0].pixels.shape == (8, 8)
    assert ds.class_count == 2


def test_prepare_dataset_applies_augmentation(tmp_path):
    plain = prepare_dataset(parse_run_config(_doc(tmp_path / "o")))
    augmented = prepare_dataset(parse_run_config(_doc(tmp_path / "o2", augment=["flip"])))
    n_plain = sum(1 for s in plain.samples if s.split == "train")
    n_aug = sum(1 for s in augmented.samples if s.split == "train")
    assert n_aug == 2 * n_plain
    assert sum(1 for s in augmented.samples if s.split == "val") == \
           sum(1 for s in plain.samples if s.split == "val")


# ---------------------------------------------------------------------------
# execute_run artifacts
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "r1"
    cfg = parse_run_config(_doc(out))
    execute_run(cfg)
    return out, cfg


def test_run_writes_all_artifacts(completed_run):
    out, _ = completed_run
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "completed"
    assert manifest["strategies_completed"] == ["baseline", "deg", "osc-d1"]
    # every path in the manifest resolves to a real file
    def walk(node):
        if isinstance(node, str):
            yield node
        elif isinstance(node, dict):
            for v in node.values():
                yield from walk(v)
    for rel in walk(manifest["artifacts"]):
        assert (out / rel).exists(), rel


def test_run_metrics_csv_rows(completed_run):
    out, cfg = completed_run
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == METRICS_CSV_HEADER
    # baseline: 1 pass, deg: 1 pass, osc-d1: 4 passes; each pass has val + test
    assert len(lines) - 1 == (1 + 1 + 4) * 2
    run_id = cfg.run_id()
    assert all(line.startswith(run_id + ",") for line in lines[1:])


def test_run_results_json_structure(completed_run):
    out, _ = completed_run
    results = json.loads((out / "results.json").read_text())
    assert set(results["strategies"]) == {"baseline", "deg", "osc-d1"}
    osc = results["strategies"]["osc-d1"]
    assert osc["ci"] is not None and osc["ci"]["lower"] <= osc["ci"]["upper"]
    assert len(osc["curve_coeffs"]) == 4
    assert results["strategies"]["baseline"]["ci"] is None
    for entry in results["strategies"].values():
        for rec in entry["records"]:
            total = sum(sum(row) for row in rec["confusion"])
            assert total in (14, 7)  # val size 14, test size 7


def test_run_stage_logs(completed_run):
    out, _ = completed_run
    lines = (out / "stage_log_osc-d1.csv").read_text().splitlines()
    assert lines[0] == STAGE_LOG_HEADER
    # 4 passes x 3 levels x 1 epoch
    assert len(lines) - 1 == 12
    first = lines[1].split(",")
    assert first[0] == "0" and first[1] == "3"
    assert first[6] != ""  # val accuracy recorded


def test_run_curves_csv(completed_run):
    out, _ = completed_run
    lines = (out / "curves.csv").read_text().splitlines()
    assert lines[0] == "run_id,strategy,pass,fitted_acc"
    assert sum(1 for l in lines[1:] if l.split(",")[1] == "osc-d1") == 4


def test_run_is_deterministic_across_output_dirs(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    execute_run(parse_run_config(_doc(a, strategies=["baseline", "osc-d2"])))
    execute_run(parse_run_config(_doc(b, strategies=["baseline", "osc-d2"])))
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_parallel_strategies_match_sequential(tmp_path):
    seq = tmp_path / "seq"
    par = tmp_path / "par"
    execute_run(parse_run_config(_doc(seq, strategies=["baseline", "deg"])))
    execute_run(parse_run_config(_doc(par, strategies=["baseline", "deg"])),
                parallel_strategies=True)
    assert (seq / "metrics.csv").read_bytes() == (par / "metrics.csv").read_bytes()


def test_failed_run_still_writes_manifest(tmp_path):
    out = tmp_path / "fail"
    cfg = parse_run_config(_doc(out, train={"lr0": 1e9, "decay_factor": 1.0,
                                            "batch_size": 20}))
    with pytest.raises(TrainingDivergedError):
        execute_run(cfg)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert "TrainingDivergedError" in manifest["error"]
    assert (out / "encoder.npz").exists()  # partial artifacts preserved


def test_six_image_folder_smoke(tmp_path):
    # both held-out splits collapse to zero samples; the run falls back to
    # scoring on the train split and still produces one record per pass
    _write_folder_dataset(tmp_path / "imgs", per_class=3, size=8)
    doc = _doc(tmp_path / "o", strategies=["baseline"], k=2)
    doc["dataset"] = {"kind": "folder", "path": str(tmp_path / "imgs")}
    out = execute_run(parse_run_config(doc))
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 2  # header + exactly one row
    assert lines[1].split(",")[5] == "train"


# ---------------------------------------------------------------------------
# decompose / encode verbs
# ---------------------------------------------------------------------------

def test_execute_decompose_emits_manifest_only(tmp_path):
    out = execute_decompose(parse_run_config(_doc(tmp_path / "dec")))
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["sublabel_counts"] == {"1": 2, "2": 4, "3": 6}
    assert (out / "granularity.json").exists()
    assert not (out / "metrics.csv").exists()


def test_execute_encode_emits_latents(tmp_path):
    out = execute_encode(parse_run_config(_doc(tmp_path / "enc")))
    z = np.load(out / "latents.npz", allow_pickle=False)
    assert z["latents"].shape[0] == z["ids"].shape[0] == z["labels"].shape[0] == 49
    assert z["latents"].shape[1] == 2 * 2 * 2  # f2 x (8/4) x (8/4)


def test_execute_encode_reuses_checkpoint(tmp_path):
    first = execute_encode(parse_run_config(_doc(tmp_path / "e1")))
    second = execute_encode(parse_run_config(_doc(tmp_path / "e2")),
                            encoder_path=first / "encoder.npz")
    a = np.load(first / "latents.npz")["latents"]
    b = np.load(second / "latents.npz")["latents"]
    assert np.array_equal(a, b)
    assert not (tmp_path / "e2" / "encoder.npz").exists()  # nothing retrained


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def test_compare_two_runs_sorted_and_flagged(completed_run, tmp_path):
    out, cfg = completed_run
    other = tmp_path / "r2"
    execute_run(parse_run_config(_doc(other, seed=8)))
    csv_text, table = compare_runs([out, other])
    lines = csv_text.splitlines()
    assert lines[0] == COMPARE_CSV_HEADER
    assert len(lines) == 1 + 6  # 3 strategies x 2 runs
    run_ids = [l.split(",")[0] for l in lines[1:]]
    assert run_ids == sorted(run_ids)
    for run_id in set(run_ids):
        rows = [l.split(",") for l in lines[1:] if l.split(",")[0] == run_id]
        flagged = [r for r in rows if r[-1] == "*"]
        best_acc = max(float(r[2]) for r in rows)
        assert flagged and all(float(r[2]) == best_acc for r in flagged)
    assert "baseline" in table and "*" in table


def test_compare_rejects_empty_and_missing(tmp_path):
    with pytest.raises(ClogcdError):
        compare_runs([])
    with pytest.raises(DataError, match="manifest"):
        compare_runs([tmp_path / "nothing-here"])


def test_compare_rejects_corrupt_manifest(tmp_path):
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "manifest.json").write_text("{broken")
    with pytest.raises(DataError, match="corrupt"):
        compare_runs([bad])