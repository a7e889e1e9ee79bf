"""Curriculum scheduling and the train -> transfer -> evaluate loop.

A schedule is a list of passes; each pass walks the granularity levels in
one direction with stride delta, and every pass ends with an evaluation
checkpoint. The oscillating mode alternates direction starting descending
(hardest level first), which is the anti-curriculum ordering.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from clogcd.data import LabeledDataset
from clogcd.decomposition import GranularitySequence
from clogcd.errors import ClogcdError, ConfigError, TrainingDivergedError
from clogcd.evaluation import EvaluationRecord, evaluate_split, recombine_batch
from clogcd.seeding import derive_seed
from clogcd.trainer import (
    EpochStats,
    ModelState,
    TrainConfig,
    adapt_head,
    build_model,
    predict_proba,
    train_stage,
)

log = logging.getLogger(__name__)

MODES = ("baseline", "asg", "deg", "oscillating")


@dataclass
class CurriculumConfig:
    k: int = 5
    delta: int = 1
    beta: int = 1  # 0 = one direction, 1 = alternate each pass
    mode: str = "oscillating"
    iterations: int = 10

    def __post_init__(self):
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.k < 1 or (self.mode != "baseline" and self.k < 2):
            problems.append(f"k must be >= 2 for multi-level modes, got {self.k}")
        if self.mode != "baseline" and self.delta < 1:
            problems.append(f"delta must be >= 1, got {self.delta}")
        if self.iterations < 1:
            problems.append(f"iterations must be >= 1, got {self.iterations}")
        if self.beta not in (0, 1):
            problems.append(f"beta must be 0 or 1, got {self.beta}")
        if problems:
            raise ConfigError(problems)
        if self.mode != "baseline" and self.delta > self.k - 1:
            log.warning("delta=%d exceeds k-1=%d; stride clamps at the terminal level",
                        self.delta, self.k - 1)


@dataclass
class Stage:
    level: int
    direction: str  # "desc", "asc", or "none"
    pass_index: int
    epochs: int


@dataclass
class CurriculumSchedule:
    passes: list[list[Stage]]
    mode: str
    k: int

    @property
    def stage_count(self) -> int:
        return sum(len(p) for p in self.passes)

    def to_json(self) -> list[dict]:
        return [{"pass": s.pass_index, "level": s.level, "direction": s.direction,
                 "epochs": s.epochs}
                for stages in self.passes for s in stages]


def pass_sequence(k: int, delta: int, direction: str) -> list[int]:
    """Level indices visited by one pass; strides clamp to the terminal level."""
    if delta < 1:
        raise ClogcdError(f"delta must be >= 1, got {delta}")
    if k < 1:
        raise ClogcdError(f"k must be >= 1, got {k}")
    levels = list(range(k, 0, -delta))
    if levels[-1] != 1:
        levels.append(1)
    if direction == "desc":
        return levels
    if direction == "asc":
        return levels[::-1]
    raise ClogcdError(f"direction must be 'desc' or 'asc', got {direction!r}")


def build_schedule(cfg: CurriculumConfig, epochs_per_stage: int) -> CurriculumSchedule:
    if epochs_per_stage < 0:
        raise ConfigError([f"epochs_per_stage must be >= 0, got {epochs_per_stage}"])

    def stages(levels, direction, pass_index):
        return [Stage(level=i, direction=direction, pass_index=pass_index,
                      epochs=epochs_per_stage) for i in levels]

    if cfg.mode == "baseline":
        passes = [stages([1], "none", 0)]
    elif cfg.mode == "asg":
        passes = [stages(pass_sequence(cfg.k, 1, "asc"), "asc", 0)]
    elif cfg.mode == "deg":
        passes = [stages(pass_sequence(cfg.k, 1, "desc"), "desc", 0)]
    elif cfg.mode == "oscillating":
        passes = []
        for p in range(cfg.iterations):
            direction = "desc" if (cfg.beta == 0 or p % 2 == 0) else "asc"
            passes.append(stages(pass_sequence(cfg.k, cfg.delta, direction), direction, p))
    else:
        raise ConfigError([f"unknown mode {cfg.mode!r}"])
    return CurriculumSchedule(passes=passes, mode=cfg.mode, k=cfg.k)


@dataclass
class CurriculumResult:
    records: list[EvaluationRecord]
    best_model: ModelState
    best_pass: int
    stage_logs: list[EpochStats] = field(default_factory=list)
    head_reinits: int = 0
    selection: str = "val"

    def records_for(self, split: str) -> list[EvaluationRecord]:
        return [r for r in self.records if r.split == split]

    @property
    def best_test_record(self) -> EvaluationRecord:
        for r in self.records:
            if r.split == "test" and r.pass_index == self.best_pass:
                return r
        raise ClogcdError(f"no test record for best pass {self.best_pass}")


def _evaluate_pass(model, level_obj, images, truth, class_count):
    probs = predict_proba(model, images)
    parent = recombine_batch(probs, level_obj, class_count)
    return evaluate_split(parent.argmax(axis=1), truth, class_count)


def run_curriculum(schedule: CurriculumSchedule, dataset: LabeledDataset,
                   granularity: GranularitySequence, *, arch: str,
                   train_cfg: TrainConfig, model_seed: int,
                   selection: str = "val") -> CurriculumResult:
    """Drive the schedule over the decomposed dataset.

    All non-head weights carry across stage boundaries; the head is rebuilt
    only when the sub-label count changes. Every pass ends with a val and a
    test evaluation, recombined onto parent classes. The best pass is chosen
    on the selection split's accuracy and its model is returned.
    """
    if selection not in ("val", "test"):
        raise ConfigError([f"selection must be 'val' or 'test', got {selection!r}"])
    train_ids, train_images, train_labels = dataset.arrays("train")
    _, val_images, val_labels = dataset.arrays("val")
    _, test_images, test_labels = dataset.arrays("test")
    class_count = dataset.class_count
    input_shape = train_images.shape[1:]
    eval_splits = [("val", val_images, val_labels), ("test", test_images, test_labels)]
    if not len(val_images) and not len(test_images):
        # tiny datasets can end up with empty held-out splits; fall back to
        # scoring on the train split so every pass still yields a record
        log.warning("val and test splits are empty; evaluating on the train split")
        eval_splits = [("train", train_images, train_labels)]

    first = schedule.passes[0][0]
    first_level = granularity.level(first.level)
    model = build_model(arch, input_shape, first_level.sublabel_count, model_seed)

    records: list[EvaluationRecord] = []
    stage_logs: list[EpochStats] = []
    head_reinits = 0
    best_model_values = None
    best_pass = -1
    best_score = -np.inf
    stage_ordinal = 0

    try:
        for stages in schedule.passes:
            for stage in stages:
                level_obj = granularity.level(stage.level)
                if level_obj.sublabel_count != model.label_space:
                    model = adapt_head(model, level_obj.sublabel_count,
                                       derive_seed(model_seed, stage.pass_index,
                                                   stage_ordinal))
                    head_reinits += 1
                labels = np.array([level_obj.assignments[i] for i in train_ids])
                stage_cfg = replace(train_cfg, epochs=stage.epochs)
                val_scorer = None
                if len(val_images):
                    def val_scorer(m, _lvl=level_obj):
                        probs = predict_proba(m, val_images)
                        preds = recombine_batch(probs, _lvl, class_count).argmax(axis=1)
                        return float((preds == val_labels).mean())
                result = train_stage(model, train_images, labels, stage_cfg,
                                     level=stage.level, pass_index=stage.pass_index,
                                     val_scorer=val_scorer)
                stage_logs.extend(result.epochs)
                model = result.model
                stage_ordinal += 1

            end = stages[-1]
            end_level = granularity.level(end.level)
            pass_records = {}
            for split, images, truth in eval_splits:
                if len(images) == 0:
                    continue
                report, cm = _evaluate_pass(model, end_level, images, truth, class_count)
                rec = EvaluationRecord(pass_index=end.pass_index, direction=end.direction,
                                       end_level=end.level, split=split,
                                       report=report, matrix=cm)
                records.append(rec)
                pass_records[split] = rec
            scored = (pass_records.get(selection) or pass_records.get("test")
                      or pass_records.get("train"))
            if scored is None:
                raise ClogcdError("no evaluation split available to score the pass")
            if scored.report.accuracy > best_score:
                best_score = scored.report.accuracy
                best_pass = end.pass_index
                best_model_values = (model.label_space, model.snapshot())
    except TrainingDivergedError as exc:
        exc.partial_records = records
        exc.partial_stage_logs = stage_logs
        raise

    if best_model_values is not None:
        best_space, values = best_model_values
        if model.label_space != best_space:
            model = adapt_head(model, best_space, derive_seed(model_seed, 999))
        model.restore(values)
    return CurriculumResult(records=records, best_model=model, best_pass=best_pass,
                            stage_logs=stage_logs, head_reinits=head_reinits,
                            selection=selection)
