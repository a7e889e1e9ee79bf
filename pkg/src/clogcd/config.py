"""Run configuration: one JSON document describing the whole experiment.

Validation collects every problem with its config path and reports them in
a single error, so a bad file never needs more than one round trip to fix.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from clogcd.cae import CaeTrainConfig
from clogcd.curriculum import CurriculumConfig
from clogcd.data import ModeSpec, SplitRatios, SyntheticClassSpec
from clogcd.errors import ClogcdError, ConfigError
from clogcd.trainer import TrainConfig

CANONICAL_STRATEGIES = ("baseline", "asg", "deg", "osc-d1", "osc-d2", "osc-d4")


@dataclass
class DatasetSpec:
    kind: str  # "synthetic" or "folder"
    path: str | None = None
    classes: list[SyntheticClassSpec] = field(default_factory=list)
    noise_std: float = 0.05


@dataclass
class RunConfig:
    dataset: DatasetSpec
    image_size: tuple[int, int] = (32, 32)
    split: SplitRatios = field(default_factory=SplitRatios)
    augment: list[str] = field(default_factory=list)
    augment_copies: int = 1
    cae: CaeTrainConfig = field(default_factory=CaeTrainConfig)
    k: int = 5
    strategies: list[str] = field(default_factory=lambda: list(CANONICAL_STRATEGIES))
    iterations: int = 10
    beta: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    epochs_per_stage: int = 5
    model: str = "cnn"
    selection: str = "val"
    seed: int = 0
    deterministic: bool = False
    output_dir: str = "out"

    def run_id(self) -> str:
        """Stable content hash of everything except where artifacts land."""
        doc = asdict(self)
        doc.pop("output_dir")
        blob = json.dumps(doc, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def strategy_curriculum(name: str, cfg: RunConfig) -> CurriculumConfig:
    """Map a strategy name onto the curriculum settings it implies."""
    if name == "baseline":
        return CurriculumConfig(mode="baseline", k=cfg.k, iterations=1)
    if name == "asg":
        return CurriculumConfig(mode="asg", k=cfg.k, iterations=1, beta=0)
    if name == "deg":
        return CurriculumConfig(mode="deg", k=cfg.k, iterations=1, beta=0)
    if name.startswith("osc-d"):
        delta = int(name[len("osc-d"):])
        return CurriculumConfig(mode="oscillating", k=cfg.k, delta=delta,
                                beta=cfg.beta, iterations=cfg.iterations)
    raise ConfigError([f"strategies: unknown strategy {name!r}"])


def _valid_strategy(name: str) -> bool:
    if name in ("baseline", "asg", "deg"):
        return True
    if name.startswith("osc-d"):
        suffix = name[len("osc-d"):]
        return suffix.isdigit() and int(suffix) >= 1
    return False


def _expect(doc: dict, key: str, default):
    return doc.get(key, default)


def parse_run_config(doc: dict, base_dir: Path | None = None) -> RunConfig:
    """Build a RunConfig from a parsed JSON document, reporting all problems."""
    if not isinstance(doc, dict):
        raise ConfigError(["config root must be a JSON object"])
    problems: list[str] = []

    def collect(path: str, build):
        try:
            return build()
        except ConfigError as exc:
            problems.extend(f"{path}: {p}" for p in exc.problems)
        except (ClogcdError, TypeError, ValueError, KeyError) as exc:
            problems.append(f"{path}: {exc}")
        return None

    ds_doc = doc.get("dataset")
    dataset = None
    if not isinstance(ds_doc, dict):
        problems.append("dataset: required object with kind 'synthetic' or 'folder'")
    else:
        kind = ds_doc.get("kind")
        if kind == "folder":
            path = ds_doc.get("path")
            if not path:
                problems.append("dataset.path: required for kind 'folder'")
            else:
                if base_dir is not None and not Path(path).is_absolute():
                    path = str(base_dir / path)
                dataset = DatasetSpec(kind="folder", path=path)
        elif kind == "synthetic":
            classes = []
            for ci, cdoc in enumerate(ds_doc.get("classes", [])):
                modes = []
                for mi, mdoc in enumerate(cdoc.get("modes", [])):
                    mode = collect(f"dataset.classes[{ci}].modes[{mi}]",
                                   lambda m=mdoc: ModeSpec(center=tuple(m["center"]),
                                                           count=m["count"],
                                                           radius=m.get("radius", 0.12)))
                    if mode is not None:
                        modes.append(mode)
                spec = collect(f"dataset.classes[{ci}]",
                               lambda c=cdoc, m=modes: SyntheticClassSpec(
                                   name=c.get("name", f"class{ci}"), modes=m))
                if spec is not None:
                    classes.append(spec)
            if not classes:
                problems.append("dataset.classes: at least one synthetic class required")
            dataset = DatasetSpec(kind="synthetic", classes=classes,
                                  noise_std=ds_doc.get("noise_std", 0.05))
        else:
            problems.append(f"dataset.kind: expected 'synthetic' or 'folder', got {kind!r}")

    image_size = doc.get("image_size", [32, 32])
    if (not isinstance(image_size, (list, tuple)) or len(image_size) != 2
            or any(not isinstance(v, int) or v < 4 for v in image_size)):
        problems.append(f"image_size: expected two ints >= 4, got {image_size!r}")
        image_size = (32, 32)

    split_doc = doc.get("split", {})
    split = collect("split", lambda: SplitRatios(
        train=split_doc.get("train", 0.7),
        val=split_doc.get("val", 0.2),
        test=split_doc.get("test", 0.1))) or SplitRatios()

    augment = doc.get("augment", [])
    if not isinstance(augment, list) or any(not isinstance(a, str) for a in augment):
        problems.append(f"augment: expected a list of op names, got {augment!r}")
        augment = []
    augment_copies = doc.get("augment_copies", 1)
    if not isinstance(augment_copies, int) or augment_copies < 1:
        problems.append(f"augment_copies: expected int >= 1, got {augment_copies!r}")
        augment_copies = 1

    cae_doc = doc.get("cae", {})
    cae = collect("cae", lambda: CaeTrainConfig(
        lr=cae_doc.get("lr", 0.001),
        epochs=cae_doc.get("epochs", 50),
        batch_size=cae_doc.get("batch_size", 50),
        filters=tuple(cae_doc.get("filters", (16, 8))))) or CaeTrainConfig()

    k = doc.get("k", 5)
    if not isinstance(k, int) or k < 2:
        problems.append(f"k: expected int >= 2, got {k!r}")
        k = 5

    strategies = doc.get("strategies", list(CANONICAL_STRATEGIES))
    if not isinstance(strategies, list) or not strategies:
        problems.append("strategies: at least one strategy required")
        strategies = []
    else:
        for i, s in enumerate(strategies):
            if not isinstance(s, str) or not _valid_strategy(s):
                problems.append(f"strategies[{i}]: unknown strategy {s!r}; expected one of "
                                f"{CANONICAL_STRATEGIES} or osc-d<N>")

    cur_doc = doc.get("curriculum", {})
    iterations = cur_doc.get("iterations", 10)
    if not isinstance(iterations, int) or iterations < 1:
        problems.append(f"curriculum.iterations: expected int >= 1, got {iterations!r}")
        iterations = 10
    beta = cur_doc.get("beta", 1)
    if beta not in (0, 1):
        problems.append(f"curriculum.beta: expected 0 or 1, got {beta!r}")
        beta = 1

    train_doc = doc.get("train", {})
    train = collect("train", lambda: TrainConfig(
        lr0=train_doc.get("lr0", 0.001),
        decay_factor=train_doc.get("decay_factor", 0.85),
        decay_period_epochs=train_doc.get("decay_period_epochs", 10),
        batch_size=train_doc.get("batch_size", 50),
        epochs=train_doc.get("epochs", 5),
        l2_lambda=train_doc.get("l2_lambda", 0.001),
        head_l2=train_doc.get("head_l2", 0.01),
        head_lr_multiplier=train_doc.get("head_lr_multiplier", 1.0),
        best_val_checkpoint=train_doc.get("best_val_checkpoint", False),
        seed=train_doc.get("seed", 0))) or TrainConfig()

    epochs_per_stage = doc.get("epochs_per_stage", 5)
    if not isinstance(epochs_per_stage, int) or epochs_per_stage < 0:
        problems.append(f"epochs_per_stage: expected int >= 0, got {epochs_per_stage!r}")
        epochs_per_stage = 5

    model = doc.get("model", "cnn")
    if model not in ("cnn", "mlp"):
        problems.append(f"model: expected 'cnn' or 'mlp', got {model!r}")
        model = "cnn"

    selection = doc.get("selection", "val")
    if selection not in ("val", "test"):
        problems.append(f"selection: expected 'val' or 'test', got {selection!r}")
        selection = "val"

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        problems.append(f"seed: expected non-negative int, got {seed!r}")
        seed = 0

    deterministic = doc.get("deterministic", False)
    if not isinstance(deterministic, bool):
        problems.append(f"deterministic: expected true/false, got {deterministic!r}")
        deterministic = False

    output_dir = doc.get("output_dir", "out")

    known = {"dataset", "image_size", "split", "augment", "augment_copies", "cae", "k",
             "strategies", "curriculum", "train", "epochs_per_stage", "model",
             "selection", "seed", "deterministic", "output_dir"}
    for key in doc:
        if key not in known:
            problems.append(f"{key}: unknown config key")

    if problems:
        raise ConfigError(problems)
    return RunConfig(dataset=dataset, image_size=tuple(image_size), split=split,
                     augment=augment, augment_copies=augment_copies, cae=cae, k=k,
                     strategies=strategies, iterations=iterations, beta=beta,
                     train=train, epochs_per_stage=epochs_per_stage, model=model,
                     selection=selection, seed=seed, deterministic=deterministic,
                     output_dir=output_dir)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"])
    return parse_run_config(doc, base_dir=path.parent)


def config_echo(cfg: RunConfig) -> dict:
    """JSON-safe dump of the resolved config for the run manifest."""
    return json.loads(json.dumps(asdict(cfg), default=str))
