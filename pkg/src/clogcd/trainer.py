"""Stage-level supervised training: mini-batch SGD with step-decayed learning rate.

A model is a backbone plus a detachable dense head sized to the current
label space. Moving between granularity levels swaps the head only; the
backbone carries over untouched, which is the weight-transfer half of the
curriculum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from clogcd.errors import ClogcdError, ConfigError, TrainingDivergedError
from clogcd.seeding import derive_seed
from clogcd import nn

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 0.001
    decay_factor: float = 0.85
    decay_period_epochs: int = 10
    batch_size: int = 50
    epochs: int = 10
    l2_lambda: float = 0.001
    head_l2: float = 0.01
    head_lr_multiplier: float = 1.0
    best_val_checkpoint: bool = False
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.lr0 <= 0:
            problems.append(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.decay_factor <= 1:
            problems.append(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_period_epochs < 1:
            problems.append(f"decay_period_epochs must be >= 1, got {self.decay_period_epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.l2_lambda < 0 or self.head_l2 < 0:
            problems.append("l2 penalties must be >= 0")
        if self.head_lr_multiplier <= 0:
            problems.append(f"head_lr_multiplier must be positive, got {self.head_lr_multiplier}")
        if problems:
            raise ConfigError(problems)


@dataclass
class ModelState:
    backbone: nn.Sequential
    head: nn.Dense
    label_space: int
    input_shape: tuple[int, int]
    arch: str  # "cnn" or "mlp"
    provenance: dict = field(default_factory=dict)  # level / pass / epoch markers

    def forward_logits(self, x: np.ndarray) -> np.ndarray:
        return self.head.forward(self.backbone.forward(x))

    def backward(self, grad: np.ndarray):
        self.backbone.backward(self.head.backward(grad))

    def clear_cache(self):
        self.backbone.clear_cache()
        self.head.clear_cache()

    def backbone_params(self) -> list[nn.Parameter]:
        return self.backbone.params()

    def head_params(self) -> list[nn.Parameter]:
        return self.head.params()

    def all_params(self) -> list[nn.Parameter]:
        return self.backbone_params() + self.head_params()

    def snapshot(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.all_params()]

    def restore(self, values: list[np.ndarray]):
        for p, v in zip(self.all_params(), values):
            p.value = v.copy()


@dataclass
class EpochStats:
    pass_index: int
    level: int
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float | None = None


@dataclass
class StageResult:
    model: ModelState
    epochs: list[EpochStats]


# ---------------------------------------------------------------------------
# model builders
# ---------------------------------------------------------------------------

def _check_cnn_shape(shape: tuple[int, int]):
    h, w = shape
    if h % 4 or w % 4:
        raise ClogcdError(f"cnn backbone needs height and width divisible by 4, got {h}x{w}")


def build_cnn(input_shape: tuple[int, int], label_count: int, seed: int,
              filters: tuple[int, int] = (8, 16), hidden: int = 64) -> ModelState:
    """Two stride-2 conv blocks, then a dense feature layer, then the head."""
    _check_cnn_shape(input_shape)
    if label_count < 2:
        raise ClogcdError(f"label_count must be >= 2, got {label_count}")
    rng = np.random.default_rng(seed)
    h, w = input_shape
    c1, c2 = filters
    flat = c2 * (h // 4) * (w // 4)
    backbone = nn.Sequential([
        nn.Conv2D(1, c1, kernel=3, stride=2, pad=1, rng=rng),
        nn.ReLU(),
        nn.Conv2D(c1, c2, kernel=3, stride=2, pad=1, rng=rng),
        nn.ReLU(),
        nn.Flatten(),
        nn.Dense(flat, hidden, rng=rng),
        nn.ReLU(),
    ])
    head = nn.Dense(hidden, label_count, init="glorot", rng=rng)
    return ModelState(backbone=backbone, head=head, label_space=label_count,
                      input_shape=tuple(input_shape), arch="cnn")


def build_mlp(input_shape: tuple[int, int], label_count: int, seed: int,
              hidden: int = 128) -> ModelState:
    if label_count < 2:
        raise ClogcdError(f"label_count must be >= 2, got {label_count}")
    rng = np.random.default_rng(seed)
    h, w = input_shape
    backbone = nn.Sequential([
        nn.Flatten(),
        nn.Dense(h * w, hidden, rng=rng),
        nn.ReLU(),
        nn.Dense(hidden, hidden, rng=rng),
        nn.ReLU(),
    ])
    head = nn.Dense(hidden, label_count, init="glorot", rng=rng)
    return ModelState(backbone=backbone, head=head, label_space=label_count,
                      input_shape=tuple(input_shape), arch="mlp")


def build_model(arch: str, input_shape: tuple[int, int], label_count: int, seed: int) -> ModelState:
    if arch == "cnn":
        return build_cnn(input_shape, label_count, seed)
    if arch == "mlp":
        return build_mlp(input_shape, label_count, seed)
    raise ConfigError([f"unknown model arch {arch!r}, expected 'cnn' or 'mlp'"])


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: lr0 * factor^floor(epoch / period)."""
    if epoch < 0:
        raise ClogcdError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_period_epochs)


def adapt_head(model: ModelState, new_label_count: int, seed: int) -> ModelState:
    """Swap in a freshly initialized head iff the label space width changes."""
    if new_label_count < 2:
        raise ClogcdError(f"new_label_count must be >= 2, got {new_label_count}")
    if new_label_count == model.label_space:
        return model
    rng = np.random.default_rng(seed)
    head = nn.Dense(model.head.in_dim, new_label_count, init="glorot", rng=rng)
    return replace(model, head=head, label_space=new_label_count)


def _as_model_input(model: ModelState, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3 or images.shape[1:] != model.input_shape:
        raise ClogcdError(f"expected images of shape {model.input_shape}, "
                          f"got {images.shape}")
    return images[:, None, :, :]


def train_stage(model: ModelState, images: np.ndarray, labels: np.ndarray,
                cfg: TrainConfig, *, level: int = 1, pass_index: int = 0,
                val_images: np.ndarray | None = None,
                val_labels: np.ndarray | None = None,
                val_scorer=None) -> StageResult:
    """Run cfg.epochs of mini-batch SGD on one granularity level.

    The head is penalized with head_l2, the backbone with l2_lambda. Batches
    are reshuffled each epoch from the stage seed. Returns final-epoch
    weights unless cfg.best_val_checkpoint picks the best validation epoch.

    Validation accuracy per epoch comes from val_scorer(model) when given
    (the curriculum uses this to score recombined parent-class accuracy), or
    from direct label comparison against val_images/val_labels.
    """
    x_all = _as_model_input(model, images)
    y_all = np.asarray(labels, dtype=np.int64)
    if len(x_all) != len(y_all):
        raise ClogcdError("images and labels must align")
    if len(y_all) and (y_all.min() < 0 or y_all.max() >= model.label_space):
        raise ClogcdError(f"labels out of range for label space {model.label_space}")
    n = len(x_all)
    batch_size = min(cfg.batch_size, n)

    stats: list[EpochStats] = []
    best_val = -np.inf
    best_snapshot = None
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        order = np.random.default_rng(
            derive_seed(cfg.seed, pass_index, level, epoch)).permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x_all[idx], y_all[idx]
            try:
                logits = model.forward_logits(xb)
                loss, grad = nn.softmax_cross_entropy(logits, yb)
                if not np.isfinite(loss):
                    raise TrainingDivergedError("loss became non-finite")
                nn.zero_grads(model.all_params())
                model.backward(grad)
                nn.sgd_step(model.backbone_params(), lr=lr, l2_lambda=cfg.l2_lambda)
                nn.sgd_step(model.head_params(), lr=lr * cfg.head_lr_multiplier,
                            l2_lambda=cfg.head_l2)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(
                    f"{exc} at pass {pass_index}, level {level}, epoch {epoch + 1}") from exc
            loss_sum += loss * len(xb)
            correct += int((logits.argmax(axis=1) == yb).sum())
        val_acc = None
        if val_scorer is not None:
            val_acc = float(val_scorer(model))
        elif val_images is not None and val_labels is not None and len(val_images):
            preds = predict_proba(model, val_images).argmax(axis=1)
            val_acc = float((preds == np.asarray(val_labels)).mean())
        if val_acc is not None and cfg.best_val_checkpoint and val_acc > best_val:
            best_val = val_acc
            best_snapshot = model.snapshot()
        stats.append(EpochStats(pass_index=pass_index, level=level, epoch=epoch,
                                lr=lr, train_loss=loss_sum / n, train_acc=correct / n,
                                val_acc=val_acc))
        model.provenance = {"level": level, "pass": pass_index, "epoch": epoch}
    if cfg.best_val_checkpoint and best_snapshot is not None:
        model.restore(best_snapshot)
    model.clear_cache()
    return StageResult(model=model, epochs=stats)


def predict_proba(model: ModelState, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Softmax probabilities over the current label space; pure per input."""
    single = np.asarray(images).ndim == 2
    x = _as_model_input(model, images)
    outs = []
    for start in range(0, len(x), batch_size):
        logits = model.forward_logits(x[start:start + batch_size])
        outs.append(nn.softmax(logits))
    model.clear_cache()
    probs = np.concatenate(outs) if outs else np.empty((0, model.label_space))
    return probs[0] if single else probs


def predict_labels(model: ModelState, images: np.ndarray) -> np.ndarray:
    return predict_proba(model, images).argmax(axis=1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(path, model: ModelState):
    wrapper = nn.Sequential([model.backbone, model.head])
    meta = {"label_space": model.label_space, "input_shape": list(model.input_shape),
            "arch": model.arch, "provenance": model.provenance}
    nn.save_checkpoint(path, wrapper, meta)


def load_model(path) -> ModelState:
    wrapper, meta = nn.load_checkpoint(path)
    backbone, head = wrapper.layers
    return ModelState(backbone=backbone, head=head, label_space=meta["label_space"],
                      input_shape=tuple(meta["input_shape"]), arch=meta["arch"],
                      provenance=dict(meta.get("provenance", {})))
