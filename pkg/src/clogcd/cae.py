"""Convolutional autoencoder whose encoder supplies latent features for decomposition.

Two stride-2 conv stages downsample by 4x; the decoder mirrors them with
nearest-neighbor upsampling and finishes with a sigmoid so reconstructions
stay in [0, 1]. The latent vector is the flattened second-stage activation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from clogcd.errors import ClogcdError, ConfigError, TrainingDivergedError
from clogcd.seeding import derive_seed
from clogcd import nn

log = logging.getLogger(__name__)


@dataclass
class CaeTrainConfig:
    lr: float = 0.001
    epochs: int = 50
    batch_size: int = 50
    filters: tuple[int, int] = (16, 8)

    def __post_init__(self):
        problems = []
        if self.lr <= 0:
            problems.append(f"cae lr must be positive, got {self.lr}")
        if self.epochs < 0:
            problems.append(f"cae epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"cae batch_size must be >= 1, got {self.batch_size}")
        if len(self.filters) != 2 or any(f < 1 for f in self.filters):
            problems.append(f"cae filters must be two positive counts, got {self.filters}")
        if problems:
            raise ConfigError(problems)


@dataclass
class EncoderModel:
    encoder: nn.Sequential
    input_shape: tuple[int, int]
    filters: tuple[int, int]
    latent_dim: int
    train_losses: list[float] = field(default_factory=list)


def _check_input_shape(shape: tuple[int, int]):
    h, w = shape
    if h % 4 or w % 4:
        raise ClogcdError(f"autoencoder needs height and width divisible by 4, got {h}x{w}")


def build_autoencoder(input_shape: tuple[int, int], filters: tuple[int, int],
                      rng: np.random.Generator) -> tuple[nn.Sequential, nn.Sequential]:
    """Returns (encoder, decoder). Encoder output is (N, f2, H/4, W/4)."""
    _check_input_shape(input_shape)
    f1, f2 = filters
    encoder = nn.Sequential([
        nn.Conv2D(1, f1, kernel=3, stride=2, pad=1, rng=rng),
        nn.ReLU(),
        nn.Conv2D(f1, f2, kernel=3, stride=2, pad=1, rng=rng),
        nn.ReLU(),
    ])
    decoder = nn.Sequential([
        nn.NearestUpsample(2),
        nn.Conv2D(f2, f1, kernel=3, stride=1, pad=1, rng=rng),
        nn.ReLU(),
        nn.NearestUpsample(2),
        nn.Conv2D(f1, 1, kernel=3, stride=1, pad=1, init="glorot", rng=rng),
        nn.Sigmoid(),
    ])
    return encoder, decoder


def latent_dim_for(input_shape: tuple[int, int], filters: tuple[int, int]) -> int:
    h, w = input_shape
    return filters[1] * (h // 4) * (w // 4)


def _as_batch(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3:
        raise ClogcdError(f"expected (N, H, W) or (H, W) images, got shape {images.shape}")
    return images[:, None, :, :]  # add channel axis


def train_cae(train_images: np.ndarray, config: CaeTrainConfig, seed: int) -> EncoderModel:
    """Train on unlabeled images with Adam against mean-squared reconstruction error."""
    x_all = _as_batch(train_images)
    n, _, h, w = x_all.shape
    _check_input_shape((h, w))

    init_rng = np.random.default_rng(derive_seed(seed, 0))
    encoder, decoder = build_autoencoder((h, w), config.filters, init_rng)
    model = nn.Sequential([encoder, decoder])
    optimizer = nn.Adam(model.params(), lr=config.lr)
    batch_size = min(config.batch_size, n)

    losses = []
    for epoch in range(config.epochs):
        order = np.random.default_rng(derive_seed(seed, 1, epoch)).permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            batch = x_all[order[start:start + batch_size]]
            recon = model.forward(batch)
            diff = recon - batch
            loss = float(np.mean(diff ** 2))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"autoencoder loss became non-finite at epoch {epoch + 1}")
            nn.zero_grads(model.params())
            model.backward(2.0 * diff / diff.size)
            optimizer.step()
            epoch_loss += loss * len(batch)
        losses.append(epoch_loss / n)
    model.clear_cache()

    return EncoderModel(encoder=encoder, input_shape=(h, w), filters=tuple(config.filters),
                        latent_dim=latent_dim_for((h, w), config.filters),
                        train_losses=losses)


def encode(model: EncoderModel, images: np.ndarray) -> np.ndarray:
    """Latent vectors for one (H, W) image or a (N, H, W) batch."""
    single = np.asarray(images).ndim == 2
    x = _as_batch(images)
    if x.shape[2:] != model.input_shape:
        raise ClogcdError(f"encoder expects {model.input_shape[0]}x{model.input_shape[1]} "
                          f"images, got {x.shape[2]}x{x.shape[3]}")
    maps = model.encoder.forward(x)
    model.encoder.clear_cache()
    latents = maps.reshape(len(x), -1)
    if latents.shape[1] != model.latent_dim:
        raise ClogcdError(f"latent width {latents.shape[1]} != expected {model.latent_dim}")
    return latents[0] if single else latents


def encode_dataset(model: EncoderModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Batched encode to bound peak memory on large splits."""
    images = np.asarray(images)
    chunks = [encode(model, images[i:i + batch_size])
              for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks) if chunks else np.empty((0, model.latent_dim))


def save_encoder(path, model: EncoderModel):
    meta = {"input_shape": list(model.input_shape), "filters": list(model.filters),
            "latent_dim": model.latent_dim, "train_losses": model.train_losses}
    nn.save_checkpoint(path, model.encoder, meta)


def load_encoder(path) -> EncoderModel:
    encoder, meta = nn.load_checkpoint(path)
    return EncoderModel(encoder=encoder, input_shape=tuple(meta["input_shape"]),
                        filters=tuple(meta["filters"]), latent_dim=meta["latent_dim"],
                        train_losses=list(meta.get("train_losses", [])))
