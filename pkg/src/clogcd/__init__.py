"""Curriculum-learning training engine based on oscillating granularity of class decomposition.

The pipeline: load or synthesize a labeled image dataset, learn latent
features with a small convolutional autoencoder, split every class into
sub-classes at several granularity levels via k-means, then train a
classifier by walking those levels (hard-to-easy first, optionally
oscillating), transferring backbone weights between stages and recombining
sub-class probabilities into parent-class predictions for evaluation.
"""

__version__ = "0.1.0"

from clogcd.errors import ClogcdError, ConfigError, DataError, TrainingDivergedError

__all__ = [
    "__version__",
    "ClogcdError",
    "ConfigError",
    "DataError",
    "TrainingDivergedError",
]
