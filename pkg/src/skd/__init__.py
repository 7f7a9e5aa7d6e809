"""Structured Koopman autoencoder for multifactor sequential disentanglement."""

from .autodiff import Tensor, eig, pinv
from .errors import (ConfigError, IntegrityError, NumericError, ParseError,
                     PreconditionError, ShapeError, SkdError, StateError)
from .koopman import (KoopmanSpectrum, LatentBatch, ProjectionCoefficients,
                      SpectralPartition, estimate_operator, partition_spectrum,
                      predict, project, reconstruct, sample_convex,
                      spectral_loss, swap_factors)
from .model import ModelCheckpoint, ModelConfig, decode, encode, total_loss, train
from .synthdata import (GeneratorConfig, SequenceBatch, gen_oscillators,
                        gen_toy_sprites, split_train_test)

__version__ = "0.1.0"
