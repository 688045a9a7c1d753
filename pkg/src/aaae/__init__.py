"""Adversarially approximated autoencoder (AAAE)."""

__version__ = "0.1.0"

from aaae.errors import (  # noqa: F401
    AAAEError,
    CheckpointError,
    CohortError,
    ConfigurationError,
    IngestionError,
    InputError,
    NumericalError,
)
from aaae.model import AAAE, init_params, preset  # noqa: F401
from aaae.objectives import Hyperparams, LossReport  # noqa: F401
