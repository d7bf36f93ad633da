"""Cardiac MRI structure segmentation on a self-contained CPU autodiff engine.

The public surface is the sklearn-style `CSegNetSegmenter` plus the
lower-level building blocks it composes: the tensor/tape engine, the
network itself, the generalized Dice loss, the clinical metric suite, the
data pipeline and the training loop.  The `cardseg` console script exposes
the same workflows as batch subcommands.
"""

from . import errors
from .data import AugmentConfig, Case
from .estimator import CSegNetSegmenter
from .model import CSegNet, ModelConfig
from .phantom import PhantomConfig, generate_phantom
from .tensor import Tape, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "Case",
    "CSegNet",
    "CSegNetSegmenter",
    "ModelConfig",
    "PhantomConfig",
    "Tape",
    "Tensor",
    "errors",
    "generate_phantom",
    "grad_check",
    "__version__",
]
