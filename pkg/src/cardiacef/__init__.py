"""Few-shot ejection-fraction regression from echo-like videos.

The pipeline encodes sampled frames with a small convolutional encoder
(optionally fused with a zoomed, tiled view), pools them with learned frame
attention and decodes EF with a bin classifier plus per-bin shifts.
"""

from .estimator import CardiacEFRegressor
from .exceptions import (ConfigError, ContractError, FormatError, NumericalError, ShapeError,
                         ValidationError)
from .harness import TrainConfig

__all__ = ["CardiacEFRegressor", "TrainConfig", "ValidationError", "ShapeError", "ConfigError",
           "ContractError", "FormatError", "NumericalError"]
__version__ = "0.1.0"
