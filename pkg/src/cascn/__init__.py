"""Channel-attention separable-convolution segmentation network.

A self-contained numpy-based library: taped reverse-mode autodiff, the
convolution/pooling operator set, dense-block encoder, ASPP bridge,
channel-attention skip connections, segmentation losses/metrics, a data
pipeline, optimizers, and a CLI.
"""

from .tensor import Tensor, Tape, backward, grad_check
from .errors import (CascnError, CheckpointError, ConfigError, ContractError,
                     DataError, DimensionError, NumericalError)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Tape", "backward", "grad_check",
    "CascnError", "CheckpointError", "ConfigError", "ContractError",
    "DataError", "DimensionError", "NumericalError",
    "__version__",
]
