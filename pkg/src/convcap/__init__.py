"""convcap: conditional caption generation with convolutional and LSTM decoders."""

from convcap.tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
