"""Unsupervised semantic segmentation with neural eigenfunctions of graph kernels."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, EigensegError, FormatError, IsolatedVertexError, NumericError

__all__ = ["ConfigError", "DataError", "EigensegError", "FormatError", "IsolatedVertexError",
           "NumericError", "__version__"]
