"""codecparse: regress a neural audio codec's generation parameters
(sampling rate, bits per second, quantizer count) from pooled speech
embeddings.

Three trainable downstream models share a convolutional trunk: a Euclidean
multi-head baseline, a single hyperbolic-bottleneck ablation, and the full
multi-subspace hyperbolic attention model ("hydra") with a total-correlation
disentanglement penalty.
"""

from .errors import (
    CodecParseError,
    ConfigError,
    DataError,
    NumericalError,
    ShapeError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "CodecParseError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "ShapeError",
    "UsageError",
    "__version__",
]
