"""svkit: a desk-scale speaker verification toolkit.

Trains x-vector style embedding extractors (optionally with
Gaussian-target multi-task objectives), fits an LDA/PLDA backend, and
scores verification trials with EER and minimum detection cost.
"""

__version__ = "0.1.0"

from .errors import FormatError, NumericError, ShapeError

__all__ = ["FormatError", "NumericError", "ShapeError", "__version__"]
