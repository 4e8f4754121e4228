"""Numpy CNN toolchain for 3-class chest CT classification.

Modules: ``tensor`` (layout, blobs, seeded RNG), ``layers`` and
``activations`` (forward/backward rules), ``network`` (specs, models),
``checkpoint``, ``optim`` (AdaBelief, SGD, schedules, LR range test),
``data`` (metadata, preprocessing, splits, batch streams, stats),
``metrics``, ``interpret`` (activation grids, Grad-CAM, overlays),
``train`` and ``cli``.
"""

from .errors import (
    ConfigError,
    CtnetError,
    DataError,
    FormatError,
    NonFiniteGradientError,
    StateError,
    TruncatedError,
    UnknownLayerError,
    VersionError,
)
from .network import CLASS_NAMES, NetworkSpec, build_network, param_count, reference_spec
from .tensor import SeededRng

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES", "ConfigError", "CtnetError", "DataError", "FormatError", "NetworkSpec",
    "NonFiniteGradientError", "SeededRng", "StateError", "TruncatedError", "UnknownLayerError",
    "VersionError", "build_network", "param_count", "reference_spec",
]
