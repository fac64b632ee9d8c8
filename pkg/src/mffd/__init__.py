"""Small multi-scale single-shot box detector, pure numpy.

The package splits into plain layers (:mod:`mffd.tensor_core`), network
assembly and execution (:mod:`mffd.netgraph`), box decoding and NMS
(:mod:`mffd.detect_head`), SGD training with hand-written adjoints
(:mod:`mffd.trainer`), AP evaluation (:mod:`mffd.evaluator`), and file
formats plus the command line (:mod:`mffd.cli_io`, :mod:`mffd.cli`).
"""

from .errors import ConfigError, DivergenceError, FormatError, MffdError, ShapeError
from .netgraph import NetworkSpec, build_variant, count_params, forward, infer_shapes

__version__ = "0.1.0"

__all__ = [
    "MffdError",
    "ShapeError",
    "ConfigError",
    "FormatError",
    "DivergenceError",
    "NetworkSpec",
    "build_variant",
    "count_params",
    "forward",
    "infer_shapes",
    "__version__",
]
