"""Numerical straightening of normal vector fields on embedded curves and
surfaces by compression flows, with measured verification of every bound."""

__version__ = "0.1.0"

from .compress import (CompressionConfig, CompressionResult, compress_global, compress_local,
                       compress_multi)
from .errors import StraightenError
from .fields import NormalFrame
from .flow import FlowConfig, IsotopyTrace, integrate
from .geometry import AmbientSplit, EmbeddedManifold
from .verify import InvariantReport, count_double_points, verify_run, verify_trace

__all__ = ["AmbientSplit", "CompressionConfig", "CompressionResult", "EmbeddedManifold",
           "FlowConfig", "InvariantReport", "IsotopyTrace", "NormalFrame", "StraightenError",
           "__version__", "compress_global", "compress_local", "compress_multi",
           "count_double_points", "integrate", "verify_run", "verify_trace"]
