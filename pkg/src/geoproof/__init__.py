"""Byzantine-robust proofs of network location."""

__version__ = "0.1.0"

from .geo import GeoPoint, PlanarPoint, bearing, destination, distance
from .poig import CalibrationConfig, DelayDistanceSample, MonotoneMapping, calibrate
from .rmc import DelayMatrix, RmcConfig, complete
from .trig import ProvingConfig, UncertaintyProfile, prove

__all__ = [
    "GeoPoint", "PlanarPoint", "bearing", "destination", "distance",
    "CalibrationConfig", "DelayDistanceSample", "MonotoneMapping", "calibrate",
    "DelayMatrix", "RmcConfig", "complete",
    "ProvingConfig", "UncertaintyProfile", "prove",
]
