"""Behavioral simulator of a high-sensitivity event-camera pixel array.

Models the chain photon shot noise -> log photoreceptor -> auto-centering
preamp -> tunable low-pass -> change detector -> timestamped polarity events,
plus a characterization harness for sensitivity, noise, and photon-budget
experiments.
"""

from .backend import available_backends, get_backend, set_backend
from .config import (
    ConfigError,
    MismatchMap,
    NoiseMode,
    SensorConfig,
    build_mismatch_map,
    parse_config_file,
    validate_config,
)
from .pixel import ArraySimulator
from .stimulus import (
    Constant,
    MovingPattern,
    RegionAttenuation,
    RotatingChart,
    SceneError,
    StepProtocol,
    build_chart_wedges,
    illuminance_at,
    photoelectron_rate,
)

__version__ = "0.1.0"
