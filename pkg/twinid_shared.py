import logging
from pathlib import Path

import numpy as np

# Global Config
DATA_DIR = Path(__file__).parent / "data"
LEDGER_PATH = DATA_DIR / "runs.db"
CONFIG_SCHEMA_VERSION = 1

logger = logging.getLogger("TwinID")

# Numerical policy
N_DENSE_MAX = 4096          # largest N the dense oracle will factor
L_MIN = 1e-9                # lengthscales at or below this are treated as IID [m]
JITTER = 1e-10              # diagonal added to dense correlation before sampling
SIGMA_MEAS_FLOOR = 1e-6     # prior lower bound for sigma_meas [MPa]

# Default bridge: five prismatic spans, twin girders
DEFAULT_SPANS = (45.0, 50.0, 105.0, 50.0, 45.0)
DEFAULT_E = 210e9                 # [Pa]
DEFAULT_I = 0.35                  # [m^4]
DEFAULT_C_BOTTOM = 1.6            # [m]
DEFAULT_MAX_ELEMENT_LENGTH = 2.0  # [m]
DEFAULT_COUPLING_SPACING = 5.4    # [m]
DEFAULT_GIRDER_SPACING = 10.0     # [m] centre-to-centre, transverse
DEFAULT_DECK_WIDTH = 14.0         # [m]

# Controlled load-test truck: spacing between consecutive axles and axle loads
DEFAULT_AXLE_SPACINGS = (2.06, 1.83, 1.82, 1.82)       # [m]
DEFAULT_AXLE_LOADS = (59.35, 108.82, 108.82, 108.82, 108.82)  # [kN]

# Uniform prior bounds
STRUCTURAL_BOUNDS = {
    "log10_Kr": (4.0, 10.0),   # kNm/rad
    "log10_Kv": (0.0, 8.0),    # kN/m
}
PROBABILISTIC_BOUNDS = {
    "C_v": (0.0, 1.0),
    "sigma_model": (0.0, 5.0),
    "sigma_meas": (SIGMA_MEAS_FLOOR, 1.0),
    "l_corr_t": (0.0, 300.0),
    "l_corr_x": (0.0, 300.0),
}

# Bayes factor interpretation: (lower threshold on R, label)
JEFFREYS_SCALE = (
    (10 ** 2.0, "Decisive"),
    (10 ** 1.5, "Very strong"),
    (10 ** 1.0, "Strong"),
    (10 ** 0.5, "Substantial"),
    (10 ** 0.0, "Barely worth mentioning"),
)

# Optional accelerators / server dependencies
try:
    from numba import njit
except ImportError:
    njit = None

try:
    import fastapi
    import uvicorn
    SERVER_AVAILABLE = True
except ImportError:
    SERVER_AVAILABLE = False


class TwinIDError(Exception):
    """Base class for all errors raised by this package."""


class ParameterDomainError(TwinIDError, ValueError):
    pass


class GridError(TwinIDError, ValueError):
    pass


class ConfigError(TwinIDError, ValueError):
    pass


class GeometryError(TwinIDError, ValueError):
    pass


class NotPositiveDefiniteError(TwinIDError, np.linalg.LinAlgError):
    """Raised when a factorization meets a non-positive pivot."""

    def __init__(self, message: str, block_index: int = None):
        super().__init__(message)
        self.block_index = block_index


class StructuredPathUnavailableError(TwinIDError, ValueError):
    pass


class UnsupportedConfigurationError(TwinIDError, ValueError):
    pass


class NoValidRegionError(TwinIDError, RuntimeError):
    pass


class StudyFailureError(TwinIDError, RuntimeError):
    pass
