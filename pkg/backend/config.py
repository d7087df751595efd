import os
from dataclasses import dataclass
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

@dataclass
class Config:
    """Default settings for the delayed optimal control solver"""
    # Logging settings
    LOG_LEVEL: str = os.getenv("ESSA_LOG", "info")  # quiet | info | debug
    LOG_FILE: str = "essa.log"

    # Output settings
    OUTPUT_DIR: str = os.getenv("ESSA_OUTPUT_DIR", "./essa_output")
    FLOAT_PRECISION: int = 17   # Significant digits written to CSV files

    # Outer loop defaults
    C_GROWTH: float = 2.0         # Factor applied to C when the cost fails to drop
    MAX_C_INCREASES: int = 40     # C increases allowed within one iteration
    MAX_OUTER_ITERS: int = 500
    RESIDUAL_TOL: float = 1e-3
    CLOSURE_TOL: float = 1e-12    # Re-integration check on the returned state

    # Inner minimizer defaults
    INNER_MAX_STEPS: int = 30
    INNER_STEP_TOL: float = 1e-12

    # Verification defaults
    FD_EPS: float = 1e-6
    FD_SAMPLES: int = 100
    FD_TOLERANCE: float = 1e-6
    CROSS_CHECK_TOLERANCE: float = 1e-3

config = Config()
