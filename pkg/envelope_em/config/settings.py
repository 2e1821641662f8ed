"""
Configuration settings for envelope-em
"""
import os
from dotenv import load_dotenv
import logging

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


def _env_float(name: str, default: str) -> float:
    raw = os.getenv(name, default).strip()
    try:
        return float(raw)
    except ValueError:
        logger.warning(f"Invalid {name}={raw!r}; using {default}")
        return float(default)


def _env_int(name: str, default: str) -> int:
    raw = os.getenv(name, default).strip()
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"Invalid {name}={raw!r}; using {default}")
        return int(default)


class Settings:
    """Run defaults, overridable by a config file and command-line flags"""

    # EM settings
    TOL: float = 1e-6
    MAX_ITER: int = 500

    # Parallelism (0 = all cores)
    THREADS: int = 0

    # Inference / selection
    BOOTSTRAP_REPS: int = 200
    SELECTION_THRESHOLD: float = 0.95

    # Reports
    OUTPUT_FORMAT: str = "json"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FILE: str = ""

    @classmethod
    def load(cls):
        """Load and validate settings"""
        cls.TOL = _env_float("ENVELOPE_TOL", "1e-6")
        cls.MAX_ITER = _env_int("ENVELOPE_MAX_ITER", "500")
        cls.THREADS = _env_int("ENVELOPE_THREADS", "0")
        cls.BOOTSTRAP_REPS = _env_int("ENVELOPE_BOOTSTRAP_REPS", "200")
        cls.SELECTION_THRESHOLD = _env_float("ENVELOPE_SELECTION_THRESHOLD", "0.95")
        cls.OUTPUT_FORMAT = os.getenv("ENVELOPE_OUTPUT_FORMAT", "json").strip().lower()
        cls.LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").strip() or "INFO"
        cls.LOG_FILE = os.getenv("LOG_FILE", "").strip()

        if cls.TOL <= 0:
            logger.warning("ENVELOPE_TOL must be > 0. Falling back to 1e-6.")
            cls.TOL = 1e-6

        if cls.MAX_ITER <= 0:
            logger.warning("ENVELOPE_MAX_ITER must be > 0. Falling back to 500.")
            cls.MAX_ITER = 500

        if cls.THREADS < 0:
            logger.warning("ENVELOPE_THREADS must be >= 0. Using all cores.")
            cls.THREADS = 0

        if cls.BOOTSTRAP_REPS < 2:
            logger.warning("ENVELOPE_BOOTSTRAP_REPS must be >= 2. Falling back to 200.")
            cls.BOOTSTRAP_REPS = 200

        if not 0 < cls.SELECTION_THRESHOLD < 1:
            logger.warning("ENVELOPE_SELECTION_THRESHOLD must lie in (0, 1). Falling back to 0.95.")
            cls.SELECTION_THRESHOLD = 0.95

        if cls.OUTPUT_FORMAT not in ("json", "table"):
            logger.warning(f"Unknown ENVELOPE_OUTPUT_FORMAT '{cls.OUTPUT_FORMAT}'. Using json.")
            cls.OUTPUT_FORMAT = "json"

        logger.debug(f"Loaded settings: tol={cls.TOL}, max_iter={cls.MAX_ITER}, threads={cls.THREADS}")

    @classmethod
    def n_jobs(cls, threads: int = None) -> int:
        """Translate a thread count into a joblib n_jobs value (0 means all cores)"""
        value = cls.THREADS if threads is None else threads
        return -1 if value == 0 else value


# Load settings on module import
Settings.load()
