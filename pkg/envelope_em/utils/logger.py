"""
Logging configuration
"""
import logging
import sys

import colorlog

from envelope_em.config.settings import Settings

_configured = False


def setup_logging(level: str = None):
    """Setup logging configuration"""
    global _configured
    level_name = (level or Settings.LOG_LEVEL).upper()
    log_level = getattr(logging, level_name, logging.INFO)

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)
    if _configured:
        for handler in root_logger.handlers:
            handler.setLevel(log_level)
        return

    # Console handler; stdout is reserved for reports
    console_handler = colorlog.StreamHandler(sys.stderr)
    console_handler.setFormatter(colorlog.ColoredFormatter(
        '%(log_color)s%(asctime)s - %(name)s - %(levelname)s%(reset)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    ))
    console_handler.setLevel(log_level)
    root_logger.addHandler(console_handler)

    # File handler
    if Settings.LOG_FILE:
        file_handler = logging.FileHandler(Settings.LOG_FILE, encoding='utf-8')
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        ))
        file_handler.setLevel(log_level)
        root_logger.addHandler(file_handler)

    # Reduce joblib logging verbosity
    logging.getLogger('joblib').setLevel(logging.WARNING)

    _configured = True
    logging.info(f"Logging configured at {level_name} level")
