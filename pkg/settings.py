"""
Settings - Environment, Logging and Errors
==========================================

Shared plumbing for every jamdetect module:
- .env / environment defaults (output directory, log level)
- Logging setup for entry points
- Windows-safe console markers
- Exception hierarchy
- Per-stage seed fan-out from one global seed
"""

import logging
import os
from pathlib import Path
from typing import Optional

import numpy as np
from dotenv import load_dotenv

# Windows-safe check and cross marks
CHECK = "[OK]"
CROSS = "[X]"
WARN = "[!]"

LOG_FORMAT = '%(asctime)s - [{tag}] - %(levelname)s - %(message)s'

# Load environment variables from .env file
load_dotenv()


def output_dir_default() -> Path:
    """Default directory for emitted artifacts (JAMDETECT_OUTPUT_DIR or ./runs)"""
    return Path(os.getenv('JAMDETECT_OUTPUT_DIR', 'runs'))


def log_level_default() -> str:
    return os.getenv('JAMDETECT_LOG_LEVEL', 'INFO').upper()


def configure_logging(tag: str = "JAMDETECT", level: Optional[str] = None,
                      log_file: Optional[str] = None) -> None:
    """
    Configure root logging for an entry point

    Library modules only create module loggers; this is called once by
    the CLI (or a test) before any work starts.

    Args:
        tag: Service tag shown in every line
        level: Log level name (default from JAMDETECT_LOG_LEVEL)
        log_file: Optional file to mirror the console log into
    """
    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, (level or log_level_default()).upper(), logging.INFO),
        format=LOG_FORMAT.format(tag=tag),
        handlers=handlers,
        force=True
    )


class JamDetectError(Exception):
    """Base class for every error raised by the workbench"""


class DomainError(JamDetectError, ValueError):
    """An argument lies outside the domain an operation accepts"""


class ShapeError(JamDetectError, ValueError):
    """Array shapes are incompatible"""

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class StateError(JamDetectError, RuntimeError):
    """An operation was applied in a state that forbids it"""


class NumericError(JamDetectError, ArithmeticError):
    """NaN or infinite values reached a place that needs finite ones"""


class ParseError(JamDetectError, ValueError):
    """Malformed file content"""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


# Stage codes for the seed counter scheme. Never renumber: reruns of a
# single stage depend on them.
STAGE_CODES = {
    'build': 1,
    'gan': 2,
    'augment': 3,
    'split': 4,
    'autoencoder': 5,
    'classifier': 6,
    'corruption': 7,
}


def stage_seed(seed: int, stage: str, *keys: int) -> int:
    """
    Derive the seed of one pipeline stage from the global seed

    Args:
        seed: Global run seed
        stage: Stage name, one of STAGE_CODES
        *keys: Further integers (profile id, variant index, ...)

    Returns:
        32-bit seed, identical for identical (seed, stage, keys)
    """
    if stage not in STAGE_CODES:
        raise DomainError(f"Unknown stage '{stage}' (known: {', '.join(STAGE_CODES)})")

    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(STAGE_CODES[stage], *map(int, keys)))
    return int(seq.generate_state(1)[0])
