"""
utils.py

This module contains utility functions for logging, environment variable fetching,
and JSON file handling.

Functions:
    init_logging(level) -> logging.Logger:
        Initializes the logging module for command-line runs.

    fetch_environment_variables() -> Settings:
        Fetches runtime overrides from the environment (and an optional .env file).

    save_to_json(data, path) -> None:
        Saves the given object to a JSON file, deterministically.

    load_from_json(path) -> object:
        Loads an object from a JSON file.

    dump_canonical_json(data) -> str:
        Serializes an object to the canonical JSON text used by every artifact.
"""

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

from dotenv import load_dotenv

from exceptions import ConfigError, StorageError

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DEFAULT_MAX_CONCURRENCY = 4

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Settings:
    """Runtime overrides read from the environment."""
    http_timeout: Optional[float] = None
    log_level: str = "INFO"
    max_concurrency: int = DEFAULT_MAX_CONCURRENCY


def init_logging(level: Union[str, int] = "INFO") -> logging.Logger:
    """
    Initializes the logging module. Log records go to standard error so that
    standard output stays free for command results.
    """
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[
            logging.StreamHandler()
        ],
        force=True,
    )
    logging.getLogger("urllib3").setLevel(logging.WARNING)
    logger = logging.getLogger(__name__)
    return logger


def fetch_environment_variables() -> Settings:
    """
    Fetches runtime overrides from environment variables.

    Recognized variables:
        GSCO_HTTP_TIMEOUT_SECS: transport timeout for every remote backend.
        GSCO_LOG_LEVEL: logging level name.
        GSCO_MAX_CONCURRENCY: default cap on in-flight requests per backend.

    Returns:
        Settings: the parsed overrides.

    Raises:
        ConfigError: if a variable is set to an unusable value.
    """
    load_dotenv()

    timeout = None
    raw_timeout = os.getenv("GSCO_HTTP_TIMEOUT_SECS")
    if raw_timeout:
        try:
            timeout = float(raw_timeout)
        except ValueError as err:
            raise ConfigError(f"GSCO_HTTP_TIMEOUT_SECS is not a number: {raw_timeout!r}") from err
        if not timeout > 0:
            raise ConfigError("GSCO_HTTP_TIMEOUT_SECS must be positive")

    log_level = (os.getenv("GSCO_LOG_LEVEL") or "INFO").upper()
    if not isinstance(logging.getLevelName(log_level), int):
        raise ConfigError(f"GSCO_LOG_LEVEL is not a logging level: {log_level!r}")

    max_concurrency = DEFAULT_MAX_CONCURRENCY
    raw_cap = os.getenv("GSCO_MAX_CONCURRENCY")
    if raw_cap:
        try:
            max_concurrency = int(raw_cap)
        except ValueError as err:
            raise ConfigError(f"GSCO_MAX_CONCURRENCY is not an integer: {raw_cap!r}") from err
        if max_concurrency < 1:
            raise ConfigError("GSCO_MAX_CONCURRENCY must be at least 1")

    return Settings(http_timeout=timeout, log_level=log_level, max_concurrency=max_concurrency)


def dump_canonical_json(data: Any, indent: Optional[int] = 2) -> str:
    """Serializes data with sorted keys so equal inputs give equal bytes."""
    return json.dumps(data, ensure_ascii=False, indent=indent, sort_keys=True)


def save_to_json(data: Any, path: PathLike) -> None:
    """
    Saves the given object to a JSON file.

    Parameters:
        data: The JSON-serializable object to save.
        path: Destination file.

    Raises:
        StorageError: if the file cannot be written.
    """
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8", newline="\n") as f:
            f.write(dump_canonical_json(data))
            f.write("\n")
        logging.getLogger(__name__).info("Data successfully saved to %s.", path)
    except OSError as err:
        raise StorageError(f"Failed to save data to {path}: {err}") from err


def load_from_json(path: PathLike) -> Any:
    """
    Loads an object from a JSON file.

    Raises:
        StorageError: if the file cannot be read.
        ConfigError: if the file is not valid JSON.
    """
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path} has an invalid format: {err}") from err
    except OSError as err:
        raise StorageError(f"Failed to read {path}: {err}") from err
