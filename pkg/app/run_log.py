import logging
import os
import sys
import uuid
from typing import Optional

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

logger = logging.getLogger(__name__)


def log_dir() -> str:
    return os.environ.get("POSESYNTH_LOG_DIR", "logs")


def safe_name(name: str) -> str:
    """Sanitize a run name for use in a filename."""
    cleaned = "".join(c for c in name if c.isalnum() or c in (" ", "-", "_")).strip().replace(" ", "_")
    return cleaned or "run"


def start_run_log(command: str, name: Optional[str] = None, level: str = "INFO") -> str:
    """
    Configure logging for one command invocation.

    Every invocation streams to stderr and also appends to its own file,
    `logs/{name}_{short_id}.log`, so long trainings and benchmark sweeps can be
    followed live.

    Args:
        command: Subcommand name (used when no run name is given)
        name: Optional human-readable run name
        level: Root log level

    Returns:
        run_id: Unique identifier embedded in the artifacts of this run
    """
    run_id = str(uuid.uuid4())
    directory = log_dir()
    os.makedirs(directory, exist_ok=True)
    log_path = os.path.join(directory, f"{safe_name(name or command)}_{run_id[:8]}.log")

    root = logging.getLogger()
    root.setLevel(level.upper())
    for handler in list(root.handlers):
        if getattr(handler, "_posesynth", False):
            root.removeHandler(handler)
            handler.close()

    formatter = logging.Formatter(LOG_FORMAT)
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(formatter)
    stream._posesynth = True
    root.addHandler(stream)

    try:
        file_handler = logging.FileHandler(log_path, encoding="utf-8")
        file_handler.setFormatter(formatter)
        file_handler._posesynth = True
        root.addHandler(file_handler)
    except OSError as err:
        logger.warning("Failed to open log file %s: %s", log_path, err)

    logger.info("Run %s started (%s), logging to %s", run_id, command, log_path)
    return run_id
