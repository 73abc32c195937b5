"""Utility functions for ldplcm.

This module contains helpers for logging setup, artifact digests and the
CSV/JSON files every command writes. Each output file embeds the resolved
configuration that produced it.
"""

import csv
import hashlib
import json
import math
import sys
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

from loguru import logger

from ldplcm.errors import ArtifactError

CONFIG_COMMENT_PREFIX = "# ldplcm "


def setup_logging(level: str = "INFO", log_file: Optional[str] = None):
    """Setup loguru sinks: stderr at ``level`` and an optional rotating log file.

    Args:
        level: Minimum level for the stderr sink
        log_file: Path of a log file rotated every 10 MB

    Returns:
        Configured logger instance
    """
    logger.remove()
    logger.add(sys.stderr, level=level.upper())
    if log_file:
        logger.add(log_file, level="DEBUG", rotation="10 MB")
    return logger


def sha256_file(file_path: str | Path) -> str:
    """SHA256 digest of a file as a hex string."""
    sha256 = hashlib.sha256()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            sha256.update(chunk)
    return sha256.hexdigest()


def json_safe(value: Any) -> Any:
    """Replace non-finite floats (nested anywhere) by ``"+inf"``, ``"-inf"`` or ``"nan"``."""
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("+inf" if value > 0 else "-inf")
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    return value


def dump_json(data: Any) -> str:
    """Deterministic JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(json_safe(data), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: str | Path, data: Any):
    Path(path).write_text(dump_json(data), encoding="utf-8")


def config_comment(config: Optional[dict[str, Any]]) -> str:
    """The ``# ldplcm {...}`` first line that records the resolved config in a CSV file."""
    return CONFIG_COMMENT_PREFIX + json.dumps(json_safe(config or {}), sort_keys=True, allow_nan=False)


def write_csv(path: str | Path, header: list[str], rows: Iterable, config: Optional[dict[str, Any]] = None):
    """Write a CSV file preceded by the config comment line."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(config_comment(config) + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_csv_config(path: str | Path) -> dict[str, Any]:
    """The config recorded on the first line of a CSV written by ``write_csv``."""
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    if not first.startswith(CONFIG_COMMENT_PREFIX):
        raise ArtifactError(f"{path} does not start with an ldplcm config line")
    try:
        return json.loads(first[len(CONFIG_COMMENT_PREFIX) :])
    except json.JSONDecodeError as e:
        raise ArtifactError(f"{path}: malformed config line: {e}") from e


def read_csv_rows(path: str | Path, header: list[str]) -> Iterator[tuple[int, list[str]]]:
    """Yield ``(line number, row)`` after the header, skipping ``#`` comment lines.

    Raises:
        ArtifactError: If the file cannot be read or its header differs from ``header``
    """
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise ArtifactError(f"cannot read {path}: {e}") from e
    seen_header = False
    for line_no, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        row = next(csv.reader([line]))
        if not seen_header:
            if row != header:
                raise ArtifactError(f"{path}: expected header {','.join(header)}, got {line}")
            seen_header = True
            continue
        yield line_no, row
