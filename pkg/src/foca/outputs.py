"""CSV and JSON writers with a fixed, versioned layout.

CSV layout::

    # format: foca-csv 1
    # config: {"experiment":"default",...}
    experiment,kind,N,...
    default,foca,5,...

Floats are written with 17 significant digits (``format(x, ".17g")``), which
round-trips every 64-bit value; booleans as ``true``/``false``; missing values
as empty fields. Lines end with ``\\n``. JSON files carry the same tag in a
``format`` field and are written with sorted keys.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

CSV_TAG = "foca-csv"
JSON_TAG = "foca-json"
FORMAT_VERSION = 1

STEPS_COLUMNS = ("experiment", "kind", "N", "seed", "step_index", "is_full",
                 "rel_error", "lte", "stiffness_index")
SUMMARY_COLUMNS = ("experiment", "kind", "N", "m", "seed", "evaluation_count",
                   "acceleration_ratio", "terminal_deviation", "mmd", "prop1_pass",
                   "max_rel_error")
FAILURE_COLUMNS = ("experiment", "kind", "N", "seed", "message")
TRAIN_LOG_COLUMNS = ("step", "loss")

# execution-only settings that must not change the bytes of an output
_RUNTIME_KEYS = ("out", "workers")


class FormatError(ValueError):
    """File is not a recognized foca output."""


def embedded_config(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if k not in _RUNTIME_KEYS}
    return json.dumps(clean, sort_keys=True, separators=(",", ":"))


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return format(value, ".17g")
    return str(value)


def csv_text(columns, rows, cfg: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# format: {CSV_TAG} {FORMAT_VERSION}\n")
    buf.write(f"# config: {embedded_config(cfg)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, columns, rows, cfg: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(columns, rows, cfg))
    return path


def read_csv(path) -> tuple[dict, list[dict]]:
    """Return ``(config, rows)``; values stay strings."""
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        _check_tag(first.removeprefix("# format:").strip() if first.startswith("# format:") else "",
                   CSV_TAG, path)
        second = fh.readline().rstrip("\n")
        if not second.startswith("# config:"):
            raise FormatError(f"{path}: missing config line")
        cfg = json.loads(second.removeprefix("# config:").strip())
        rows = list(csv.DictReader(fh))
    return cfg, rows


def _check_tag(tag: str, expected: str, path) -> None:
    name, _, version = tag.partition(" ")
    if name != expected:
        raise FormatError(f"{path}: not a {expected} file")
    if version != str(FORMAT_VERSION):
        raise FormatError(f"{path}: unsupported format version {version!r}")


def json_text(payload: dict, cfg: dict) -> str:
    doc = {"format": f"{JSON_TAG} {FORMAT_VERSION}",
           "config": json.loads(embedded_config(cfg)), **payload}
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, payload: dict, cfg: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(json_text(payload, cfg))
    return path


def read_json(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    _check_tag(str(doc.get("format", "")), JSON_TAG, path)
    return doc
