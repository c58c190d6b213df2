"""
Plain-text artifact persistence: CSV tables, JSON documents, JSON Lines.

Numbers are written deterministically (no timestamps) so two runs of the
same configuration produce byte-identical files. Tables use the shortest
round-trip float repr unless a fixed `float_format` is asked for; the
emulated records are written at 9 significant digits.
"""

import json
import logging
from pathlib import Path
from typing import Any, Iterable, List, Optional, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RECORD_FLOAT_FORMAT = "%.9g"


def _plain(value: Any) -> Any:
    """json.dumps hook for numpy scalars and arrays"""
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def to_json(document: Any) -> str:
    return json.dumps(document, indent=2, sort_keys=True, default=_plain) + "\n"


def _prepare(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_table(frame: pd.DataFrame, path: PathLike, float_format: Optional[str] = None) -> Path:
    path = _prepare(path)
    frame.to_csv(path, index=False, float_format=float_format, lineterminator="\n")
    logger.debug(f"Wrote {len(frame)} rows to {path}")
    return path


def read_table(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"artifact not found: {path}")
    return pd.read_csv(path, float_precision="round_trip")


def write_json(document: Any, path: PathLike) -> Path:
    path = _prepare(path)
    path.write_text(to_json(document), encoding="utf-8")
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"artifact not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def write_text(text: str, path: PathLike) -> Path:
    path = _prepare(path)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    return path


def read_text(path: PathLike) -> str:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"artifact not found: {path}")
    return path.read_text(encoding="utf-8")


def write_jsonl(rows: Iterable[dict], path: PathLike) -> Path:
    path = _prepare(path)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True, default=_plain) + "\n")
    return path


def read_jsonl(path: PathLike) -> List[dict]:
    with Path(path).open("r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
