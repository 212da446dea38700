""" Lossless text encodings for run data. """

import json
from pathlib import Path
from typing import Dict, Union

import numpy as np
import pandas as pd

from asyncpqp.exceptions import ExportError

# 17 significant digits round-trip every float64 exactly
FLOAT_FORMAT = "%.17g"
FORMATS = ("csv", "json")


def to_builtin(value):
    """Convert numpy scalars/arrays (possibly nested in dicts/lists) to JSON types."""
    if isinstance(value, dict):
        return {k: to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_builtin(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_frame(df: pd.DataFrame, path: Union[str, Path], fmt: str = "csv") -> None:
    try:
        if fmt == "csv":
            df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        elif fmt == "json":
            # json writes repr(float), the shortest exact representation
            payload = {col: to_builtin(df[col].tolist()) for col in df.columns}
            with open(path, "w") as f:
                json.dump(payload, f)
        else:
            raise ValueError(f"Unknown format {fmt!r}, expected one of {FORMATS}")
    except OSError as exc:
        raise ExportError(f"Could not write {path}: {exc}") from exc


def read_frame(path: Union[str, Path], fmt: str = None) -> pd.DataFrame:
    fmt = fmt or Path(path).suffix.lstrip(".")
    try:
        if fmt == "csv":
            return pd.read_csv(path, float_precision="round_trip")
        if fmt == "json":
            with open(path) as f:
                payload = json.load(f)
            return pd.DataFrame(payload)
    except OSError as exc:
        raise ExportError(f"Could not read {path}: {exc}") from exc
    raise ValueError(f"Unknown format {fmt!r}, expected one of {FORMATS}")


def write_json(data: Dict[str, object], path: Union[str, Path]) -> None:
    try:
        with open(path, "w") as f:
            json.dump(to_builtin(data), f, indent=2)
    except OSError as exc:
        raise ExportError(f"Could not write {path}: {exc}") from exc
