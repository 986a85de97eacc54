"""
Dataset Module
CSV ingestion and output for covariate/response tables
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from core.errors import DataParseError

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Numeric feature matrix with an optional response column"""

    X: np.ndarray
    y: Optional[np.ndarray]
    feature_names: List[str] = field(default_factory=list)
    target_name: Optional[str] = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def _parse_column(frame: pd.DataFrame, column: str, header_pos: int) -> np.ndarray:
    raw = frame[column].str.strip()
    values = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(values)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        # line numbers count the header as line 1
        raise DataParseError(
            f"non-numeric value {frame[column].iloc[row]!r} at line {row + 2}, "
            f"column {header_pos + 1} ({column})"
        )
    return values


def load_csv(path: Union[str, Path], target: Optional[str] = None,
             features: Optional[Sequence[str]] = None) -> Dataset:
    """
    Read a comma-separated table with a header row

    Args:
        path: CSV file
        target: Response column (None to read features only)
        features: Feature columns to read, in this order (default: every
            non-target column in header order)

    Returns:
        Dataset
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DataParseError(f"{path}: empty dataset") from None
    except pd.errors.ParserError as e:
        raise DataParseError(f"{path}: {e}") from None

    columns = [str(c).strip() for c in frame.columns]
    frame.columns = columns
    if len(set(columns)) != len(columns):
        raise DataParseError(f"{path}: duplicate column names in header")
    if target is not None and target not in columns:
        raise DataParseError(f"{path}: missing target column {target!r}")
    if features is None:
        features = [c for c in columns if c != target]
    else:
        missing = [c for c in features if c not in columns]
        if missing:
            raise DataParseError(f"{path}: missing feature column(s) {', '.join(missing)}")
    if not features:
        raise DataParseError(f"{path}: no feature columns")
    if len(frame) == 0:
        raise DataParseError(f"{path}: empty dataset")

    position = {c: k for k, c in enumerate(columns)}
    X = np.column_stack([_parse_column(frame, c, position[c]) for c in features])
    y = _parse_column(frame, target, position[target]) if target is not None else None
    logger.info(f"Loaded {path.name}: {X.shape[0]} rows, {X.shape[1]} features")
    return Dataset(X=X, y=y, feature_names=list(features), target_name=target)


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Write a table with full float precision"""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path
