"""
Model Store
Versioned binary model files: magic bytes, format version, a JSON header
and an npz payload holding every numeric array
"""

import io
import json
import logging
import struct
import zipfile
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from core.boosting import GpdBoostModel
from core.errors import ModelFormatError
from core.pipeline import ExtremeQuantileModel
from core.quantile_forest import QuantileForest

logger = logging.getLogger(__name__)

MAGIC = b"TGRVMDL\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_model(model: ExtremeQuantileModel, path: Union[str, Path]) -> Path:
    """Write model to path (overwriting)"""
    forest_header, forest_arrays = model.forest.to_payload()
    boost_header, boost_arrays = model.boost.to_payload()
    arrays = {**forest_arrays, **boost_arrays}
    header = {
        "format_version": FORMAT_VERSION,
        "tau0": model.tau0,
        "feature_names": list(model.feature_names),
        "forest": forest_header,
        "boost": boost_header,
        "seed": model.boost.params.seed,
        "selection": model.selection,
        "target_name": model.target_name,
        "arrays": sorted(arrays),
    }
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = Path(path)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(buffer.getvalue())
    logger.info(f"[OK] Model saved to {path}")
    return path


def read_model_file(path: Union[str, Path]) -> Tuple[Dict, Dict[str, np.ndarray]]:
    """Header and arrays of a model file, validated against the format"""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _PREFIX.size:
        raise ModelFormatError(f"{path}: truncated model file")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported model format version {version}")
    start = _PREFIX.size
    if len(data) < start + header_len:
        raise ModelFormatError(f"{path}: truncated model header")
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
        with np.load(io.BytesIO(data[start + header_len:]), allow_pickle=False) as payload:
            arrays = {name: payload[name] for name in payload.files}
    except (ValueError, OSError, EOFError, AttributeError, UnicodeDecodeError, zipfile.BadZipFile) as e:
        raise ModelFormatError(f"{path}: corrupt model file ({e})") from None
    missing = set(header.get("arrays", [])) - set(arrays)
    if missing:
        raise ModelFormatError(f"{path}: payload lacks arrays {', '.join(sorted(missing))}")
    return header, arrays


def load_model(path: Union[str, Path]) -> ExtremeQuantileModel:
    """Read a model written by save_model"""
    header, arrays = read_model_file(path)
    try:
        forest = QuantileForest.from_payload(header["forest"], arrays)
        boost = GpdBoostModel.from_payload(header["boost"], arrays)
        model = ExtremeQuantileModel(forest=forest, boost=boost, tau0=float(header["tau0"]),
                                     feature_names=list(header["feature_names"]),
                                     selection=header.get("selection", {}),
                                     target_name=header.get("target_name"))
    except (KeyError, TypeError) as e:
        raise ModelFormatError(f"{path}: incomplete model file ({e})") from None
    logger.info(f"Loaded model from {path} (tau0={model.tau0:g}, {model.boost.n_trees} trees)")
    return model
