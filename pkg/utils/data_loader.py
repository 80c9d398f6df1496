"""
Readers and writers for experiment artifacts.
Every CSV starts with a `# config_hash=... seed=...` line and every JSON carries both fields.
"""
import json
import logging
import os

import numpy as np
import pandas as pd

from robustness.models import model_from_dict, model_to_dict
from robustness.training import Dataset
from utils.errors import ConfigError, InputError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def _plain(value):
    """json.dump fallback for numpy scalars and arrays."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def load_json(path):
    """Load a JSON file."""
    try:
        with open(path, "r") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise InputError(f"no such file: {path}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"{path} is not valid JSON: {e}") from e


def write_json(path, data, config_hash=None, seed=None):
    """Write sorted, indented JSON; config_hash and seed are added when given."""
    payload = dict(data)
    if config_hash is not None:
        payload["config_hash"] = config_hash
    if seed is not None:
        payload["seed"] = int(seed)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_plain, allow_nan=True)
        f.write("\n")
    logger.debug("wrote %s", path)
    return path


def load_config(path):
    """Load an experiment config file (JSON)."""
    try:
        data = load_json(path)
    except InputError as e:
        raise ConfigError(str(e)) from e
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    logger.info("loaded config %s", path)
    return data


def write_csv(path, frame, config_hash=None, seed=None):
    """Write a table with the hash header line and full float precision."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        if config_hash is not None:
            f.write(f"# config_hash={config_hash} seed={int(seed)}\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.debug("wrote %s (%d rows)", path, len(frame))
    return path


def read_header(path):
    """{config_hash, seed} from a CSV header line or JSON fields; empty dict when absent."""
    if not os.path.exists(path):
        return {}
    if path.endswith(".json"):
        data = load_json(path)
        return {k: data[k] for k in ("config_hash", "seed") if k in data}
    with open(path, "r") as f:
        first = f.readline().strip()
    if not first.startswith("#"):
        return {}
    fields = dict(part.split("=", 1) for part in first.lstrip("# ").split() if "=" in part)
    if "seed" in fields:
        fields["seed"] = int(fields["seed"])
    return fields


def read_csv(path):
    """Read a table written by write_csv; floats round-trip exactly."""
    if not os.path.exists(path):
        raise InputError(f"no such file: {path}")
    with open(path, "r") as f:
        skip = 1 if f.readline().startswith("#") else 0
    logger.debug("reading %s", path)
    return pd.read_csv(path, skiprows=skip, float_precision="round_trip")


def feature_columns(frame, prefix="x_"):
    cols = [c for c in frame.columns if c.startswith(prefix) and c[len(prefix):].isdigit()]
    return sorted(cols, key=lambda c: int(c[len(prefix):]))


def frame_points(frame, prefix="x_"):
    """Feature matrix from columns x_0 .. x_{d-1}."""
    cols = feature_columns(frame, prefix)
    if not cols:
        raise InputError(f"table has no {prefix}0.. columns")
    return frame[cols].to_numpy(dtype=float)


def points_frame(X, prefix="x_"):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return pd.DataFrame({f"{prefix}{j}": X[:, j] for j in range(X.shape[1])})


def load_points(path):
    """Query points from a CSV with columns x_0 .. x_{d-1}."""
    return frame_points(read_csv(path))


def dataset_frame(data):
    frame = points_frame(data.X)
    frame["y"] = data.y
    return frame


def load_dataset(path):
    """Labeled dataset from dataset.csv."""
    frame = read_csv(path)
    if "y" not in frame.columns:
        raise InputError(f"{path} has no label column 'y'")
    return Dataset(frame_points(frame), frame["y"].to_numpy(dtype=float))


def save_model(path, model, config_hash=None, seed=None, extra=None):
    payload = model_to_dict(model)
    if extra:
        payload.update(extra)
    return write_json(path, payload, config_hash, seed)


def load_model(path):
    """Model from its JSON description."""
    return model_from_dict(load_json(path))
