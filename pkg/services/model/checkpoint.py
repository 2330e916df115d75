"""JSON checkpoints: config, every parameter and the batch-norm running statistics."""
import json
import logging
import os
from typing import Dict, Optional

import numpy as np
from pydantic import ValidationError

from ..errors import ConfigurationError, DataError
from .branched_cnn import BranchedCnn, BranchedCnnConfig, _validation_message

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def _pack(arrays: Dict[str, np.ndarray]) -> Dict[str, Dict]:
    return {name: {"shape": list(a.shape), "data": a.reshape(-1).tolist()} for name, a in arrays.items()}


def _unpack(packed: Dict[str, Dict]) -> Dict[str, np.ndarray]:
    return {name: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for name, v in packed.items()}


def save_checkpoint(model: BranchedCnn, path: str, extra: Optional[Dict] = None) -> str:
    state = model.state_dict()
    payload = {
        "format_version": FORMAT_VERSION,
        "config": model.config.model_dump(mode="json"),
        "parameters": _pack(state["parameters"]),
        "buffers": _pack(state["buffers"]),
        "extra": extra or {},
    }
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as f:
            json.dump(payload, f)
    except OSError as e:
        raise DataError(f"cannot write checkpoint {path}: {e}") from e
    logger.info("Saved checkpoint to %s", path)
    return path


def config_mismatches(config: BranchedCnnConfig, expected: Dict) -> Dict[str, tuple]:
    """Fields of ``expected`` whose value differs from ``config``."""
    current = config.model_dump(mode="json")
    try:
        wanted = BranchedCnnConfig(**{**current, **expected}).model_dump(mode="json")
    except ValidationError as e:
        raise ConfigurationError(_validation_message(e)) from None
    return {k: (current[k], wanted[k]) for k in expected if current.get(k) != wanted.get(k)}


def load_checkpoint(path: str, expected_config: Optional[Dict] = None) -> BranchedCnn:
    """Rebuild a model; ``expected_config`` holds fields the caller insists on (e.g. CLI flags)."""
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    try:
        with open(path) as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if payload.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(
            f"{path}: unsupported checkpoint format {payload.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    config = BranchedCnnConfig.build(**payload["config"])
    if expected_config:
        diff = config_mismatches(config, expected_config)
        if diff:
            detail = ", ".join(f"{k}: checkpoint {a!r} vs requested {b!r}" for k, (a, b) in diff.items())
            raise ConfigurationError(f"{path}: config mismatch ({detail})")
    model = BranchedCnn(config)
    model.load_state_dict({"parameters": _unpack(payload["parameters"]), "buffers": _unpack(payload["buffers"])})
    return model.eval()


def read_checkpoint_extra(path: str) -> Dict:
    with open(path) as f:
        return json.load(f).get("extra", {})
