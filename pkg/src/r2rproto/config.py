"""Run configuration: JSON file + command-line overrides, strictly validated."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ParseError
from .model import ModelConfig, StageConfig

DEFAULTS: dict = {
    "seed": 0,
    "output_dir": None,
    "model": ModelConfig.desk_default().to_dict(),
    "training": {
        "epochs": 30,
        "batch_size": 16,
        "lr0": 0.00025,
        "weight_decay": 0.05,
        "lr_min": 0.0,
        "val_fraction": 0.1,
    },
    "data": {
        "manifest": None,
        "synthetic": None,
        "synthetic_size": 64,
        "synthetic_seed": 0,
    },
    "explain": {
        "stage": "final",
        "topk": 1,
        "activity": "mass",
    },
}

_STAGE_KEYS = set(StageConfig.__dataclass_fields__)


def _merge(base: dict, update: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in update.items():
        kp = f"{path}.{key}" if path else key
        if key not in base:
            raise ParseError(f"unknown config key {kp!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ParseError(f"config key {kp!r} must be an object")
            out[key] = _merge(base[key], val, kp)
        elif key == "stages":
            out[key] = _stages(val, kp)
        else:
            out[key] = val
    return out


def _stages(val, path: str) -> list[dict]:
    if not isinstance(val, list) or not val:
        raise ParseError(f"config key {path!r} must be a non-empty list")
    out = []
    for i, s in enumerate(val):
        if not isinstance(s, dict):
            raise ParseError(f"config key {path}[{i}] must be an object")
        bad = set(s) - _STAGE_KEYS
        if bad:
            raise ParseError(f"unknown config key {path}[{i}].{sorted(bad)[0]!r}")
        out.append(StageConfig(**s).__dict__)
    return out


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply ``dotted.key=value`` (value parsed as JSON when possible)."""
    if "=" not in assignment:
        raise ParseError(f"override {assignment!r} must look like key.path=value")
    dotted, raw = assignment.split("=", 1)
    update: dict = {}
    node = update
    parts = dotted.split(".")
    for p in parts[:-1]:
        node[p] = {}
        node = node[p]
    node[parts[-1]] = _coerce(raw)
    return _merge(cfg, update, "")


def load_run_config(path=None, overrides: list[str] | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
        except OSError as e:
            raise ParseError(f"{path}: cannot read config: {e.strerror}") from None
        if not isinstance(user, dict):
            raise ParseError(f"{path}: top level must be an object")
        cfg = _merge(cfg, user, "")
    for ov in overrides or []:
        cfg = apply_override(cfg, ov)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    def need(cond, key, what):
        if not cond:
            raise ParseError(f"config key {key!r} {what}")

    t = cfg["training"]
    need(isinstance(t["epochs"], int) and t["epochs"] >= 1, "training.epochs", "must be a positive integer")
    need(isinstance(t["batch_size"], int) and t["batch_size"] >= 1, "training.batch_size", "must be a positive integer")
    for k in ("lr0", "weight_decay", "lr_min"):
        need(isinstance(t[k], (int, float)) and t[k] >= 0, f"training.{k}", "must be a non-negative number")
    need(isinstance(t["val_fraction"], (int, float)) and 0 <= t["val_fraction"] < 1,
         "training.val_fraction", "must be in [0, 1)")
    need(isinstance(cfg["seed"], int), "seed", "must be an integer")
    e = cfg["explain"]
    need(isinstance(e["topk"], int) and e["topk"] >= 1, "explain.topk", "must be a positive integer")
    need(e["activity"] in ("mass", "argmax"), "explain.activity", "must be 'mass' or 'argmax'")
    try:
        model_config(cfg).spatial_sizes()
    except (TypeError, ValueError) as exc:
        raise ParseError(f"config key 'model': {exc}") from None


def model_config(cfg: dict) -> ModelConfig:
    m = dict(cfg["model"])
    m["seed"] = cfg["seed"]
    return ModelConfig.from_dict(m)
