"""Pipeline configuration.

Values are layered: dataclass defaults, then a YAML/JSON key-value file, then
``PATHREC_<KEY>`` environment variables, then explicit overrides (command
line flags).  Later layers win.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

ENV_PREFIX = "PATHREC_"


@dataclass
class PipelineConfig:
    # inputs and working directory
    embeddings_text: str = None
    embeddings_visual: str = None
    interactions: str = None
    profiles: str = None
    pairs: str = None
    work_dir: str = "work"

    # retrieval
    l_hop: int = 3
    k_core: int = 2
    k_paths: int = 3
    user_arc_rule: str = "source"
    remove_target_edge: bool = True
    fallback: bool = True

    # residual quantization
    L_codebooks: int = 4
    K: int = 256
    d: int = 64
    kmeans_iters: int = 50
    beta: float = 0.25
    tau: float = 0.07
    projection_epochs: int = 10
    projection_lr: float = 1e-3
    refit_every: int = 5
    straight_through: bool = True

    # sequence encoder
    user_epochs: int = 30
    user_lr: float = 0.05
    negatives: int = 32
    batch_size: int = 64
    temperature: float = 1.0

    # graph encoder and adapter
    gnn_dim: int = 64
    activation: str = "relu"
    n_experts: int = 4
    d_out: int = 2048
    dropout: float = 0.0

    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("l_hop", "k_core", "k_paths", "L_codebooks", "K", "d", "negatives",
                     "batch_size", "gnn_dim", "n_experts", "d_out", "workers", "kmeans_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.user_arc_rule not in ("source", "target"):
            raise ValueError("user_arc_rule must be 'source' or 'target'")
        if self.activation not in ("relu", "identity"):
            raise ValueError("activation must be 'relu' or 'identity'")
        if self.beta < 0 or self.tau <= 0 or self.temperature <= 0:
            raise ValueError("beta must be >= 0; tau and temperature > 0")

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self, keys=None):
        data = self.to_dict()
        if keys is not None:
            data = {k: data[k] for k in keys}
        blob = json.dumps(data, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_FIELDS = {f.name: f for f in fields(PipelineConfig)}
_TYPES = {
    "l_hop": int, "k_core": int, "k_paths": int, "L_codebooks": int, "K": int, "d": int,
    "kmeans_iters": int, "projection_epochs": int, "refit_every": int, "user_epochs": int,
    "negatives": int, "batch_size": int, "gnn_dim": int, "n_experts": int, "d_out": int,
    "seed": int, "workers": int,
    "beta": float, "tau": float, "projection_lr": float, "user_lr": float,
    "temperature": float, "dropout": float,
    "remove_target_edge": bool, "fallback": bool, "straight_through": bool,
}


def _coerce(key, value):
    kind = _TYPES.get(key, str)
    if value is None:
        return None
    if kind is bool:
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"cannot read {key}={value!r} as a boolean")
        return bool(value)
    return kind(value)


def _check_keys(mapping, origin):
    unknown = set(mapping) - set(_FIELDS)
    if unknown:
        raise ValueError(f"unknown config keys in {origin}: {sorted(unknown)}")


def load_config(path=None, overrides=None, env=None):
    values = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
        _check_keys(data, path)
        values.update(data)
    env = os.environ if env is None else env
    for key in _FIELDS:
        raw = env.get(ENV_PREFIX + key.upper())
        if raw is not None:
            values[key] = raw
    for key, value in (overrides or {}).items():
        if value is not None:
            _check_keys({key: value}, "overrides")
            values[key] = value
    return PipelineConfig(**{k: _coerce(k, v) for k, v in values.items()})
