"""Flat dotted-key run configuration with a canonical content hash."""

from __future__ import annotations

import hashlib
import json
from typing import Any, Dict, Iterable

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    # model
    "model.m": 12,
    "model.L": 3,
    "model.heads": 1,
    "model.ffn_mult": 4,
    "model.norm_mode": "prenorm",
    "model.ln_eps": 1e-5,
    # synthetic data
    "synth.H": 8,
    "synth.W": 8,
    "synth.d": 32,
    "synth.n_seen": 40,
    "synth.n_unseen": 10,
    "synth.n_train": 2000,
    "synth.n_test": 400,
    "synth.labels_min": 1,
    "synth.labels_max": 3,
    "synth.region_min": 2,
    "synth.region_max": 4,
    "synth.alpha": 1.0,
    "synth.sigma": 0.1,
    "synth.K": 4,
    "synth.tau": 0.1,
    "synth.shared": 0.0,
    # training
    "train.steps": 5000,
    "train.batch_size": 64,
    "train.lr": 1e-3,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.weight_decay": 0.01,
    "train.loss": "classification",
    "train.plateau_every": 200,
    "train.plateau_threshold": 1e-4,
    "train.plateau_patience": 5,
    "train.lr_floor_ratio": 0.01,
    "train.checkpoint_every": 1000,
    # evaluation
    "eval.ks": [3, 5],
    # sweep
    "sweep.m": list(range(1, 25)),
    "sweep.L": list(range(1, 11)),
}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """SHA-256 of the canonical serialization; key order does not matter."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def load_config(path=None, overrides: Iterable[str] = ()) -> Dict[str, Any]:
    """Defaults, then the JSON file at ``path``, then ``key=value`` overrides.

    Override values are parsed as JSON when possible so ``train.lr=1e-4`` and
    ``eval.ks=[3,5,10]`` keep their types; anything else stays a string.
    """
    cfg = dict(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a flat JSON object")
        cfg.update(data)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg[key.strip()] = value
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def section(cfg: Dict[str, Any], prefix: str) -> Dict[str, Any]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}
