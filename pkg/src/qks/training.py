"""AdamW, the plateau learning-rate schedule, checkpoints and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .config import config_hash
from .dataset_io import Manifest, batch_stream, load_split, read_tensor, write_tensor
from .model import LOSS_KINDS, ModelConfig, QksHead, init_params
from .numerics import NonFiniteError, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "qks-checkpoint/1"


class DivergenceError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, params: Dict[str, Tensor], lr=1e-5, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Dict[str, Tensor], grads: Dict[str, Tensor]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}")
            if g.shape != params[name].shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        new_m, new_v, new_p = {}, {}, {}
        for name, p in params.items():
            g = grads[name]
            m = b1 * self.m[name] + (1.0 - b1) * g
            v = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            # decoupled decay uses the pre-update parameter value
            with np.errstate(over="ignore", invalid="ignore"):
                q = (p - (self.lr * update + (self.lr * self.weight_decay) * p)).astype(p.dtype)
            if not np.all(np.isfinite(q)):
                self.t -= 1
                raise NonFiniteError(f"update made parameter {name} non-finite")
            new_m[name], new_v[name], new_p[name] = m.astype(p.dtype), v.astype(p.dtype), q
        # commit only once every parameter updated cleanly
        for name, p in params.items():
            p[...] = new_p[name]
            self.m[name][...] = new_m[name]
            self.v[name][...] = new_v[name]

    def state_dict(self) -> dict:
        return {"lr": self.lr, "betas": [self.beta1, self.beta2], "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.t}


def adamw_step(params, grads, state: AdamW) -> None:
    state.step(params, grads)


@dataclass
class PlateauSchedule:
    """Divide the learning rate by ``factor`` once the smoothed loss has not
    improved by more than ``threshold`` (relative) for ``patience``
    consecutive evaluations. Never goes below ``floor``."""

    lr: float
    patience: int = 5
    threshold: float = 1e-4
    factor: float = 10.0
    floor: float = 0.0
    smoothing: float = 0.9
    ema: Optional[float] = None
    best: float = math.inf
    bad_evals: int = 0
    decays: int = 0

    def update(self, loss: float) -> float:
        if not math.isfinite(loss):
            raise NonFiniteError("plateau schedule got a non-finite loss")
        if self.ema is None:
            self.ema = loss
        else:
            self.ema = self.smoothing * self.ema + (1.0 - self.smoothing) * loss
        if self.ema < self.best * (1.0 - self.threshold):
            self.best = self.ema
            self.bad_evals = 0
        else:
            self.bad_evals += 1
        if self.bad_evals >= self.patience:
            self.bad_evals = 0
            self.best = self.ema
            new = max(self.lr / self.factor, self.floor)
            if new < self.lr:
                self.lr = new
                self.decays += 1
        return self.lr


def plateau_schedule(loss_eval: float, state: PlateauSchedule) -> float:
    return state.update(loss_eval)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: Dict[str, Tensor]
    meta: dict
    optim_m: Dict[str, Tensor] = field(default_factory=dict)
    optim_v: Dict[str, Tensor] = field(default_factory=dict)

    def head(self) -> QksHead:
        return QksHead(self.cfg, self.params)


def save_checkpoint(path, cfg: ModelConfig, params, step: int, optimizer: AdamW = None,
                    extra: dict = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    for name in names:
        write_tensor(path / "params" / f"{name}.qtf", params[name])
        if optimizer is not None:
            write_tensor(path / "optim" / "m" / f"{name}.qtf", optimizer.m[name])
            write_tensor(path / "optim" / "v" / f"{name}.qtf", optimizer.v[name])
    model = cfg.to_dict()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model": model,
        "config_hash": config_hash(model),
        "step": int(step),
        "params": names,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    meta.update(extra or {})
    with open(path / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def load_checkpoint(path, expected_hash: str = None) -> Checkpoint:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing checkpoint metadata: {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
    actual = config_hash(meta["model"])
    if actual != meta["config_hash"]:
        raise CheckpointError(f"{path}: stored config hash does not match its model config")
    if expected_hash is not None and expected_hash != actual:
        raise CheckpointError(
            f"{path}: checkpoint config hash {actual[:12]} != expected {expected_hash[:12]}"
        )
    cfg = ModelConfig.from_dict(meta["model"])
    params = {n: read_tensor(path / "params" / f"{n}.qtf") for n in meta["params"]}
    ck = Checkpoint(cfg, params, meta)
    if meta.get("optimizer") is not None:
        ck.optim_m = {n: read_tensor(path / "optim" / "m" / f"{n}.qtf") for n in meta["params"]}
        ck.optim_v = {n: read_tensor(path / "optim" / "v" / f"{n}.qtf") for n in meta["params"]}
    return ck


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainSettings:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    loss: str = "classification"
    plateau_every: int = 200
    plateau_threshold: float = 1e-4
    plateau_patience: int = 5
    lr_floor_ratio: float = 0.01
    checkpoint_every: int = 1000

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSettings":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainResult:
    head: QksHead
    log: List[tuple]
    checkpoint: Optional[Path]
    seconds: float

    @property
    def losses(self) -> np.ndarray:
        return np.array([row[2] for row in self.log])


def model_config_for(manifest: Manifest, **overrides) -> ModelConfig:
    """Model configuration whose width and grid come from the dataset."""
    d = manifest.data
    fields = dict(overrides, d=d["d"], C=d["C"], H=d["H"], W=d["W"])
    return ModelConfig(**fields)


def train(manifest: Manifest, cfg: ModelConfig, settings: TrainSettings, seed: int = 0,
          out_dir=None, data=None, table=None, extra_meta: dict = None) -> TrainResult:
    """Train a head on the manifest's train split.

    Batches come from ``seed``, parameters are initialized from ``seed``, and
    gradients are accumulated in image order inside each batch, so two runs
    with the same arguments produce identical logs. When ``out_dir`` is set,
    checkpoints go to ``out_dir/checkpoint`` and the loss log to
    ``out_dir/loss.csv``.
    """
    if settings.loss not in LOSS_KINDS:
        raise ValueError(f"loss must be one of {LOSS_KINDS}")
    if (cfg.d, cfg.C, cfg.H, cfg.W) != (manifest.data["d"], manifest.data["C"],
                                        manifest.data["H"], manifest.data["W"]):
        raise ValueError("model config does not match the dataset geometry")
    t0 = time.perf_counter()
    data = data if data is not None else load_split(manifest, "train")
    table = table if table is not None else manifest.label_table()
    train_mask = manifest.seen_mask

    head = QksHead(cfg, init_params(cfg, seed, np.float32))
    opt = AdamW(head.params, lr=settings.lr, betas=(settings.beta1, settings.beta2),
                eps=settings.eps, weight_decay=settings.weight_decay)
    sched = PlateauSchedule(settings.lr, patience=settings.plateau_patience,
                            threshold=settings.plateau_threshold,
                            floor=settings.lr * settings.lr_floor_ratio)
    meta = {"loss_kind": settings.loss, "seed": seed, "dataset": manifest.name,
            "train": asdict(settings)}
    meta.update(extra_meta or {})
    ckpt_dir = Path(out_dir) / "checkpoint" if out_dir is not None else None

    def checkpoint(step):
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir, cfg, head.params, step, opt,
                            dict(meta, schedule={"lr": sched.lr, "decays": sched.decays}))

    checkpoint(0)
    rows = []
    window = []
    stream = batch_stream(data, settings.batch_size, seed)
    for step in range(settings.steps):
        x, y, _ = next(stream)
        try:
            loss, grads = head.loss_and_grads(x, table, y, train_mask, settings.loss)
        except NonFiniteError as exc:
            _write_log(out_dir, rows)
            raise DivergenceError(f"training diverged at step {step}: {exc}") from exc
        rows.append((step, opt.lr, loss))
        try:
            opt.step(head.params, grads)
        except NonFiniteError as exc:
            _write_log(out_dir, rows)
            raise DivergenceError(f"training diverged at step {step}: {exc}") from exc
        window.append(loss)
        if (step + 1) % settings.plateau_every == 0:
            opt.lr = sched.update(float(np.mean(window)))
            window = []
        if settings.checkpoint_every and (step + 1) % settings.checkpoint_every == 0:
            checkpoint(step + 1)
    if settings.steps % max(settings.checkpoint_every, 1) or not settings.checkpoint_every:
        checkpoint(settings.steps)
    _write_log(out_dir, rows)
    elapsed = time.perf_counter() - t0
    log.info("trained %d steps in %.1fs, final loss %.4f", settings.steps, elapsed,
             rows[-1][2] if rows else float("nan"))
    return TrainResult(head, rows, ckpt_dir, elapsed)


def _write_log(out_dir, rows):
    if out_dir is None:
        return
    path = Path(out_dir) / "loss.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in rows:
            w.writerow([step, repr(float(lr)), repr(float(loss))])
