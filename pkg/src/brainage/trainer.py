"""Training loop: MSE objective, Adam with step-decayed learning rate,
validation-MAE checkpoint selection."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError, TrainingDivergedError
from .model import BrainAgeModel, Standardization
from .numcore import DeterministicRng, Tensor, as_tensor, backward, mean, square, sub
from .synthcorpus import Corpus, ScanRecord, draw_augmentation, preprocess

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 3e-5
    decay_factor: float = 0.1
    decay_every: int = 10
    batch_size: int = 32
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    clip: float | None = None
    train_groups: tuple[str, ...] = ("CN",)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset: short schedule, small batches, larger step size for training from scratch."""
        base = dict(lr0=3e-4, decay_every=10, epochs=40, batch_size=8)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        bad = [f for f in ("lr0", "decay_every", "batch_size", "eps") if getattr(self, f) <= 0]
        if self.epochs < 0:
            bad.append("epochs")
        if not (0.0 < self.decay_factor <= 1.0):
            bad.append("decay_factor")
        for f in ("beta1", "beta2"):
            if not (0.0 <= getattr(self, f) < 1.0):
                bad.append(f)
        if self.clip is not None and self.clip <= 0:
            bad.append("clip")
        if bad:
            raise ConfigError(f"invalid train config fields: {bad}", bad)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_groups"] = list(self.train_groups)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "train_groups" in d:
            d["train_groups"] = tuple(d["train_groups"])
        return cls(**d)


def mse_loss(pred, target) -> Tensor:
    """(1/N) Σ (ŷ_i − y_i)²."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ContractError("mse_loss needs at least one sample")
    return mean(square(sub(pred, target)))


def lr_at(epoch: int, config: TrainConfig) -> float:
    """lr0 · factor^floor(epoch / decay_every)."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return config.lr0 * config.decay_factor ** (epoch // config.decay_every)


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "OptimizerState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], 0)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update; a ``None`` gradient counts as zero."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros(p.shape)
        elif g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m[i]
        v = state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def stats_from_corpus(corpus: Corpus) -> Standardization:
    return Standardization(corpus.volume_mean.copy(), corpus.volume_std.copy(), corpus.age_mean, corpus.age_std)


def batch_arrays(corpus: Corpus, records: Sequence[ScanRecord], epoch: int | None = None,
                 config: TrainConfig | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Views (B, 3, c1, c2, t), raw volumes (B, R) and ages (B,) for ``records``.

    With ``epoch``/``config`` and ``config.augment`` each sample is augmented
    with a stream keyed by (train seed, epoch, scan id) before cropping.
    """
    views = []
    for rec in records:
        if config is not None and config.augment and epoch is not None:
            rng = DeterministicRng(config.seed, ("augment", epoch, rec.scan_id))
            params = draw_augmentation(rng, corpus.config.grid)
            if params.is_identity:
                views.append(corpus.chunks(rec))
            else:
                views.append(preprocess(corpus.load_volume(rec).astype(np.float64), corpus.crop, params))
        else:
            views.append(corpus.chunks(rec))
    vols = np.stack([r.region_volumes for r in records])
    ages = np.array([r.age for r in records], dtype=np.float64)
    return np.stack(views), vols, ages


def predict_records(model: BrainAgeModel, corpus: Corpus, records: Sequence[ScanRecord], batch_size: int = 32) -> np.ndarray:
    if not records:
        return np.zeros(0)
    views = np.stack([corpus.chunks(r) for r in records])
    vols = np.stack([r.region_volumes for r in records])
    return model.predict(views, vols, batch_size)


def train_step(model: BrainAgeModel, params: Sequence[Tensor], state: OptimizerState, views: np.ndarray,
               volumes: np.ndarray, ages: np.ndarray, lr: float, config: TrainConfig) -> float:
    """One forward/backward/Adam update on a batch; returns the batch MSE before the update."""
    for p in params:
        p.grad = None
    pred = model.forward(views[:, 0], views[:, 1], views[:, 2], volumes)
    loss = mse_loss(pred, ages)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value} at lr={lr:g}")
    backward(loss)
    grads = [p.grad for p in params]
    if config.clip is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
        if norm > config.clip:
            grads = [g * (config.clip / norm) if g is not None else None for g in grads]
    adam_step(params, grads, state, lr, config.beta1, config.beta2, config.eps)
    return value


@dataclass
class FitResult:
    log: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_valid_mae: float = float("inf")
    best_state: dict | None = None

    @property
    def final_train_mse(self) -> float:
        return self.log[-1]["train_mse"] if self.log else float("nan")


LOG_FIELDS = ("epoch", "lr", "train_mse", "valid_mae", "wall_s")


def write_log_csv(rows: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})


def fit(model: BrainAgeModel, corpus: Corpus, config: TrainConfig, *, restore_best: bool = True,
        progress=None) -> FitResult:
    """Train ``model`` in place; afterwards it holds the lowest-valid-MAE weights
    (unless ``restore_best`` is false)."""
    config.validate()
    train = corpus.split("train", config.train_groups)
    valid = corpus.split("valid", config.train_groups)
    if not train:
        raise ContractError("training split is empty")
    if not valid:
        raise ContractError("validation split is empty")
    if model.stats is None:
        model.stats = stats_from_corpus(corpus)
    result = FitResult()
    if config.epochs == 0:
        return result

    params = model.parameters()
    state = OptimizerState.zeros_like(params)
    valid_ages = np.array([r.age for r in valid])
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, config)
        order = DeterministicRng(config.seed, ("shuffle", epoch)).permutation(len(train))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[start:start + config.batch_size]]
            views, vols, ages = batch_arrays(corpus, batch, epoch, config)
            try:
                loss = train_step(model, params, state, views, vols, ages, lr, config)
            except TrainingDivergedError as exc:
                ids = [r.scan_id for r in batch]
                raise TrainingDivergedError(f"{exc}; epoch {epoch}, batch scans {ids}") from None
            total += loss * len(batch)
            count += len(batch)
        valid_mae = float(np.mean(np.abs(predict_records(model, corpus, valid) - valid_ages)))
        row = {"epoch": epoch, "lr": lr, "train_mse": total / count, "valid_mae": valid_mae,
               "wall_s": time.perf_counter() - t0}
        result.log.append(row)
        if valid_mae < result.best_valid_mae:
            result.best_valid_mae = valid_mae
            result.best_epoch = epoch
            result.best_state = model.state_dict()
        log.info("epoch %d lr %.2e train_mse %.3f valid_mae %.3f", epoch, lr, row["train_mse"], valid_mae)
        if progress is not None:
            progress(row)
    if restore_best and result.best_state is not None:
        model.load_state_dict(result.best_state)
    return result
