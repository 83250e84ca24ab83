"""Masked-loss training loop with adaptive moments and plateau scheduling.

The loss averages per-(step, node) mask-normalised absolute errors over the
terms that have at least one valid channel, so its scale does not depend on
the node count, horizon or batch size. Reported MAE/MSE are plain means over
valid scalar entries in original units.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import Panel, Scaler, WindowSample
from .errors import ContractError
from .model import Model, ModelConfig
from .rng import stream_rng


class TrainingDiverged(ContractError):
    """Non-finite loss; carries the epoch history accumulated so far."""

    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    batches_per_epoch: int = 300
    max_epochs: int = 200
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    early_stop_patience: int = 30
    grad_clip_norm: float | None = None
    eval_batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.batches_per_epoch) <= 0:
            raise ContractError("learning rate, batch size and batches/epoch must be positive")
        if self.max_epochs < 0 or self.weight_decay < 0:
            raise ContractError("epochs and weight decay must be nonnegative")
        for name in ("plateau_patience", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be a positive integer")


@dataclass
class MetricsReport:
    mae: float
    mse: float
    per_horizon_mae: list[float]
    per_horizon_counts: list[int]
    n_valid: int


@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    best_val_mae: float
    history: list[dict]
    epochs_run: int


@dataclass
class DataBundle:
    """Everything the optimisation loop needs about one dataset."""

    panel: Panel
    scaler: Scaler
    sim_mask: np.ndarray  # simulated validity, same shape as panel.mask
    train: list[WindowSample]
    val: list[WindowSample]
    test: list[WindowSample]

    def split(self, name: str) -> list[WindowSample]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    @property
    def combined_missing_fraction(self) -> float:
        return float(1.0 - (self.panel.mask * self.sim_mask).mean())


@dataclass
class AssembledBatch:
    x: np.ndarray  # (W, B*N, d_x), scaled
    m: np.ndarray  # simulated-and-original input validity
    u: np.ndarray
    targets: list[np.ndarray]  # per horizon step, (B*N, d_x), scaled
    target_masks: list[np.ndarray]


def assemble_batch(bundle: DataBundle, samples: list[WindowSample], mask_targets: bool) -> AssembledBatch:
    """Stack windows along the node axis and combine the mask policies.

    Inputs are always masked by the simulated pattern; targets are only
    masked during training (evaluation scores against originally-valid data).
    """
    xs, ms, us, ys, mts = [], [], [], [], []
    w_len = samples[0].x_window.shape[0]
    h_len = samples[0].x_target.shape[0]
    for s in samples:
        sim_in = bundle.sim_mask[s.start : s.start + w_len]
        sim_out = bundle.sim_mask[s.start + w_len : s.start + w_len + h_len]
        xs.append(bundle.scaler.apply(s.x_window))
        ms.append(s.m_window * sim_in)
        us.append(s.u_window)
        ys.append(bundle.scaler.apply(s.x_target))
        mts.append(s.m_target * sim_out if mask_targets else s.m_target)
    x = np.concatenate(xs, axis=1)
    m = np.concatenate(ms, axis=1)
    u = np.concatenate(us, axis=1)
    y = np.concatenate(ys, axis=1)
    mt = np.concatenate(mts, axis=1)
    return AssembledBatch(
        x=x, m=m, u=u,
        targets=[y[h] for h in range(h_len)],
        target_masks=[mt[h] for h in range(h_len)],
    )


# -- loss and metrics -------------------------------------------------------------


def masked_mae_loss(preds, targets, masks) -> Tensor:
    """Differentiable masked absolute-error loss.

    `preds` is a Tensor or a list of Tensors; targets/masks are matching
    arrays. Each (step, node) row contributes the mean absolute error over
    its valid channels; rows with no valid channel are skipped, and the loss
    is the mean over contributing rows. Gradients are exactly zero at masked
    entries.
    """
    if isinstance(preds, Tensor):
        preds, targets, masks = [preds], [targets], [masks]
    total = None
    contributing = 0
    for pred, target, mask in zip(preds, targets, masks):
        target = np.asarray(target, dtype=np.float64).reshape(pred.data.shape)
        mask = np.asarray(mask, dtype=np.float64).reshape(pred.data.shape)
        row_valid = mask.sum(axis=-1)
        weights = np.divide(1.0, row_valid, out=np.zeros_like(row_valid), where=row_valid > 0)
        contributing += int(np.count_nonzero(row_valid))
        err = ad.mul(ad.absolute(ad.sub(pred, ad.constant(target))), ad.constant(mask))
        piece = ad.reduce_sum(ad.mul(ad.reduce_sum(err, axis=pred.data.ndim - 1), ad.constant(weights)))
        total = piece if total is None else ad.add(total, piece)
    if contributing == 0:
        raise ContractError("mask selects no valid target entries")
    return ad.mul(total, 1.0 / contributing)


def masked_metrics(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> tuple[float, float, int]:
    """(masked MAE, masked MSE, valid count) over scalar entries."""
    diff = np.abs(pred - target) * mask
    n = int(mask.sum())
    if n == 0:
        return float("nan"), float("nan"), 0
    return float(diff.sum() / n), float(((pred - target) ** 2 * mask).sum() / n), n


# -- optimiser --------------------------------------------------------------------


class OptimState:
    """First/second moment accumulators plus the live learning rate."""

    def __init__(self, params: list[Parameter], learning_rate: float):
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}
        self.step = 0
        self.lr = learning_rate


def adamw_step(
    params: list[Parameter],
    state: OptimState,
    weight_decay: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Decoupled-weight-decay adaptive-moment update over accumulated gradients."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise ContractError(f"non-finite gradient in parameter {p.name!r}")
    state.step += 1
    t = state.step
    for p in params:
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad * p.grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.value -= state.lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.value)


def clip_gradients(params: list[Parameter], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad**2).sum()) for p in params)))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for p in params:
            p.grad *= factor
    return total


@dataclass
class PlateauScheduler:
    """Halve the rate when the metric stops strictly improving."""

    patience: int
    factor: float
    best: float = float("inf")
    stale: int = 0

    def update(self, state: OptimState, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                state.lr *= self.factor
                self.stale = 0
        return state.lr


# -- evaluation ---------------------------------------------------------------------


def _batched(seq: list, size: int):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def predict_windows(model: Model, bundle: DataBundle, samples: list[WindowSample], batch_size: int):
    """Yield (samples, predictions in original units) chunk by chunk."""
    for chunk in _batched(samples, batch_size):
        batch = assemble_batch(bundle, chunk, mask_targets=False)
        bf = model.forward_batch(batch.x, batch.m, batch.u, len(chunk), record_gradients=False)
        scaled = np.stack([t.data for t in bf.preds])  # (H, B*N, d_x)
        yield chunk, bundle.scaler.invert(scaled), batch


def evaluate(model: Model, bundle: DataBundle, split: str, batch_size: int = 64) -> MetricsReport:
    """Masked metrics on originally-valid targets, inputs masked by simulation."""
    samples = bundle.split(split)
    horizon = model.config.horizon
    abs_sum = np.zeros(horizon)
    sq_sum = np.zeros(horizon)
    counts = np.zeros(horizon, dtype=np.int64)
    for chunk, preds, _ in predict_windows(model, bundle, samples, batch_size):
        target = np.concatenate([s.x_target for s in chunk], axis=1)
        mask = np.concatenate([s.m_target for s in chunk], axis=1)
        diff = preds - target
        abs_sum += (np.abs(diff) * mask).sum(axis=(1, 2))
        sq_sum += (diff**2 * mask).sum(axis=(1, 2))
        counts += mask.sum(axis=(1, 2)).astype(np.int64)
    n = int(counts.sum())
    per_h = [float(a / c) if c else float("nan") for a, c in zip(abs_sum, counts)]
    return MetricsReport(
        mae=float(abs_sum.sum() / n) if n else float("nan"),
        mse=float(sq_sum.sum() / n) if n else float("nan"),
        per_horizon_mae=per_h,
        per_horizon_counts=[int(c) for c in counts],
        n_valid=n,
    )


def persistence_metrics(bundle: DataBundle, split: str, horizon: int) -> MetricsReport:
    """Last-valid-observation baseline under the same evaluation protocol."""
    from .model import last_value_imputation

    abs_sum = np.zeros(horizon)
    sq_sum = np.zeros(horizon)
    counts = np.zeros(horizon, dtype=np.int64)
    for s in bundle.split(split):
        w_len = s.x_window.shape[0]
        sim_in = bundle.sim_mask[s.start : s.start + w_len]
        scaled = bundle.scaler.apply(s.x_window)
        imputed = last_value_imputation(scaled, s.m_window * sim_in)
        pred = bundle.scaler.invert(np.repeat(imputed[-1][None], horizon, axis=0))
        diff = pred - s.x_target
        abs_sum += (np.abs(diff) * s.m_target).sum(axis=(1, 2))
        sq_sum += (diff**2 * s.m_target).sum(axis=(1, 2))
        counts += s.m_target.sum(axis=(1, 2)).astype(np.int64)
    n = int(counts.sum())
    return MetricsReport(
        mae=float(abs_sum.sum() / n) if n else float("nan"),
        mse=float(sq_sum.sum() / n) if n else float("nan"),
        per_horizon_mae=[float(a / c) if c else float("nan") for a, c in zip(abs_sum, counts)],
        per_horizon_counts=[int(c) for c in counts],
        n_valid=n,
    )


# -- loop ---------------------------------------------------------------------------


def train(model: Model, bundle: DataBundle, cfg: TrainConfig) -> TrainResult:
    """Mini-batch training; returns the snapshot with minimal validation MAE.

    Batches are drawn uniformly with replacement from the training windows,
    with inputs and targets both masked by the simulated pattern. Validation
    after each epoch is masked-input / original-target. Training stops early
    after `early_stop_patience` epochs without strict improvement.
    """
    if not bundle.train or not bundle.val:
        raise ContractError("training and validation splits must be non-empty")
    params = model.parameters()
    state = OptimState(params, cfg.learning_rate)
    scheduler = PlateauScheduler(patience=cfg.plateau_patience, factor=cfg.plateau_factor)
    best_snapshot = {p.name: p.value.copy() for p in params}
    best_val = float("inf")
    stale = 0
    history: list[dict] = []
    epochs_run = 0

    for epoch in range(cfg.max_epochs):
        rng = stream_rng(cfg.seed, f"batches-{epoch}")
        epoch_losses = []
        for batch_idx in range(cfg.batches_per_epoch):
            picks = rng.integers(0, len(bundle.train), size=cfg.batch_size)
            batch = assemble_batch(bundle, [bundle.train[i] for i in picks], mask_targets=True)
            bf = model.forward_batch(batch.x, batch.m, batch.u, cfg.batch_size)
            loss = masked_mae_loss(bf.preds, batch.targets, batch.target_masks)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batch_idx}", history
                )
            model.zero_grads()
            bf.tape.backward(loss)
            if cfg.grad_clip_norm is not None:
                clip_gradients(params, cfg.grad_clip_norm)
            adamw_step(params, state, weight_decay=cfg.weight_decay)
            epoch_losses.append(float(loss.data))
        epochs_run = epoch + 1
        val = evaluate(model, bundle, "val", batch_size=cfg.eval_batch_size)
        if val.mae < best_val:
            best_val = val.mae
            best_snapshot = {p.name: p.value.copy() for p in params}
            stale = 0
        else:
            stale += 1
        lr_now = scheduler.update(state, val.mae)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_mae": val.mae,
                "lr": lr_now,
            }
        )
        if stale >= cfg.early_stop_patience:
            break

    for p in params:
        p.value[...] = best_snapshot[p.name]
    return TrainResult(
        best_params=best_snapshot, best_val_mae=best_val, history=history, epochs_run=epochs_run
    )


# -- checkpoints ----------------------------------------------------------------------


def save_checkpoint(out_dir, model: Model, metadata: dict) -> None:
    """JSON manifest plus little-endian float64 blob in manifest order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": 1,
        "model_config": asdict(model.config),
        "params": [{"name": p.name, "shape": list(p.value.shape)} for p in model.parameters()],
        "metadata": metadata,
    }
    blob = b"".join(p.value.astype("<f8").tobytes() for p in model.parameters())
    tmp_json = out / "checkpoint.json.tmp"
    tmp_json.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp_json, out / "checkpoint.json")
    tmp_blob = out / "checkpoint.bin.tmp"
    tmp_blob.write_bytes(blob)
    os.replace(tmp_blob, out / "checkpoint.bin")


def load_checkpoint(ckpt_dir) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    root = Path(ckpt_dir)
    manifest = json.loads((root / "checkpoint.json").read_text())
    raw = (root / "checkpoint.bin").read_bytes()
    values: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 8
        values[entry["name"]] = np.frombuffer(raw[offset : offset + size], dtype="<f8").reshape(shape).copy()
        offset += size
    if offset != len(raw):
        raise ContractError("checkpoint blob length does not match the manifest")
    cfg_dict = dict(manifest["model_config"])
    cfg_dict["decoder_hidden"] = tuple(cfg_dict["decoder_hidden"])
    return ModelConfig(**cfg_dict), values, manifest["metadata"]
