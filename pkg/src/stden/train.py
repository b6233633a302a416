"""Training loop, losses, optimizer, and evaluation metrics.

Evaluation protocol: metrics for horizons {3, 6, 12} are computed over one
shared set of target timestamps (the timestamps predictable by every
requested horizon from inside the split). The horizon-k prediction for
timestamp u comes from the window starting at u - T - k + 1. Because the
target rows are identical across horizons, any predictor whose output
depends only on the target timestamp (historical average) scores exactly
the same metrics at every horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffengine as de
from .data import Dataset

__all__ = [
    "TrainConfig",
    "MetricsRecord",
    "EpochStats",
    "TrainResult",
    "TrainingDiverged",
    "nll_loss",
    "kl_penalty",
    "Adam",
    "clip_global_norm",
    "train",
    "evaluate",
    "compute_metrics",
    "aggregate_mean",
    "write_metrics",
    "write_history_csv",
    "HORIZON_STEPS",
]

HALF_LOG_2PI = 0.5 * float(np.log(2.0 * np.pi))
HORIZON_STEPS = (3, 6, 12)  # 15, 30, 60 minutes at 5-minute intervals


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 10
    grad_clip_norm: float = 5.0
    kl_weight: float = 0.0
    seeds: list = field(default_factory=lambda: list(range(7)))
    obs_sigma: float = 1.0
    # budget knobs: None means use everything (full epochs, full val split)
    batches_per_epoch: int | None = 30
    val_windows: int | None = 128

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size, max_epochs must be positive")
        if self.patience < 0 or self.grad_clip_norm <= 0 or self.kl_weight < 0:
            raise ValueError("patience, grad_clip_norm, kl_weight must be non-negative")
        if self.obs_sigma <= 0:
            raise ValueError("obs_sigma must be positive")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ValueError("batches_per_epoch must be positive when set")
        if self.val_windows is not None and self.val_windows < 1:
            raise ValueError("val_windows must be positive when set")


# -- losses -------------------------------------------------------------------


def nll_loss(pred, target, obs_sigma: float = 1.0):
    """Gaussian negative log-likelihood per entry, averaged.

    mean[(pred - target)^2 / (2 sigma^2) + ln sigma + 0.5 ln 2 pi]; at
    sigma=1 the argmin coincides with the mean-squared-error argmin.
    """
    if obs_sigma <= 0:
        raise ValueError("obs_sigma must be positive")
    pred = pred if isinstance(pred, de.Tensor) else de.Tensor(pred)
    target = target if isinstance(target, de.Tensor) else de.Tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    err = de.subtract(pred, target)
    quad = de.scale(de.mean(de.hadamard(err, err)), 0.5 / (obs_sigma * obs_sigma))
    return de.add(quad, de.Tensor(np.log(obs_sigma) + HALF_LOG_2PI))


def kl_penalty(mu, sigma):
    """Mean KL(N(mu, sigma) || N(0, 1)) per entry: 0.5(mu^2+sigma^2-1-2 ln sigma)."""
    mu = mu if isinstance(mu, de.Tensor) else de.Tensor(mu)
    sigma = sigma if isinstance(sigma, de.Tensor) else de.Tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("sigma must be positive")
    total = de.add(de.hadamard(mu, mu), de.hadamard(sigma, sigma))
    total = de.add(total, de.scale(de.log(sigma), -2.0))
    total = de.subtract(total, de.Tensor(np.ones(1)))
    return de.scale(de.mean(total), 0.5)


# -- optimizer ----------------------------------------------------------------


def clip_global_norm(store: de.ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint 2-norm is at most max_norm."""
    total = 0.0
    for g in store.grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for name in store.grads:
            store.grads[name] = store.grads[name] * factor
    return norm


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, store: de.ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, param in self.store.params.items():
            g = self.store.grads[name]
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient for {name!r}")
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- metrics ------------------------------------------------------------------

MAPE_FLOOR = 1e-3


def compute_metrics(pred, target):
    """(MAE, RMSE, MAPE%) with MAPE masked to |target| > 1e-3, None if empty."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = np.abs(pred - target)
    mae = float(diff.mean())
    rmse = float(np.sqrt((diff * diff).mean()))
    mask = np.abs(target) > MAPE_FLOOR
    mape = float((diff[mask] / np.abs(target[mask])).mean() * 100.0) if mask.any() else None
    return mae, rmse, mape


@dataclass
class MetricsRecord:
    model: str
    seed: int
    split: str
    horizon_steps: int
    mae: float
    rmse: float
    mape: float | None
    count: int

    @property
    def horizon_minutes(self):
        return 5 * self.horizon_steps


def write_metrics(path, records):
    """One key=value line per record; mape omitted when undefined."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            parts = [
                f"model={r.model}",
                f"seed={r.seed}",
                f"split={r.split}",
                f"horizon_steps={r.horizon_steps}",
                f"horizon_minutes={r.horizon_minutes}",
                f"mae={r.mae:.17g}",
                f"rmse={r.rmse:.17g}",
            ]
            if r.mape is not None:
                parts.append(f"mape={r.mape:.17g}")
            parts.append(f"count={r.count}")
            fh.write(" ".join(parts) + "\n")


def read_metrics(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            kv = dict(item.split("=", 1) for item in line.split(" "))
            records.append(
                MetricsRecord(
                    model=kv["model"],
                    seed=int(kv["seed"]),
                    split=kv["split"],
                    horizon_steps=int(kv["horizon_steps"]),
                    mae=float(kv["mae"]),
                    rmse=float(kv["rmse"]),
                    mape=float(kv["mape"]) if "mape" in kv else None,
                    count=int(kv["count"]),
                )
            )
    return records


def aggregate_mean(records):
    """Arithmetic mean over seeds per (model, split, horizon)."""
    groups = {}
    for r in records:
        groups.setdefault((r.model, r.split, r.horizon_steps), []).append(r)
    out = []
    for (model, split, horizon), rs in sorted(groups.items()):
        mapes = [r.mape for r in rs if r.mape is not None]
        out.append(
            MetricsRecord(
                model=model,
                seed=-1,
                split=split,
                horizon_steps=horizon,
                mae=float(np.mean([r.mae for r in rs])),
                rmse=float(np.mean([r.rmse for r in rs])),
                mape=float(np.mean(mapes)) if len(mapes) == len(rs) else None,
                count=int(np.sum([r.count for r in rs])),
            )
        )
    return out


# -- evaluation ---------------------------------------------------------------


def _split_starts(ds: Dataset, split: str):
    starts = {"train": ds.train_starts, "val": ds.val_starts, "test": ds.test_starts}[split]
    if len(starts) == 0:
        raise ValueError(f"{split} split is empty")
    return starts


def aligned_timestamps(ds: Dataset, split: str, horizons):
    """Target rows predictable at every requested horizon from this split."""
    starts = _split_starts(ds, split)
    t = ds.history_len
    lo = int(starts[0]) + t + max(horizons) - 1
    hi = int(starts[-1]) + t + min(horizons) - 1
    if hi < lo:
        raise ValueError(
            f"{split} split has too few windows for aligned horizons {tuple(horizons)}"
        )
    return np.arange(lo, hi + 1)


def predict_at(model, ds: Dataset, timestamps, horizon: int, batch_size: int = 64):
    """Denormalized horizon-k predictions for the given target rows."""
    t = ds.history_len
    starts = np.asarray(timestamps) - t - horizon + 1
    rows = []
    for lo in range(0, len(starts), batch_size):
        chunk = starts[lo : lo + batch_size]
        hists, _ = ds.batch(chunk)
        out = model.forward_batch(hists, horizon=horizon)
        rows.append(out.flows[horizon - 1].data.T)
    return ds.normalizer.denormalize(np.concatenate(rows, axis=0))


def evaluate(model, ds: Dataset, split: str = "test", horizons=HORIZON_STEPS,
             batch_size: int = 64, model_name: str | None = None, seed: int = 0):
    """MetricsRecord per horizon over the aligned timestamp set (denormalized)."""
    horizons = tuple(int(k) for k in horizons)
    stamps = aligned_timestamps(ds, split, horizons)
    target = ds.series.values[stamps]
    name = model_name if model_name is not None else getattr(model, "kind", "model")
    records = []
    for k in horizons:
        if hasattr(model, "predict_rows"):  # timestamp-only predictors (HA)
            pred = model.predict_rows(stamps)
        else:
            pred = predict_at(model, ds, stamps, k, batch_size)
        mae, rmse, mape = compute_metrics(pred, target)
        records.append(
            MetricsRecord(
                model=name,
                seed=seed,
                split=split,
                horizon_steps=k,
                mae=mae,
                rmse=rmse,
                mape=mape,
                count=int(target.size),
            )
        )
    return records


# -- training loop ------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_mae: float
    nfe: int


@dataclass
class TrainResult:
    history: list
    best_val_mae: float
    best_epoch: int
    nfe_total: int


def write_history_csv(path, history):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,val_mae,nfe\n")
        for h in history:
            fh.write(f"{h.epoch},{h.train_loss:.17g},{h.val_mae:.17g},{h.nfe}\n")


def _target_columns(targets):
    # (B, K, m) -> (K*m, B) matching concat of per-step (m, B) flow tensors
    return np.ascontiguousarray(targets.transpose(1, 2, 0).reshape(-1, targets.shape[0]))


def _val_mae(model, ds: Dataset, starts, batch_size: int) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(starts), batch_size):
        chunk = starts[lo : lo + batch_size]
        hists, _ = ds.batch(chunk)
        _, raw_targets = ds.batch(chunk, normalized=False)
        out = model.forward_batch(hists)
        pred = np.stack([f.data.T for f in out.flows], axis=1)  # (B, H, m)
        pred = ds.normalizer.denormalize(pred)
        total += float(np.abs(pred - raw_targets).sum())
        count += raw_targets.size
    return total / count


def train(model, ds: Dataset, cfg: TrainConfig, seed: int = 0) -> TrainResult:
    """Minibatch NLL training with per-example reparametrization noise.

    Early-stops on denormalized validation MAE with the configured patience
    and restores the best-validation parameters before returning. Falls back
    to the epoch training loss as the stopping signal when the validation
    split is empty.
    """
    rng = np.random.default_rng(seed)
    nd = model.net.node_count * model.cfg.latent_channels
    uses_eps = model.kind != "gru"
    adam = Adam(model.store, cfg.learning_rate)
    train_starts = np.array(ds.train_starts)
    if len(train_starts) == 0:
        raise ValueError("train split is empty")
    val_starts = np.array(ds.val_starts)
    if cfg.val_windows is not None and len(val_starts) > cfg.val_windows:
        idx = np.linspace(0, len(val_starts) - 1, cfg.val_windows).round().astype(int)
        val_starts = val_starts[idx]

    history = []
    best_val = np.inf
    best_epoch = -1
    best_params = {k: v.copy() for k, v in model.store.params.items()}
    bad_epochs = 0
    nfe_total = 0

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(train_starts)
        if cfg.batches_per_epoch is not None:
            order = order[: cfg.batches_per_epoch * cfg.batch_size]
        losses = []
        epoch_nfe = 0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = order[lo : lo + cfg.batch_size]
            hists, targets = ds.batch(chunk)
            eps = rng.standard_normal((len(chunk), nd)) if uses_eps else None
            tape = de.Tape()
            try:
                out = model.forward_batch(hists, eps=eps, tape=tape)
                pred = de.concat(out.flows, axis=0)
                loss = nll_loss(pred, _target_columns(targets), cfg.obs_sigma)
                if cfg.kl_weight > 0 and out.mu is not None:
                    loss = de.add(loss, de.scale(kl_penalty(out.mu, out.sigma), cfg.kl_weight))
            except de.NonFiniteError as err:
                raise TrainingDiverged(f"epoch {epoch}: forward pass non-finite: {err}") from err
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"epoch {epoch}: loss is {value}")
            model.store.zero_grads()
            tape.backward(loss)
            clip_global_norm(model.store, cfg.grad_clip_norm)
            adam.step()
            losses.append(value)
            epoch_nfe += out.nfe
        nfe_total += epoch_nfe
        train_loss = float(np.mean(losses))
        if len(val_starts) > 0:
            val_mae = _val_mae(model, ds, val_starts, max(cfg.batch_size, 32))
        else:
            val_mae = train_loss
        history.append(EpochStats(epoch, train_loss, val_mae, epoch_nfe))
        if val_mae < best_val:
            best_val = val_mae
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.store.params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                break
    for name, value in best_params.items():
        model.store.params[name][:] = value
    return TrainResult(history, float(best_val), best_epoch, nfe_total)
