"""Reference predictors and ablation variants.

HistoricalAverage predicts the per-edge training mean of the target row's
time-of-day bucket, so its output depends only on the target timestamp and
its metrics are horizon-invariant under the aligned evaluation protocol.
The gru / unkp / incp builders reuse the model module with the dynamics or
decoder stage swapped; they train and evaluate through the same code paths
as the full model.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .model import Model, ModelConfig, init_params

__all__ = ["HistoricalAverage", "build_model", "gru_direct", "unkp_variant", "incp_variant"]

MODEL_KINDS = ("stden", "gru", "unkp", "incp")
PREDICTOR_KINDS = MODEL_KINDS + ("ha",)


class HistoricalAverage:
    """Per-edge, per-time-of-day-bucket training means on the raw scale."""

    kind = "ha"

    def __init__(self, buckets_per_day: int = 288):
        self.buckets = buckets_per_day
        self.bucket_means = None
        self.global_means = None

    def fit(self, train_rows: np.ndarray, row_offset: int = 0):
        """train_rows: (R, |E|) raw flows whose first row is series row `row_offset`."""
        rows = np.asarray(train_rows, dtype=np.float64)
        if rows.size == 0:
            raise ValueError("training split is empty")
        edges = rows.shape[1]
        self.global_means = rows.mean(axis=0)
        self.bucket_means = np.tile(self.global_means, (self.buckets, 1))
        buckets = (np.arange(rows.shape[0]) + row_offset) % self.buckets
        for b in range(self.buckets):
            mask = buckets == b
            if mask.any():
                self.bucket_means[b] = rows[mask].mean(axis=0)
        return self

    @classmethod
    def fit_dataset(cls, ds: Dataset, buckets_per_day: int = 288):
        return cls(buckets_per_day).fit(ds.train_rows())

    def predict_rows(self, timestamps) -> np.ndarray:
        """Raw-scale predictions for the given series row indices."""
        if self.bucket_means is None:
            raise RuntimeError("fit() has not been called")
        stamps = np.asarray(timestamps, dtype=np.int64)
        return self.bucket_means[stamps % self.buckets]


def build_model(kind: str, net, cfg: ModelConfig, seed: int) -> Model:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown trainable model kind {kind!r}")
    return Model(net, cfg, init_params(net, cfg, seed, kind=kind), kind=kind)


def gru_direct(net, cfg: ModelConfig, seed: int) -> Model:
    """Sequence-to-sequence GRU: encoder plus a direct affine head, no ODE."""
    return build_model("gru", net, cfg, seed)


def unkp_variant(net, cfg: ModelConfig, seed: int) -> Model:
    """Dynamics replaced by a one-hidden-layer MLP of width 4*n*d."""
    return build_model("unkp", net, cfg, seed)


def incp_variant(net, cfg: ModelConfig, seed: int) -> Model:
    """Volume factor removed: dz/dt = -tanh(alpha * Lap z)."""
    return build_model("incp", net, cfg, seed)
