"""Shared fixtures: the default synthetic dataset and a lazy trained-model zoo.

Training runs are the expensive part of the gate tests, so they are memoized
per (kind, seed) for the whole session and their wall-clock cost is recorded;
the learning-recovery test asserts its runtime budget from those records.
"""

import time

import numpy as np
import pytest

from stden.baselines import HistoricalAverage, build_model
from stden.data import SynthConfig, random_network, simulate, window_and_split
from stden.model import ModelConfig
from stden.train import HORIZON_STEPS, TrainConfig, aligned_timestamps, train


class ModelZoo:
    """Default dataset plus lazily trained, memoized models."""

    def __init__(self):
        t0 = time.perf_counter()
        self.config = SynthConfig()
        self.net = random_network(self.config)
        self.sim = simulate(self.net, self.config)
        self.dataset = window_and_split(self.sim.flows, history_len=12, horizon=12)
        self.data_seconds = time.perf_counter() - t0
        self.ha = HistoricalAverage.fit_dataset(self.dataset)
        self._models = {}
        self._train_seconds = {}

    def get(self, kind: str, seed: int):
        key = (kind, seed)
        if key not in self._models:
            model = build_model(kind, self.net, ModelConfig(), seed=seed)
            t0 = time.perf_counter()
            train(model, self.dataset, TrainConfig(), seed=seed)
            self._train_seconds[key] = time.perf_counter() - t0
            self._models[key] = model
        return self._models[key]

    def train_seconds(self, kind: str) -> float:
        return sum(v for (k, _), v in self._train_seconds.items() if k == kind)

    def test_target(self):
        stamps = aligned_timestamps(self.dataset, "test", HORIZON_STEPS)
        return stamps, self.dataset.series.values[stamps]


@pytest.fixture(scope="session")
def zoo():
    return ModelZoo()
