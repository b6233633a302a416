"""Synthetic flow data, CSV ingestion, windowing and causal splitting.

The generator plays the role of a field measurement campaign: a hidden
potential field over nodes evolves under the chosen dynamics (linear or
tanh), gets re-excited once per day (288 five-minute steps) by a recurring
smooth demand template plus day-to-day jitter, and is observed as noisy edge
flows f_t = -grad(z_t) + noise. Re-excitation fields are projected to leave
the conserved total sum(z_i / phi_i) unchanged, so the linear mode conserves
it over the whole series, not just between excitations.

Windows are contiguous stride-1 slices; the split is 7:1:2 by time order
(no shuffling across boundaries) and the normalizer is fit on the rows the
training windows cover.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import RoadNetwork, gradient_values
from .model import linear_pef_dynamics, pef_dynamics
from .odeint import SolverConfig, integrate

__all__ = [
    "SynthConfig",
    "FlowSeries",
    "Normalizer",
    "Dataset",
    "SimResult",
    "random_network",
    "smooth_field",
    "simulate",
    "window_and_split",
    "save_csv",
    "load_csv",
    "save_pef_csv",
    "load_pef_csv",
    "save_phi_csv",
    "load_phi_csv",
]


@dataclass
class SynthConfig:
    nodes: int = 50
    avg_out_degree: float = 3.0
    seed: int = 0
    steps: int = 4032  # 14 days of 5-minute intervals
    alpha_star: float = 0.2
    mode: str = "tanh"
    smoothness: int = 12
    noise: float = 0.05  # observation noise std as a fraction of clean flow std
    z0_scale: float = 1.0
    interval_time: float = 0.07  # dynamics-time units per 5-minute interval
    excite_period: int = 288
    day_jitter: float = 2.0  # day-to-day deviation around the excitation template
    jitter_rank: int = 2  # independent smooth factors spanning the daily deviations

    def __post_init__(self):
        if self.mode not in ("linear", "tanh"):
            raise ValueError(f"mode must be 'linear' or 'tanh', got {self.mode!r}")
        if self.alpha_star <= 0:
            raise ValueError("alpha_star must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.excite_period < 1:
            raise ValueError("excite_period must be positive")
        if self.day_jitter < 0:
            raise ValueError("day_jitter must be non-negative")
        if self.jitter_rank < 1:
            raise ValueError("jitter_rank must be positive")


@dataclass
class FlowSeries:
    values: np.ndarray  # (S, |E|), row per 5-minute step, column per edge id
    interval_minutes: float = 5.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"flow series must be 2-d, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("flow series contains non-finite entries")

    @property
    def steps(self):
        return self.values.shape[0]

    @property
    def edge_count(self):
        return self.values.shape[1]


# -- generation ----------------------------------------------------------------


def random_network(cfg: SynthConfig) -> RoadNetwork:
    """Connected directed graph: spanning tree, extra arcs, 20% reciprocals."""
    n = cfg.nodes
    if n < 3:
        raise ValueError(f"need at least 3 nodes, got {n}")
    target = int(round(n * cfg.avg_out_degree))
    base_target = max(n - 1, int(round(target / 1.2)))
    if base_target > n * (n - 1):
        raise ValueError(
            f"average out-degree {cfg.avg_out_degree} infeasible for {n} nodes"
        )
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    edges = set()
    for k in range(1, n):
        a, b = int(order[rng.integers(0, k)]), int(order[k])
        edges.add((a, b) if rng.integers(0, 2) else (b, a))
    attempts = 0
    while len(edges) < base_target:
        i, j = (int(v) for v in rng.integers(0, n, size=2))
        if i != j:
            edges.add((i, j))
        attempts += 1
        if attempts > 200 * base_target:
            raise ValueError("could not reach the requested edge count")
    edge_list = sorted(edges)
    k_recip = int(round(0.2 * len(edge_list)))
    pick = rng.choice(len(edge_list), size=k_recip, replace=False) if k_recip else []
    for idx in sorted(int(p) for p in pick):
        i, j = edge_list[idx]
        if (j, i) not in edges:
            edges.add((j, i))
            edge_list.append((j, i))
    return RoadNetwork(n, [(i, j, 1.0) for i, j in edge_list])


def smooth_field(rng, net: RoadNetwork, rounds: int, scale: float) -> np.ndarray:
    """Gaussian node field low-passed by repeated neighbor averaging, (n, 1)."""
    n = net.node_count
    adj = np.zeros((n, n))
    adj[net.src, net.dst] = 1.0
    adj[net.dst, net.src] = 1.0
    degree = np.maximum(adj.sum(axis=1), 1.0)
    z = rng.normal(size=n)
    for _ in range(rounds):
        z = 0.5 * z + 0.5 * (adj @ z) / degree
    spread = z.std()
    if spread > 1e-12:
        z = z * (scale / spread)
    return z[:, None]


@dataclass
class SimResult:
    flows: FlowSeries
    pef: np.ndarray  # (S, n) hidden potential rows
    phi_star: np.ndarray
    alpha_star: float


def simulate(net: RoadNetwork, cfg: SynthConfig) -> SimResult:
    """Evolve the hidden field and observe noisy edge flows.

    Returns the flow series, the ground-truth potential rows, and the true
    (phi*, alpha*) that produced them.
    """
    rng = np.random.default_rng(cfg.seed)
    n = net.node_count
    phi_star = np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=n))
    alpha = np.array([cfg.alpha_star])
    if cfg.mode == "linear":
        dynamics = linear_pef_dynamics(net, phi_star, alpha)
    else:

        def dynamics(z, t):
            return pef_dynamics(net, phi_star, alpha, z)

    solver = SolverConfig(method="dopri5", rtol=1e-6, atol=1e-9, max_nfe=10_000_000)
    inv_phi = 1.0 / phi_star

    # recurring daily demand: a fixed template field plus day-to-day jitter
    # spanned by a few fixed smooth factors (commuting-pattern analog)
    template = smooth_field(rng, net, cfg.smoothness, cfg.z0_scale)
    factors = np.concatenate(
        [smooth_field(rng, net, cfg.smoothness, cfg.z0_scale) for _ in range(cfg.jitter_rank)],
        axis=1,
    )
    # orthonormalize so daily deviations have stable scale, then restore field std
    factors, _ = np.linalg.qr(factors - factors.mean(axis=0))
    factors *= cfg.z0_scale / np.maximum(factors.std(axis=0), 1e-12)
    coeff_std = cfg.day_jitter / np.sqrt(cfg.jitter_rank)

    def excitation():
        coeffs = rng.normal(0.0, coeff_std, size=cfg.jitter_rank)
        return template + (factors @ coeffs)[:, None]

    z = excitation()
    pef_rows = [z[:, 0].copy()]
    emitted = 1
    while emitted < cfg.steps:
        block = min(cfg.excite_period, cfg.steps - emitted)
        times = np.arange(block + 1, dtype=np.float64) * cfg.interval_time
        traj = integrate(dynamics, z, times, solver)
        for state in traj.states[1:]:
            pef_rows.append(state[:, 0].copy())
        emitted += block
        z = traj.states[-1]
        if emitted < cfg.steps:
            bump = excitation()
            # keep the excitation neutral for the conserved total sum(z/phi)
            bump = bump - (bump[:, 0] * inv_phi).sum() / inv_phi.sum()
            z = z + bump

    pef = np.stack(pef_rows, axis=0)
    clean = np.stack([-gradient_values(net, row[:, None])[:, 0] for row in pef], axis=0)
    if cfg.noise > 0:
        noise_std = cfg.noise * clean.std()
        flows = clean + rng.normal(0.0, noise_std, size=clean.shape)
    else:
        flows = clean
    return SimResult(FlowSeries(flows), pef, phi_star, cfg.alpha_star)


# -- windowing and splitting -----------------------------------------------


@dataclass
class Normalizer:
    mean: float
    std: float

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


@dataclass
class Dataset:
    series: FlowSeries
    history_len: int
    horizon: int
    train_starts: np.ndarray
    val_starts: np.ndarray
    test_starts: np.ndarray
    normalizer: Normalizer

    @property
    def window_count(self):
        return len(self.train_starts) + len(self.val_starts) + len(self.test_starts)

    def window(self, start: int):
        """(history, target) views for the window starting at row `start`."""
        t, h = self.history_len, self.horizon
        v = self.series.values
        return v[start : start + t], v[start + t : start + t + h]

    def batch(self, starts, normalized=True):
        """Stack windows into (B, T, |E|) histories and (B, H, |E|) targets."""
        hists, targets = [], []
        for s in starts:
            hist, target = self.window(int(s))
            hists.append(hist)
            targets.append(target)
        h = np.stack(hists, axis=0)
        y = np.stack(targets, axis=0)
        if normalized:
            return self.normalizer.normalize(h), self.normalizer.normalize(y)
        return h, y

    def train_rows(self):
        """The raw series rows covered by training windows."""
        if len(self.train_starts) == 0:
            return self.series.values[:0]
        last = int(self.train_starts[-1]) + self.history_len + self.horizon
        return self.series.values[:last]


def window_and_split(series: FlowSeries, history_len: int = 12, horizon: int = 12) -> Dataset:
    """Stride-1 windows split 7:1:2 by start time, normalizer from train rows."""
    span = history_len + horizon
    count = series.steps - span + 1
    if count < 1:
        raise ValueError(
            f"series has {series.steps} steps, need at least {span} for one window"
        )
    n_train = int(np.floor(0.7 * count))
    n_val = int(np.floor(0.1 * count))
    if n_train == 0:
        n_train, n_val = count, 0
    starts = np.arange(count)
    train = starts[:n_train]
    val = starts[n_train : n_train + n_val]
    test = starts[n_train + n_val :]
    train_rows = series.values[: n_train + span - 1]
    mean = float(train_rows.mean())
    std = float(train_rows.std())
    if std <= 0:
        raise ValueError("training rows are constant; cannot z-score")
    return Dataset(series, history_len, horizon, train, val, test, Normalizer(mean, std))


# -- CSV formats -------------------------------------------------------------
# Flows: header "t,e0,e1,..."; potentials: header "t,v0,v1,...". One row per
# step, t = step index, 17 significant digits.


def _write_matrix(stream, prefix, values):
    cols = values.shape[1]
    stream.write("t," + ",".join(f"{prefix}{j}" for j in range(cols)) + "\n")
    for t, row in enumerate(values):
        stream.write(str(t) + "," + ",".join(f"{v:.17g}" for v in row) + "\n")


def _read_matrix(stream, prefix, what):
    header = stream.readline().strip()
    fields = header.split(",")
    expected = ["t"] + [f"{prefix}{j}" for j in range(len(fields) - 1)]
    if fields != expected:
        raise ValueError(f"{what}: bad header {header!r}")
    cols = len(fields) - 1
    rows = []
    for lineno, line in enumerate(stream, start=2):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != cols + 1:
            raise ValueError(f"{what}: row {lineno} has {len(parts) - 1} value cells, expected {cols}")
        try:
            rows.append([float(p) for p in parts[1:]])
        except ValueError:
            bad = next(k for k, p in enumerate(parts[1:]) if not _is_float(p))
            raise ValueError(f"{what}: row {lineno}, column {fields[bad + 1]}: cannot parse {parts[bad + 1]!r}") from None
    if not rows:
        raise ValueError(f"{what}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def _is_float(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def _open_for(stream_or_path, mode):
    if hasattr(stream_or_path, "read") or hasattr(stream_or_path, "write"):
        return stream_or_path, False
    return open(stream_or_path, mode, encoding="utf-8", newline="\n"), True


def save_csv(path, series: FlowSeries):
    stream, close = _open_for(path, "w")
    try:
        _write_matrix(stream, "e", series.values)
    finally:
        if close:
            stream.close()


def load_csv(path, expected_edges=None) -> FlowSeries:
    stream, close = _open_for(path, "r")
    try:
        values = _read_matrix(stream, "e", "flow csv")
    finally:
        if close:
            stream.close()
    if expected_edges is not None and values.shape[1] != expected_edges:
        raise ValueError(
            f"flow csv has {values.shape[1]} edge columns, network has {expected_edges}"
        )
    return FlowSeries(values)


def save_pef_csv(path, pef: np.ndarray):
    stream, close = _open_for(path, "w")
    try:
        _write_matrix(stream, "v", np.asarray(pef, dtype=np.float64))
    finally:
        if close:
            stream.close()


def load_pef_csv(path) -> np.ndarray:
    stream, close = _open_for(path, "r")
    try:
        return _read_matrix(stream, "v", "potential csv")
    finally:
        if close:
            stream.close()


def save_phi_csv(path, phi: np.ndarray):
    """Per-node volume factors as a one-row matrix (columns p0..p{n-1})."""
    stream, close = _open_for(path, "w")
    try:
        _write_matrix(stream, "p", np.asarray(phi, dtype=np.float64).reshape(1, -1))
    finally:
        if close:
            stream.close()


def load_phi_csv(path) -> np.ndarray:
    stream, close = _open_for(path, "r")
    try:
        values = _read_matrix(stream, "p", "volume csv")
    finally:
        if close:
            stream.close()
    if values.shape[0] != 1:
        raise ValueError(f"volume csv must have exactly one row, got {values.shape[0]}")
    return values[0]
