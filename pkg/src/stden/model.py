"""Latent potential-field forecaster.

Pipeline: a GRU reads the T-step edge-flow history and emits a Gaussian
(mu, sigma) over the initial node potential field; z0 = mu + eps * sigma is
integrated under dz/dt = -phi * tanh(alpha * Lap z) for H unit intervals;
each latent state decodes to edge flows as a linear readout of the negated
edge gradient, which at d=1 with the default readout is exactly
f_e = -(z_i - z_j).

Batching convention: a batch of B latent fields with d channels is one
(n, d*B) matrix whose column c*B + b holds channel c of example b. All
layer math is then expressible as matmuls/hadamards against constant
incidence and ones matrices, so a batched forward pass stays inside the
differentiation tape's fixed primitive set.

Plain-array single-field helpers (pef_dynamics, euler_pef_step, decode,
sample_z0) mirror the tape versions for simulators and tests.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffengine as de
from .graph import RoadNetwork, gradient_values, laplacian_values
from .odeint import SolverConfig, integrate

__all__ = [
    "ModelConfig",
    "Model",
    "Forward",
    "init_params",
    "sample_z0",
    "pef_dynamics",
    "linear_pef_dynamics",
    "euler_pef_step",
    "decode",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "Checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"STDEN1\n"

KIND_CODES = {"stden": 0, "gru": 1, "unkp": 2, "incp": 3}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}

SIGMA_FLOOR = 1e-4


@dataclass
class ModelConfig:
    history_len: int = 12
    horizon: int = 12
    latent_channels: int = 1
    gru_hidden: int = 32
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.history_len < 1 or self.horizon < 1:
            raise ValueError("history_len and horizon must be at least 1")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be at least 1")
        if self.gru_hidden < 1:
            raise ValueError("gru_hidden must be at least 1")


# -- plain-array reference ops ------------------------------------------------


def sample_z0(mu, sigma, eps):
    """z0 = mu + eps * sigma, elementwise."""
    mu, sigma, eps = (np.asarray(a, dtype=np.float64) for a in (mu, sigma, eps))
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    return mu + eps * sigma


def pef_dynamics(net, phi, alpha, z):
    """dz/dt = -phi * tanh(alpha * Lap z), channelwise alpha."""
    z = np.asarray(z, dtype=np.float64)
    return -np.asarray(phi)[:, None] * np.tanh(np.asarray(alpha) * laplacian_values(net, z))


def linear_pef_dynamics(net, phi, alpha):
    """Closure for the linear mode dz/dt = -phi * (alpha * Lap z)."""
    phi = np.asarray(phi, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)

    def dynamics(z, t):
        return -phi[:, None] * (alpha * laplacian_values(net, z))

    return dynamics


def euler_pef_step(net, phi, alpha, z):
    """One explicit linear-mode step: z' = z - phi * (alpha * Lap z)."""
    z = np.asarray(z, dtype=np.float64)
    return z - np.asarray(phi)[:, None] * (np.asarray(alpha) * laplacian_values(net, z))


def decode(net, w, b, states):
    """Read edge flows -(grad z) . w + b off each latent state; (H, |E|)."""
    w = np.asarray(w, dtype=np.float64)
    out = []
    for z in states:
        g = -gradient_values(net, np.asarray(z, dtype=np.float64))
        out.append(g @ w + float(np.asarray(b).reshape(-1)[0]))
    return np.stack(out, axis=0)


# -- parameters ---------------------------------------------------------------


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(net: RoadNetwork, cfg: ModelConfig, seed: int, kind: str = "stden") -> de.ParamStore:
    """Fresh parameter store for the given model kind.

    stden: GRU encoder + (rho, alpha) dynamics + linear gradient readout.
    incp: same minus rho (volume factor forced to 1).
    unkp: same encoder/decoder, dynamics swapped for a one-hidden-layer MLP.
    gru: encoder + direct affine head onto the full H x |E| output.
    """
    if kind not in KIND_CODES:
        raise ValueError(f"unknown model kind {kind!r}")
    n, m = net.node_count, net.edge_count
    d, h = cfg.latent_channels, cfg.gru_hidden
    rng = np.random.default_rng(seed)
    store = de.ParamStore()
    for gate in ("z", "r", "c"):
        store.add(f"enc.W{gate}", _uniform(rng, m, (m, h)))
        store.add(f"enc.U{gate}", _uniform(rng, h, (h, h)))
        store.add(f"enc.b{gate}", np.zeros((1, h)))
    if kind == "gru":
        out_dim = cfg.horizon * m
        store.add("head.W", _uniform(rng, h, (h, out_dim)))
        store.add("head.b", np.zeros((1, out_dim)))
        return store
    store.add("enc.Wout", _uniform(rng, h, (h, 2 * n * d)))
    store.add("enc.bout", np.zeros((1, 2 * n * d)))
    if kind == "stden":
        store.add("dyn.rho", np.full(n, float(np.log(np.e - 1.0))))  # phi starts at 1
        store.add("dyn.alpha", np.full(d, 0.1))
    elif kind == "incp":
        store.add("dyn.alpha", np.full(d, 0.1))
    elif kind == "unkp":
        width = 4 * n * d
        store.add("mlp.W1", _uniform(rng, n * d, (width, n * d)))
        store.add("mlp.b1", np.zeros((width, 1)))
        store.add("mlp.W2", _uniform(rng, width, (n * d, width)))
        store.add("mlp.b2", np.zeros((n * d, 1)))
    store.add("dec.w", np.full(d, 1.0 / d))
    store.add("dec.b", np.zeros(1))
    return store


@dataclass
class Forward:
    """One batched forward pass: decoded flows plus the encoder Gaussian."""

    flows: list  # K tensors of shape (|E|, B)
    mu: object  # (B, n*d) tensor
    sigma: object  # (B, n*d) tensor
    nfe: int
    states: list  # K+1 latent states, (n, d*B)


class Model:
    """A trained or trainable forecaster bound to one road network."""

    def __init__(self, net: RoadNetwork, cfg: ModelConfig, store: de.ParamStore, kind: str = "stden"):
        if kind not in KIND_CODES:
            raise ValueError(f"unknown model kind {kind!r}")
        self.net = net
        self.cfg = cfg
        self.store = store
        self.kind = kind
        self._incidence = net.incidence()

    # per-kind parameter bundles stay in one store; bind turns the ones this
    # pass needs into tape leaves (trainable) or constants (inference)
    def bind(self, tape=None):
        if tape is None:
            return {name: de.Tensor(arr) for name, arr in self.store.params.items()}
        return {name: self.store.leaf(name, tape) for name in self.store.params}

    def _gru_final_hidden(self, bound, histories):
        batch, steps, m = histories.shape
        if m != self.net.edge_count:
            raise ValueError(f"history has {m} edge columns, network has {self.net.edge_count}")
        ones_b = de.Tensor(np.ones((batch, 1)))
        one = de.Tensor(np.ones(1))
        hidden = de.Tensor(np.zeros((batch, self.cfg.gru_hidden)))
        for t in range(steps):
            x = de.Tensor(histories[:, t, :])
            zg = de.sigmoid(
                de.add(
                    de.add(de.matmul(x, bound["enc.Wz"]), de.matmul(hidden, bound["enc.Uz"])),
                    de.matmul(ones_b, bound["enc.bz"]),
                )
            )
            rg = de.sigmoid(
                de.add(
                    de.add(de.matmul(x, bound["enc.Wr"]), de.matmul(hidden, bound["enc.Ur"])),
                    de.matmul(ones_b, bound["enc.br"]),
                )
            )
            cand = de.tanh(
                de.add(
                    de.add(
                        de.matmul(x, bound["enc.Wc"]),
                        de.matmul(de.hadamard(rg, hidden), bound["enc.Uc"]),
                    ),
                    de.matmul(ones_b, bound["enc.bc"]),
                )
            )
            hidden = de.add(
                de.hadamard(de.subtract(one, zg), hidden), de.hadamard(zg, cand)
            )
        return hidden

    def _encode_batch(self, bound, histories):
        nd = self.net.node_count * self.cfg.latent_channels
        hidden = self._gru_final_hidden(bound, histories)
        ones_b = de.Tensor(np.ones((histories.shape[0], 1)))
        out = de.add(de.matmul(hidden, bound["enc.Wout"]), de.matmul(ones_b, bound["enc.bout"]))
        mu = de.slice(out, (slice(None), slice(0, nd)))
        raw = de.slice(out, (slice(None), slice(nd, 2 * nd)))
        sigma = de.add(de.softplus(raw), de.Tensor([SIGMA_FLOOR]))
        return mu, sigma

    def _per_channel(self, vec, mat, batch):
        """hadamard(vec[c], mat[:, c*B:(c+1)*B]) per channel, reassembled."""
        d = self.cfg.latent_channels
        if d == 1:
            return de.hadamard(de.slice(vec, slice(0, 1)), mat)
        parts = []
        for c in range(d):
            coeff = de.slice(vec, slice(c, c + 1))
            block = de.slice(mat, (slice(None), slice(c * batch, (c + 1) * batch)))
            parts.append(de.hadamard(coeff, block))
        return de.concat(parts, axis=1)

    def _dynamics_closure(self, bound, batch):
        n = self.net.node_count
        d = self.cfg.latent_channels
        b_mat = de.Tensor(self._incidence)
        bt_mat = de.Tensor(self._incidence.T)
        if self.kind == "unkp":
            ones_row = de.Tensor(np.ones((1, batch)))

            def mlp_dynamics(z, t):
                flat = de.reshape(z, (n * d, batch))
                pre = de.add(de.matmul(bound["mlp.W1"], flat), de.matmul(bound["mlp.b1"], ones_row))
                hid = de.tanh(pre)
                out = de.add(de.matmul(bound["mlp.W2"], hid), de.matmul(bound["mlp.b2"], ones_row))
                return de.reshape(out, (n, d * batch))

            return mlp_dynamics

        alpha = bound["dyn.alpha"]
        if self.kind == "stden":
            phi_col = de.reshape(de.softplus(bound["dyn.rho"]), (n, 1))
            phi_mat = de.matmul(phi_col, de.Tensor(np.ones((1, d * batch))))

            def dynamics(z, t):
                lap = de.matmul(b_mat, de.matmul(bt_mat, z))
                flux = de.tanh(self._per_channel(alpha, lap, batch))
                return de.scale(de.hadamard(phi_mat, flux), -1.0)

            return dynamics

        def incp_dynamics(z, t):
            lap = de.matmul(b_mat, de.matmul(bt_mat, z))
            return de.scale(de.tanh(self._per_channel(alpha, lap, batch)), -1.0)

        return incp_dynamics

    def _decode_state(self, bound, z, batch):
        grad = de.scale(de.matmul(de.Tensor(self._incidence.T), z), -1.0)
        flow = self._per_channel(bound["dec.w"], grad, batch)
        if self.cfg.latent_channels > 1:
            m = self.net.edge_count
            total = de.slice(flow, (slice(None), slice(0, batch)))
            for c in range(1, self.cfg.latent_channels):
                total = de.add(total, de.slice(flow, (slice(None), slice(c * batch, (c + 1) * batch))))
            flow = total
        return de.add(flow, bound["dec.b"])

    def forward_batch(self, histories, eps=None, tape=None, solver=None, horizon=None) -> Forward:
        """Run encode -> sample -> integrate -> decode on a (B, T, |E|) batch.

        eps is a (B, n*d) array of standard-normal draws, or None for the
        deterministic mode z0 = mu. horizon trims integration to the first
        `horizon` steps when only an early prediction is needed.
        """
        histories = np.asarray(histories, dtype=np.float64)
        if histories.ndim != 3:
            raise ValueError(f"histories must be (B, T, |E|), got {histories.shape}")
        batch = histories.shape[0]
        n, d = self.net.node_count, self.cfg.latent_channels
        steps = self.cfg.horizon if horizon is None else int(horizon)
        bound = self.bind(tape)

        if self.kind == "gru":
            hidden = self._gru_final_hidden(bound, histories)
            ones_b = de.Tensor(np.ones((batch, 1)))
            out = de.add(de.matmul(hidden, bound["head.W"]), de.matmul(ones_b, bound["head.b"]))
            m = self.net.edge_count
            flows = []
            for k in range(steps):
                block = de.slice(out, (slice(None), slice(k * m, (k + 1) * m)))
                flows.append(de.transpose(block))
            return Forward(flows=flows, mu=None, sigma=None, nfe=0, states=[])

        mu, sigma = self._encode_batch(bound, histories)
        if eps is None:
            z0_flat = mu
        else:
            eps = np.asarray(eps, dtype=np.float64)
            if eps.shape != (batch, n * d):
                raise ValueError(f"eps must be ({batch}, {n * d}), got {eps.shape}")
            z0_flat = de.add(mu, de.hadamard(de.Tensor(eps), sigma))
        # (B, n*d) node-major rows -> (n, d*B) channel-major latent matrix
        z0 = de.reshape(de.transpose(z0_flat), (n, d * batch))
        dynamics = self._dynamics_closure(bound, batch)
        cfg = solver if solver is not None else self.cfg.solver
        traj = integrate(dynamics, z0, np.arange(steps + 1, dtype=np.float64), cfg)
        flows = [self._decode_state(bound, state, batch) for state in traj.states[1:]]
        return Forward(flows=flows, mu=mu, sigma=sigma, nfe=traj.nfe, states=traj.states)

    def forward(self, history, eps=None, solver=None):
        """Single-window inference: (T, |E|) history -> (H, |E|) flows.

        Returns (flows, mu, sigma, nfe) with mu/sigma as (n, d) arrays
        (None for the direct-GRU kind).
        """
        history = np.asarray(history, dtype=np.float64)
        n, d = self.net.node_count, self.cfg.latent_channels
        eps_b = None
        if eps is not None:
            eps_b = np.asarray(eps, dtype=np.float64).reshape(1, n * d)
        out = self.forward_batch(history[None, :, :], eps=eps_b, solver=solver)
        flows = np.stack([f.data[:, 0] for f in out.flows], axis=0)
        if out.mu is None:
            return flows, None, None, out.nfe
        mu = out.mu.data.reshape(n, d)
        sigma = out.sigma.data.reshape(n, d)
        return flows, mu, sigma, out.nfe

    def encode(self, history):
        """(T, |E|) history -> (mu, sigma) as (n, d) arrays."""
        history = np.asarray(history, dtype=np.float64)
        mu, sigma = self._encode_batch(self.bind(None), history[None, :, :])
        n, d = self.net.node_count, self.cfg.latent_channels
        return mu.data.reshape(n, d), sigma.data.reshape(n, d)

    def latent_states(self, history, solver=None):
        """Deterministic-mode latent trajectory as (H+1, n, d) array."""
        out = self.forward_batch(np.asarray(history)[None, :, :], solver=solver)
        n, d = self.net.node_count, self.cfg.latent_channels
        return np.stack([s.data.reshape(n, d) for s in out.states], axis=0)

    def parameter_count(self):
        return int(np.sum([v.size for v in self.store.params.values()]))

    def dynamics_parameter_count(self):
        prefixes = ("dyn.", "mlp.")
        return int(
            np.sum([v.size for k, v in self.store.params.items() if k.startswith(prefixes)])
        )


# -- checkpoint io ------------------------------------------------------------
# Layout: magic "STDEN1\n"; 8-byte little-endian manifest length; UTF-8
# manifest, one "name dim0,dim1 byte_offset" line per tensor; then the
# concatenated little-endian float64 payload.


@dataclass
class Checkpoint:
    kind: str
    cfg: ModelConfig
    params: dict
    node_count: int
    edge_count: int
    norm_mean: float
    norm_std: float
    seed: int


def save_checkpoint(path, model: Model, norm_mean, norm_std, seed=0):
    meta = {
        "meta.kind": np.array([float(KIND_CODES[model.kind])]),
        "meta.n_nodes": np.array([float(model.net.node_count)]),
        "meta.edge_count": np.array([float(model.net.edge_count)]),
        "meta.history_len": np.array([float(model.cfg.history_len)]),
        "meta.horizon": np.array([float(model.cfg.horizon)]),
        "meta.latent_channels": np.array([float(model.cfg.latent_channels)]),
        "meta.gru_hidden": np.array([float(model.cfg.gru_hidden)]),
        "meta.norm_mean": np.array([float(norm_mean)]),
        "meta.norm_std": np.array([float(norm_std)]),
        "meta.seed": np.array([float(seed)]),
    }
    tensors = dict(meta)
    tensors.update(model.store.params)
    lines = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        dims = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name} {dims} {offset}")
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    manifest = "\n".join(lines).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (manifest_len,) = struct.unpack("<Q", fh.read(8))
        manifest = fh.read(manifest_len).decode("utf-8")
        payload = fh.read()
    tensors = {}
    for line in manifest.splitlines():
        name, dims, offset = line.split(" ")
        shape = tuple(int(s) for s in dims.split(",")) if dims else ()
        count = int(np.prod(shape)) if shape else 1
        start = int(offset)
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        tensors[name] = arr.reshape(shape).astype(np.float64)
    meta = {k: float(v[0]) for k, v in tensors.items() if k.startswith("meta.")}
    params = {k: v for k, v in tensors.items() if not k.startswith("meta.")}
    cfg = ModelConfig(
        history_len=int(meta["meta.history_len"]),
        horizon=int(meta["meta.horizon"]),
        latent_channels=int(meta["meta.latent_channels"]),
        gru_hidden=int(meta["meta.gru_hidden"]),
    )
    return Checkpoint(
        kind=KIND_NAMES[int(meta["meta.kind"])],
        cfg=cfg,
        params=params,
        node_count=int(meta["meta.n_nodes"]),
        edge_count=int(meta["meta.edge_count"]),
        norm_mean=meta["meta.norm_mean"],
        norm_std=meta["meta.norm_std"],
        seed=int(meta["meta.seed"]),
    )


def model_from_checkpoint(ckpt: Checkpoint, net: RoadNetwork, solver: SolverConfig | None = None) -> Model:
    if net.node_count != ckpt.node_count or net.edge_count != ckpt.edge_count:
        raise ValueError(
            f"checkpoint was trained on a {ckpt.node_count}-node/{ckpt.edge_count}-edge "
            f"network, got {net.node_count} nodes/{net.edge_count} edges"
        )
    if solver is not None:
        ckpt.cfg.solver = solver
    store = de.ParamStore()
    for name, arr in ckpt.params.items():
        store.add(name, arr)
    return Model(net, ckpt.cfg, store, kind=ckpt.kind)
