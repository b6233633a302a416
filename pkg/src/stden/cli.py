"""Batch command-line entry points.

Configuration is a flat key=value space: every key can come from a
--config file or a --flag (flags win), unknown keys are errors, and each
run writes the fully-resolved config next to its outputs so any run can be
reproduced from that artifact alone. Exit codes: 0 success, 2 config
error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as data_mod
from .baselines import HistoricalAverage, build_model
from .data import (
    SynthConfig,
    load_csv,
    load_phi_csv,
    load_pef_csv,
    random_network,
    save_csv,
    save_pef_csv,
    save_phi_csv,
    simulate,
    window_and_split,
)
from .graph import load_network, save_network
from .model import ModelConfig, load_checkpoint, model_from_checkpoint, save_checkpoint
from .odeint import SolverConfig
from .train import (
    HORIZON_STEPS,
    TrainConfig,
    aligned_timestamps,
    compute_metrics,
    evaluate,
    train,
    write_history_csv,
    write_metrics,
)

__all__ = ["main", "ConfigError"]


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit code 2."""


# -- the flat key space --------------------------------------------------


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError(f"must be one of {sorted(options)}")
        return text

    return parse


def _float_list(text):
    try:
        values = [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as err:
        raise ValueError(f"not a comma-separated float list: {err}") from err
    if not values:
        raise ValueError("empty list")
    return values


KEY_TYPES = {
    # paths
    "graph": str, "flows": str, "pef": str, "phi": str, "checkpoint": str, "out": str,
    # selection
    "model": _choice({"stden", "ha", "gru", "unkp", "incp"}),
    "seed": int,
    "split": _choice({"train", "val", "test"}),
    "window": int,
    "horizon": int,
    # model shape
    "history": int, "latent_dim": int, "gru_hidden": int,
    # training
    "lr": float, "batch_size": int, "max_epochs": int, "patience": int,
    "grad_clip": float, "kl_weight": float, "obs_sigma": float,
    "batches_per_epoch": int, "val_windows": int,
    # solver
    "solver": _choice({"rk4", "dopri5"}),
    "rtol": float, "atol": float, "substeps": int, "max_nfe": int,
    # synthetic generator
    "nodes": int, "degree": float, "steps": int,
    "mode": _choice({"linear", "tanh"}),
    "noise": float, "smoothness": int, "z0_scale": float,
    "interval_time": float, "excite_period": int, "alpha_star": float,
    "day_jitter": float, "jitter_rank": int,
    # studies / verification
    "rtol_list": _float_list, "eval_windows": int, "threshold": float,
}

_SOLVER_DEFAULTS = {"solver": "rk4", "rtol": 1e-3, "atol": 1e-4, "substeps": 4, "max_nfe": 10_000}
_SHAPE_DEFAULTS = {"history": 12, "horizon": 12, "latent_dim": 1, "gru_hidden": 32}
_TRAIN_DEFAULTS = {
    "lr": 1e-3, "batch_size": 16, "max_epochs": 200, "patience": 10,
    "grad_clip": 5.0, "kl_weight": 0.0, "obs_sigma": 1.0,
    "batches_per_epoch": 30, "val_windows": 128,
}

# command -> (required keys, optional keys with defaults)
COMMANDS = {
    "gen-graph": (("out",), {"nodes": 50, "degree": 3.0, "seed": 0}),
    "simulate": (
        ("graph", "out"),
        {
            "seed": 0, "steps": 4032, "mode": "tanh", "noise": 0.05, "smoothness": 12,
            "z0_scale": 1.0, "interval_time": 0.07, "excite_period": 288, "alpha_star": 0.2,
            "day_jitter": 2.0, "jitter_rank": 2,
        },
    ),
    "verify-conservation": (("pef", "phi"), {"threshold": 1e-9, "out": None}),
    "train": (
        ("graph", "flows", "out"),
        {"model": "stden", "seed": 0, **_SHAPE_DEFAULTS, **_TRAIN_DEFAULTS, **_SOLVER_DEFAULTS},
    ),
    "evaluate": (
        ("graph", "flows", "out"),
        {"model": "stden", "checkpoint": None, "seed": 0, "split": "test",
         "batch_size": 64, **_SHAPE_DEFAULTS, **_SOLVER_DEFAULTS},
    ),
    "predict": (
        ("graph", "flows", "checkpoint", "out"),
        {"window": None, "horizon": None, **_SOLVER_DEFAULTS},
    ),
    "nfe-study": (
        ("graph", "flows", "checkpoint", "out", "rtol_list"),
        {"split": "test", "eval_windows": 96, "max_nfe": 1_000_000},
    ),
    "inspect-pef": (
        ("graph", "flows", "checkpoint", "out"),
        {"window": None, **_SOLVER_DEFAULTS},
    ),
}


def _read_config_file(path, allowed):
    if not os.path.exists(path):
        raise ConfigError(f"config: no such file: {path}")
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if key not in allowed:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r} for this command")
            values[key] = value.strip()
    return values


def resolve_config(command, args):
    """Merge defaults < config file < flags, coerce types, check required."""
    required, defaults = COMMANDS[command]
    allowed = set(required) | set(defaults)
    cfg = dict(defaults)
    raw = {}
    if args.config is not None:
        raw.update(_read_config_file(args.config, allowed))
    for key in allowed:
        flag_value = getattr(args, key.replace("-", "_"), None)
        if flag_value is not None:
            raw[key] = flag_value
    for key, text in raw.items():
        if isinstance(text, str) and text.lower() == "none":
            cfg[key] = None
            continue
        try:
            cfg[key] = KEY_TYPES[key](text) if isinstance(text, str) else text
        except ValueError as err:
            raise ConfigError(f"key {key!r}: bad value {text!r} ({err})") from err
    for key in required:
        if cfg.get(key) is None:
            raise ConfigError(
                f"missing required key {key!r} (pass --{key.replace('_', '-')} "
                f"or set {key}= in a config file)"
            )
    return cfg


def _format_value(value):
    if isinstance(value, float):
        return f"{value:.17g}"
    if isinstance(value, list):
        return ",".join(f"{v:.17g}" for v in value)
    return str(value)


def write_resolved_config(command, cfg):
    if cfg.get("out") is None:
        return
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], f"{command}.resolved.cfg")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(cfg):
            if cfg[key] is not None:
                fh.write(f"{key}={_format_value(cfg[key])}\n")


def _require_file(cfg, key):
    path = cfg[key]
    if not os.path.exists(path):
        raise ConfigError(f"key {key!r}: no such file: {path}")
    return path


def _load_net(cfg):
    with open(_require_file(cfg, "graph"), encoding="utf-8") as fh:
        return load_network(fh)


def _solver_from(cfg):
    return SolverConfig(
        method=cfg["solver"], rtol=cfg["rtol"], atol=cfg["atol"],
        substeps_per_interval=cfg["substeps"], max_nfe=cfg["max_nfe"],
    )


def _load_series(cfg, net):
    return load_csv(_require_file(cfg, "flows"), expected_edges=net.edge_count)


def _default_window(ds):
    starts = ds.test_starts if len(ds.test_starts) else ds.train_starts
    return int(starts[0])


# -- commands ------------------------------------------------------------


def cmd_gen_graph(cfg):
    scfg = SynthConfig(nodes=cfg["nodes"], avg_out_degree=cfg["degree"], seed=cfg["seed"])
    net = random_network(scfg)
    path = os.path.join(cfg["out"], "graph.txt")
    save_network(net, path)
    print(f"wrote {path}: {net.node_count} nodes, {net.edge_count} edges")


def cmd_simulate(cfg):
    net = _load_net(cfg)
    scfg = SynthConfig(
        nodes=net.node_count, seed=cfg["seed"], steps=cfg["steps"], mode=cfg["mode"],
        noise=cfg["noise"], smoothness=cfg["smoothness"], z0_scale=cfg["z0_scale"],
        interval_time=cfg["interval_time"], excite_period=cfg["excite_period"],
        alpha_star=cfg["alpha_star"], day_jitter=cfg["day_jitter"],
        jitter_rank=cfg["jitter_rank"],
    )
    sim = simulate(net, scfg)
    flows_path = os.path.join(cfg["out"], "flows.csv")
    save_csv(flows_path, sim.flows)
    save_pef_csv(os.path.join(cfg["out"], "pef.csv"), sim.pef)
    save_phi_csv(os.path.join(cfg["out"], "phi_star.csv"), sim.phi_star)
    print(f"wrote {flows_path}: {sim.flows.steps} steps x {sim.flows.edge_count} edges")


def cmd_verify_conservation(cfg):
    pef = load_pef_csv(_require_file(cfg, "pef"))
    phi = load_phi_csv(_require_file(cfg, "phi"))
    if pef.shape[1] != phi.shape[0]:
        raise ValueError(
            f"potential csv has {pef.shape[1]} nodes but volume csv has {phi.shape[0]}"
        )
    totals = pef @ (1.0 / phi)
    drift = float(np.max(np.abs(totals - totals[0])))
    scale = max(abs(float(totals[0])), float(np.abs(pef[0] / phi).sum()), 1e-30)
    rel = drift / scale
    ok = rel < cfg["threshold"]
    report = (
        f"rows={pef.shape[0]} max_abs_drift={drift:.17g} "
        f"max_relative_drift={rel:.17g} threshold={cfg['threshold']:.17g} "
        f"status={'ok' if ok else 'fail'}"
    )
    print(report)
    if cfg.get("out") is not None:
        with open(os.path.join(cfg["out"], "conservation.txt"), "w", encoding="utf-8") as fh:
            fh.write(report + "\n")
    if not ok:
        raise RuntimeError(f"conserved total drifted by {rel:.3g} (threshold {cfg['threshold']:g})")


def _model_config(cfg):
    return ModelConfig(
        history_len=cfg["history"], horizon=cfg["horizon"],
        latent_channels=cfg["latent_dim"], gru_hidden=cfg["gru_hidden"],
        solver=_solver_from(cfg),
    )


def cmd_train(cfg):
    if cfg["model"] == "ha":
        raise ConfigError("key 'model': the historical average has nothing to train")
    net = _load_net(cfg)
    series = _load_series(cfg, net)
    ds = window_and_split(series, history_len=cfg["history"], horizon=cfg["horizon"])
    model = build_model(cfg["model"], net, _model_config(cfg), seed=cfg["seed"])
    tcfg = TrainConfig(
        learning_rate=cfg["lr"], batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"],
        patience=cfg["patience"], grad_clip_norm=cfg["grad_clip"], kl_weight=cfg["kl_weight"],
        seeds=[cfg["seed"]], obs_sigma=cfg["obs_sigma"],
        batches_per_epoch=cfg["batches_per_epoch"], val_windows=cfg["val_windows"],
    )
    result = train(model, ds, tcfg, seed=cfg["seed"])
    ckpt_path = os.path.join(cfg["out"], "checkpoint.ckpt")
    save_checkpoint(ckpt_path, model, ds.normalizer.mean, ds.normalizer.std, seed=cfg["seed"])
    write_history_csv(os.path.join(cfg["out"], "history.csv"), result.history)
    print(
        f"trained {cfg['model']} for {len(result.history)} epochs, "
        f"best val mae {result.best_val_mae:.6g} at epoch {result.best_epoch}, "
        f"wrote {ckpt_path}"
    )


def _load_model(cfg, net):
    ckpt = load_checkpoint(_require_file(cfg, "checkpoint"))
    return ckpt, model_from_checkpoint(ckpt, net, solver=_solver_from(cfg))


def cmd_evaluate(cfg):
    net = _load_net(cfg)
    series = _load_series(cfg, net)
    if cfg["model"] == "ha":
        ds = window_and_split(series, history_len=cfg["history"], horizon=cfg["horizon"])
        predictor = HistoricalAverage.fit_dataset(ds)
    else:
        if cfg["checkpoint"] is None:
            raise ConfigError("missing required key 'checkpoint' (needed unless model=ha)")
        ckpt, predictor = _load_model(cfg, net)
        if predictor.kind != cfg["model"]:
            raise ConfigError(
                f"key 'model': checkpoint holds a {predictor.kind!r} model, not {cfg['model']!r}"
            )
        ds = window_and_split(series, ckpt.cfg.history_len, ckpt.cfg.horizon)
    records = evaluate(
        predictor, ds, split=cfg["split"], horizons=HORIZON_STEPS,
        batch_size=cfg["batch_size"], model_name=cfg["model"], seed=cfg["seed"],
    )
    path = os.path.join(cfg["out"], "metrics.txt")
    write_metrics(path, records)
    with open(path, encoding="utf-8") as fh:
        sys.stdout.write(fh.read())


def cmd_predict(cfg):
    net = _load_net(cfg)
    series = _load_series(cfg, net)
    ckpt, model = _load_model(cfg, net)
    t = ckpt.cfg.history_len
    if cfg["window"] is None:
        ds = window_and_split(series, t, ckpt.cfg.horizon)
        window = _default_window(ds)
    else:
        window = cfg["window"]
    if not 0 <= window <= series.steps - t:
        raise ValueError(f"window {window} needs rows [{window}, {window + t}) of {series.steps}")
    hist = (series.values[window : window + t] - ckpt.norm_mean) / ckpt.norm_std
    flows, _, _, _ = model.forward(hist)
    if cfg["horizon"] is not None:
        if not 1 <= cfg["horizon"] <= flows.shape[0]:
            raise ConfigError(f"key 'horizon': must be in [1, {flows.shape[0]}]")
        flows = flows[: cfg["horizon"]]
    pred = flows * ckpt.norm_std + ckpt.norm_mean
    path = os.path.join(cfg["out"], "predictions.csv")
    save_csv(path, data_mod.FlowSeries(pred))
    print(f"wrote {path}: {pred.shape[0]} steps from window {window}")


def cmd_nfe_study(cfg):
    net = _load_net(cfg)
    series = _load_series(cfg, net)
    ckpt = load_checkpoint(_require_file(cfg, "checkpoint"))
    if ckpt.kind == "gru":
        raise ValueError("nfe-study needs an ODE-based checkpoint, not the direct GRU")
    ds = window_and_split(series, ckpt.cfg.history_len, ckpt.cfg.horizon)
    k = ckpt.cfg.horizon
    stamps = aligned_timestamps(ds, cfg["split"], (k,))
    if cfg["eval_windows"] is not None and len(stamps) > cfg["eval_windows"]:
        idx = np.linspace(0, len(stamps) - 1, cfg["eval_windows"]).round().astype(int)
        stamps = stamps[np.unique(idx)]
    starts = stamps - ckpt.cfg.history_len - k + 1
    targets = series.values[stamps]
    rows = []
    for rtol in cfg["rtol_list"]:
        solver = SolverConfig(
            method="dopri5", rtol=rtol, atol=rtol * 1e-2, max_nfe=cfg["max_nfe"]
        )
        model = model_from_checkpoint(ckpt, net, solver=solver)
        preds = np.empty_like(targets)
        nfe_total = 0
        for i, start in enumerate(starts):
            hist = (series.values[start : start + ckpt.cfg.history_len] - ckpt.norm_mean)
            hist = hist / ckpt.norm_std
            flows, _, _, nfe = model.forward(hist)
            preds[i] = flows[k - 1] * ckpt.norm_std + ckpt.norm_mean
            nfe_total += nfe
        mae, _, _ = compute_metrics(preds, targets)
        rows.append((rtol, nfe_total / len(starts), mae))
    path = os.path.join(cfg["out"], "nfe_study.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("rtol,mean_nfe,test_mae\n")
        for rtol, mean_nfe, mae in rows:
            fh.write(f"{rtol:.17g},{mean_nfe:.17g},{mae:.17g}\n")
    for rtol, mean_nfe, mae in rows:
        print(f"rtol={rtol:g} mean_nfe={mean_nfe:.2f} test_mae={mae:.6g}")


def cmd_inspect_pef(cfg):
    net = _load_net(cfg)
    series = _load_series(cfg, net)
    ckpt, model = _load_model(cfg, net)
    if ckpt.kind == "gru":
        raise ValueError("inspect-pef needs a latent-field checkpoint, not the direct GRU")
    t = ckpt.cfg.history_len
    if cfg["window"] is None:
        ds = window_and_split(series, t, ckpt.cfg.horizon)
        window = _default_window(ds)
    else:
        window = cfg["window"]
    if not 0 <= window <= series.steps - t:
        raise ValueError(f"window {window} needs rows [{window}, {window + t}) of {series.steps}")
    hist = (series.values[window : window + t] - ckpt.norm_mean) / ckpt.norm_std
    states = model.latent_states(hist)[1:]  # (H, n, d), horizon steps only
    w = model.store.params["dec.w"]
    bias = float(model.store.params["dec.b"][0])
    potentials = states @ w  # (H, n) effective scalar potential per node
    grad_flows = np.stack([-(p[net.src] - p[net.dst]) for p in potentials], axis=0)
    full = (grad_flows + bias) * ckpt.norm_std + ckpt.norm_mean
    save_pef_csv(os.path.join(cfg["out"], "potentials.csv"), potentials)
    with open(os.path.join(cfg["out"], "flows.csv"), "w", encoding="utf-8", newline="\n") as fh:
        data_mod._write_matrix(fh, "e", grad_flows)
    save_csv(os.path.join(cfg["out"], "flows_denorm.csv"), data_mod.FlowSeries(full))
    print(
        f"wrote {potentials.shape[0]} x {potentials.shape[1]} potentials and "
        f"{grad_flows.shape[0]} x {grad_flows.shape[1]} flows from window {window}"
    )


RUNNERS = {
    "gen-graph": cmd_gen_graph,
    "simulate": cmd_simulate,
    "verify-conservation": cmd_verify_conservation,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "nfe-study": cmd_nfe_study,
    "inspect-pef": cmd_inspect_pef,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stden",
        description="Physics-guided edge-flow forecasting on road networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, (required, defaults) in COMMANDS.items():
        sp = sub.add_parser(command)
        sp.add_argument("--config", default=None, help="key=value config file")
        for key in sorted(set(required) | set(defaults)):
            sp.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    try:
        cfg = resolve_config(args.command, args)
        write_resolved_config(args.command, cfg)
        RUNNERS[args.command](cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - single boundary for exit codes
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
