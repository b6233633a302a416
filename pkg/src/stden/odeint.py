"""Numerical integration of dz/dt = F(z, t).

Two integrators: classical fixed-step RK4 (training, deterministic cost) and
adaptive Dormand-Prince 5(4) with FSAL reuse (inference and NFE studies).
Both run on plain float64 arrays or on diffengine Tensors; in the latter
case every stage lands on the active tape, so the whole trajectory is
differentiable (the dopri5 step controller reads detached values only, so
accept/reject decisions never carry gradient).

States are whatever array-like the dynamics function maps to itself; node
fields enter as their (n, d) value arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffengine as de

__all__ = ["OdeError", "SolverConfig", "Trajectory", "rk4_step", "dopri5_step", "integrate"]


class OdeError(RuntimeError):
    """Integration failure: NFE budget, step underflow, or non-finite state."""


@dataclass
class SolverConfig:
    method: str = "rk4"
    rtol: float = 1e-3
    atol: float = 1e-4
    substeps_per_interval: int = 4
    max_nfe: int = 10_000

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown method {self.method!r}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")
        if self.substeps_per_interval < 1:
            raise ValueError("substeps_per_interval must be positive")
        if self.max_nfe < 10:
            raise ValueError("max_nfe must be at least 10")


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    nfe: int = 0


def _value(state):
    return state.data if isinstance(state, de.Tensor) else np.asarray(state)


def _combine(y, h, coeffs, ks):
    """y + h * sum(c_i * k_i), on the tape when any operand is tracked."""
    if isinstance(y, de.Tensor):
        out = y
        for c, k in zip(coeffs, ks):
            if c != 0.0:
                out = de.add(out, de.scale(k, h * c))
        return out
    out = np.asarray(y, dtype=np.float64)
    for c, k in zip(coeffs, ks):
        if c != 0.0:
            out = out + (h * c) * k
    return out


def rk4_step(dynamics, state, t, h):
    """One classical 4-stage Runge-Kutta step (4 dynamics evaluations)."""
    k1 = dynamics(state, t)
    k2 = dynamics(_combine(state, h, (0.5,), (k1,)), t + 0.5 * h)
    k3 = dynamics(_combine(state, h, (0.5,), (k2,)), t + 0.5 * h)
    k4 = dynamics(_combine(state, h, (1.0,), (k3,)), t + h)
    return _combine(state, h / 6.0, (1.0, 2.0, 2.0, 1.0), (k1, k2, k3, k4))


# Dormand-Prince 5(4) tableau. The last stage row equals the 5th-order
# weights, so the final evaluation of an accepted step is the first stage of
# the next one (FSAL: 6 fresh evaluations per step after the first).
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
# 5th-order minus embedded 4th-order weights
_DP_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)


def dopri5_step(dynamics, state, t, h, k1=None):
    """One Dormand-Prince 5(4) trial step.

    Returns (proposed 5th-order state, infinity-norm of the embedded
    4th-order error estimate, last stage for FSAL reuse, evaluations used).
    Passing the previous accepted step's last stage as k1 costs 6
    evaluations instead of 7.
    """
    nfe = 0
    if k1 is None:
        k1 = dynamics(state, t)
        nfe += 1
    ks = [k1]
    for s in range(1, 7):
        y_s = _combine(state, h, _DP_A[s], ks)
        ks.append(dynamics(y_s, t + _DP_C[s] * h))
        nfe += 1
    proposed = _combine(state, h, _DP_B5, ks)
    err = np.zeros_like(_value(state))
    for c, k in zip(_DP_E, ks):
        if c != 0.0:
            err = err + (h * c) * _value(k)
    err_norm = float(np.max(np.abs(err))) if err.size else 0.0
    return proposed, err_norm, ks[6], nfe


def _record(traj, t, state):
    traj.times.append(float(t))
    value = state.data if isinstance(state, de.Tensor) else np.array(state, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise OdeError(f"non-finite state at t={t}")
    traj.states.append(state)


def _integrate_rk4(dynamics, z0, times, cfg):
    traj = Trajectory()
    _record(traj, times[0], z0)
    state = z0
    for t0, t1 in zip(times[:-1], times[1:]):
        h = (t1 - t0) / cfg.substeps_per_interval
        t = t0
        for _ in range(cfg.substeps_per_interval):
            state = rk4_step(dynamics, state, t, h)
            traj.nfe += 4
            if traj.nfe > cfg.max_nfe:
                raise OdeError(f"max_nfe={cfg.max_nfe} exceeded")
            t += h
        _record(traj, t1, state)
    return traj


def _integrate_dopri5(dynamics, z0, times, cfg):
    traj = Trajectory()
    _record(traj, times[0], z0)
    state = z0
    t = float(times[0])
    h = 0.01 * (times[1] - times[0])
    k1 = None
    for target in times[1:]:
        floor = 1e-12 * (target - times[0] if target > times[0] else 1.0)
        while t < target - 1e-14 * max(1.0, abs(target)):
            h = min(h, target - t)
            if h < floor:
                raise OdeError(f"step size underflow at t={t}")
            proposed, err_norm, k_last, used = dopri5_step(dynamics, state, t, h, k1)
            traj.nfe += used
            if traj.nfe > cfg.max_nfe:
                raise OdeError(f"max_nfe={cfg.max_nfe} exceeded")
            tol = cfg.atol + cfg.rtol * float(np.max(np.abs(_value(state))))
            ratio = err_norm / tol
            if ratio <= 1.0:
                t = t + h
                state = proposed
                k1 = k_last
            # controller: 0.9 * ratio^(-1/5), clamped to [0.2, 5]
            factor = 5.0 if ratio == 0.0 else min(5.0, max(0.2, 0.9 * ratio ** (-0.2)))
            h = h * factor
        _record(traj, target, state)
    return traj


def integrate(dynamics, z0, times, cfg: SolverConfig) -> Trajectory:
    """Integrate dz/dt = dynamics(z, t) through the given time grid.

    The trajectory holds one state per requested time, with states[0] the
    supplied initial condition, plus the count of dynamics evaluations.
    """
    times = [float(t) for t in times]
    if len(times) < 2:
        raise ValueError("need at least two time points")
    if any(b <= a for a, b in zip(times[:-1], times[1:])):
        raise ValueError("times must be strictly increasing")
    if cfg.method == "rk4":
        return _integrate_rk4(dynamics, z0, times, cfg)
    return _integrate_dopri5(dynamics, z0, times, cfg)
