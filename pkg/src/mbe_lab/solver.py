"""Exponential time differencing for ``u_t + lap^2 u = N(u)`` and Picard iteration.

The linear part is integrated exactly through ``exp(-dt |k|^4)``; the
nonlinearity enters through the phi-functions

    phi1(z) = (e^z - 1) / z,        phi2(z) = (e^z - 1 - z) / z^2,

evaluated at ``z = -dt |k|^4``.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .diagnostics import (
    DETERMINISTIC_PROBES,
    RunRecord,
    Status,
    evaluate_probes,
    validate_probes,
)
from .errors import BlowUpDetected, NonFiniteField
from .nonlinearity import ModelParams, nonlinear_spectral
from .semigroup import semigroup_symbol
from .spectral import Field, Grid, x0_norm

_TAYLOR_CUTOFF = 1e-3


class Scheme(str, Enum):
    ETD1 = "ETD1"
    ETDRK2 = "ETDRK2"


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    t_end: float
    scheme: Scheme = Scheme.ETDRK2
    blowup_threshold: float = 1e8
    dealias: bool = True
    record_every: int = 1
    snapshot_times: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "snapshot_times", tuple(float(t) for t in self.snapshot_times))
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.t_end > 0:
            raise ValueError(f"t_end must be positive, got {self.t_end}")
        if self.dt > self.t_end:
            raise ValueError(f"dt = {self.dt} exceeds t_end = {self.t_end}")
        if not self.blowup_threshold > 0:
            raise ValueError("blowup_threshold must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    @property
    def n_steps(self) -> int:
        return max(1, math.ceil(self.t_end / self.dt - 1e-9))

    def step_times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.t_end
        return t

    def as_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.value
        d["snapshot_times"] = list(self.snapshot_times)
        return d


def phi1(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < _TAYLOR_CUTOFF
    out = np.empty_like(z)
    zs = z[small]
    out[small] = 1 + zs / 2 + zs**2 / 6 + zs**3 / 24
    zl = z[~small]
    out[~small] = np.expm1(zl) / zl
    return out


def phi2(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < _TAYLOR_CUTOFF
    out = np.empty_like(z)
    zs = z[small]
    out[small] = 0.5 + zs / 6 + zs**2 / 24 + zs**3 / 120
    zl = z[~small]
    out[~small] = (np.expm1(zl) - zl) / zl**2
    return out


@lru_cache(maxsize=64)
def _etd_coefficients(grid: Grid, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    z = -dt * grid.k2**2
    return np.exp(z), dt * phi1(z), dt * phi2(z)


def etd_spectral(vhat: np.ndarray, grid: Grid, params: ModelParams, dt: float,
                 scheme: Scheme, dealias: bool = True,
                 shift: np.ndarray | None = None, shift_next: np.ndarray | None = None) -> np.ndarray:
    """One ETD step on spectral coefficients.

    ``shift`` / ``shift_next`` add a known field (the stochastic convolution at
    the start / end of the step) inside the nonlinearity.
    """
    e, p1, p2 = _etd_coefficients(grid, float(dt))
    if params.is_linear_zero:
        return e * vhat
    arg = vhat if shift is None else vhat + shift
    n0 = nonlinear_spectral(arg, grid, params, dealias)
    a = e * vhat + p1 * n0
    if scheme is Scheme.ETD1:
        return a
    arg = a if shift_next is None else a + shift_next
    n1 = nonlinear_spectral(arg, grid, params, dealias)
    return a + p2 * (n1 - n0)


def _check_blowup(vhat: np.ndarray, grid: Grid, threshold: float, t: float | None = None) -> None:
    if not np.all(np.isfinite(vhat)):
        raise BlowUpDetected(f"non-finite field at t = {t}", t=t, value=float("nan"))
    value = x0_norm(Field(grid, spectral=vhat))
    if not value <= threshold:
        raise BlowUpDetected(f"x0 norm {value:.4g} exceeds {threshold:.4g} at t = {t}", t=t, value=value)


def etd_step(u: Field, params: ModelParams, dt: float, scheme: Scheme | str = Scheme.ETDRK2,
             blowup_threshold: float = 1e8, dealias: bool = True) -> Field:
    """Advance ``u`` by one exponential-integrator step of size ``dt``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    out = etd_spectral(u.spectral, u.grid, params, dt, Scheme(scheme), dealias)
    _check_blowup(out, u.grid, blowup_threshold, dt)
    return Field(u.grid, spectral=out)


# ---------------------------------------------------------------------------
# Time marching shared by the deterministic and stochastic drivers

ZStepper = Callable[[np.ndarray, float], np.ndarray]


def march(u0: Field, params: ModelParams, cfg: SolverConfig, probes: Sequence[str],
          z_stepper: ZStepper | None = None, metadata: dict | None = None) -> RunRecord:
    """March ``v`` (and optionally ``z``) from 0 to ``cfg.t_end``.

    Without ``z_stepper`` this is the deterministic problem and ``v = u``.
    The blow-up test is applied to ``x0_norm(v)`` after every step; a
    blow-up stops the run and is reported through the record status.
    """
    validate_probes(probes)
    grid = u0.grid
    u0.require_finite()
    times = cfg.step_times()
    vhat = np.array(u0.spectral)
    zhat = np.zeros_like(vhat)
    snap_due = sorted(cfg.snapshot_times)

    rec_t: list[float] = []
    rec_v: list[list[float]] = []

    def fields_now(vh, zh):
        v = Field(grid, spectral=vh)
        if z_stepper is None:
            return {"u": v, "v": v, "z": Field(grid, spectral=zh)}
        z = Field(grid, spectral=zh)
        return {"u": Field(grid, spectral=vh + zh), "v": v, "z": z}

    def record(t, f):
        rec_t.append(float(t))
        rec_v.append(evaluate_probes(probes, f))

    snapshots = []

    def take_snapshots(t, f):
        while snap_due and snap_due[0] <= t + 1e-12:
            ts = snap_due.pop(0)
            for name in ("u", "v", "z") if z_stepper is not None else ("u",):
                snapshots.append((ts, name, f[name]))

    status, blow_t, err = Status.COMPLETED, None, None
    started = time.perf_counter()
    f = fields_now(vhat, zhat)
    record(0.0, f)
    take_snapshots(0.0, f)
    for i in range(1, times.size):
        h = times[i] - times[i - 1]
        try:
            if z_stepper is None:
                vhat = etd_spectral(vhat, grid, params, h, cfg.scheme, cfg.dealias)
            else:
                znew = z_stepper(zhat, h)
                vhat = etd_spectral(vhat, grid, params, h, cfg.scheme, cfg.dealias, zhat, znew)
                zhat = znew
            _check_blowup(vhat, grid, cfg.blowup_threshold, times[i])
        except BlowUpDetected as exc:
            status, blow_t = Status.BLOWUP, float(times[i])
            err = str(exc)
            break
        last = i == times.size - 1
        if i % cfg.record_every == 0 or last or (snap_due and snap_due[0] <= times[i] + 1e-12):
            f = fields_now(vhat, zhat)
            if i % cfg.record_every == 0 or last:
                record(times[i], f)
            take_snapshots(times[i], f)

    meta = {
        "grid": asdict(grid),
        "params": params.as_dict(),
        "solver": cfg.as_dict(),
        "dt": cfg.dt,
        "scheme": cfg.scheme.value,
        "probes": list(probes),
        "u0_l2": float(np.sqrt(grid.volume * np.sum(grid.weights * np.abs(u0.spectral) ** 2))),
        "wall_clock_s": time.perf_counter() - started,
        "noise": None,
    }
    if metadata:
        meta.update(metadata)
    if err is not None:
        meta["message"] = err
    values = np.array(rec_v, dtype=float).reshape(len(rec_t), len(probes))
    final = fields_now(vhat, zhat) if status is Status.COMPLETED else {}
    return RunRecord(
        times=np.array(rec_t),
        probes={name: values[:, j] for j, name in enumerate(probes)},
        status=status,
        blowup_time=blow_t,
        metadata=meta,
        fields=final,
        snapshots=snapshots,
    )


def solve_deterministic(u0: Field, params: ModelParams, cfg: SolverConfig,
                        probes: Sequence[str] = DETERMINISTIC_PROBES) -> RunRecord:
    return march(u0, params, cfg, probes)


# ---------------------------------------------------------------------------
# Picard iteration of the discrete Duhamel map

# Calibrated once for u0 = sin x on [0, 2 pi), a1 = a2 = 1, n = 32, 8 time
# nodes, tol 1e-10; see ``calibrate_picard_constant``. The discrete map
# already contracts at the starting horizon, so this is a loose heuristic.
C_CAL = 0.0217


@dataclass
class PicardReport:
    horizon: float
    iterates: int
    ratios: list[float]
    distances: list[float]
    converged: bool
    predicted_T: float
    message: str = ""
    trajectory: list[Field] = field(default_factory=list, repr=False)

    @property
    def final(self) -> Field:
        return self.trajectory[-1]


def predicted_horizon(u0: Field, c_cal: float = C_CAL) -> float:
    """Heuristic ``(c R (1 + 2R))^(-8/(4-d))`` with ``R = x0_norm(u0)``."""
    r = x0_norm(u0)
    if r == 0:
        return math.inf
    return (c_cal * r * (1 + 2 * r)) ** (-8.0 / (4 - u0.grid.dim))


def _duhamel(u0hat: np.ndarray, traj: np.ndarray, grid: Grid, params: ModelParams,
             h: float, dealias: bool) -> np.ndarray:
    """Left-rectangle discrete Duhamel map on a uniform node set."""
    e = semigroup_symbol(grid, h)
    out = np.empty_like(traj)
    out[0] = u0hat
    free = u0hat
    acc = np.zeros_like(u0hat)
    for n in range(1, traj.shape[0]):
        # acc_n = sum_{m<n} h S(t_n - t_m) N(U_m), built recursively
        acc = e * (acc + h * nonlinear_spectral(traj[n - 1], grid, params, dealias))
        free = e * free
        out[n] = free + acc
    return out


def _sup_x0(diff: np.ndarray, grid: Grid) -> float:
    return max(x0_norm(Field(grid, spectral=d)) for d in diff)


def picard_iterate(u0: Field, params: ModelParams, horizon: float, n_time_nodes: int,
                   tol: float = 1e-10, max_iter: int = 200, dealias: bool = True,
                   c_cal: float = C_CAL) -> PicardReport:
    """Fixed-point iteration of the discrete Duhamel map on ``[0, horizon]``.

    The trajectory lives on ``n_time_nodes + 1`` equispaced nodes; the initial
    guess is the free evolution ``S(t) u0``. ``distances[j]`` is the
    sup-in-time ``X_0`` distance between iterates ``j+1`` and ``j``; ``ratios``
    are the quotients of successive distances.
    """
    if not horizon > 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if n_time_nodes < 8:
        raise ValueError(f"n_time_nodes must be >= 8, got {n_time_nodes}")
    grid = u0.grid
    h = horizon / n_time_nodes
    nodes = np.arange(n_time_nodes + 1) * h
    u0hat = np.array(u0.spectral)
    traj = np.stack([semigroup_symbol(grid, t) * u0hat for t in nodes])
    predicted = predicted_horizon(u0, c_cal)

    distances: list[float] = []
    ratios: list[float] = []
    converged = False
    message = ""
    it = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, max_iter + 1):
            try:
                new = _duhamel(u0hat, traj, grid, params, h, dealias)
            except FloatingPointError as exc:
                message = f"floating point error: {exc}"
                break
            if not np.all(np.isfinite(new)):
                message = f"non-finite iterate at iteration {it}"
                break
            dist = _sup_x0(new - traj, grid)
            traj = new
            if distances:
                prev = distances[-1]
                ratios.append(dist / prev if prev > 0 else 0.0)
            distances.append(dist)
            if not math.isfinite(dist):
                message = f"non-finite distance at iteration {it}"
                break
            if dist < tol:
                converged = True
                break
        else:
            message = f"no convergence within {max_iter} iterations"

    if converged and any(r >= 1 for r in ratios):
        converged = False
        message = "distance reached tolerance but successive ratios were not all < 1"
    return PicardReport(
        horizon=horizon,
        iterates=it,
        ratios=ratios,
        distances=distances,
        converged=converged,
        predicted_T=predicted,
        message=message,
        trajectory=[Field(grid, spectral=c) for c in traj] if np.all(np.isfinite(traj)) else [],
    )


def contracts(rep: PicardReport) -> bool:
    """Converged with monotone non-increasing ratios, all below 1/2."""
    r = rep.ratios
    return rep.converged and all(x < 0.5 for x in r) and all(b <= a for a, b in zip(r, r[1:]))


def calibrate_picard_constant(u0: Field, params: ModelParams, start_horizon: float = 8.0,
                              n_time_nodes: int = 8, max_halvings: int = 30,
                              tol: float = 1e-10) -> tuple[float, float]:
    """Halve the horizon until the Picard map contracts; return ``(T*, c_cal)``.

    Contraction means convergence with successive ratios that are
    non-increasing and all below 1/2.
    ``c_cal`` is then chosen so that ``predicted_horizon(u0, c_cal) == T*``.
    """
    horizon = start_horizon
    for _ in range(max_halvings):
        rep = picard_iterate(u0, params, horizon, n_time_nodes, tol)
        if contracts(rep):
            r = x0_norm(u0)
            c = horizon ** (-(4 - u0.grid.dim) / 8.0) / (r * (1 + 2 * r))
            return horizon, c
        horizon /= 2
    raise RuntimeError("Picard map did not contract for any tried horizon")
