"""Run records, probes and the energy / coarsening functionals."""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DegenerateFit, MissingProbe, WindowOutsideRecord, WrongRegime
from .semigroup import DecayFit, loglog_fit
from .spectral import Field, _lp, grad_magnitude, hs_norm, laplacian, lp_norm, x0_norm

# Young-inequality constant multiplying ||grad Z||_4^4 in the Gronwall source term.
GRONWALL_C = 4096.0
GRONWALL_EPS = 1e-6


class Status(str, Enum):
    COMPLETED = "completed"
    BLOWUP = "blowup"
    ERROR = "error"


@dataclass
class RunRecord:
    times: np.ndarray
    probes: dict[str, np.ndarray]
    status: Status = Status.COMPLETED
    blowup_time: float | None = None
    error: str | None = None
    metadata: dict = field(default_factory=dict)
    fields: dict[str, Field] = field(default_factory=dict, repr=False)
    snapshots: list[tuple[float, str, Field]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.probes = {k: np.asarray(v, dtype=float) for k, v in self.probes.items()}
        for name, series in self.probes.items():
            if series.shape != self.times.shape:
                raise ValueError(f"probe {name!r} has {series.size} values for {self.times.size} times")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.probes[name]
        except KeyError:
            raise MissingProbe(f"record has no probe {name!r} (has {sorted(self.probes)})") from None

    @property
    def status_text(self) -> str:
        if self.status is Status.BLOWUP:
            return f"blowup({self.blowup_time:.6g})"
        if self.status is Status.ERROR:
            return f"error({self.error})"
        return self.status.value

    def write_csv(self, path) -> None:
        names = list(self.probes)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", *names])
            for i, t in enumerate(self.times):
                w.writerow([repr(float(t)), *(repr(float(self.probes[n][i])) for n in names)])

    def meta_document(self) -> dict:
        return {**self.metadata, "status": self.status_text}

    def write_meta(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.meta_document(), fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")


def _json_default(obj):
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


# ---------------------------------------------------------------------------
# Probes
#
# A probe name is ``[target.]quantity`` with target in {u, v, z} (default u)
# and quantity one of l2, linf, mean, x0, lap_l2, grad_l4, hs<s>.
# ``C`` is an alias for ``u.l2``.

_QUANTITIES: dict[str, Callable[[Field], float]] = {
    "l2": lambda f: lp_norm(f, 2),
    "linf": lambda f: lp_norm(f, np.inf),
    "mean": lambda f: f.mean(),
    "x0": x0_norm,
    "lap_l2": lambda f: lp_norm(laplacian(f), 2),
    "grad_l4": lambda f: _lp(grad_magnitude(f), f.grid, 4),
}
_HS = re.compile(r"hs(\d+(?:\.\d+)?)$")

DETERMINISTIC_PROBES = ("C", "x0", "hs1", "hs2", "hs3")
ENERGY_PROBES = ("v.l2", "v.lap_l2", "v.grad_l4")
NOISE_PROBES = ("z.l2", "z.grad_l4")
STOCHASTIC_PROBES = ("C", "x0", *ENERGY_PROBES, *NOISE_PROBES)


@lru_cache(maxsize=None)
def parse_probe(name: str) -> tuple[str, Callable[[Field], float]]:
    if name == "C":
        return "u", _QUANTITIES["l2"]
    target, _, quantity = name.rpartition(".")
    target = target or "u"
    if target not in ("u", "v", "z"):
        raise ValueError(f"unknown probe target {target!r} in {name!r}")
    if quantity in _QUANTITIES:
        return target, _QUANTITIES[quantity]
    m = _HS.match(quantity)
    if m:
        s = float(m.group(1))
        return target, lambda f: hs_norm(f, s)
    raise ValueError(f"unknown probe quantity {quantity!r} in {name!r}")


def validate_probes(names: Sequence[str]) -> None:
    for n in names:
        parse_probe(n)


def evaluate_probes(names: Sequence[str], fields: Mapping[str, Field]) -> list[float]:
    out = []
    for n in names:
        target, fn = parse_probe(n)
        out.append(fn(fields[target]))
    return out


# ---------------------------------------------------------------------------
# Functionals


def coarseness(u: Field) -> float:
    """RMS roughness ``||u||_{L^2}``."""
    return lp_norm(u, 2)


def cumulative_trapezoid(y: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y, dtype=float)
    if y.size > 1:
        out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))
    return out


def energy_integrand(record: RunRecord) -> np.ndarray:
    return record["v.lap_l2"] ** 2 + record["v.grad_l4"] ** 4


def energy_m(record: RunRecord) -> np.ndarray:
    """``M(t) = 0.5 ||v(t)||^2 + int_0^t (||lap v||^2 + ||grad v||_4^4) ds``.

    The time integral is the cumulative trapezoid rule on the recorded mesh.
    """
    return 0.5 * record["v.l2"] ** 2 + cumulative_trapezoid(energy_integrand(record), record.times)


@dataclass
class GronwallCheck:
    times: np.ndarray
    m_series: np.ndarray
    envelope: np.ndarray
    strict_envelope: np.ndarray
    c_t: float
    slack: float
    passed: bool

    @property
    def margin(self) -> np.ndarray:
        return self.envelope - self.m_series

    def verdict(self) -> dict:
        worst = int(np.argmin(self.margin / np.maximum(self.envelope, 1e-300)))
        return {
            "pass": bool(self.passed),
            "c_t": self.c_t,
            "slack": self.slack,
            "min_margin": float(self.margin.min()),
            "worst_t": float(self.times[worst]),
            "strict_pass": bool(np.all(self.m_series <= self.strict_envelope * (1 + self.slack))),
        }


def _check_regime(record: RunRecord) -> None:
    params = record.metadata.get("params")
    if params is None:
        raise WrongRegime("record metadata carries no model parameters")
    want = {"alpha1": 1.0, "alpha2": 0.0, "alpha3": 1.0, "alpha4": 0.0}
    got = {k: float(params[k]) for k in want}
    if got != want:
        raise WrongRegime(f"a priori bound needs {want}, record has {got}")


def gronwall_check(record: RunRecord, c: float = GRONWALL_C) -> GronwallCheck:
    """Compare ``M(v(t))`` with ``(||u0||^2 + C_T) e^t``.

    ``C_T = sup_t (c ||grad Z||_4^4 + 0.5 ||Z||_2^2)`` is taken over the
    recorded noise series. The relative slack is ``1e-6 + 2 dt^2 max(integrand)``
    with ``dt`` the largest recorded time increment.
    """
    _check_regime(record)
    m = energy_m(record)
    if record.metadata.get("noise") is None and "z.l2" not in record.probes:
        zl2 = zg4 = np.zeros_like(record.times)
    else:
        zl2, zg4 = record["z.l2"], record["z.grad_l4"]
    c_t = float(np.max(c * zg4**4 + 0.5 * zl2**2))
    m0 = float(m[0])
    t = record.times - record.times[0]
    envelope = (2.0 * m0 + c_t) * np.exp(t)
    strict = m0 * np.exp(t) + c_t * np.expm1(t)
    dt = float(np.max(np.diff(record.times))) if record.times.size > 1 else 0.0
    slack = GRONWALL_EPS + 2.0 * dt**2 * float(np.max(energy_integrand(record)))
    passed = bool(np.all(m <= envelope * (1.0 + slack)))
    return GronwallCheck(record.times, m, envelope, strict, c_t, slack, passed)


def default_coarsening_window(record: RunRecord) -> tuple[float, float]:
    dt = record.metadata.get("dt")
    if dt is None:
        dt = float(np.min(np.diff(record.times)))
    return 5.0 * float(dt), 1e-2


def fit_coarsening_exponent(record: RunRecord, t_window: tuple[float, float] | None = None,
                            probe: str = "C") -> DecayFit:
    """Log-log slope of the coarseness series over ``t_window``."""
    lo, hi = default_coarsening_window(record) if t_window is None else t_window
    t = record.times
    end = record.blowup_time if record.status is Status.BLOWUP else t[-1]
    if lo <= 0 or lo >= hi or lo < t[0] or hi > end * (1 + 1e-12):
        raise WindowOutsideRecord(f"window [{lo}, {hi}] not inside recorded range [{t[0]}, {end}]")
    sel = (t >= lo * (1 - 1e-12)) & (t <= hi * (1 + 1e-12))
    if sel.sum() < 2:
        raise WindowOutsideRecord(f"fewer than two samples in window [{lo}, {hi}]")
    c = record[probe][sel]
    if np.all(c == 0):
        raise DegenerateFit("coarseness vanishes identically on the window (no coarsening)")
    return loglog_fit(t[sel], c)

