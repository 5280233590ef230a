"""Biharmonic propagator ``S(t) = exp(-t Delta^2)`` and decay-rate fits."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence, Union

import numpy as np

from .errors import DegenerateFit, NegativeTime, UnderResolved
from .spectral import Field, Grid, _lp, frac_multiplier, make_grid

# Symbol value required at the Nyquist wavenumber for a kernel to count as resolved.
SYMBOL_TAIL = 1e-14
# Minimum period in units of the diffusive length t**(1/4).
MIN_PERIODS = 40.0
CLEAN_R2 = 0.99


def semigroup_symbol(grid: Grid, t: float) -> np.ndarray:
    return np.exp(-t * grid.k2**2)


def apply_semigroup(u: Field, t: float) -> Field:
    """Multiply the spectral coefficients of ``u`` by ``exp(-t |k|^4)``."""
    if t < 0:
        raise NegativeTime(f"t must be >= 0, got {t}")
    if t == 0:
        return u
    return Field(u.grid, spectral=semigroup_symbol(u.grid, t) * u.spectral)


def check_resolved(grid: Grid, t: float) -> None:
    if t <= 0:
        raise NegativeTime(f"kernel needs t > 0, got {t}")
    if grid.length < MIN_PERIODS * t**0.25:
        raise UnderResolved(
            f"L = {grid.length} < {MIN_PERIODS} t^(1/4) = {MIN_PERIODS * t**0.25:.4g}"
        )
    tail = np.exp(-t * grid.k_nyquist**4)
    if tail >= SYMBOL_TAIL:
        raise UnderResolved(f"symbol at Nyquist is {tail:.3g} >= {SYMBOL_TAIL} (increase n)")


def kernel_field(grid: Grid, t: float) -> Field:
    """Periodised kernel ``K_t(x) ~ int exp(-t|xi|^4) exp(i x xi) dxi``.

    The whole-space integral is approximated by its Riemann sum over the
    grid wavenumbers, so the values are independent of ``L`` once the
    torus is large compared with ``t**(1/4)``.
    """
    check_resolved(grid, t)
    coeffs = (grid.k0**grid.dim) * semigroup_symbol(grid, t)
    return Field(grid, spectral=coeffs)


# ---------------------------------------------------------------------------
# Decay-rate descriptors


@dataclass(frozen=True)
class KernelNorm:
    """``|| d^order |D|^s K_t ||_{L^p}`` on a whole-space-emulating grid.

    ``order`` is the length of the multi-index of an ordinary derivative,
    taken along the first axis.
    """

    dim: int
    p: float
    s: float = 0.0
    order: int = 0
    n: int | None = None
    length: float = 80.0

    kind = "kernel_lp"

    @property
    def grid(self) -> Grid:
        n = self.n or (4096 if self.dim == 1 else 512)
        return make_grid(self.dim, n, self.length)

    @property
    def r(self) -> float:
        return 1.0

    def expected_exponent(self) -> float:
        return -self.dim / 4 * (1 - 1 / self.p) - (self.s + self.order) / 4

    def evaluate(self, t: float) -> float:
        grid = self.grid
        k = kernel_field(grid, t)
        coeffs = k.spectral
        if self.s:
            coeffs = frac_multiplier(self.s).values(grid) * coeffs
        if self.order:
            coeffs = (1j * grid.k[0]) ** self.order * coeffs
            if self.order % 2:
                coeffs = np.where(grid.nyquist_mask[0], 0, coeffs)
        return _lp(Field(grid, spectral=coeffs).real, grid, self.p)

    def describe(self) -> dict:
        return {"descriptor": self.kind, **asdict(self)}


@dataclass(frozen=True)
class SmoothingNorm:
    """``|| |D|^s S(t) u0 ||_{L^p} / ||u0||_{L^r}`` for a fixed rough ``u0``.

    ``roughness="critical"`` draws random phases with ``|u0_k| ~ |k|^(-d/2)``:
    every dyadic shell carries equal energy, which is the data for which the
    smoothing rate ``t^(-s/4)`` (with ``p = r = 2``) is sharp.
    ``roughness="white"`` draws grid white noise; its energy grows with the
    shell volume, so it decays like a point mass and the observed exponent is
    ``-d/8 - s/4`` instead.
    """

    dim: int
    s: float
    p: float = 2.0
    r: float = 2.0
    roughness: str = "critical"
    seed: int = 0
    n: int | None = None
    length: float = 80.0

    kind = "smoothing"

    def __post_init__(self):
        if self.p != 2 or self.r != 2:
            raise ValueError("smoothing descriptors support p = r = 2 only")
        if self.roughness not in ("critical", "white"):
            raise ValueError(f"unknown roughness {self.roughness!r}")

    @property
    def grid(self) -> Grid:
        n = self.n or (4096 if self.dim == 1 else 512)
        return make_grid(self.dim, n, self.length)

    @property
    def order(self) -> int:
        return 0

    def expected_exponent(self) -> float:
        if self.roughness == "white":
            return -self.dim / 8 - self.s / 4
        return -self.dim / 4 * (1 / self.r - 1 / self.p) - self.s / 4

    def initial_field(self) -> Field:
        grid = self.grid
        rng = np.random.default_rng(self.seed)
        if self.roughness == "white":
            return Field(grid, real=rng.standard_normal(grid.shape))
        phases = np.exp(2j * np.pi * rng.random(grid.spectral_shape))
        amp = np.zeros(grid.spectral_shape)
        pos = (grid.kabs > 0) & ~grid.any_nyquist
        amp[pos] = grid.kabs[pos] ** (-grid.dim / 2)
        # irfftn enforces Hermitian symmetry on the self-conjugate planes
        u0 = Field(grid, real=Field(grid, spectral=amp * phases).real)
        return u0

    def evaluate(self, t: float) -> float:
        check_resolved(self.grid, t)
        u0 = _cached_u0(self)
        out = frac_multiplier(self.s)(apply_semigroup(u0, t))
        return _lp(out.real, self.grid, self.p) / _lp(u0.real, self.grid, self.r)

    def describe(self) -> dict:
        return {"descriptor": self.kind, **asdict(self)}


_U0_CACHE: dict = {}


def _cached_u0(desc: SmoothingNorm) -> Field:
    if desc not in _U0_CACHE:
        _U0_CACHE.clear()
        _U0_CACHE[desc] = desc.initial_field()
    return _U0_CACHE[desc]


NormDescriptor = Union[KernelNorm, SmoothingNorm]


@dataclass(frozen=True)
class DecayFit:
    """Least-squares fit of ``log(y) = exponent * log(t) + intercept``."""

    exponent: float
    intercept: float
    r_squared: float
    t_range: tuple[float, float]

    @property
    def clean(self) -> bool:
        return self.r_squared >= CLEAN_R2


def loglog_fit(t: Sequence[float], y: Sequence[float]) -> DecayFit:
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.size < 2:
        raise DegenerateFit("need at least two samples")
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise DegenerateFit("values must be positive and finite for a log-log fit")
    if np.allclose(y, y[0], rtol=1e-14, atol=0):
        raise DegenerateFit("all values are equal")
    lx, ly = np.log(t), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 0.0
    return DecayFit(float(slope), float(intercept), float(max(0.0, r2)), (float(t.min()), float(t.max())))


def log_samples(t_min: float = 1e-2, t_max: float = 1.0, count: int = 9) -> np.ndarray:
    return np.geomspace(t_min, t_max, count)


def fit_decay_rate(norm_fn: NormDescriptor, t_samples: Sequence[float]) -> DecayFit:
    t = np.asarray(t_samples, dtype=float)
    if t.size < 6:
        raise ValueError(f"need >= 6 time samples, got {t.size}")
    for ti in t:
        check_resolved(norm_fn.grid, ti)
    values = [norm_fn.evaluate(ti) for ti in t]
    return loglog_fit(t, values)


def default_decay_matrix() -> list[NormDescriptor]:
    """The ``{d} x {p} x {s}`` kernel matrix plus first-derivative checks."""
    out: list[NormDescriptor] = []
    for d in (1, 2):
        for p in (1.0, 2.0, 4.0, np.inf):
            for s in (0.0, 1.0, 2.0):
                out.append(KernelNorm(dim=d, p=p, s=s))
    out.append(KernelNorm(dim=1, p=np.inf, order=1))
    out.append(KernelNorm(dim=2, p=1.0, order=1))
    out.append(SmoothingNorm(dim=1, s=1.5))
    return out


@dataclass
class DecayCheck:
    descriptor: NormDescriptor
    fit: DecayFit
    expected: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return abs(self.fit.exponent - self.expected) <= self.tolerance

    def row(self) -> dict:
        d = self.descriptor
        return {
            "descriptor": d.kind,
            "d": d.dim,
            "p": d.p,
            "r": d.r,
            "s": d.s,
            "alpha": d.order,
            "expected_exponent": self.expected,
            "fitted_exponent": self.fit.exponent,
            "r_squared": self.fit.r_squared,
            "pass": self.passed,
        }


def verify_decay(descriptors: Sequence[NormDescriptor] | None = None,
                 t_samples: Sequence[float] | None = None,
                 tolerance: float = 0.02) -> list[DecayCheck]:
    descriptors = default_decay_matrix() if descriptors is None else descriptors
    t = log_samples() if t_samples is None else np.asarray(t_samples)
    return [DecayCheck(d, fit_decay_rate(d, t), d.expected_exponent(), tolerance) for d in descriptors]
