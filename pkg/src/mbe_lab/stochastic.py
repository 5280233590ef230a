"""Additive Q-Wiener forcing, the stochastic convolution and Monte-Carlo ensembles.

The covariance square root ``phi`` is diagonal in the Fourier basis with a
radial profile ``phi_hat(|k|)``, scaled by ``amplitude``. Each Fourier mode of
the stochastic convolution ``Z`` is then an Ornstein-Uhlenbeck process

    dz_k = -|k|^4 z_k dt + amplitude * phi_hat(k) d beta_k

which is sampled exactly: over a step ``dt`` the increment is Gaussian with
variance ``amplitude^2 phi_hat^2 (1 - exp(-2 dt |k|^4)) / (2 |k|^4)``
(``amplitude^2 phi_hat(0)^2 dt`` for ``k = 0``), expressed in the orthonormal
Fourier basis ``L^(-d/2) exp(i k x)``.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from .diagnostics import STOCHASTIC_PROBES, RunRecord, Status, cumulative_trapezoid
from .errors import EnsembleError, MeanModeDiverges, UnstableNoiseProfile
from .nonlinearity import ModelParams
from .semigroup import semigroup_symbol
from .solver import SolverConfig, march
from .spectral import Field, Grid

PROFILES = ("gaussian", "sobolev", "flat_bandlimited")
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NoiseSpec:
    """Radial noise profile.

    ``param`` is the correlation length ``lam`` for ``gaussian``
    (``exp(-(lam |k|)^2 / 2)``), the order ``gamma`` for ``sobolev``
    (``(1 + |k|^2)^(-gamma/2)``) and the cut-off ``k_cut`` for
    ``flat_bandlimited`` (1 for ``|k| <= k_cut``). The mean mode is forced
    to zero unless ``mean_mode`` is set.
    """

    profile: str
    param: float
    amplitude: float = 1.0
    seed: int = 0
    mean_mode: bool = False

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown noise profile {self.profile!r}; expected one of {PROFILES}")
        if not self.param > 0:
            raise ValueError(f"profile parameter must be positive, got {self.param}")
        if not self.amplitude >= 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude}")
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)

    @classmethod
    def gaussian(cls, lam, **kw):
        return cls("gaussian", lam, **kw)

    @classmethod
    def sobolev(cls, gamma, **kw):
        return cls("sobolev", gamma, **kw)

    @classmethod
    def flat_bandlimited(cls, k_cut, **kw):
        return cls("flat_bandlimited", k_cut, **kw)

    def profile_values(self, kabs: np.ndarray) -> np.ndarray:
        kabs = np.asarray(kabs, dtype=float)
        if self.profile == "gaussian":
            out = np.exp(-0.5 * (self.param * kabs) ** 2)
        elif self.profile == "sobolev":
            out = (1.0 + kabs**2) ** (-0.5 * self.param)
        else:
            out = (kabs <= self.param * (1 + 1e-12)).astype(float)
        if not self.mean_mode:
            out = np.where(kabs == 0, 0.0, out)
        return out

    def check_grid(self, grid: Grid) -> None:
        """Reject profiles whose HS norm still moves by >= 1% when ``n`` doubles."""
        a = _hs_sum(self, grid, 0.0)
        b = _hs_sum(self, grid.with_n(2 * grid.n), 0.0)
        if b == 0:
            return
        change = abs(np.sqrt(b) - np.sqrt(a)) / np.sqrt(b)
        if change >= 0.01:
            raise UnstableNoiseProfile(
                f"{self.profile}({self.param}) HS norm changes by {100 * change:.2f}% when n doubles "
                f"from {grid.n}; resolve more modes or use a smoother profile"
            )

    def as_dict(self) -> dict:
        return asdict(self)


def _hs_sum(spec: NoiseSpec, grid: Grid, s: float) -> float:
    kabs = grid.full_kabs
    return float(np.sum((1.0 + kabs**2) ** s * spec.profile_values(kabs) ** 2))


def hs_norm_of_phi(spec: NoiseSpec, grid: Grid, s: float) -> float:
    """``||phi||_{HS(L^2, H^s)}`` with the Fourier basis as orthonormal basis."""
    return spec.amplitude * np.sqrt(_hs_sum(spec, grid, s))


def _variance_factor(k4: np.ndarray, t: float) -> np.ndarray:
    """``(1 - exp(-2 t k^4)) / (2 k^4)``, equal to ``t`` at ``k = 0``."""
    x = 2.0 * t * k4
    out = np.full(np.shape(k4), float(t))
    pos = x > 0
    out[pos] = -np.expm1(-x[pos]) / (2.0 * k4[pos])
    return out


def mode_variance(spec: NoiseSpec, grid: Grid, t: float) -> np.ndarray:
    """Variance of each orthonormal-basis coefficient of ``Z(t)`` (rfft layout)."""
    phi = spec.profile_values(grid.kabs)
    return spec.amplitude**2 * phi**2 * _variance_factor(grid.k2**2, t)


def orthonormal_coefficients(u: Field) -> np.ndarray:
    """Coefficients of ``u`` against ``L^(-d/2) exp(i k x)`` (rfft layout)."""
    return u.grid.volume ** 0.5 * u.spectral


def expected_z_l2_squared(spec: NoiseSpec, grid: Grid, t: float) -> float:
    """``E ||Z(t)||_2^2`` by the Ito isometry, summed over the grid modes.

    ``t = inf`` gives the stationary value, which exists only for mean-free noise.
    """
    kabs = grid.full_kabs
    phi2 = spec.amplitude**2 * spec.profile_values(kabs) ** 2
    if np.isinf(t):
        zero = kabs == 0
        if np.any(phi2[zero] > 0):
            raise MeanModeDiverges("the undamped k = 0 mode makes E||Z||^2 grow like t")
        return float(np.sum(phi2[~zero] / (2.0 * kabs[~zero] ** 4)))
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    return float(np.sum(phi2 * _variance_factor(kabs**4, t)))


# ---------------------------------------------------------------------------
# Sampling


@lru_cache(maxsize=64)
def _increment_scale(spec_key: tuple, grid: Grid, dt: float) -> tuple[np.ndarray, np.ndarray]:
    spec = NoiseSpec(*spec_key)
    # white noise rfft has E|xi_k|^2 = N^d; rescale to the mean-normalised
    # coefficient variance q_k / L^d
    q = mode_variance(spec, grid, dt)
    scale = np.sqrt(q / grid.volume) / grid.size**0.5
    return semigroup_symbol(grid, dt), scale


def _spec_key(spec: NoiseSpec) -> tuple:
    return (spec.profile, spec.param, spec.amplitude, 0, spec.mean_mode)


def ou_step_spectral(zhat: np.ndarray, spec: NoiseSpec, grid: Grid, dt: float,
                     rng: np.random.Generator) -> np.ndarray:
    e, scale = _increment_scale(_spec_key(spec), grid, float(dt))
    # rfft of real white noise supplies Hermitian-paired Gaussian draws
    xi = np.fft.rfftn(rng.standard_normal(grid.shape))
    return e * zhat + scale * xi


@dataclass
class StochState:
    """``u = v + z`` together with the RNG stream that drives ``z``.

    The generator is advanced in place by :func:`sample_z_step`.
    """

    z: Field
    v: Field
    t: float
    rng: np.random.Generator

    @classmethod
    def initial(cls, u0: Field, seed: int) -> "StochState":
        return cls(Field.zeros(u0.grid), u0, 0.0, np.random.default_rng(seed))

    @property
    def u(self) -> Field:
        return self.v + self.z


def sample_z_step(state: StochState, spec: NoiseSpec, dt: float) -> StochState:
    """Exact OU update of every Fourier mode of ``z`` over ``dt``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    grid = state.z.grid
    zhat = ou_step_spectral(state.z.spectral, spec, grid, dt, state.rng)
    z = Field(grid, spectral=zhat)
    # Hermitian pairing means the inverse transform is real by construction;
    # verify the self-conjugate modes carry no imaginary part.
    _assert_real(zhat, grid)
    return StochState(z=z, v=state.v, t=state.t + dt, rng=state.rng)


def _assert_real(zhat: np.ndarray, grid: Grid) -> None:
    if grid.dim == 1:
        self_conj = zhat[[0, -1]]
    else:
        n2 = grid.n // 2
        self_conj = zhat[[0, 0, n2, n2], [0, -1, 0, -1]]
    if np.any(np.abs(self_conj.imag) > 1e-12 * (1 + np.abs(self_conj.real))):
        raise AssertionError("noise draw broke Hermitian symmetry")


def solve_stochastic(u0: Field, params: ModelParams, spec: NoiseSpec, cfg: SolverConfig,
                     probes: Sequence[str] = STOCHASTIC_PROBES) -> RunRecord:
    """Solve for ``v = u - Z`` with ``Z`` sampled exactly alongside.

    The run stops at the first step where ``x0_norm(v)`` exceeds
    ``cfg.blowup_threshold`` (a discrete stopping time).
    """
    spec.check_grid(u0.grid)
    rng = np.random.default_rng(spec.seed)
    grid = u0.grid

    def z_stepper(zhat, h):
        return ou_step_spectral(zhat, spec, grid, h, rng)

    return march(u0, params, cfg, probes, z_stepper=z_stepper, metadata={"noise": spec.as_dict()})


# ---------------------------------------------------------------------------
# Ensembles


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(base_seed: int, index: int) -> int:
    """Per-member seed ``base ^ splitmix64(index)``; independent of scheduling."""
    return (int(base_seed) ^ splitmix64(int(index))) & _MASK64


@dataclass(frozen=True)
class Functional:
    """Per-sample scalar of a probe series.

    ``kind`` is ``sup`` (``sup_t probe^power``), ``integral``
    (``int_0^T probe^power dt``, trapezoid) or ``final``.
    """

    probe: str
    kind: str = "sup"
    power: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sup", "integral", "final"):
            raise ValueError(f"unknown functional kind {self.kind!r}")

    @property
    def name(self) -> str:
        p = "" if self.power == 1 else f"^{self.power:g}"
        return f"{self.kind}({self.probe}{p})"

    def __call__(self, times: np.ndarray, series: np.ndarray) -> float:
        y = series**self.power
        if self.kind == "sup":
            return float(np.max(y))
        if self.kind == "final":
            return float(y[-1])
        return float(cumulative_trapezoid(y, times)[-1])


@dataclass(frozen=True)
class EnsembleJob:
    u0: Field
    params: ModelParams
    noise: NoiseSpec
    cfg: SolverConfig
    probes: tuple[str, ...] = STOCHASTIC_PROBES
    functionals: tuple[Functional, ...] = ()


@dataclass
class EnsembleStats:
    times: np.ndarray
    seeds: list[int]
    samples: dict[str, np.ndarray]
    functional_samples: dict[str, np.ndarray]
    records: list[RunRecord] = field(default_factory=list, repr=False)

    @property
    def n_samples(self) -> int:
        return len(self.seeds)

    def mean(self, probe: str) -> np.ndarray:
        return self.samples[probe].mean(axis=0)

    def var(self, probe: str) -> np.ndarray:
        return self.samples[probe].var(axis=0, ddof=1)

    def stderr(self, probe: str) -> np.ndarray:
        return np.sqrt(self.var(probe) / self.n_samples)

    def functional(self, name: str) -> tuple[float, float]:
        """``(mean, standard error)`` of a per-sample functional."""
        x = self.functional_samples[name]
        return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))

    def sup(self, probe: str) -> tuple[float, float]:
        return self.functional(Functional(probe, "sup").name)

    def mean_record(self, metadata: dict | None = None) -> RunRecord:
        return RunRecord(
            times=self.times,
            probes={p: self.mean(p) for p in self.samples},
            metadata={"n_samples": self.n_samples, **(metadata or {})},
        )


def _run_member(job: EnsembleJob, index: int, seed: int, keep_record: bool):
    spec = replace(job.noise, seed=seed)
    try:
        rec = solve_stochastic(job.u0, job.params, spec, job.cfg, job.probes)
    except Exception as exc:  # reported with the sample index
        return index, seed, None, f"{type(exc).__name__}: {exc}"
    if rec.status is not Status.COMPLETED:
        return index, seed, None, rec.status_text
    if not keep_record:
        rec.fields = {}
        rec.snapshots = []
    return index, seed, rec, None


def _run_chunk(args):
    job, items, keep = args
    return [_run_member(job, i, s, keep) for i, s in items]


def default_workers() -> int:
    return int(os.environ.get("MBE_LAB_THREADS", "1"))


def mc_ensemble(job: EnsembleJob, n_samples: int, n_workers: int | None = None,
                seeds: Sequence[int] | None = None, keep_records: bool = False) -> EnsembleStats:
    """Run ``n_samples`` independent trajectories and collect statistics.

    Member ``i`` uses ``derive_seed(job.noise.seed, i)`` unless explicit
    ``seeds`` are given, so results do not depend on ``n_workers``.
    """
    if n_samples < 2:
        raise ValueError("an ensemble needs at least two samples")
    if seeds is None:
        seeds = [derive_seed(job.noise.seed, i) for i in range(n_samples)]
    elif len(seeds) != n_samples:
        raise ValueError("len(seeds) must equal n_samples")
    items = list(enumerate(int(s) for s in seeds))
    n_workers = default_workers() if n_workers is None else n_workers
    if n_workers <= 1:
        results = _run_chunk((job, items, keep_records))
    else:
        chunks = [items[w::n_workers] for w in range(n_workers)]
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = [r for part in pool.map(_run_chunk, [(job, c, keep_records) for c in chunks]) for r in part]
        results.sort(key=lambda r: r[0])

    failures = [(i, s, msg) for i, s, rec, msg in results if msg is not None]
    if failures:
        raise EnsembleError(failures)
    records = [rec for _, _, rec, _ in results]
    times = records[0].times
    samples = {p: np.stack([r.probes[p] for r in records]) for p in job.probes}
    functionals = [Functional(p, "sup") for p in job.probes] + list(job.functionals)
    fsamples = {f.name: np.array([f(times, r.probes[f.probe]) for r in records]) for f in functionals}
    return EnsembleStats(
        times=times,
        seeds=[s for _, s in items],
        samples=samples,
        functional_samples=fsamples,
        records=records if keep_records else [],
    )
