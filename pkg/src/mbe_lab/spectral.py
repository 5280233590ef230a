"""Periodic grids, real scalar fields and Fourier-multiplier calculus.

Conventions
-----------
Spectral coefficients are stored in real-FFT layout (``numpy.fft.rfftn``)
and scaled by ``1/N**d`` so that the ``k = 0`` coefficient is the spatial
mean. With this scaling ``||u||_2**2 = L**d * sum_k |u_k|**2`` where the sum
runs over the full (Hermitian) spectrum.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import GridMismatch, InvalidGrid, NegativeOrder, NonFiniteField, OddGridSize

SNAPSHOT_MAGIC = b"MBEF"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sIIId")


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on ``[0, length)**dim``."""

    dim: int
    n: int
    length: float

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InvalidGrid(f"dim must be 1 or 2, got {self.dim}")
        if int(self.n) != self.n:
            raise InvalidGrid(f"n must be an integer, got {self.n}")
        if self.n % 2:
            raise OddGridSize(f"n must be even, got {self.n}")
        if self.n < 8:
            raise InvalidGrid(f"n must be >= 8, got {self.n}")
        if not self.length > 0:
            raise InvalidGrid(f"length must be positive, got {self.length}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def spectral_shape(self) -> tuple[int, ...]:
        return (self.n,) * (self.dim - 1) + (self.n // 2 + 1,)

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def dx(self) -> float:
        return self.length / self.n

    @property
    def cell_volume(self) -> float:
        return self.dx**self.dim

    @property
    def volume(self) -> float:
        return self.length**self.dim

    @property
    def k0(self) -> float:
        """Wavenumber spacing ``2 pi / L``."""
        return 2 * np.pi / self.length

    @property
    def k_nyquist(self) -> float:
        return np.pi * self.n / self.length

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """1-D wavenumber set ``2 pi m / L`` for ``m = -N/2+1, ..., N/2`` (sorted)."""
        m = np.arange(-self.n // 2 + 1, self.n // 2 + 1)
        return self.k0 * m

    @cached_property
    def _axis_k(self) -> np.ndarray:
        # FFT ordering with the Nyquist index mapped to +N/2
        m = np.fft.fftfreq(self.n, 1.0 / self.n)
        m[self.n // 2] = self.n // 2
        return self.k0 * m

    @cached_property
    def k(self) -> tuple[np.ndarray, ...]:
        """Broadcastable wavenumber components in rfft layout."""
        half = self.k0 * np.arange(self.n // 2 + 1)
        if self.dim == 1:
            return (half,)
        return (self._axis_k[:, None], half[None, :])

    @cached_property
    def k2(self) -> np.ndarray:
        out = np.zeros(self.spectral_shape)
        for kj in self.k:
            out = out + kj**2
        return out

    @cached_property
    def kabs(self) -> np.ndarray:
        return np.sqrt(self.k2)

    @cached_property
    def nyquist_mask(self) -> tuple[np.ndarray, ...]:
        """Per-axis boolean masks selecting the Nyquist plane of that axis."""
        masks = []
        for axis in range(self.dim):
            m = np.zeros(self.spectral_shape, dtype=bool)
            idx = [slice(None)] * self.dim
            idx[axis] = self.n // 2
            m[tuple(idx)] = True
            masks.append(m)
        return tuple(masks)

    @cached_property
    def any_nyquist(self) -> np.ndarray:
        out = np.zeros(self.spectral_shape, dtype=bool)
        for m in self.nyquist_mask:
            out |= m
        return out

    @cached_property
    def weights(self) -> np.ndarray:
        """Multiplicity of each rfft-layout coefficient in the full spectrum."""
        w = np.full(self.spectral_shape, 2.0)
        w[..., 0] = 1.0
        w[..., -1] = 1.0
        return w

    @cached_property
    def full_kabs(self) -> np.ndarray:
        """``|k|`` on the full (not half) spectrum, FFT ordering."""
        axes = np.meshgrid(*([self._axis_k] * self.dim), indexing="ij")
        return np.sqrt(sum(a**2 for a in axes))

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        x = np.arange(self.n) * self.dx
        return tuple(np.meshgrid(*([x] * self.dim), indexing="ij"))

    def with_n(self, n: int) -> "Grid":
        return Grid(self.dim, n, self.length)


def make_grid(dim: int, n: int, length: float) -> Grid:
    return Grid(int(dim), int(n), float(length))


def _forward(values: np.ndarray, n: int, dim: int) -> np.ndarray:
    return np.fft.rfftn(values) / n**dim


def _inverse(coeffs: np.ndarray, n: int, dim: int) -> np.ndarray:
    return np.fft.irfftn(coeffs * n**dim, s=(n,) * dim, axes=tuple(range(dim)))


class Field:
    """Real scalar field on a :class:`Grid`.

    Holds real-space samples and/or spectral coefficients; whichever is
    missing is computed on first access. Both arrays are read-only, so a
    Field may be shared freely.
    """

    __slots__ = ("grid", "_real", "_spectral")

    def __init__(self, grid: Grid, real=None, spectral=None):
        if real is None and spectral is None:
            raise ValueError("need real or spectral values")
        self.grid = grid
        self._real = None
        self._spectral = None
        if real is not None:
            real = np.array(real, dtype=float)
            if real.shape != grid.shape:
                raise GridMismatch(f"real values have shape {real.shape}, grid wants {grid.shape}")
            real.setflags(write=False)
            self._real = real
        if spectral is not None:
            spectral = np.array(spectral, dtype=complex)
            if spectral.shape != grid.spectral_shape:
                raise GridMismatch(
                    f"spectral values have shape {spectral.shape}, grid wants {grid.spectral_shape}"
                )
            spectral.setflags(write=False)
            self._spectral = spectral

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[..., np.ndarray]) -> "Field":
        return cls(grid, real=np.broadcast_to(fn(*grid.coords), grid.shape))

    @classmethod
    def zeros(cls, grid: Grid) -> "Field":
        return cls(grid, real=np.zeros(grid.shape))

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "Field":
        return cls(grid, real=np.full(grid.shape, float(c)))

    @property
    def real(self) -> np.ndarray:
        if self._real is None:
            r = _inverse(self._spectral, self.grid.n, self.grid.dim)
            r.setflags(write=False)
            self._real = r
        return self._real

    @property
    def spectral(self) -> np.ndarray:
        if self._spectral is None:
            s = _forward(self._real, self.grid.n, self.grid.dim)
            s.setflags(write=False)
            self._spectral = s
        return self._spectral

    def full_spectrum(self) -> np.ndarray:
        """Complex coefficients on the full ``N**d`` wavenumber set (FFT order)."""
        return np.fft.fftn(self.real) / self.grid.size

    def mean(self) -> float:
        return float(self.spectral.flat[0].real)

    def is_finite(self) -> bool:
        arr = self._real if self._real is not None else self._spectral
        return bool(np.all(np.isfinite(arr)))

    def require_finite(self) -> "Field":
        if not self.is_finite():
            raise NonFiniteField("field contains NaN or Inf")
        return self

    def _check(self, other: "Field"):
        if other.grid != self.grid:
            raise GridMismatch(f"{self.grid} vs {other.grid}")

    def __add__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.grid, real=self.real + other.real)
        return Field(self.grid, real=self.real + other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Field):
            self._check(other)
            return Field(self.grid, real=self.real - other.real)
        return Field(self.grid, real=self.real - other)

    def __neg__(self):
        return Field(self.grid, real=-self.real)

    def __mul__(self, scalar):
        if isinstance(scalar, Field):
            return NotImplemented
        return Field(self.grid, real=self.real * scalar)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Field({self.grid}, mean={self.mean():.6g})"


def random_field(grid: Grid, rng: np.random.Generator, k_max: float | None = None,
                 spectrum_slope: float = 0.0, rms: float = 1.0) -> Field:
    """Mean-free random field with modes ``0 < |k| <= k_max``.

    Amplitudes follow ``|k|**spectrum_slope`` with independent Gaussian
    coefficients; the result is rescaled to the requested RMS value.
    """
    white = rng.standard_normal(grid.shape)
    coeffs = _forward(white, grid.n, grid.dim)
    kabs = grid.kabs
    mask = kabs > 0
    if k_max is not None:
        mask &= kabs <= k_max
    mask &= ~grid.any_nyquist
    shaped = np.zeros_like(coeffs)
    shaped[mask] = coeffs[mask] * kabs[mask] ** spectrum_slope
    f = Field(grid, spectral=shaped)
    current = np.sqrt(np.mean(f.real**2))
    if current == 0:
        return f
    return f * (rms / current)


# ---------------------------------------------------------------------------
# Multipliers


@dataclass(frozen=True)
class Multiplier:
    """Fourier multiplier ``u_k -> symbol(k) u_k``.

    ``symbol`` receives the tuple of broadcastable wavenumber components of
    a grid (rfft layout). Odd symbols should set ``zero_nyquist`` so that the
    ambiguous Nyquist plane is dropped and the output stays real.
    """

    symbol: Callable[[tuple[np.ndarray, ...]], np.ndarray]
    description: str = ""
    zero_nyquist_axes: tuple[int, ...] = ()

    def values(self, grid: Grid) -> np.ndarray:
        sym = np.broadcast_to(np.asarray(self.symbol(grid.k)), grid.spectral_shape).copy()
        for axis in self.zero_nyquist_axes:
            sym[grid.nyquist_mask[axis]] = 0
        return sym

    def __call__(self, u: Field) -> Field:
        return Field(u.grid, spectral=self.values(u.grid) * u.spectral)


def derivative_multiplier(axis: int) -> Multiplier:
    return Multiplier(lambda k: 1j * k[axis], f"d/dx{axis}", (axis,))


LAPLACIAN = Multiplier(lambda k: -sum(kj**2 for kj in k), "laplacian")


def frac_multiplier(s: float) -> Multiplier:
    if s < 0:
        raise NegativeOrder(f"order must be >= 0, got {s}")

    def symbol(k):
        kabs = np.sqrt(sum(kj**2 for kj in k))
        out = np.zeros(np.broadcast(*k).shape)
        pos = kabs > 0
        out[pos] = kabs[pos] ** s
        return out

    return Multiplier(symbol, f"|D|^{s}")


@lru_cache(maxsize=64)
def _derivative_symbol(grid: Grid, axis: int) -> np.ndarray:
    return derivative_multiplier(axis).values(grid)


def gradient(u: Field) -> list[Field]:
    """Spectral gradient; component j is ``F^-1[i k_j u_k]``."""
    g = u.grid
    return [Field(g, spectral=_derivative_symbol(g, j) * u.spectral) for j in range(g.dim)]


def divergence(components: Sequence[Field]) -> Field:
    g = components[0].grid
    acc = sum(_derivative_symbol(g, j) * c.spectral for j, c in enumerate(components))
    return Field(g, spectral=acc)


def laplacian(u: Field) -> Field:
    return Field(u.grid, spectral=-u.grid.k2 * u.spectral)


def frac_deriv(u: Field, s: float) -> Field:
    """``|D|^s u`` with the zero mode annihilated."""
    return frac_multiplier(s)(u)


# ---------------------------------------------------------------------------
# Norms


def lp_norm(u: Field, p: float) -> float:
    """Rectangle-rule ``L^p`` norm; ``p = inf`` gives the max norm."""
    return _lp(u.real, u.grid, p)


def _lp(values: np.ndarray, grid: Grid, p: float) -> float:
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    a = np.abs(values)
    if np.isinf(p):
        return float(a.max())
    if p == 2:
        return float(np.sqrt(np.sum(a * a) * grid.cell_volume))
    return float((np.sum(a**p) * grid.cell_volume) ** (1.0 / p))


def spectral_l2_squared(u: Field) -> float:
    """``||u||_2**2`` evaluated by Parseval on the coefficients."""
    g = u.grid
    return float(g.volume * np.sum(g.weights * np.abs(u.spectral) ** 2))


def hs_norm(u: Field, s: float) -> float:
    """Inhomogeneous Sobolev norm, scaled so ``hs_norm(u, 0) == lp_norm(u, 2)``."""
    g = u.grid
    w = g.weights * (1.0 + g.k2) ** s
    return float(np.sqrt(g.volume * np.sum(w * np.abs(u.spectral) ** 2)))


def grad_magnitude(u: Field) -> np.ndarray:
    """Pointwise Euclidean length of the gradient, on the grid."""
    comps = gradient(u)
    return np.sqrt(sum(c.real**2 for c in comps))


def x0_norm(u: Field) -> float:
    """``||u||_2 + || |grad u| ||_4`` (the data-space norm at one instant)."""
    return lp_norm(u, 2) + _lp(grad_magnitude(u), u.grid, 4)


# ---------------------------------------------------------------------------
# Snapshot I/O


def write_snapshot(path, u: Field) -> None:
    """Write the little-endian ``MBEF`` binary snapshot format."""
    g = u.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, g.dim, g.n, float(g.length)))
        fh.write(np.ascontiguousarray(u.real, dtype="<f8").tobytes(order="C"))


def read_snapshot(path) -> Field:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated snapshot header")
    magic, version, dim, n, length = _HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    grid = make_grid(dim, n, length)
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != grid.size:
        raise ValueError(f"{path}: expected {grid.size} values, found {body.size}")
    return Field(grid, real=body.reshape(grid.shape).astype(float))


def write_field_csv(path, u: Field) -> None:
    """Index columns followed by the value; intended for small grids."""
    g = u.grid
    names = ["i", "j"][: g.dim] + ["value"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for idx in np.ndindex(*g.shape):
            w.writerow([*idx, repr(float(u.real[idx]))])
