"""Scalar fields on the periodic torus ``[0, L)^d`` and their spectral calculus.

Fourier coefficients are normalized against the orthonormal basis
``exp(i xi.x) / sqrt(V)`` (``V = L**d``), so Parseval reads
``||f||_{L2} = ||F||_{l2}`` with the quadrature weight ``(L/M)**d`` on the
physical side.

All differential multipliers use the same wavenumbers, with the Nyquist
component of each axis set to zero.  This keeps derivatives of real fields
real and makes every identity between the operators (divergence of the
gradient is the Laplacian, the H^-1 decomposition reconstructs ``f``, ...)
hold exactly on the grid.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .exceptions import GridMismatchError

MAX_SOBOLEV_ORDER = 4.0

RAW_MAGIC = b"LSPF"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sIIId8x")  # magic, version, d, M, L, reserved -> 32 bytes
FIELD_CSV_VERSION = "levyspde-field-csv v1"


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid with ``M`` points per axis on the torus of side ``L``."""

    d: int
    L: float
    M: int

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError("dimension must be 1, 2 or 3")
        if not self.L > 0:
            raise ValueError("side length must be positive")
        if self.M < 2 or self.M & (self.M - 1):
            raise ValueError("points per dimension must be a power of two")

    @property
    def shape(self):
        return (self.M,) * self.d

    @property
    def n_points(self):
        return self.M ** self.d

    @property
    def volume(self):
        return self.L ** self.d

    @property
    def cell_volume(self):
        return (self.L / self.M) ** self.d

    def coordinates(self):
        x = np.arange(self.M) * (self.L / self.M)
        return np.meshgrid(*([x] * self.d), indexing="ij")

    @cached_property
    def frequencies(self):
        """Full frequency grid ``(d, M, ..., M)`` including the Nyquist row."""
        k = np.fft.fftfreq(self.M, d=1.0 / self.M) * (2 * math.pi / self.L)
        return np.stack(np.meshgrid(*([k] * self.d), indexing="ij"))

    @cached_property
    def wavevectors(self):
        """Frequencies used by differential multipliers (Nyquist set to zero)."""
        k = np.fft.fftfreq(self.M, d=1.0 / self.M) * (2 * math.pi / self.L)
        k[self.M // 2] = 0.0
        xi = np.stack(np.meshgrid(*([k] * self.d), indexing="ij"))
        xi.setflags(write=False)
        return xi

    @cached_property
    def k2(self):
        k2 = np.sum(self.wavevectors ** 2, axis=0)
        k2.setflags(write=False)
        return k2

    # array-level spectral helpers used by the solver on raw ndarrays; they
    # act on the trailing ``d`` axes so a leading batch axis is allowed

    @property
    def axes(self):
        return tuple(range(-self.d, 0))

    def fft(self, values):
        if self.d == 1:
            F = np.fft.fft(values, axis=-1, norm="ortho")
        else:
            F = np.fft.fftn(values, axes=self.axes, norm="ortho")
        return F * math.sqrt(self.cell_volume)

    def ifft(self, coefficients):
        if self.d == 1:
            f = np.fft.ifft(coefficients, axis=-1, norm="ortho")
        else:
            f = np.fft.ifftn(coefficients, axes=self.axes, norm="ortho")
        return f.real / math.sqrt(self.cell_volume)

    def multiply(self, values, symbol):
        return self.ifft(self.fft(values) * symbol)

    def grad(self, values):
        F = self.fft(values)
        return np.stack([self.ifft(1j * xi * F) for xi in self.wavevectors])

    def div(self, vector):
        F = sum(1j * xi * self.fft(v) for xi, v in zip(self.wavevectors, vector))
        return self.ifft(F)

    def lap(self, values):
        return self.multiply(values, -self.k2)

    def dot(self, u, v):
        return float(np.sum(u * v) * self.cell_volume)

    def sobolev_sq(self, values, n):
        """Squared ``H^n`` norm, summed over any leading axes."""
        F = self.fft(values)
        return float(np.sum((1.0 + self.k2) ** n * np.abs(F) ** 2))

    def sobolev_sq_each(self, values, n):
        """Squared ``H^n`` norm of every leading-axis slice."""
        F = self.fft(values)
        return np.sum((1.0 + self.k2) ** n * np.abs(F) ** 2, axis=self.axes)


def _check_grid(a, b):
    if a != b:
        raise GridMismatchError(f"grid mismatch: {a} vs {b}")


@dataclass(frozen=True, eq=False)
class Field:
    """Point values of a real function on a :class:`TorusGrid`."""

    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.size == self.grid.n_points and v.shape != self.grid.shape:
            v = v.reshape(self.grid.shape)
        if v.shape != self.grid.shape:
            raise ValueError(f"values of shape {v.shape} do not fit grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid, c):
        return cls(grid, np.full(grid.shape, float(c)))

    @classmethod
    def zeros(cls, grid):
        return cls.constant(grid, 0.0)

    @classmethod
    def from_function(cls, grid, fn):
        return cls(grid, fn(*grid.coordinates()))

    @classmethod
    def mode(cls, grid, k, amplitude=1.0, kind="cos"):
        """``amplitude * cos(xi.x)`` (or ``sin``) with integer wave numbers ``k``."""
        xs = grid.coordinates()
        phase = sum(2 * math.pi * ki * x / grid.L for ki, x in zip(k, xs))
        return cls(grid, amplitude * (np.cos(phase) if kind == "cos" else np.sin(phase)))

    @classmethod
    def random_smooth(cls, grid, rng, n_modes=4, decay=1.0):
        """Random trigonometric polynomial with wave numbers up to ``n_modes``."""
        F = np.zeros(grid.shape, dtype=complex)
        idx = np.fft.fftfreq(grid.M, d=1.0 / grid.M)
        mesh = np.meshgrid(*([idx] * grid.d), indexing="ij")
        low = np.all([np.abs(m) <= n_modes for m in mesh], axis=0)
        norm = np.sqrt(sum(m ** 2 for m in mesh))
        F[low] = (rng.standard_normal(low.sum()) + 1j * rng.standard_normal(low.sum())) / (1 + norm[low]) ** decay
        values = np.fft.ifftn(F).real
        return cls(grid, values / max(np.max(np.abs(values)), 1e-300))

    def _coerce(self, other):
        if isinstance(other, Field):
            _check_grid(self.grid, other.grid)
            return other.values
        return other

    def __add__(self, other):
        return Field(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Field(self.grid, self.values - self._coerce(other))

    def __rsub__(self, other):
        return Field(self.grid, self._coerce(other) - self.values)

    def __mul__(self, other):
        return Field(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Field(self.grid, self.values / self._coerce(other))

    def __neg__(self):
        return Field(self.grid, -self.values)


@dataclass(frozen=True, eq=False)
class SpectralField:
    grid: TorusGrid
    coefficients: np.ndarray


def to_spectral(f):
    return SpectralField(f.grid, f.grid.fft(f.values))


def to_real(F, grid=None):
    """Inverse transform; raises if the coefficients are not Hermitian."""
    if grid is not None:
        _check_grid(grid, F.grid)
    full = np.fft.ifftn(F.coefficients, norm="ortho") / math.sqrt(F.grid.cell_volume)
    scale = max(float(np.max(np.abs(full.real))), 1e-300)
    if float(np.max(np.abs(full.imag))) > 1e-9 * scale:
        raise ValueError("coefficients are not Hermitian-symmetric")
    return Field(F.grid, full.real)


def l2_norm(f):
    return math.sqrt(inner_product(f, f))


def inner_product(f, g):
    """Quadrature-weighted ``(f, g)``."""
    _check_grid(f.grid, g.grid)
    return f.grid.dot(f.values, g.values)


def sobolev_norm(f, n):
    """``(sum_xi (1 + |xi|^2)^n |F(xi)|^2)^(1/2)`` for real order ``|n| <= 4``."""
    if abs(n) > MAX_SOBOLEV_ORDER:
        raise ValueError(f"Sobolev order {n} outside [-4, 4]")
    return math.sqrt(f.grid.sobolev_sq(f.values, n))


def gradient(f):
    return [Field(f.grid, g) for g in f.grid.grad(f.values)]


def divergence(v):
    v = list(v)
    grid = v[0].grid
    if len(v) != grid.d:
        raise ValueError(f"need {grid.d} components, got {len(v)}")
    for c in v:
        _check_grid(grid, c.grid)
    return Field(grid, grid.div([c.values for c in v]))


def laplacian(f):
    return Field(f.grid, f.grid.lap(f.values))


def fractional_laplacian(f, s):
    """``(-Delta)^(s/2) f``: multiplier ``|xi|^s``, ``0 < s <= 2``."""
    if not 0 < s <= 2:
        raise ValueError("order must lie in (0, 2]")
    return Field(f.grid, f.grid.multiply(f.values, f.grid.k2 ** (s / 2)))


def h_minus1_decompose(f):
    """Split ``f = f0 + sum_i d_i f_i`` with ``f0 = (1 - Delta)^-1 f`` and ``f_i = -d_i f0``.

    Returns
    -------
    f0 : Field
    parts : list of Field
        ``f_1 .. f_d``.
    constant : float
        ``sum_i ||f_i||_{L2} / ||f||_{H^-1}`` (at most ``sqrt(d + 1)``).
    """
    grid = f.grid
    F0 = grid.fft(f.values) / (1.0 + grid.k2)
    f0 = Field(grid, grid.ifft(F0))
    parts = [Field(grid, grid.ifft(-1j * xi * F0)) for xi in grid.wavevectors]
    denom = sobolev_norm(f, -1)
    total = l2_norm(f0) + sum(l2_norm(p) for p in parts)
    return f0, parts, (total / denom if denom > 0 else 0.0)


def mollify(f, eps):
    """Gaussian mollification, multiplier ``exp(-eps^2 |xi|^2 / 2)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return Field(f.grid, f.grid.multiply(f.values, np.exp(-0.5 * eps ** 2 * f.grid.k2)))


# ---------------------------------------------------------------------------
# serialization


def write_field_csv(f, fh):
    """CSV with one row per grid point: index coordinates then value."""
    fh.write(f"# {FIELD_CSV_VERSION} d={f.grid.d} M={f.grid.M} L={f.grid.L!r}\n")
    writer = csv.writer(fh)
    writer.writerow([f"i{j}" for j in range(f.grid.d)] + ["value"])
    for idx in np.ndindex(*f.grid.shape):
        writer.writerow(list(idx) + [repr(float(f.values[idx]))])


def read_field_csv(fh):
    header = fh.readline()
    if not header.startswith(f"# {FIELD_CSV_VERSION}"):
        raise ValueError("not a levyspde field CSV (v1)")
    meta = dict(item.split("=") for item in header.split()[3:])
    grid = TorusGrid(int(meta["d"]), float(meta["L"]), int(meta["M"]))
    reader = csv.reader(fh)
    next(reader)
    values = np.zeros(grid.shape)
    for row in reader:
        idx = tuple(int(v) for v in row[:grid.d])
        values[idx] = float(row[grid.d])
    return Field(grid, values)


def write_field_raw(f, fh):
    """32-byte header (magic, version, d, M, L) then little-endian float64 values."""
    fh.write(_RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, f.grid.d, f.grid.M, float(f.grid.L)))
    fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_field_raw(fh):
    magic, version, d, M, L = _RAW_HEADER.unpack(fh.read(_RAW_HEADER.size))
    if magic != RAW_MAGIC or version != RAW_VERSION:
        raise ValueError("not a levyspde raw field file (v1)")
    grid = TorusGrid(d, L, M)
    values = np.frombuffer(fh.read(8 * grid.n_points), dtype="<f8").reshape(grid.shape)
    return Field(grid, values)
