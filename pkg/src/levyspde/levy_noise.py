"""Lévy drivers: jump measures, triplets, sampled paths and truncation.

A driver is described by a triplet ``(drift, beta, measure)``.  After the
large-jump drift has been absorbed (:func:`absorb_large_jump_drift`) the
driver is the square-integrable martingale

    Z_t = beta * B_t + sum of jumps up to t - t * int z nu(dz),

and :func:`sample_path` draws it on a uniform time grid.  Every jump is kept
as an explicit event (time, size, channel) so that paths can be truncated,
windowed and coarsened without resampling.

Seeds
-----
Channel ``k`` of a path sampled with integer seed ``s`` draws from
``numpy.random.SeedSequence([s, k])``.  Replica ``r`` of an experiment with
master seed ``m`` uses the integer seed :func:`replica_seed` ``(m, r)``,
the first 64-bit word of ``SeedSequence([m, r])``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy import integrate

from .exceptions import IntegrityError, MartingalizationError, QuadratureError

log = logging.getLogger(__name__)

PATH_CSV_HEADER = ("channel", "bin_index", "brownian_increment", "jump_sum", "compensator")
PATH_CSV_VERSION = "levyspde-path-csv v1"

_QUAD_RTOL = 1e-8


# ---------------------------------------------------------------------------
# jump-size distributions for compound Poisson measures


@dataclass(frozen=True)
class JumpDistribution:
    sampler: Callable  # (rng, n, **params) -> ndarray
    pdf: Callable  # (z, **params) -> density
    support: Callable  # (**params) -> (lo, hi)


def _normal_sampler(rng, n, loc=0.0, scale=1.0):
    return rng.normal(loc, scale, n)


def _normal_pdf(z, loc=0.0, scale=1.0):
    return np.exp(-0.5 * ((z - loc) / scale) ** 2) / (scale * math.sqrt(2 * math.pi))


def _laplace_sampler(rng, n, loc=0.0, scale=1.0):
    return rng.laplace(loc, scale, n)


def _laplace_pdf(z, loc=0.0, scale=1.0):
    return np.exp(-np.abs(z - loc) / scale) / (2 * scale)


def _uniform_sampler(rng, n, low=-1.0, high=1.0):
    return rng.uniform(low, high, n)


def _uniform_pdf(z, low=-1.0, high=1.0):
    return np.where((z >= low) & (z <= high), 1.0 / (high - low), 0.0)


JUMP_DISTRIBUTIONS = {
    "normal": JumpDistribution(_normal_sampler, _normal_pdf, lambda loc=0.0, scale=1.0: (-math.inf, math.inf)),
    "laplace": JumpDistribution(_laplace_sampler, _laplace_pdf, lambda loc=0.0, scale=1.0: (-math.inf, math.inf)),
    "uniform": JumpDistribution(_uniform_sampler, _uniform_pdf, lambda low=-1.0, high=1.0: (low, high)),
}


def register_jump_distribution(name, sampler, pdf, support):
    """Make a jump-size law available to :class:`DensityCompoundPoisson` by name."""
    JUMP_DISTRIBUTIONS[name] = JumpDistribution(sampler, pdf, support)


# ---------------------------------------------------------------------------
# Lévy measures
#
# Every measure implements ``moment(power, lower, upper, absolute)`` returning
# int_{lower <= |z| <= upper} z**power nu(dz)  (|z|**power if absolute),
# with +inf for divergent absolute moments and nan for signed moments whose
# absolute counterpart diverges.


@dataclass(frozen=True)
class FiniteAtoms:
    """Finitely many jump sizes ``z`` occurring at rates ``rate``."""

    atoms: tuple = ()

    def __post_init__(self):
        atoms = tuple((float(z), float(lam)) for z, lam in self.atoms)
        for z, lam in atoms:
            if z == 0.0:
                raise ValueError("atom sizes must be nonzero")
            if not (lam >= 0.0 and math.isfinite(lam)):
                raise ValueError(f"atom rate must be finite and >= 0, got {lam}")
        object.__setattr__(self, "atoms", atoms)

    @property
    def rate(self):
        return float(sum(lam for _, lam in self.atoms))

    def moment(self, power, lower=0.0, upper=math.inf, absolute=False):
        total = 0.0
        for z, lam in self.atoms:
            if lower <= abs(z) <= upper:
                total += (abs(z) if absolute else z) ** power * lam
        return total

    def sample_sizes(self, rng, n):
        if n == 0:
            return np.empty(0)
        sizes = np.array([z for z, _ in self.atoms])
        p = np.array([lam for _, lam in self.atoms])
        return sizes[rng.choice(len(sizes), size=n, p=p / p.sum())]


@dataclass(frozen=True)
class DensityCompoundPoisson:
    """Compound Poisson jumps: total ``rate`` and a named jump-size density."""

    rate: float
    distribution: str = "normal"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.rate >= 0.0 and math.isfinite(self.rate)):
            raise ValueError(f"rate must be finite and >= 0, got {self.rate}")
        if self.distribution not in JUMP_DISTRIBUTIONS:
            raise ValueError(f"unknown jump distribution {self.distribution!r}")
        object.__setattr__(self, "params", dict(self.params))
        mass = self._integrate(lambda z: np.ones_like(z), 0.0, math.inf)
        if abs(mass - 1.0) > 1e-6:
            raise ValueError(f"jump density integrates to {mass!r} over R minus 0, expected 1")

    @property
    def law(self):
        return JUMP_DISTRIBUTIONS[self.distribution]

    def _integrate(self, fn, lower, upper):
        lo, hi = self.law.support(**self.params)
        pdf = self.law.pdf
        pieces = [(max(lower, lo, 0.0), min(upper, hi)), (max(-upper, lo), min(-lower, hi, 0.0))]
        total = 0.0
        for a, b in pieces:
            if not a < b:
                continue
            val, err = integrate.quad(lambda z: fn(z) * pdf(z, **self.params), a, b,
                                      epsabs=1e-14, epsrel=1e-12, limit=400)
            if not err <= _QUAD_RTOL * abs(val) + 1e-13:
                raise QuadratureError(
                    f"quadrature on [{a}, {b}] reached abs error {err:.3e} for value {val:.6e}",
                    achieved=err)
            total += val
        return total

    def moment(self, power, lower=0.0, upper=math.inf, absolute=False):
        if absolute:
            return self.rate * self._integrate(lambda z: np.abs(z) ** power, lower, upper)
        return self.rate * self._integrate(lambda z: z ** power, lower, upper)

    def sample_sizes(self, rng, n):
        return np.asarray(self.law.sampler(rng, n, **self.params), dtype=float)


@dataclass(frozen=True)
class TruncatedStableLike:
    """Symmetric power-law jumps, ``nu(dz) = scale * |z|**(-1-alpha) dz`` on ``lower <= |z| <= upper``.

    ``lower > 0`` is the small-jump activity floor.  ``upper = inf`` gives an
    infinite-variance driver.
    """

    alpha: float
    scale: float = 1.0
    lower: float = 0.1
    upper: float = math.inf

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise ValueError("stability index must lie in (0, 2)")
        if not self.scale > 0.0:
            raise ValueError("scale must be positive")
        if not 0.0 < self.lower < self.upper:
            raise ValueError("cutoffs must satisfy 0 < lower < upper")

    @property
    def rate(self):
        return self.moment(0)

    def _abs_moment(self, power, a, b):
        if not a < b:
            return 0.0
        e = power - self.alpha
        if math.isinf(b):
            if e >= 0:
                return math.inf
            return 2 * self.scale * (-(a ** e)) / e
        if e == 0:
            return 2 * self.scale * math.log(b / a)
        return 2 * self.scale * (b ** e - a ** e) / e

    def moment(self, power, lower=0.0, upper=math.inf, absolute=False):
        m = self._abs_moment(power, max(lower, self.lower), min(upper, self.upper))
        if absolute or power % 2 == 0:
            return m
        return 0.0 if math.isfinite(m) else math.nan

    def sample_sizes(self, rng, n):
        # exact inverse CDF of |z| on [lower, upper]; sign is symmetric
        u = rng.uniform(size=n)
        sign = np.where(rng.uniform(size=n) < 0.5, -1.0, 1.0)
        a = self.lower ** -self.alpha
        b = 0.0 if math.isinf(self.upper) else self.upper ** -self.alpha
        return sign * (a - u * (a - b)) ** (-1.0 / self.alpha)


LevyMeasureSpec = FiniteAtoms | DensityCompoundPoisson | TruncatedStableLike


def second_moment(measure, level=math.inf):
    """Return ``(int_{|z| <= level} z**2 nu(dz)) ** 0.5``, or ``inf`` if it diverges."""
    m = measure.moment(2, upper=level)
    return math.sqrt(m) if math.isfinite(m) else math.inf


# ---------------------------------------------------------------------------
# triplets and families


@dataclass(frozen=True)
class LevyTriplet:
    """One driver ``(drift, beta, measure)`` with its cached ``c_hat``."""

    measure: LevyMeasureSpec = field(default_factory=FiniteAtoms)
    beta: float = 0.0
    drift: float = 0.0
    c_hat: float | None = None

    def __post_init__(self):
        if not self.beta >= 0.0:
            raise ValueError("beta must be >= 0")
        computed = second_moment(self.measure)
        if self.c_hat is None:
            object.__setattr__(self, "c_hat", computed)
        elif not _same_moment(self.c_hat, computed):
            raise IntegrityError(f"cached c_hat={self.c_hat!r} but measure gives {computed!r}")

    @property
    def weight(self):
        return self.beta ** 2 + self.c_hat ** 2

    def compensator_rate(self, level=math.inf):
        """Drift removed per unit time by compensating jumps with ``|z| <= level``."""
        m = self.measure.moment(1, upper=level)
        if math.isnan(m):
            raise MartingalizationError("jump measure has a divergent first moment")
        return m


def _same_moment(a, b):
    if math.isinf(a) or math.isinf(b):
        return a == b
    return abs(a - b) <= 1e-8 * max(abs(b), 1e-300) or a == b


class Absorbed(NamedTuple):
    triplet: LevyTriplet
    drift: float


def absorb_large_jump_drift(raw):
    """Turn a raw triplet into its martingale driver.

    Parameters
    ----------
    raw : LevyTriplet
        ``drift`` is the raw Lévy–Itô drift: only jumps with ``|z| < 1`` are
        compensated in the raw decomposition.

    Returns
    -------
    Absorbed
        The driver with ``drift = 0`` and the deterministic drift
        ``raw.drift + int_{|z| >= 1} z nu(dz)`` that the caller has to move
        into the ``dt`` term.
    """
    if math.isinf(raw.measure.moment(1, lower=1.0, absolute=True)):
        raise MartingalizationError("large jumps have a divergent first moment; cannot martingalize")
    drift = raw.drift + raw.measure.moment(1, lower=1.0)
    driver = LevyTriplet(raw.measure, raw.beta, 0.0, raw.c_hat)
    return Absorbed(driver, float(drift))


@dataclass(frozen=True)
class NoiseFamily:
    """A finite, ordered family of independent drivers."""

    triplets: tuple
    weights: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "triplets", tuple(self.triplets))
        computed = np.array([t.weight for t in self.triplets], dtype=float)
        if self.weights is None:
            object.__setattr__(self, "weights", computed)
        else:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != computed.shape or not all(_same_moment(x, y) for x, y in zip(w, computed)):
                raise IntegrityError(f"weights {w} do not match triplets {computed}")
            object.__setattr__(self, "weights", w)
        self.weights.setflags(write=False)

    def __len__(self):
        return len(self.triplets)

    def __getitem__(self, k):
        return self.triplets[k]

    def tail_weight(self, start):
        """Sum of weights of channels ``start, start+1, ...`` (truncation diagnostic)."""
        return float(np.sum(self.weights[start:]))


def _as_triplets(source):
    if isinstance(source, LevyTriplet):
        return (source,)
    if isinstance(source, NoiseFamily):
        return source.triplets
    return tuple(source)


# ---------------------------------------------------------------------------
# time grid and paths


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("need at least one time step")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def nodes(self):
        return np.arange(self.n_steps + 1) * self.dt

    def coarsen(self, factor):
        if self.n_steps % factor:
            raise ValueError(f"{factor} does not divide {self.n_steps} steps")
        return TimeGrid(self.T, self.n_steps // factor)

    def bin_of(self, t):
        """Index ``n`` of the bin ``(t_n, t_{n+1}]`` containing ``t``."""
        n = np.ceil(np.asarray(t, dtype=float) / self.dt).astype(int) - 1
        return np.clip(n, 0, self.n_steps - 1)


@dataclass(frozen=True)
class JumpEvent:
    t: float
    z: float
    channel: int


@dataclass(frozen=True, eq=False)
class PathRealization:
    """A sampled noise path for ``K`` channels on a uniform time grid.

    Attributes
    ----------
    brownian : ndarray, shape (K, n_steps)
        Standard Brownian increments ``dB`` (not yet scaled by ``beta``).
    jump_times, jump_sizes, jump_channels, jump_bins : ndarray
        Jump events sorted by time (ties: channel, then insertion order).
    compensator : ndarray, shape (K, n_steps)
        Drift subtracted in every bin so that increments have mean zero.
    levels : tuple of float
        Per-channel jump truncation level (``inf`` when untruncated).
    """

    grid: TimeGrid
    triplets: tuple
    brownian: np.ndarray
    jump_times: np.ndarray
    jump_sizes: np.ndarray
    jump_channels: np.ndarray
    jump_bins: np.ndarray
    compensator: np.ndarray
    levels: tuple
    seed: int | None = None

    def __post_init__(self):
        for name in ("brownian", "jump_times", "jump_sizes", "jump_channels", "jump_bins", "compensator"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        K, N = len(self.triplets), self.grid.n_steps
        if self.brownian.shape != (K, N) or self.compensator.shape != (K, N):
            raise ValueError("brownian/compensator arrays must have shape (K, n_steps)")
        if len(self.levels) != K:
            raise ValueError("one truncation level per channel required")

    @classmethod
    def from_events(cls, grid, triplets, jumps=(), brownian=None, compensator=None, levels=None, seed=None):
        """Build a path from explicit events.

        ``jumps`` is an iterable of ``(t, z, channel)``.  ``compensator=None``
        means no compensation at all (useful for hand-built paths).
        """
        triplets = _as_triplets(triplets)
        K, N = len(triplets), grid.n_steps
        jumps = list(jumps)
        times = np.array([j[0] for j in jumps], dtype=float)
        sizes = np.array([j[1] for j in jumps], dtype=float)
        chans = np.array([j[2] for j in jumps], dtype=int)
        if np.any(sizes == 0):
            raise ValueError("jump sizes must be nonzero")
        if np.any((times < 0) | (times > grid.T)):
            raise ValueError("jump times must lie in [0, T]")
        if np.any((chans < 0) | (chans >= K)):
            raise ValueError("jump channel out of range")
        order = np.lexsort((np.arange(len(times)), chans, times))
        times, sizes, chans = times[order], sizes[order], chans[order]
        _flag_simultaneous(times, chans)
        return cls(
            grid=grid,
            triplets=triplets,
            brownian=np.zeros((K, N)) if brownian is None else np.asarray(brownian, dtype=float).reshape(K, N),
            jump_times=times,
            jump_sizes=sizes,
            jump_channels=chans,
            jump_bins=grid.bin_of(times) if len(times) else np.empty(0, dtype=int),
            compensator=np.zeros((K, N)) if compensator is None else np.asarray(compensator, dtype=float).reshape(K, N),
            levels=tuple(math.inf for _ in range(K)) if levels is None else tuple(levels),
            seed=seed,
        )

    @property
    def n_channels(self):
        return len(self.triplets)

    @property
    def jumps(self):
        return [JumpEvent(float(t), float(z), int(k))
                for t, z, k in zip(self.jump_times, self.jump_sizes, self.jump_channels)]

    @property
    def has_simultaneous_jumps(self):
        return _simultaneous(self.jump_times, self.jump_channels)

    def jump_sums(self):
        out = np.zeros((self.n_channels, self.grid.n_steps))
        np.add.at(out, (self.jump_channels, self.jump_bins), self.jump_sizes)
        return out

    def jump_counts(self):
        """Number of jumps (all channels) per bin."""
        return np.bincount(self.jump_bins, minlength=self.grid.n_steps)

    def brownian_part(self):
        beta = np.array([t.beta for t in self.triplets])
        return beta[:, None] * self.brownian

    def all_increments(self):
        """``dZ`` for every channel and bin, shape ``(K, n_steps)``."""
        return self.brownian_part() + self.jump_sums() - self.compensator

    def window(self, start, stop):
        """Restriction to bins ``start <= n < stop``, re-based to time 0."""
        if not 0 <= start < stop <= self.grid.n_steps:
            raise ValueError("invalid window")
        dt = self.grid.dt
        keep = (self.jump_bins >= start) & (self.jump_bins < stop)
        return PathRealization(
            grid=TimeGrid((stop - start) * dt, stop - start),
            triplets=self.triplets,
            brownian=self.brownian[:, start:stop],
            jump_times=self.jump_times[keep] - start * dt,
            jump_sizes=self.jump_sizes[keep],
            jump_channels=self.jump_channels[keep],
            jump_bins=self.jump_bins[keep] - start,
            compensator=self.compensator[:, start:stop],
            levels=self.levels,
            seed=self.seed,
        )

    def coarsen(self, factor):
        """Same realization on a grid ``factor`` times coarser (bin sums)."""
        grid = self.grid.coarsen(factor)
        K = self.n_channels

        def fold(a):
            return a.reshape(K, grid.n_steps, factor).sum(axis=2)

        return PathRealization(
            grid=grid,
            triplets=self.triplets,
            brownian=fold(self.brownian),
            jump_times=self.jump_times,
            jump_sizes=self.jump_sizes,
            jump_channels=self.jump_channels,
            jump_bins=self.jump_bins // factor,
            compensator=fold(self.compensator),
            levels=self.levels,
            seed=self.seed,
        )


def _simultaneous(times, chans):
    if len(times) < 2:
        return False
    same = np.diff(times) == 0
    return bool(np.any(same & (np.diff(chans) != 0)))


def _flag_simultaneous(times, chans):
    if _simultaneous(times, chans):
        log.warning("simultaneous jumps on distinct channels; accepted")


def replica_seed(master_seed, replica):
    """Integer seed of replica ``replica`` under master seed ``master_seed``."""
    ss = np.random.SeedSequence([int(master_seed), int(replica)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sample_path(source, grid, seed):
    """Sample a martingale driver path.

    Parameters
    ----------
    source : LevyTriplet, NoiseFamily or sequence of LevyTriplet
        Every triplet must have ``drift == 0``.
    grid : TimeGrid
    seed : int

    Returns
    -------
    PathRealization
        A deterministic function of ``(source, grid, seed)``.
    """
    triplets = _as_triplets(source)
    N, T, dt = grid.n_steps, grid.T, grid.dt
    brownian = np.empty((len(triplets), N))
    compensator = np.empty((len(triplets), N))
    times, sizes, chans = [], [], []
    for k, trip in enumerate(triplets):
        if trip.drift != 0.0:
            raise ValueError(f"channel {k}: absorb the drift before sampling (drift={trip.drift})")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), k])))
        brownian[k] = rng.standard_normal(N) * math.sqrt(dt)
        n_jumps = rng.poisson(trip.measure.rate * T) if trip.measure.rate > 0 else 0
        t = rng.uniform(0.0, T, n_jumps)
        z = trip.measure.sample_sizes(rng, n_jumps)
        nz = z != 0
        times.append(t[nz])
        sizes.append(z[nz])
        chans.append(np.full(int(nz.sum()), k))
        compensator[k] = trip.compensator_rate() * dt
    times, sizes, chans = (np.concatenate(x) if x else np.empty(0) for x in (times, sizes, chans))
    chans = chans.astype(int)
    order = np.lexsort((np.arange(len(times)), chans, times))
    times, sizes, chans = times[order], sizes[order], chans[order]
    _flag_simultaneous(times, chans)
    return PathRealization(
        grid=grid,
        triplets=triplets,
        brownian=brownian,
        jump_times=times,
        jump_sizes=sizes,
        jump_channels=chans,
        jump_bins=grid.bin_of(times) if len(times) else np.empty(0, dtype=int),
        compensator=compensator,
        levels=tuple(math.inf for _ in triplets),
        seed=int(seed),
    )


def increments(path, k):
    """Per-bin increments ``dZ^k_n`` of channel ``k``."""
    if not 0 <= k < path.n_channels:
        raise IndexError(f"unknown channel {k}")
    return path.all_increments()[k]


def truncate_jumps(path, n, channels=None, recompensate=True):
    """Remove jumps with ``|z| > n``.

    Parameters
    ----------
    channels : iterable of int, optional
        Channels to truncate (default: all).
    recompensate : bool
        If true the compensator is recomputed for the truncated measure, so
        the result is again a martingale.  If false the jumps are removed
        pathwise and the compensator is left alone, which keeps the path
        identical to the original before the first removed jump.
    """
    if not n > 0:
        raise ValueError("truncation level must be positive")
    K = path.n_channels
    chans = set(range(K)) if channels is None else set(int(k) for k in channels)
    if math.isinf(n):
        return path
    drop = np.isin(path.jump_channels, list(chans)) & (np.abs(path.jump_sizes) > n)
    levels = tuple(min(lv, n) if k in chans else lv for k, lv in enumerate(path.levels))
    compensator = np.array(path.compensator)
    if recompensate:
        for k in chans:
            compensator[k] = path.triplets[k].compensator_rate(levels[k]) * path.grid.dt
    return PathRealization(
        grid=path.grid,
        triplets=path.triplets,
        brownian=path.brownian,
        jump_times=path.jump_times[~drop],
        jump_sizes=path.jump_sizes[~drop],
        jump_channels=path.jump_channels[~drop],
        jump_bins=path.jump_bins[~drop],
        compensator=compensator,
        levels=levels,
        seed=path.seed,
    )


def truncated_c_hat(triplet, n):
    """``c_hat`` of the driver after removing jumps with ``|z| > n``."""
    return second_moment(triplet.measure, level=n)


def first_large_jump_time(paths, n, n0):
    """First time one of the channels ``0 .. n0-1`` jumps by more than ``n`` (``inf`` if never).

    ``paths`` is one multi-channel :class:`PathRealization` or a sequence of
    single-channel paths indexed by channel.
    """
    if isinstance(paths, PathRealization):
        if n0 > paths.n_channels:
            raise ValueError("n0 exceeds the number of channels")
        mask = (paths.jump_channels < n0) & (np.abs(paths.jump_sizes) > n)
        return float(paths.jump_times[mask].min()) if mask.any() else math.inf
    paths = list(paths)
    if n0 > len(paths):
        raise ValueError("n0 exceeds the number of channels")
    best = math.inf
    for p in paths[:n0]:
        best = min(best, first_large_jump_time(p, n, p.n_channels))
    return best


def empirical_quadratic_variation(path, k):
    """``sum_n (dZ^k_n)**2`` over the path."""
    dz = increments(path, k)
    return float(np.dot(dz, dz))


def write_path_csv(path, fh):
    """Dump a path as CSV (one row per channel and bin)."""
    writer = csv.writer(fh)
    fh.write(f"# {PATH_CSV_VERSION}\n")
    writer.writerow(PATH_CSV_HEADER)
    bp, js = path.brownian_part(), path.jump_sums()
    for k in range(path.n_channels):
        for n in range(path.grid.n_steps):
            writer.writerow([k, n, repr(float(bp[k, n])), repr(float(js[k, n])), repr(float(path.compensator[k, n]))])

