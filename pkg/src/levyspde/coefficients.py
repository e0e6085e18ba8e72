"""Coefficient fields of the divergence-form equation and assumption checks.

The equation is

    du = (d_i(a^ij d_j u + bbar^i u) + b^i d_i u + c u + f) dt
         + (sigma^ik d_i u + mu^k u + g^k) dZ^k_t.

Pointwise assumptions are checked on the sampling lattice made of every time
node and every grid point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .exceptions import HypothesisViolation
from .field import Field
from .levy_noise import TimeGrid

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# coefficient fields


class CoefficientField:
    """Something evaluable at ``(time node n, time t)`` on every grid point.

    ``evaluate`` returns a float or an array of the grid shape.
    """

    time_invariant = True
    path_dependent = False

    def evaluate(self, grid, n, t, path=None):
        raise NotImplementedError

    def is_zero(self):
        return False


@dataclass(frozen=True)
class Constant(CoefficientField):
    value: float

    def evaluate(self, grid, n, t, path=None):
        return float(self.value)

    def is_zero(self):
        return float(self.value) == 0.0


@dataclass(frozen=True)
class TimeProfile:
    """``mean + amplitude * sin(2 pi t / period)``."""

    mean: float = 1.0
    amplitude: float = 0.0
    period: float = 1.0

    def __call__(self, t):
        return self.mean + self.amplitude * math.sin(2 * math.pi * t / self.period)


@dataclass(frozen=True, eq=False)
class SeparableTimeSpace(CoefficientField):
    """``profile(t) * space(x)``."""

    profile: Callable
    space: object  # Field

    time_invariant = False

    def evaluate(self, grid, n, t, path=None):
        if self.space.grid != grid:
            raise ValueError("spatial profile lives on a different grid")
        return self.profile(t) * self.space.values


@dataclass(frozen=True, eq=False)
class Spatial(CoefficientField):
    """Time-independent spatial profile given by a :class:`~levyspde.field.Field`."""

    space: object  # Field

    def evaluate(self, grid, n, t, path=None):
        if self.space.grid != grid:
            raise ValueError("spatial profile lives on a different grid")
        return self.space.values

    def is_zero(self):
        return not np.any(self.space.values)


@dataclass(frozen=True, eq=False)
class GridSampled(CoefficientField):
    """Explicit values per time node, array of shape ``(n_nodes, *grid.shape)``."""

    values: np.ndarray

    time_invariant = False

    def evaluate(self, grid, n, t, path=None):
        v = np.asarray(self.values[n], dtype=float)
        if v.shape != grid.shape:
            raise ValueError(f"sampled slice of shape {v.shape} does not fit the grid {grid.shape}")
        return v


def _clipped_noise_level(path, n, channel=0, base=1.0, scale=0.1, clip=1.0):
    # left limit Z_{t_n -}: increments of bins strictly before n
    z = float(np.sum(path.all_increments()[channel, :n])) if n > 0 else 0.0
    return base + scale * max(-clip, min(clip, z))


NOISE_ADAPTED = {
    "clipped-noise-level": _clipped_noise_level,
}


@dataclass(frozen=True, eq=False)
class NoiseAdapted(CoefficientField):
    """Spatially constant coefficient driven by the noise strictly before ``t``.

    ``name`` selects a built-in functional from :data:`NOISE_ADAPTED`;
    ``params`` are passed as keyword arguments.  The functional only sees
    increments of bins that end at or before the current node.
    """

    name: str
    params: dict
    lipschitz: float = 1.0

    time_invariant = False
    path_dependent = True

    def __post_init__(self):
        if self.name not in NOISE_ADAPTED:
            raise ValueError(f"unknown noise-adapted coefficient {self.name!r}")

    def evaluate(self, grid, n, t, path=None):
        if path is None:
            raise ValueError("noise-adapted coefficient needs the noise path")
        return NOISE_ADAPTED[self.name](path, n, **self.params)

    def bounds(self):
        p = dict(self.params)
        base, scale, clip = p.get("base", 1.0), p.get("scale", 0.1), p.get("clip", 1.0)
        return base - abs(scale) * clip, base + abs(scale) * clip


@dataclass(frozen=True, eq=False)
class Affine(CoefficientField):
    """``scale * base + shift``."""

    base: CoefficientField
    scale: float = 1.0
    shift: float = 0.0

    @property
    def time_invariant(self):
        return self.base.time_invariant

    @property
    def path_dependent(self):
        return self.base.path_dependent

    def evaluate(self, grid, n, t, path=None):
        return self.scale * self.base.evaluate(grid, n, t, path) + self.shift

    def is_zero(self):
        return self.shift == 0.0 and (self.scale == 0.0 or self.base.is_zero())


@dataclass(frozen=True, eq=False)
class LinearCombination(CoefficientField):
    """``sum_j weight_j * field_j``."""

    terms: tuple  # of (weight, CoefficientField)

    @property
    def time_invariant(self):
        return all(f.time_invariant for _, f in self.terms)

    @property
    def path_dependent(self):
        return any(f.path_dependent for _, f in self.terms)

    def evaluate(self, grid, n, t, path=None):
        return sum(w * np.asarray(f.evaluate(grid, n, t, path), dtype=float) for w, f in self.terms)

    def is_zero(self):
        return all(w == 0.0 or f.is_zero() for w, f in self.terms)


def as_coefficient(x):
    if isinstance(x, CoefficientField):
        return x
    return Constant(float(x))


# ---------------------------------------------------------------------------
# coefficient sets


@dataclass(frozen=True)
class EvaluatedCoefficients:
    """Coefficient arrays at one time node, all broadcast to the grid shape."""

    a: np.ndarray  # (d, d, *shape)
    bbar: np.ndarray  # (d, *shape)
    b: np.ndarray  # (d, *shape)
    c: np.ndarray  # shape
    sigma: np.ndarray  # (d, K, *shape)
    mu: np.ndarray  # (K, *shape)

    def a_is_constant(self):
        flat = self.a.reshape(self.a.shape[0], self.a.shape[1], -1)
        return bool(np.all(flat == flat[:, :, :1]))


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    a: tuple  # d x d of CoefficientField
    bbar: tuple
    b: tuple
    c: CoefficientField
    sigma: tuple  # d x K
    mu: tuple  # K

    def __post_init__(self):
        d = len(self.bbar)
        object.__setattr__(self, "a", tuple(tuple(as_coefficient(x) for x in row) for row in self.a))
        object.__setattr__(self, "bbar", tuple(as_coefficient(x) for x in self.bbar))
        object.__setattr__(self, "b", tuple(as_coefficient(x) for x in self.b))
        object.__setattr__(self, "c", as_coefficient(self.c))
        object.__setattr__(self, "sigma", tuple(tuple(as_coefficient(x) for x in row) for row in self.sigma))
        object.__setattr__(self, "mu", tuple(as_coefficient(x) for x in self.mu))
        K = len(self.mu)
        if len(self.a) != d or any(len(r) != d for r in self.a) or len(self.b) != d:
            raise ValueError("a must be d x d and b, bbar length d")
        if len(self.sigma) != d or any(len(r) != K for r in self.sigma):
            raise ValueError(f"sigma must be {d} x {K}")

    @property
    def d(self):
        return len(self.bbar)

    @property
    def n_channels(self):
        return len(self.mu)

    @classmethod
    def from_constants(cls, a, bbar=None, b=None, c=0.0, sigma=None, mu=None, n_channels=None):
        a = np.atleast_2d(np.asarray(a, dtype=float))
        d = a.shape[0]
        if n_channels is None:
            n_channels = len(mu) if mu is not None else (np.asarray(sigma).shape[1] if sigma is not None else 0)
        bbar = np.zeros(d) if bbar is None else np.asarray(bbar, dtype=float)
        b = np.zeros(d) if b is None else np.asarray(b, dtype=float)
        sigma = np.zeros((d, n_channels)) if sigma is None else np.asarray(sigma, dtype=float).reshape(d, n_channels)
        mu = np.zeros(n_channels) if mu is None else np.asarray(mu, dtype=float)
        return cls(a.tolist(), bbar.tolist(), b.tolist(), float(c), sigma.tolist(), mu.tolist())

    @classmethod
    def heat(cls, d, n_channels):
        return cls.from_constants(np.eye(d), n_channels=n_channels)

    @property
    def time_invariant(self):
        return all(f.time_invariant for f in self._all_fields())

    @property
    def path_dependent(self):
        return any(f.path_dependent for f in self._all_fields())

    def _all_fields(self):
        yield from (x for row in self.a for x in row)
        yield from self.bbar
        yield from self.b
        yield self.c
        yield from (x for row in self.sigma for x in row)
        yield from self.mu

    def lower_order_vanishes(self):
        """True when ``bbar = b = c = mu = 0`` structurally."""
        return all(f.is_zero() for f in (*self.bbar, *self.b, self.c, *self.mu))

    def evaluate(self, grid, n=0, t=0.0, path=None):
        shape = grid.shape

        def ev(f):
            return np.broadcast_to(np.asarray(f.evaluate(grid, n, t, path), dtype=float), shape)

        return EvaluatedCoefficients(
            a=np.stack([np.stack([ev(x) for x in row]) for row in self.a]),
            bbar=np.stack([ev(x) for x in self.bbar]),
            b=np.stack([ev(x) for x in self.b]),
            c=ev(self.c),
            sigma=np.array([[ev(x) for x in row] for row in self.sigma], dtype=float).reshape(
                (self.d, self.n_channels) + shape),
            mu=np.array([ev(x) for x in self.mu], dtype=float).reshape((self.n_channels,) + shape),
        )


def absorb_drift(coeffs, drifts):
    """Coefficients after moving the deterministic drifts of the drivers into ``dt``.

    With ``dZ^k = drift_k dt + dM^k`` the term ``(sigma^ik u_i + mu^k u) drift_k dt``
    joins the drift operator: ``b^i += sum_k drift_k sigma^ik`` and
    ``c += sum_k drift_k mu^k``.  The matching forcing ``sum_k drift_k g^k`` is
    the caller's business.
    """
    drifts = [float(x) for x in drifts]
    if len(drifts) != coeffs.n_channels:
        raise ValueError("one drift per channel required")
    if not any(drifts):
        return coeffs
    b = [LinearCombination(((1.0, bi),) + tuple((dk, coeffs.sigma[i][k]) for k, dk in enumerate(drifts) if dk))
         for i, bi in enumerate(coeffs.b)]
    c = LinearCombination(((1.0, coeffs.c),) + tuple((dk, coeffs.mu[k]) for k, dk in enumerate(drifts) if dk))
    return CoefficientSet(a=coeffs.a, bbar=coeffs.bbar, b=b, c=c, sigma=coeffs.sigma, mu=coeffs.mu)


def lattice(coeffs, grid, time_grid, path=None):
    """Yield ``(n, t, EvaluatedCoefficients)`` over the sampling lattice."""
    if coeffs.time_invariant:
        yield 0, 0.0, coeffs.evaluate(grid, 0, 0.0, path)
        return
    for n, t in enumerate(time_grid.nodes):
        yield n, float(t), coeffs.evaluate(grid, n, float(t), path)


# ---------------------------------------------------------------------------
# assumption checks


def alpha_matrix(sigma, weights):
    """``alpha^ij = 1/2 sum_k w_k sigma^ik sigma^jk`` pointwise.

    ``sigma`` has shape ``(d, K, ...)``.  Channels with infinite weight only
    contribute when their ``sigma`` column is nonzero (then alpha is inf).
    """
    sigma = np.asarray(sigma, dtype=float)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    finite = np.isfinite(w)
    alpha = 0.5 * np.einsum("k,ik...,jk...->ij...", np.where(finite, w, 0.0), sigma, sigma)
    if not finite.all():
        hot = np.any(sigma[:, ~finite] != 0, axis=(0, 1))
        alpha = np.where(hot, np.inf, alpha)
    return alpha


def _symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, 0, 1))


def _eig_last(m):
    # (d, d, *shape) -> eigenvalues (*shape, d)
    d = m.shape[0]
    moved = np.moveaxis(m.reshape(d, d, -1), 2, 0)
    return np.linalg.eigvalsh(moved)


@dataclass(frozen=True)
class EllipticityReport:
    delta_min: float
    K_max: float
    worst_time: float
    worst_point: tuple
    passed: bool
    delta: float
    K: float

    def rows(self):
        return [("delta_min", self.delta_min), ("K_max", self.K_max), ("worst_time", self.worst_time),
                ("worst_point", " ".join(map(str, self.worst_point))), ("delta", self.delta),
                ("K", self.K), ("pass", int(self.passed))]


def _ellipticity(coeffs, weights, delta, K, grid, time_grid, path):
    delta_min, K_max = math.inf, -math.inf
    worst_t, worst_x = 0.0, (0,) * grid.d
    warned = False
    for n, t, ev in lattice(coeffs, grid, time_grid, path):
        a = ev.a
        if not warned and not np.array_equal(a, np.swapaxes(a, 0, 1)):
            log.warning("a is not symmetric; checking its symmetric part")
            warned = True
        a_sym = _symmetrize(a)
        alpha = alpha_matrix(ev.sigma, weights)
        diff = a_sym - alpha
        if not np.all(np.isfinite(diff)):
            lo = -math.inf
            idx = int(np.argmax(~np.isfinite(diff).reshape(diff.shape[0] ** 2, -1).all(axis=0)))
        else:
            lows = _eig_last(diff)[:, 0]
            idx = int(np.argmin(lows))
            lo = float(lows[idx])
        hi = float(np.max(_eig_last(a_sym)[:, -1]))
        if lo < delta_min:
            delta_min, worst_t = lo, t
            worst_x = tuple(int(i) for i in np.unravel_index(idx, grid.shape))
        K_max = max(K_max, hi)
    return EllipticityReport(delta_min, K_max, worst_t, worst_x,
                             bool(delta_min >= delta and K_max <= K), float(delta), float(K))


def check_coercivity(coeffs, weights, delta, K, grid, time_grid, path=None):
    """Check ``delta |xi|^2 <= (a - alpha) xi.xi`` and ``a xi.xi <= K |xi|^2`` on the lattice."""
    return _ellipticity(coeffs, weights, delta, K, grid, time_grid, path)


def _weighted_sum(w, x, axis):
    # sum_k w_k x_k where an infinite weight times a zero coefficient counts as zero
    shape = [1] * x.ndim
    shape[axis] = -1
    wb = w.reshape(shape)
    with np.errstate(invalid="ignore"):
        terms = np.where(x == 0, 0.0, wb * x)
    return terms.sum(axis=axis)


@dataclass(frozen=True)
class BoundednessReport:
    max_value: float
    K: float
    worst_time: float
    worst_point: tuple
    passed: bool

    @property
    def margin(self):
        return self.K - self.max_value


def check_boundedness(coeffs, weights, K, grid, time_grid, path=None):
    """Check ``|a^ij| + |bbar^i| + |b^i| + |c| + (sum_k w_k (|sigma^ik|^2 + |mu^k|^2))^(1/2) <= K``."""
    w = np.asarray(weights, dtype=float)
    worst, worst_t, worst_x = -math.inf, 0.0, (0,) * grid.d
    for n, t, ev in lattice(coeffs, grid, time_grid, path):
        noise = _weighted_sum(w, ev.sigma ** 2, axis=1) + _weighted_sum(w, ev.mu ** 2, axis=0)
        total = (np.abs(ev.a) + np.abs(ev.bbar)[:, None] + np.abs(ev.b)[:, None]
                 + np.abs(ev.c) + np.sqrt(noise)[:, None])
        per_point = total.reshape(grid.d * grid.d, -1).max(axis=0)
        idx = int(np.argmax(per_point))
        if per_point[idx] > worst:
            worst, worst_t = float(per_point[idx]), t
            worst_x = tuple(int(i) for i in np.unravel_index(idx, grid.shape))
    return BoundednessReport(worst, float(K), worst_t, worst_x, bool(worst <= K))


def sigma_vanishes(coeffs, n0, grid, time_grid, path=None):
    """True if ``sigma^ik = 0`` for the first ``n0`` channels on the whole lattice."""
    for _, _, ev in lattice(coeffs, grid, time_grid, path):
        if np.any(ev.sigma[:, :n0] != 0):
            return False
    return True


def check_partial_moment(noise, coeffs, delta, n0, grid, time_grid, K=math.inf, path=None):
    """Coercivity with the first ``n0`` channels left out of ``alpha``.

    Those channels may have infinite ``c_hat`` but must not couple to the
    gradient (``sigma^ik = 0`` for ``k < n0``).
    """
    weights = np.array(noise.weights, dtype=float)
    if not np.all(np.isfinite(weights[n0:])):
        raise HypothesisViolation("channels beyond n0 must have finite c_hat")
    if not sigma_vanishes(coeffs, n0, grid, time_grid, path):
        raise HypothesisViolation(f"sigma must vanish for the first {n0} channels")
    weights[:n0] = 0.0
    return _ellipticity(coeffs, weights, delta, K, grid, time_grid, path)


def lambda_homotopy(coeffs, lam):
    """Coefficients of ``L_lam = lam L + (1 - lam) Delta`` and ``Lambda_lam = lam Lambda``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if lam == 1.0:
        return coeffs
    if lam == 0.0:
        return CoefficientSet.heat(coeffs.d, coeffs.n_channels)

    def scaled(f):
        return Affine(f, lam, 0.0)

    a = [[Affine(x, lam, (1.0 - lam) if i == j else 0.0) for j, x in enumerate(row)]
         for i, row in enumerate(coeffs.a)]
    return CoefficientSet(
        a=a,
        bbar=[scaled(x) for x in coeffs.bbar],
        b=[scaled(x) for x in coeffs.b],
        c=scaled(coeffs.c),
        sigma=[[scaled(x) for x in row] for row in coeffs.sigma],
        mu=[scaled(x) for x in coeffs.mu],
    )


def random_admissible_set(rng, grid, weights, delta=0.5, K=5.0, n_modes=2):
    """A random smooth coefficient set satisfying coercivity ``delta`` and bound ``K``.

    Coefficients are spatially varying trigonometric profiles.  The draw is
    rejected and repeated until both lattice checks pass.
    """
    d = grid.d
    w = np.asarray(weights, dtype=float)
    n_ch = len(w)
    budget = K / (2 * d + 4)
    while True:
        amp = rng.uniform(0.0, 0.4)
        prof = Field.random_smooth(grid, rng, n_modes)
        base = np.eye(d) * rng.uniform(1.2, 2.0)
        a = [[Constant(base[i, j]) if i != j else Affine(Spatial(prof), amp, base[i, i])
              for j in range(d)] for i in range(d)]
        sig = rng.uniform(-1, 1, (d, n_ch))
        sig *= math.sqrt(0.8 / max(float(np.sum(w * sig ** 2)), 1e-12)) * rng.uniform(0.2, 1.0)
        mu = rng.uniform(-1, 1, n_ch)
        mu *= budget / max(math.sqrt(float(np.sum(w * mu ** 2))), 1e-12) * rng.uniform(0.2, 1.0)
        coeffs = CoefficientSet(
            a=a,
            bbar=list(rng.uniform(-budget, budget, d)),
            b=list(rng.uniform(-budget, budget, d)),
            c=float(rng.uniform(-budget, budget)),
            sigma=sig.tolist(),
            mu=mu.tolist(),
        )
        tg = TimeGrid(1.0, 1)
        if (check_coercivity(coeffs, w, delta, K, grid, tg).passed
                and check_boundedness(coeffs, w, K, grid, tg).passed):
            return coeffs
