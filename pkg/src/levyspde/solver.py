"""Time integration of the linear and semilinear equations.

One step of the scheme reads

    (I - theta dt P) u_{n+1} = u_n + dt [(1 - theta) P u_n + R u_n + f_n]
                               + sum_k (Lambda^k u_n + g^k_n) dZ^k_n,

where ``P u = div(a grad u)`` is the principal part, ``R u = div(bbar u) +
b.grad u + c u`` the lower-order part and ``Lambda^k u = sigma^.k . grad u +
mu^k u``.  Coefficients and forcing are taken at the left node ``t_n`` and
jumps act at the end of the bin they fall into, so ``u_n`` is the post-jump
value at ``t_n``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg, gmres

from .coefficients import CoefficientSet, lambda_homotopy, sigma_vanishes
from .exceptions import ContractionError, HypothesisViolation, SolverError
from .field import Field, TorusGrid
from .levy_noise import PathRealization, TimeGrid, first_large_jump_time, truncate_jumps

log = logging.getLogger(__name__)

SUMMARY_CSV_VERSION = "levyspde-summary-csv v1"
TRACE_CSV_VERSION = "levyspde-trace-csv v1"


@dataclass(frozen=True)
class SolverConfig:
    grid: TorusGrid
    time_grid: TimeGrid
    theta: float = 1.0
    tol: float = 1e-10
    max_iter: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")

    @property
    def dt(self):
        return self.time_grid.dt

    @property
    def n_steps(self):
        return self.time_grid.n_steps

    def stability_budget(self, K):
        """``theta * dt * max|xi|^2 * K``: size of the implicit part relative to identity."""
        return self.theta * self.dt * float(np.max(self.grid.k2)) * K

    def with_time_grid(self, time_grid):
        return SolverConfig(self.grid, time_grid, self.theta, self.tol, self.max_iter)


@dataclass(frozen=True, eq=False)
class SolutionPath:
    """Field values at every time node plus per-step metadata.

    ``values[n]`` is the state at ``t_n``; ``jump_counts[n]`` and
    ``iterations[n]`` describe the step that ends at ``t_{n+1}``.  The class
    is also used for any time-dependent field such as a forcing process.
    """

    grid: TorusGrid
    time_grid: TimeGrid
    values: np.ndarray
    jump_counts: np.ndarray | None = None
    iterations: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        expected = (self.time_grid.n_steps + 1,) + self.grid.shape
        if v.shape != expected:
            raise ValueError(f"values have shape {v.shape}, expected {expected}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        N = self.time_grid.n_steps
        if self.jump_counts is None:
            object.__setattr__(self, "jump_counts", np.zeros(N, dtype=int))
        if self.iterations is None:
            object.__setattr__(self, "iterations", np.zeros(N, dtype=int))

    @classmethod
    def constant(cls, f, time_grid):
        """A field held constant over ``time_grid``."""
        values = np.broadcast_to(f.values, (time_grid.n_steps + 1,) + f.grid.shape)
        return cls(f.grid, time_grid, np.array(values))

    @classmethod
    def from_function(cls, grid, time_grid, fn):
        """``fn(t)`` returns a :class:`Field` or an array of the grid shape."""
        values = [np.asarray(getattr(v, "values", v), dtype=float)
                  for v in (fn(float(t)) for t in time_grid.nodes)]
        return cls(grid, time_grid, np.stack(values))

    def field(self, n):
        return Field(self.grid, self.values[n])

    @property
    def final(self):
        return self.field(self.time_grid.n_steps)

    def sobolev_norms(self, order):
        F = np.fft.fftn(self.values, axes=tuple(range(1, self.grid.d + 1)), norm="ortho")
        weight = (1.0 + self.grid.k2) ** order * self.grid.cell_volume
        return np.sqrt(np.sum(weight * np.abs(F) ** 2, axis=tuple(range(1, self.grid.d + 1))))

    def l2_norms(self):
        return self.sobolev_norms(0)

    def h1_norms(self):
        return self.sobolev_norms(1)

    def scaled(self, s):
        return SolutionPath(self.grid, self.time_grid, s * self.values, self.jump_counts, self.iterations,
                            dict(self.meta))

    def write_summary_csv(self, fh):
        """Columns: time, L2 norm, H1 norm, jumps in the step ending at that time."""
        fh.write(f"# {SUMMARY_CSV_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(["time", "l2_norm", "h1_norm", "jump_count"])
        counts = np.concatenate([[0], self.jump_counts])
        for t, a, b, c in zip(self.time_grid.nodes, self.l2_norms(), self.h1_norms(), counts):
            writer.writerow([repr(float(t)), repr(float(a)), repr(float(b)), int(c)])


def write_trace_csv(distances, fh):
    fh.write(f"# {TRACE_CSV_VERSION}\n")
    writer = csv.writer(fh)
    writer.writerow(["iterate", "distance"])
    for m, d in enumerate(distances, start=1):
        writer.writerow([m, repr(float(d))])


# ---------------------------------------------------------------------------
# operators on raw arrays (a leading batch axis is allowed)


class _Operators:
    """Drift and noise operators for one set of evaluated coefficients.

    Structurally zero terms are skipped.
    """

    def __init__(self, grid, ev):
        self.grid = grid
        self.ev = ev
        self.has_bbar = bool(np.any(ev.bbar))
        self.has_b = bool(np.any(ev.b))
        self.has_c = bool(np.any(ev.c))
        self.sigma_on = [bool(np.any(ev.sigma[:, k])) for k in range(ev.mu.shape[0])]
        self.mu_on = [bool(np.any(ev.mu[k])) for k in range(ev.mu.shape[0])]

    def grad(self, u):
        return self.grid.grad(u)

    def principal(self, u, du=None):
        if du is None:
            du = self.grid.grad(u)
        return self.grid.div(np.einsum("ij...,j...->i...", self.ev.a, du))

    def lower(self, u, du=None):
        out = np.zeros_like(u)
        if self.has_bbar:
            out += self.grid.div(self.ev.bbar * u)
        if self.has_b:
            if du is None:
                du = self.grid.grad(u)
            out += np.einsum("i...,i...->...", self.ev.b, du)
        if self.has_c:
            out += self.ev.c * u
        return out

    def noise(self, u, k, du=None):
        out = np.zeros_like(u)
        if self.sigma_on[k]:
            if du is None:
                du = self.grid.grad(u)
            out += np.einsum("i...,i...->...", self.ev.sigma[:, k], du)
        if self.mu_on[k]:
            out += self.ev.mu[k] * u
        return out


def apply_L(coeffs, u, t=0.0, n=0, path=None):
    """``div(a grad u + bbar u) + b.grad u + c u`` with coefficients at ``(n, t)``."""
    grid = u.grid
    ops = _Operators(grid, coeffs.evaluate(grid, n, t, path))
    du = grid.grad(u.values)
    return Field(grid, ops.principal(u.values, du) + ops.lower(u.values, du))


def apply_Lambda(coeffs, u, g=None, k=0, t=0.0, n=0, path=None):
    """``sigma^.k . grad u + mu^k u + g``."""
    grid = u.grid
    if not 0 <= k < coeffs.n_channels:
        raise IndexError(f"unknown channel {k}")
    ops = _Operators(grid, coeffs.evaluate(grid, n, t, path))
    out = ops.noise(u.values, k)
    if g is not None:
        out = out + (g.values if isinstance(g, Field) else g)
    return Field(grid, out)


# ---------------------------------------------------------------------------
# implicit solve


class _ImplicitSolver:
    """Solves ``(I - theta dt P) v = rhs`` for one set of evaluated coefficients.

    Spatially constant ``a`` is inverted exactly in Fourier space.  Otherwise
    CG (GMRES if ``a`` is not symmetric) runs with the spectral inverse of
    the grid-mean coefficient as preconditioner.  A batch of right-hand
    sides is solved as one block-diagonal system.
    """

    def __init__(self, config, ops):
        self.config = config
        self.grid = config.grid
        self.ops = ops
        self.scale = config.theta * config.dt
        xi = self.grid.wavevectors
        a = ops.ev.a
        flat = a.reshape(a.shape[0], a.shape[1], -1)
        self.symmetric = bool(np.array_equal(a, np.swapaxes(a, 0, 1)))
        self.constant = ops.ev.a_is_constant()
        a_ref = flat[:, :, 0] if self.constant else flat.mean(axis=2)
        a_ref = 0.5 * (a_ref + a_ref.T)
        self.symbol = 1.0 + self.scale * np.einsum("i...,ij,j...->...", xi, a_ref, xi)

    def spectral_inverse(self, rhs):
        return self.grid.ifft(self.grid.fft(rhs) / self.symbol)

    def solve(self, rhs, step):
        if self.scale == 0.0:
            return rhs, 0
        if self.constant:
            return self.spectral_inverse(rhs), 0
        shape = rhs.shape
        size = rhs.size

        def matvec(v):
            v = v.reshape(shape)
            return (v - self.scale * self.ops.principal(v)).ravel()

        def precond(v):
            return self.spectral_inverse(v.reshape(shape)).ravel()

        A = LinearOperator((size, size), matvec=matvec, dtype=float)
        M = LinearOperator((size, size), matvec=precond, dtype=float)
        b = rhs.ravel()
        counter = [0]

        def tick(_):
            counter[0] += 1

        x0 = precond(b)
        if self.symmetric:
            x, info = cg(A, b, x0=x0, rtol=self.config.tol, atol=0.0, maxiter=self.config.max_iter,
                         M=M, callback=tick)
        else:
            x, info = gmres(A, b, x0=x0, rtol=self.config.tol, atol=0.0, maxiter=self.config.max_iter,
                            M=M, callback=tick, callback_type="pr_norm")
        if info != 0:
            bnorm = max(float(np.linalg.norm(b)), 1e-300)
            residual = float(np.linalg.norm(matvec(x) - b)) / bnorm
            raise SolverError(f"inner solve did not converge at step {step} (relative residual {residual:.3e})",
                              step=step, residual=residual)
        return x.reshape(shape), counter[0]


# ---------------------------------------------------------------------------
# forcing normalization


def _as_array(x):
    return np.asarray(getattr(x, "values", x), dtype=float)


def _forcing(x, grid, time_grid):
    """Normalize a forcing spec to ``n -> ndarray`` (or ``None`` when absent).

    Accepts a :class:`Field` or array of the grid shape (constant in time),
    a :class:`SolutionPath` or array ``(n_nodes, *shape)``, or a callable
    ``(n, t) -> Field | ndarray``.
    """
    if x is None:
        return None
    if isinstance(x, SolutionPath):
        if x.grid != grid or x.time_grid.n_steps < time_grid.n_steps:
            raise ValueError("forcing process does not match the solver grids")
        return lambda n: x.values[n]
    if callable(x) and not isinstance(x, (Field, np.ndarray)):
        dt = time_grid.dt
        return lambda n: _as_array(x(n, n * dt))
    arr = _as_array(x)
    if arr.shape == grid.shape:
        return lambda n: arr
    if arr.shape == (time_grid.n_steps + 1,) + grid.shape:
        return lambda n: arr[n]
    raise ValueError(f"forcing of shape {arr.shape} does not fit the grid {grid.shape}")


def _forcing_list(g, grid, time_grid, K):
    if g is None:
        return [None] * K
    if isinstance(g, (Field, SolutionPath, np.ndarray)) or callable(g):
        g = [g]
    g = list(g)
    if len(g) != K:
        raise ValueError(f"need one g per channel ({K}), got {len(g)}")
    return [_forcing(x, grid, time_grid) for x in g]


def _initial(u0, grid):
    if u0 is None:
        return np.zeros(grid.shape)
    if isinstance(u0, Field) and u0.grid != grid:
        raise ValueError("initial field lives on a different grid")
    arr = _as_array(u0)
    if arr.shape != grid.shape:
        raise ValueError("initial field does not fit the grid")
    return arr


# ---------------------------------------------------------------------------
# linear solve


def _check_path(path, K, tg):
    if path.n_channels != K:
        raise ValueError(f"coefficients have {K} channels, noise path has {path.n_channels}")
    if path.grid.n_steps != tg.n_steps or not math.isclose(path.grid.T, tg.T, rel_tol=1e-12):
        raise ValueError("noise path and solver time grid differ")


def _integrate(config, coeffs, u0, f, g, paths, *, node_offset=0, coeff_path=None, extra=None):
    """Run the scheme for a batch of paths sharing ``(u0, f, g)``.

    Returns node values of shape ``(B, n_nodes, *grid.shape)`` and inner
    iteration counts of shape ``(n_steps,)``.
    """
    grid, tg = config.grid, config.time_grid
    K = coeffs.n_channels
    for p in paths:
        _check_path(p, K, tg)
    if coeffs.path_dependent and len(paths) > 1:
        raise ValueError("noise-adapted coefficients need one path per solve")
    coeff_path = paths[0] if coeff_path is None else coeff_path
    dt, theta, N = tg.dt, config.theta, tg.n_steps
    B = len(paths)
    f_of = _forcing(f, grid, tg)
    g_of = _forcing_list(g, grid, tg, K)
    dZ = np.stack([p.all_increments() for p in paths]) if K else np.zeros((B, 0, N))
    bcast = (B,) + (1,) * grid.d

    values = np.empty((B, N + 1) + grid.shape)
    values[:, 0] = _initial(u0, grid)
    iterations = np.zeros(N, dtype=int)
    solver = None
    for n in range(N):
        m = n + node_offset
        if solver is None or not coeffs.time_invariant:
            ops = _Operators(grid, coeffs.evaluate(grid, m, m * dt, coeff_path))
            solver = _ImplicitSolver(config, ops)
            needs_grad = theta < 1.0 or ops.has_b or any(ops.sigma_on)
        u = values[:, n]
        du = grid.grad(u) if needs_grad else None
        rhs = u.copy()
        if theta < 1.0:
            rhs += (1.0 - theta) * dt * ops.principal(u, du)
        rhs += dt * ops.lower(u, du)
        if f_of is not None:
            rhs += dt * f_of(n)
        for k in range(K):
            term = ops.noise(u, k, du)
            if g_of[k] is not None:
                term = term + g_of[k](n)
            rhs += term * dZ[:, k, n].reshape(bcast)
        if extra is not None:
            rhs += extra(n)
        new, its = solver.solve(rhs, m)
        if not np.all(np.isfinite(new)):
            bad = [b for b in range(B) if not np.all(np.isfinite(new[b]))]
            raise SolverError(f"non-finite values after step {m} (replicas {bad})", step=m)
        values[:, n + 1] = new
        iterations[n] = its
    return values, iterations


def step_semi_implicit(u, coeffs, f, g, dZ, config, n=0, path=None):
    """One step of the scheme from node ``n``.

    Parameters
    ----------
    u : Field
    f : Field or None
    g : sequence of Field or None, one per channel
    dZ : array of shape (K,)
        Increments of every channel over the bin ``(t_n, t_{n+1}]``.
    """
    grid = config.grid
    dt, theta = config.dt, config.theta
    ops = _Operators(grid, coeffs.evaluate(grid, n, n * dt, path))
    solver = _ImplicitSolver(config, ops)
    v = u.values
    du = grid.grad(v)
    rhs = v + (1.0 - theta) * dt * ops.principal(v, du) + dt * ops.lower(v, du)
    if f is not None:
        rhs = rhs + dt * _as_array(f)
    dZ = np.atleast_1d(np.asarray(dZ, dtype=float))
    if dZ.shape != (coeffs.n_channels,):
        raise ValueError("need one increment per channel")
    for k in range(coeffs.n_channels):
        term = ops.noise(v, k, du)
        if g is not None and g[k] is not None:
            term = term + _as_array(g[k])
        rhs = rhs + term * dZ[k]
    new, _ = solver.solve(rhs, n)
    if not np.all(np.isfinite(new)):
        raise SolverError(f"non-finite values after step {n}", step=n)
    return Field(grid, new)


def solve_linear(config, coeffs, f, g, u0, path):
    """Integrate the linear equation along one noise path.

    Parameters
    ----------
    config : SolverConfig
    coeffs : CoefficientSet
        Assumed to pass the coercivity and boundedness checks.
    f : forcing spec or None
        A :class:`Field` (constant in time), a :class:`SolutionPath`, an
        array of node values or a callable ``(n, t) -> Field``.
    g : sequence of forcing specs (one per channel) or None
    u0 : Field or None
    path : PathRealization
        Martingale driver on ``config.time_grid``.

    Returns
    -------
    SolutionPath
    """
    values, its = _integrate(config, coeffs, u0, f, g, [path])
    return SolutionPath(config.grid, config.time_grid, values[0], path.jump_counts(), its)


def solve_linear_batch(config, coeffs, f, g, u0, paths):
    """:func:`solve_linear` for many paths at once (vectorized over replicas).

    With spatially constant ``a`` every replica is bit-identical to its
    single-path solve.  With variable ``a`` the inner iteration runs on the
    stacked system, so the tolerance applies to the whole batch.
    """
    paths = list(paths)
    if not paths:
        return []
    if coeffs.path_dependent:
        return [solve_linear(config, coeffs, f, g, u0, p) for p in paths]
    values, its = _integrate(config, coeffs, u0, f, g, paths)
    return [SolutionPath(config.grid, config.time_grid, v, p.jump_counts(), its) for v, p in zip(values, paths)]


# ---------------------------------------------------------------------------
# exact oracle for the heat equation with additive noise


def _require_heat(coeffs, grid):
    if coeffs is None:
        return
    ev = coeffs.evaluate(grid, 0, 0.0)
    eye = np.eye(grid.d).reshape((grid.d, grid.d) + (1,) * grid.d)
    ok = (coeffs.time_invariant and np.array_equal(ev.a, np.broadcast_to(eye, ev.a.shape))
          and not np.any(ev.bbar) and not np.any(ev.b) and not np.any(ev.c)
          and not np.any(ev.sigma) and not np.any(ev.mu))
    if not ok:
        raise HypothesisViolation("oracle needs a = I and all other coefficients zero")


def mild_solution_oracle(u0, g, path, grid, f=None, coefficients=None):
    """Variation-of-constants solution of ``du = (Delta u + f) dt + g^k dZ^k``.

    ``u0``, ``f`` and ``g^k`` are time-independent fields.  Each Fourier mode
    is propagated exactly over the bins of ``path``.  Jumps are convolved
    with the heat kernel from their exact times.  Drift (compensator) and
    forcing are integrated exactly over each bin; Brownian increments carry
    the bin-averaged kernel weight.

    Returns
    -------
    SolutionPath
        Values at the nodes of ``path.grid``.
    """
    _require_heat(coefficients, grid)
    tg = path.grid
    K = path.n_channels
    if g is None:
        g = [None] * K
    g = list(g)
    if len(g) != K:
        raise ValueError(f"need one g per channel ({K}), got {len(g)}")
    G = [np.zeros(grid.shape, dtype=complex) if gk is None else grid.fft(_as_array(gk)) for gk in g]
    k2 = grid.k2
    dt = tg.dt
    decay = np.exp(-k2 * dt)
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(k2 > 0, -np.expm1(-k2 * dt) / (k2 * dt), 1.0)
    U = grid.fft(_initial(u0, grid)).astype(complex)
    Fh = None if f is None else grid.fft(_as_array(f))
    cont = path.brownian_part() - path.compensator
    nodes = tg.nodes
    values = np.empty((tg.n_steps + 1,) + grid.shape)
    values[0] = grid.ifft(U)
    order = np.argsort(path.jump_bins, kind="stable")
    bins, times = path.jump_bins[order], path.jump_times[order]
    sizes, chans = path.jump_sizes[order], path.jump_channels[order]
    pos = np.searchsorted(bins, np.arange(tg.n_steps + 1))
    for n in range(tg.n_steps):
        drive = sum(G[k] * cont[k, n] for k in range(K)) if K else 0.0
        U = decay * U + weight * drive
        if Fh is not None:
            U = U + weight * dt * Fh
        for j in range(pos[n], pos[n + 1]):
            U = U + G[chans[j]] * sizes[j] * np.exp(-k2 * (nodes[n + 1] - times[j]))
        values[n + 1] = grid.ifft(U)
    return SolutionPath(grid, tg, values, path.jump_counts())


# ---------------------------------------------------------------------------
# semilinear equation


@dataclass(frozen=True, eq=False)
class NonlinearForcing:
    """``f(u)`` and ``g^k(u)`` acting on grid arrays, with a Lipschitz certificate.

    The certificate claims

        ||f(u) - f(v)||_{H^-1}^2 + sum_k w_k ||g^k(u) - g^k(v)||_{L2}^2
            <= eps ||u - v||_{H^1}^2 + K1 ||u - v||_{L2}^2.
    """

    f: Callable
    g: tuple
    eps: float
    K1: float

    def check_certificate(self, grid, weights, rng, n_probes=16):
        """Largest ratio lhs / rhs over random smooth probe pairs (``<= 1`` means valid)."""
        worst = 0.0
        w = np.asarray(weights, dtype=float)
        for _ in range(n_probes):
            u = Field.random_smooth(grid, rng, n_modes=grid.M // 2).values
            v = Field.random_smooth(grid, rng, n_modes=grid.M // 2).values
            lhs = grid.sobolev_sq(self.f(u) - self.f(v), -1)
            lhs += sum(wk * grid.sobolev_sq(gk(u) - gk(v), 0) for wk, gk in zip(w, self.g) if gk is not None)
            rhs = self.eps * grid.sobolev_sq(u - v, 1) + self.K1 * grid.sobolev_sq(u - v, 0)
            worst = max(worst, lhs / rhs)
        return worst


def fractional_forcing(grid, alpha, beta, weights, channel=0, eps=0.5):
    """``f(u) = -(-Delta)^(alpha/2) u`` and ``g^channel(u) = (-Delta)^(beta/2) u``.

    ``K1`` is the smallest constant making the certificate hold on ``grid``
    for the given ``eps``: the maximum over grid wavenumbers of
    ``(1 + |xi|^2)^(alpha - 1) + w |xi|^(2 beta) - eps (1 + |xi|^2)``.
    """
    if not 0 < alpha < 2 or not 0 < beta < 1:
        raise ValueError("need 0 < alpha < 2 and 0 < beta < 1")
    w = np.asarray(weights, dtype=float)
    k2 = grid.k2
    sym_f = -(k2 ** (alpha / 2))
    sym_g = k2 ** (beta / 2)
    x = 1.0 + k2
    excess = (k2 ** alpha) / x + w[channel] * k2 ** beta - eps * x
    K1 = max(float(np.max(excess)), 0.0)

    def f(u):
        return grid.multiply(u, sym_f)

    def g_ch(u):
        return grid.multiply(u, sym_g)

    g = tuple(g_ch if k == channel else None for k in range(len(w)))
    return NonlinearForcing(f, g, eps, K1)


def window_distance(grid, dt, a, b):
    """Discrete window norm ``(sum_{n>=1} dt ||a_n - b_n||_{H1}^2)^(1/2)``."""
    return math.sqrt(dt * grid.sobolev_sq(np.asarray(a)[1:] - np.asarray(b)[1:], 1))


def _nonlinear_terms(nonlinear, values, K):
    f = np.stack([nonlinear.f(v) for v in values])
    g = [None if gk is None else np.stack([gk(v) for v in values]) for gk in
         (list(nonlinear.g) + [None] * (K - len(nonlinear.g)))]
    return f, g


def _picard_iterates(config, coeffs, nonlinear, u0, path, start, stop):
    """Yield successive Picard iterates on bins ``start <= n < stop``."""
    sub = path.window(start, stop)
    cfg = config.with_time_grid(sub.grid)
    K = coeffs.n_channels
    u = _integrate(cfg, coeffs, u0, None, None, [sub], node_offset=start, coeff_path=path)[0][0]
    while True:
        f, g = _nonlinear_terms(nonlinear, u, K)
        new = _integrate(cfg, coeffs, u0, f, g, [sub], node_offset=start, coeff_path=path)[0][0]
        yield new, window_distance(cfg.grid, cfg.dt, new, u)
        u = new


def _picard_window(config, coeffs, nonlinear, u0, path, start, stop, tol, max_iter, probe):
    """Iterate on one window until successive iterates are ``tol`` apart.

    Returns the values, the distance trace, the measured ratios and whether
    the first ``probe`` ratios stayed below 0.9.  Ratios are only measured
    while both distances are above round-off.
    """
    distances, ratios = [], []
    rising = 0
    floor = None
    u = None
    for m, (u, d) in enumerate(_picard_iterates(config, coeffs, nonlinear, u0, path, start, stop)):
        if floor is None:
            floor = 1e-13 * max(window_distance(config.grid, config.dt, u, np.zeros_like(u)), 1e-300)
        distances.append(d)
        if len(distances) >= 2 and distances[-2] > floor and d > floor:
            r = d / distances[-2]
            ratios.append(r)
            rising = rising + 1 if r >= 1.0 else 0
            if rising >= 3:
                raise ContractionError(
                    f"Picard iteration stopped contracting on window [{start}, {stop}); use a shorter window",
                    step=start)
            if probe and len(ratios) <= probe and r >= 0.9:
                return u, distances, ratios, False
        if d <= tol:
            return u, distances, ratios, True
        if m + 1 >= max_iter:
            raise ContractionError(f"Picard iteration did not reach {tol:g} on window [{start}, {stop})",
                                   step=start)


def solve_picard(config, coeffs, nonlinear, u0, path, tol=1e-10, max_iter=200, window_steps=None, probe=4):
    """Picard iteration ``u^{m+1} = R(f(u^m), g(u^m))`` on consecutive windows.

    The forcing is frozen at the left node of every step.  The window length
    starts at the whole horizon (or ``window_steps``) and is halved while one
    of the first ``probe`` measured ratios reaches 0.9.  Each window
    restarts from the terminal value of the previous one.

    Returns
    -------
    SolutionPath
        ``meta`` holds ``trace`` (distances per window), ``ratios``,
        ``max_ratio``, ``windows`` (bin ranges), ``picard_window`` (length
        in time units) and ``final_distance``.
    """
    grid, tg = config.grid, config.time_grid
    N = tg.n_steps
    values = np.empty((N + 1,) + grid.shape)
    values[0] = _initial(u0, grid)
    W = N if window_steps is None else int(window_steps)
    start = 0
    trace, all_ratios, windows = [], [], []
    while start < N:
        stop = min(start + W, N)
        u, dist, ratios, ok = _picard_window(config, coeffs, nonlinear, values[start], path, start, stop,
                                             tol, max_iter, probe)
        if not ok and stop - start > 1:
            W = max((stop - start) // 2, 1)
            log.info("halving Picard window to %d steps", W)
            continue
        values[start:stop + 1] = u
        trace.append(dist)
        all_ratios.extend(ratios)
        windows.append((start, stop))
        start = stop
    meta = {
        "trace": trace,
        "ratios": all_ratios,
        "max_ratio": max(all_ratios) if all_ratios else 0.0,
        "windows": windows,
        "picard_window": W * tg.dt,
        "final_distance": max(d[-1] for d in trace),
    }
    return SolutionPath(grid, tg, values, path.jump_counts(), meta=meta)


def picard_ratio(config, coeffs, nonlinear, u0, path, window_steps, n_iter=4):
    """Largest successive-distance ratio over the first ``n_iter`` ratios on the first window."""
    it = _picard_iterates(config, coeffs, nonlinear, _initial(u0, config.grid), path, 0, window_steps)
    d = np.array([next(it)[1] for _ in range(n_iter + 1)])
    return float(np.max(d[1:] / d[:-1]))


# ---------------------------------------------------------------------------
# localization


@dataclass(frozen=True)
class LocalizationPlan:
    """Segments between successive large jumps of the first ``n0`` channels."""

    n0: int
    level: float
    boundaries: tuple  # large-jump times, ascending
    horizon: float

    @property
    def segments(self):
        edges = (0.0,) + self.boundaries + (self.horizon,)
        return list(zip(edges[:-1], edges[1:]))


def solve_localized(config, coeffs, f, g, u0, path, n0, level):
    """Solve with the large jumps of channels ``0 .. n0-1`` removed pathwise.

    Jumps above ``level`` on those channels are deleted without changing the
    compensator, so up to the first removed jump the driver, and hence the
    solution, is bit-identical to the untruncated one.  The channels must not
    couple to the gradient.

    ``meta`` records the first large-jump time, the plan, and for every
    removed jump ``(t, z, channel, |z| ||g^k(t_n)||_{L2})``: the size of the
    contribution that was not applied.
    """
    grid, tg = config.grid, config.time_grid
    if not 0 <= n0 <= path.n_channels:
        raise ValueError("n0 out of range")
    if not sigma_vanishes(coeffs, n0, grid, tg, path):
        raise HypothesisViolation(f"sigma must vanish for the first {n0} channels")
    truncated = truncate_jumps(path, level, channels=range(n0), recompensate=False)
    sol = solve_linear(config, coeffs, f, g, u0, truncated)
    removed = (path.jump_channels < n0) & (np.abs(path.jump_sizes) > level)
    g_of = _forcing_list(g, grid, tg, coeffs.n_channels)
    deferred = []
    for t, z, k, b in zip(path.jump_times[removed], path.jump_sizes[removed],
                          path.jump_channels[removed], path.jump_bins[removed]):
        gk = g_of[k]
        norm = 0.0 if gk is None else abs(z) * math.sqrt(grid.dot(gk(b), gk(b)))
        deferred.append((float(t), float(z), int(k), norm))
    plan = LocalizationPlan(n0, float(level), tuple(float(t) for t in path.jump_times[removed]), tg.T)
    sol.meta.update(first_large_jump_time=first_large_jump_time(path, level, n0) if n0 else math.inf,
                    removed_jumps=deferred, plan=plan)
    return sol


# ---------------------------------------------------------------------------
# continuity method


def _difference_extra(config, lo, hi, path, prev):
    """Correction turning the ``lo`` scheme into the ``hi`` scheme at a fixed point.

    ``prev`` holds the node values of the previous iterate.
    """
    grid, dt, theta = config.grid, config.dt, config.theta
    K = lo.n_channels
    dZ = path.all_increments()
    frozen = lo.time_invariant and hi.time_invariant
    cache = {}

    def ops(n):
        key = 0 if frozen else n
        if key not in cache:
            t = n * dt
            cache[key] = (_Operators(grid, lo.evaluate(grid, n, t, path)),
                          _Operators(grid, hi.evaluate(grid, n, t, path)))
        return cache[key]

    def extra(n):
        o_lo, o_hi = ops(n)
        u, u_next = prev[n], prev[n + 1]
        du = grid.grad(u)
        out = theta * dt * (o_hi.principal(u_next) - o_lo.principal(u_next))
        if theta < 1.0:
            out += (1.0 - theta) * dt * (o_hi.principal(u, du) - o_lo.principal(u, du))
        out += dt * (o_hi.lower(u, du) - o_lo.lower(u, du))
        for k in range(K):
            out += (o_hi.noise(u, k, du) - o_lo.noise(u, k, du)) * dZ[k, n]
        return out

    return extra


def homotopy_demo(config, coeffs, f, g, u0, path, lam, lam0=0.0, tol=1e-12, max_iter=100):
    """Continuity-method iteration from ``L_lam0`` towards ``L_lam``.

    Each iterate solves the ``lam0`` equation with the difference of the two
    operators applied to the previous iterate as extra forcing, starting
    from ``u0`` held constant in time.  The fixed point of the discrete
    iteration is the direct ``lam`` scheme.

    Returns
    -------
    dict
        ``distances`` (window H1 distances of successive iterates),
        ``ratios``, ``contraction`` (largest ratio above round-off),
        ``fitted_c`` (median ratio over ``|lam - lam0|``), ``solution``,
        ``direct`` and ``direct_distance`` (relative window H1 distance to
        the direct solve at ``lam``).
    """
    grid, tg = config.grid, config.time_grid
    hi = lambda_homotopy(coeffs, lam)
    lo = lambda_homotopy(coeffs, lam0)
    direct = solve_linear(config, hi, f, g, u0, path)
    u = np.broadcast_to(_initial(u0, grid), (tg.n_steps + 1,) + grid.shape).copy()
    distances, ratios = [], []
    rising = 0
    if lam == lam0:
        sol = solve_linear(config, lo, f, g, u0, path)
        distances.append(window_distance(grid, tg.dt, sol.values, u))
    else:
        for _ in range(max_iter):
            extra = _difference_extra(config, lo, hi, path, u)
            values, its = _integrate(config, lo, u0, f, g, [path], extra=extra)
            sol = SolutionPath(grid, tg, values[0], path.jump_counts(), its)
            d = window_distance(grid, tg.dt, sol.values, u)
            u = np.array(sol.values)
            if distances and distances[-1] > 0:
                r = d / distances[-1]
                ratios.append(r)
                rising = rising + 1 if r >= 1.0 else 0
                if rising >= 3:
                    raise ContractionError(f"continuity iteration diverges at |lam - lam0| = {abs(lam - lam0):g}")
            distances.append(d)
            scale = max(window_distance(grid, tg.dt, u, np.zeros_like(u)), 1e-300)
            if d <= tol * scale:
                break
        else:
            raise ContractionError(f"continuity iteration did not converge at |lam - lam0| = {abs(lam - lam0):g}")
    ref = max(window_distance(grid, tg.dt, direct.values, np.zeros_like(direct.values)), 1e-300)
    gap = window_distance(grid, tg.dt, sol.values, direct.values) / ref
    useful = [r for r, d in zip(ratios, distances[1:]) if d > 1e-10 * distances[0]]
    return {
        "distances": distances,
        "ratios": ratios,
        "contraction": max(useful) if useful else 0.0,
        "fitted_c": (float(np.median(useful)) / abs(lam - lam0)) if useful and lam != lam0 else 0.0,
        "iterations": len(distances),
        "solution": sol,
        "direct": direct,
        "direct_distance": gap,
    }
