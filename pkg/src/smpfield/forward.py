"""Euler simulation of the controlled state, its perturbations and the
variational equation, plus path statistics built on the same increments.

Arrays are path-major: ``x`` has shape (P, N + 1, d), ``u`` (P, N + 1, k)
and ``dW`` (P, N, m) for P paths on an N-step grid.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng
from .errors import InputError, SimulationError
from .field import increment, local_characteristic, matvec
from .stats import mean_and_se


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise InputError("horizon T must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InputError("n_steps must be a positive integer")

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def times(self):
        return self.T * np.arange(self.n_steps + 1) / self.n_steps

    def index(self, t):
        """Node index of time t (nearest node)."""
        return int(min(max(round(t / self.dt), 0), self.n_steps))

    def refined(self, factor=2):
        return TimeGrid(self.T, self.n_steps * factor)


@dataclass(frozen=True)
class Drift:
    """Drift b(t, x, u) with Jacobians; all callables are batched like
    the field factors."""

    eval: Callable
    grad_x: Callable
    grad_u: Callable
    name: str = "custom"


def linear_drift(A, B, offset=None):
    """b(t, x, u) = A x + B u + offset."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(d, -1)
    a = np.zeros(d) if offset is None else np.asarray(offset, dtype=float).reshape(d)
    return Drift(
        lambda t, x, u: matvec(A, x) + matvec(B, u) + a,
        lambda t, x, u: np.broadcast_to(A, np.shape(x)[:-1] + A.shape),
        lambda t, x, u: np.broadcast_to(B, np.shape(u)[:-1] + B.shape),
        name="linear",
    )


def zero_drift(state_dim, control_dim):
    return linear_drift(np.zeros((state_dim, state_dim)), np.zeros((state_dim, control_dim)))


@dataclass(frozen=True)
class ControlLaw:
    """A control: open-loop table, per-path process, or state feedback.

    kind == "table":    ``table`` has shape (N, k) or (N + 1, k); the same
                        deterministic control on every path.
    kind == "process":  ``table`` has shape (P, N + 1, k); one adapted control
                        realisation per path (e.g. a feedback law frozen along
                        a reference trajectory).
    kind == "feedback": ``feedback(t, x)`` maps (P, d) states to (P, k).

    ``lower``/``upper`` describe a box domain U; values are projected onto it.
    """

    kind: str
    control_dim: int
    table: np.ndarray = None
    feedback: Callable = None
    lower: np.ndarray = None
    upper: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("table", "process", "feedback"):
            raise InputError(f"unknown control kind {self.kind!r}")
        if self.kind in ("table", "process") and self.table is None:
            raise InputError(f"{self.kind} control needs a table")
        if self.kind == "feedback" and self.feedback is None:
            raise InputError("feedback control needs a callable")

    @classmethod
    def constant(cls, value, n_steps, **kw):
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls("table", v.size, table=np.tile(v, (n_steps + 1, 1)), **kw)

    @classmethod
    def open_loop(cls, table, **kw):
        tab = np.asarray(table, dtype=float)
        if tab.ndim == 1:
            tab = tab[:, None]
        return cls("table", tab.shape[1], table=tab, **kw)

    @classmethod
    def process(cls, values, **kw):
        vals = np.asarray(values, dtype=float)
        if vals.ndim != 3:
            raise InputError("process controls need shape (P, N + 1, k)")
        return cls("process", vals.shape[2], table=vals, **kw)

    @classmethod
    def from_feedback(cls, fn, control_dim, **kw):
        return cls("feedback", control_dim, feedback=fn, **kw)

    def project(self, u):
        if self.lower is not None or self.upper is not None:
            u = np.clip(u, self.lower, self.upper)
        return u

    def at(self, n, t, x, rows=slice(None)):
        """Control values at node n for the states ``x`` (shape (P, d))."""
        P = x.shape[0]
        if self.kind == "table":
            row = self.table[min(n, self.table.shape[0] - 1)]
            u = np.broadcast_to(row, (P, self.control_dim))
        elif self.kind == "process":
            u = self.table[rows, n]
            if u.shape[0] != P:
                raise InputError("process control has the wrong number of paths")
        else:
            u = np.asarray(self.feedback(t, x), dtype=float).reshape(P, self.control_dim)
        return self.project(np.array(u, dtype=float))


@dataclass
class PathBundle:
    """Sample paths on a common grid; the database behind every estimator."""

    grid: TimeGrid
    x: np.ndarray
    u: np.ndarray
    dW: np.ndarray
    seed: int
    path_ids: np.ndarray

    @property
    def n_paths(self):
        return self.x.shape[0]

    @property
    def state_dim(self):
        return self.x.shape[2]

    @property
    def control_dim(self):
        return self.u.shape[2]

    def dw_checksum(self):
        return rng.checksum(self.dW)

    def shares_noise_with(self, other):
        return self.grid == other.grid and (
            self.dW is other.dW or (self.dW.shape == other.dW.shape and np.array_equal(self.dW, other.dW))
        )


def _path_chunks(n_paths, threads):
    threads = max(1, int(threads))
    edges = np.linspace(0, n_paths, threads + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run_chunks(fn, n_paths, threads):
    chunks = _path_chunks(n_paths, threads)
    if len(chunks) == 1:
        fn(chunks[0])
        return
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        for fut in [pool.submit(fn, c) for c in chunks]:
            fut.result()


def simulate_state(field, drift, law, x0, grid, n_paths, seed, threads=1, dW=None, path_offset=0):
    """Euler scheme x_{n+1} = x_n + b dt + sum_k sigma_k dW^k on every path.

    Each path draws its increments from its own counter-based substream
    (seed, path id), so results are bitwise independent of ``threads``.
    Pass ``dW`` to reuse the increments of another bundle (common random
    numbers).
    """
    d, k, m = field.state_dim, field.control_dim, field.brownian_dim
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (d,):
        raise InputError(f"x0 has shape {x0.shape}, expected ({d},)")
    if not np.all(np.isfinite(x0)):
        raise InputError("x0 must be finite")
    if law.control_dim != k:
        raise InputError(f"control law has dimension {law.control_dim}, field expects {k}")
    N, dt = grid.n_steps, grid.dt
    path_ids = np.arange(path_offset, path_offset + n_paths, dtype=np.int64)
    if dW is None:
        dW = np.empty((n_paths, N, m))
        fill = True
    else:
        dW = np.asarray(dW, dtype=float)
        if dW.shape != (n_paths, N, m):
            raise InputError(f"dW has shape {dW.shape}, expected {(n_paths, N, m)}")
        fill = False
    x = np.empty((n_paths, N + 1, d))
    u = np.empty((n_paths, N + 1, k))
    times = grid.times

    def work(rows):
        if fill:
            dW[rows] = rng.brownian_increments(seed, path_ids[rows], N, m, dt)
        xc = np.broadcast_to(x0, (rows.stop - rows.start, d)).copy()
        x[rows, 0] = xc
        for n in range(N):
            t = times[n]
            uc = law.at(n, t, xc, rows)
            u[rows, n] = uc
            with np.errstate(over="ignore", invalid="ignore"):
                xc = xc + drift.eval(t, xc, uc) * dt + increment(field, t, xc, uc, dW[rows, n])
            if not np.all(np.isfinite(xc)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(xc), axis=1))[0])
                pid = int(path_ids[rows][bad])
                raise SimulationError(f"non-finite state on path {pid} at step {n + 1}", path=pid, step=n + 1)
            x[rows, n + 1] = xc
        u[rows, N] = law.at(N, times[N], xc, rows)

    _run_chunks(work, n_paths, threads)
    return PathBundle(grid, x, u, dW, seed, path_ids)


def realize(law, bar):
    """Evaluate a control law along the trajectories of ``bar``; returns
    the (P, N + 1, k) process."""
    if law.kind == "process":
        if law.table.shape[:2] != bar.u.shape[:2]:
            raise InputError("process control does not match the bundle")
        return law.project(np.array(law.table, dtype=float))
    out = np.empty((bar.n_paths, bar.grid.n_steps + 1, law.control_dim))
    for n, t in enumerate(bar.grid.times):
        out[:, n] = law.at(n, t, bar.x[:, n])
    return out


def perturbed_control(ubar, u, eps):
    """Convex combination ubar + eps (u - ubar) as a process control."""
    if not 0.0 <= eps <= 1.0:
        raise InputError("eps must lie in [0, 1]")
    return ControlLaw.process(ubar + eps * (u - ubar))


def simulate_perturbed(field, drift, bar, u_process, eps, x0, threads=1):
    """State under u^eps = ubar + eps (u - ubar), reusing bar's increments."""
    law = perturbed_control(bar.u, u_process, eps)
    return simulate_state(field, drift, law, x0, bar.grid, bar.n_paths, bar.seed, threads=threads, dW=bar.dW,
                          path_offset=int(bar.path_ids[0]) if bar.n_paths else 0)


def simulate_variational(field, drift, bar, direction, grid=None, threads=1):
    """Euler scheme for the first-order sensitivity xhat, xhat(0) = 0:

    xhat_{n+1} = xhat_n + (b_x xhat_n + b_u du_n) dt
                 + sum_k (d_x sigma_k xhat_n + d_u sigma_k du_n) dW_n^k

    with coefficients frozen along (xbar, ubar).  ``direction`` is the
    process u - ubar, shape (P, N + 1, k).  The returned bundle carries
    xhat in ``x`` and the direction in ``u``, and shares bar's increments.
    """
    if grid is not None and grid != bar.grid:
        raise InputError("variational grid differs from the reference bundle")
    du = np.asarray(direction, dtype=float)
    if du.shape != bar.u.shape:
        raise InputError(f"direction has shape {du.shape}, expected {bar.u.shape}")
    P, N = bar.n_paths, bar.grid.n_steps
    d, m = field.state_dim, field.brownian_dim
    dt = bar.grid.dt
    times = bar.grid.times
    xhat = np.empty((P, N + 1, d))

    def work(rows):
        h = np.zeros((rows.stop - rows.start, d))
        xhat[rows, 0] = h
        for n in range(N):
            t = times[n]
            xb, ub, dun = bar.x[rows, n], bar.u[rows, n], du[rows, n]
            dWn = bar.dW[rows, n]
            sx = field.sigma_x(t, xb, ub)
            su = field.sigma_u(t, xb, ub)
            step = (matvec(drift.grad_x(t, xb, ub), h) + matvec(drift.grad_u(t, xb, ub), dun)) * dt
            for k in range(m):
                step = step + (matvec(sx[..., k, :, :], h) + matvec(su[..., k, :, :], dun)) * dWn[:, k, None]
            h = h + step
            xhat[rows, n + 1] = h

    _run_chunks(work, P, threads)
    return PathBundle(bar.grid, xhat, du, bar.dW, bar.seed, bar.path_ids)


def ito_integral(field, bundle):
    """Left-endpoint Riemann sum of the field along the paths, shape (P, d)."""
    if bundle.dW.shape[2] != field.brownian_dim or bundle.state_dim != field.state_dim:
        raise InputError("bundle dimensions do not match the field")
    total = np.zeros((bundle.n_paths, field.state_dim))
    for n, tn in enumerate(bundle.grid.times[:-1]):
        total += increment(field, tn, bundle.x[:, n], bundle.u[:, n], bundle.dW[:, n])
    return total


@dataclass(frozen=True)
class Covariation:
    realized: np.ndarray   # (P, d, d)
    predicted: np.ndarray  # (P, d, d)

    @property
    def rms(self):
        diff = (self.realized - self.predicted).reshape(self.realized.shape[0], -1)
        return float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))


def realized_covariation(field, bundle_x, bundle_y):
    """Realized sum of dM(X) dM(Y)^T against the Riemann sum of q(X, Y) dt."""
    if not bundle_x.shares_noise_with(bundle_y):
        raise InputError("covariation needs bundles on the same grid and increments")
    dt = bundle_x.grid.dt
    d = field.state_dim
    P = bundle_x.n_paths
    realized = np.zeros((P, d, d))
    predicted = np.zeros((P, d, d))
    for n, tn in enumerate(bundle_x.grid.times[:-1]):
        xs, us = bundle_x.x[:, n], bundle_x.u[:, n]
        ys, vs = bundle_y.x[:, n], bundle_y.u[:, n]
        dMx = increment(field, tn, xs, us, bundle_x.dW[:, n])
        dMy = increment(field, tn, ys, vs, bundle_y.dW[:, n])
        realized += dMx[:, :, None] * dMy[:, None, :]
        predicted += local_characteristic(field, tn, xs, us, ys, vs) * dt
    return Covariation(realized, predicted)


@dataclass(frozen=True)
class GapProfile:
    """Per-node Monte Carlo estimates of a mean-square quantity."""

    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray

    @property
    def sup(self):
        return float(np.max(self.mean))

    @property
    def argsup(self):
        return int(np.argmax(self.mean))

    @property
    def sup_se(self):
        return float(self.se[self.argsup])


def _require_crn(a, b):
    if a.grid != b.grid or a.n_paths != b.n_paths:
        raise InputError("bundles differ in grid or path count")
    if not a.shares_noise_with(b):
        raise InputError("bundles do not share Brownian increments (common random numbers required)")


def perturbation_gap(bar, eps, pert):
    """E|x^eps(t) - xbar(t)|^2 on every node."""
    _require_crn(bar, pert)
    sq = np.sum((pert.x - bar.x) ** 2, axis=2)
    mean, se = mean_and_se(sq, axis=0)
    return GapProfile(bar.grid.times, mean, se)


def variational_remainder(bar, eps, pert, hat):
    """E|eta^eps(t)|^2 with eta = (x^eps - xbar) / eps - xhat."""
    _require_crn(bar, pert)
    _require_crn(bar, hat)
    if eps <= 0:
        raise InputError("eps must be positive")
    eta = (pert.x - bar.x) / eps - hat.x
    mean, se = mean_and_se(np.sum(eta**2, axis=2), axis=0)
    return GapProfile(bar.grid.times, mean, se)


def export_paths_csv(bundle, path, max_paths=None, config_hash=None):
    """Columnar export: path_id, t, x_1..x_d, u_1..u_k."""
    P = bundle.n_paths if max_paths is None else min(max_paths, bundle.n_paths)
    d, k = bundle.state_dim, bundle.control_dim
    times = bundle.grid.times
    with open(path, "w", newline="") as fh:
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["path_id", "t"] + [f"x_{i + 1}" for i in range(d)] + [f"u_{i + 1}" for i in range(k)])
        for p in range(P):
            pid = int(bundle.path_ids[p])
            for n, t in enumerate(times):
                w.writerow([pid, repr(float(t))] + [repr(float(v)) for v in bundle.x[p, n]]
                           + [repr(float(v)) for v in bundle.u[p, n]])
