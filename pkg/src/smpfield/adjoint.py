"""Backward regression solver for the adjoint BSDE

    dy = -(b_x^T y + sum_k d_x sigma_k^T z sigma_k + f_x) dt + z dM + dN,
    y(T) = Phi_x(xbar(T)),

along a simulated reference bundle, and the duality check that pairs it
with the variational process.

The filtration is generated by the driving Brownian motions, so the
orthogonal martingale N vanishes and is returned as zeros.
"""

import csv
from dataclasses import dataclass, field as dc_field
from itertools import combinations_with_replacement
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import InputError, SolverError
from .field import rmatvec, trace_form_grad_u, trace_form_grad_x
from .stats import MCEstimate


@dataclass(frozen=True)
class RegressionBasis:
    """Basis for conditional expectations given the state at one node.

    ``polynomial``: all monomials of total degree <= ``degree`` in the
    (standardised) state coordinates.
    ``bins``: constant, linear term and hinge functions max(x_i - c, 0) at
    ``n_knots`` empirical quantiles, per coordinate.
    """

    kind: str = "polynomial"
    degree: int = 2
    ridge: float = 1e-8
    n_knots: int = 8

    def __post_init__(self):
        if self.kind not in ("polynomial", "bins"):
            raise InputError(f"unknown basis kind {self.kind!r}")
        if self.ridge < 0:
            raise InputError("ridge must be non-negative")
        if self.degree < 0 or self.n_knots < 1:
            raise InputError("degree must be >= 0 and n_knots >= 1")

    def design(self, x):
        x = np.asarray(x, dtype=float)
        P = x.shape[0]
        cols = [np.ones(P)]
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        live = [i for i in range(x.shape[1]) if std[i] > 1e-12 * (1.0 + abs(mean[i]))]
        if not live:
            return np.ones((P, 1))
        xs = (x[:, live] - mean[live]) / std[live]
        if self.kind == "polynomial":
            for deg in range(1, self.degree + 1):
                for combo in combinations_with_replacement(range(len(live)), deg):
                    c = xs[:, combo[0]].copy()
                    for j in combo[1:]:
                        c *= xs[:, j]
                    cols.append(c)
        else:
            qs = np.linspace(0, 1, self.n_knots + 2)[1:-1]
            for j in range(len(live)):
                col = xs[:, j]
                cols.append(col)
                for knot in np.unique(np.quantile(col, qs)):
                    cols.append(np.maximum(col - knot, 0.0))
        return np.column_stack(cols)


@dataclass(frozen=True)
class AdjointCoeffs:
    """Coefficient callables along the reference pair (batched)."""

    b_x: Callable
    b_u: Callable
    f_x: Callable
    f_u: Callable
    phi_x: Callable

    @classmethod
    def from_problem(cls, drift, cost):
        return cls(drift.grad_x, drift.grad_u, cost.running_x, cost.running_u, cost.terminal_x)


@dataclass
class AdjointTriple:
    """Discretised (y, z, N) along a reference bundle.

    y:      (P, N + 1, d) costate at every node, y[:, -1] = Phi_x(xbar(T)).
    z:      (P, N, d, d) martingale integrand on each step.
    y_pred: (P, N, d) regression estimate of E[y_{n+1} | state at node n];
            this is the costate value that pairs with controls and
            variations applied on step n.
    """

    y: np.ndarray
    z: np.ndarray
    y_pred: np.ndarray
    grid: object
    normal_eq: np.ndarray = dc_field(repr=False, default=None)

    @property
    def N(self):
        return np.broadcast_to(0.0, self.y.shape)


def _project(A, Y, ridge, node):
    """Least-squares fit of the columns of Y on the design A."""
    ncol = A.shape[1]
    if ridge == 0.0 and np.linalg.matrix_rank(A) < ncol:
        raise SolverError(f"rank-deficient regression at node {node}", node=node)
    G = A.T @ A
    if ridge:
        G = G + ridge * np.eye(ncol)
    rhs = A.T @ Y
    try:
        beta = scipy.linalg.solve(G, rhs, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise SolverError(f"regression failed at node {node}: {exc}", node=node) from None
    resid_proj = A.T @ (Y - A @ beta)
    scale = max(float(np.max(np.abs(rhs))), np.finfo(float).tiny)
    return beta, float(np.max(np.abs(resid_proj))) / scale


def _min_norm_z(Zt, S):
    """Minimum-norm z solving z S = Zt per path (pseudoinverse)."""
    if S.shape[-2:] == (1, 1):
        s = S[..., 0, 0]
        safe = np.where(s != 0.0, s, 1.0)
        return np.where((s != 0.0)[:, None, None], Zt / safe[:, None, None], 0.0)
    return Zt @ np.linalg.pinv(S)


def solve_adjoint(field, bar, coeffs, basis=None):
    """Backward sweep with explicit driver.

    At each node the step target y_{n+1} is regressed jointly on
    basis(xbar_n) and basis(xbar_n) * dW_n^k / sqrt(dt); the first block
    gives E[y_{n+1} | xbar_n], the others give E[y_{n+1} dW^k | xbar_n] / dt
    = z sigma_k.  z is recovered with a pseudoinverse of the factor matrix,
    and

        y_n = yhat + (b_x^T yhat + sum_k d_x sigma_k^T z sigma_k + f_x) dt.

    A step target that is identical on every path is deterministic: its
    conditional mean is itself and its martingale part is zero, with no
    regression noise.
    """
    basis = basis or RegressionBasis()
    grid = bar.grid
    P, N, dt = bar.n_paths, grid.n_steps, grid.dt
    d, m = field.state_dim, field.brownian_dim
    if bar.state_dim != d or bar.dW.shape[2] != m:
        raise InputError("reference bundle does not match the field")
    times = grid.times
    y = np.empty((P, N + 1, d))
    y_pred = np.empty((P, N, d))
    z = np.empty((P, N, d, d))
    normal_eq = np.zeros(N)
    y[:, N] = np.asarray(coeffs.phi_x(bar.x[:, N]), dtype=float).reshape(P, d)
    if not np.all(np.isfinite(y[:, N])):
        raise SolverError("non-finite terminal condition", node=N)
    sqdt = np.sqrt(dt)
    for n in range(N - 1, -1, -1):
        t, xb, ub = times[n], bar.x[:, n], bar.u[:, n]
        target = y[:, n + 1]
        dWn = bar.dW[:, n]
        const = np.all(target == target[:1], axis=0)
        yhat = np.empty((P, d))
        Zt = np.zeros((P, d, m))
        yhat[:, const] = target[0, const]
        if not np.all(const):
            live = ~const
            B = basis.design(xb)
            A = np.concatenate([B] + [B * (dWn[:, k:k + 1] / sqdt) for k in range(m)], axis=1)
            beta, normal_eq[n] = _project(A, target[:, live], basis.ridge, n)
            # first block: conditional mean; block k + 1: martingale part along dW^k
            nb = B.shape[1]
            yhat[:, live] = B @ beta[:nb]
            for k in range(m):
                Zt[:, live, k] = (B @ beta[(k + 1) * nb:(k + 2) * nb]) / sqdt
        S = field.sigma(t, xb, ub)
        zn = _min_norm_z(Zt, S)
        drv = rmatvec(coeffs.b_x(t, xb, ub), yhat) + trace_form_grad_x(field, zn, t, xb, ub)
        drv = drv + np.asarray(coeffs.f_x(t, xb, ub), dtype=float).reshape(P, d)
        yn = yhat + drv * dt
        if not np.all(np.isfinite(yn)):
            raise SolverError(f"non-finite costate at node {n}", node=n)
        y[:, n] = yn
        y_pred[:, n] = yhat
        z[:, n] = zn
    return AdjointTriple(y, z, y_pred, grid, normal_eq)


@dataclass(frozen=True)
class DualityResult:
    lhs: MCEstimate
    rhs: MCEstimate
    gap: MCEstimate

    def passes(self, n_se=3.0, atol=1e-8):
        return abs(self.gap.mean) <= max(n_se * self.gap.se, atol)


def control_gradient_terms(field, adj, bar, coeffs):
    """b_u^T yhat + sum_k d_u sigma_k^T z sigma_k + f_u on every step,
    shape (P, N, k)."""
    P, N = bar.n_paths, bar.grid.n_steps
    out = np.empty((P, N, field.control_dim))
    for n, t in enumerate(bar.grid.times[:-1]):
        xb, ub = bar.x[:, n], bar.u[:, n]
        g = rmatvec(coeffs.b_u(t, xb, ub), adj.y_pred[:, n])
        g = g + trace_form_grad_u(field, adj.z[:, n], t, xb, ub)
        out[:, n] = g + np.asarray(coeffs.f_u(t, xb, ub), dtype=float).reshape(P, -1)
    return out


def duality_gap(field, adj, hat, coeffs, bar):
    """Monte Carlo check of

        E<y(T), xhat(T)> = E sum_n [<b_u^T yhat_n + grad_u tr-term, du_n>
                                    - <f_x, xhat_n>] dt.

    ``hat`` is the variational bundle (xhat in ``x``, u - ubar in ``u``)
    on the same increments as the reference bundle ``bar``.
    """
    if hat.grid != adj.grid or not hat.shares_noise_with(bar):
        raise InputError("adjoint and variational bundle must share grid and increments")
    P, N, dt = bar.n_paths, bar.grid.n_steps, bar.grid.dt
    lhs = np.sum(adj.y[:, N] * hat.x[:, N], axis=1)
    rhs = np.zeros(P)
    for n, t in enumerate(bar.grid.times[:-1]):
        xb, ub = bar.x[:, n], bar.u[:, n]
        g = rmatvec(coeffs.b_u(t, xb, ub), adj.y_pred[:, n]) + trace_form_grad_u(field, adj.z[:, n], t, xb, ub)
        fx = np.asarray(coeffs.f_x(t, xb, ub), dtype=float).reshape(P, -1)
        rhs += (np.sum(g * hat.u[:, n], axis=1) - np.sum(fx * hat.x[:, n], axis=1)) * dt
    return DualityResult(MCEstimate.from_samples(lhs), MCEstimate.from_samples(rhs),
                         MCEstimate.from_samples(lhs - rhs))


def export_adjoint_csv(adj, path, max_paths=None, config_hash=None):
    """Columns: path_id, t, y_1..y_d, z flattened row-major (blank at T)."""
    P, Np1, d = adj.y.shape
    P = P if max_paths is None else min(P, max_paths)
    times = adj.grid.times
    with open(path, "w", newline="") as fh:
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["path_id", "t"] + [f"y_{i + 1}" for i in range(d)]
                   + [f"z_{i + 1}{j + 1}" for i in range(d) for j in range(d)])
        for p in range(P):
            for n in range(Np1):
                zs = [repr(float(v)) for v in adj.z[p, n].ravel()] if n < Np1 - 1 else [""] * (d * d)
                w.writerow([p, repr(float(times[n]))] + [repr(float(v)) for v in adj.y[p, n]] + zs)


__all__ = [
    "AdjointCoeffs", "AdjointTriple", "DualityResult", "RegressionBasis",
    "control_gradient_terms", "duality_gap", "export_adjoint_csv", "solve_adjoint",
]
