"""Hamiltonian, its control gradient and the optimality checks built on
them: Gateaux derivative of the cost, the variational inequality along a
reference pair, and a sampled sufficiency certificate.

All checks are Monte Carlo estimates with standard errors; a check passes
when the quantity it tests is within ``n_se`` standard errors (or an
absolute rounding floor ``atol``) of where the theory puts it.
"""

import csv
import io
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from . import rng
from .adjoint import AdjointCoeffs, control_gradient_terms
from .errors import InputError
from .field import local_characteristic, matvec, rmatvec, trace_form_grad_u
from .forward import ControlLaw, TimeGrid, realize, simulate_state, simulate_variational
from .stats import MCEstimate, mean_and_se, richardson_weights

DEFAULT_EPS = (0.2, 0.1, 0.05, 0.025)
ATOL = 1e-8


@dataclass(frozen=True)
class CostSpec:
    """Running cost f(t, x, u) and terminal cost Phi(x) with gradients.

    Callables are batched: ``running`` returns (P,), ``running_x`` (P, d),
    ``running_u`` (P, k), ``terminal`` (P,), ``terminal_x`` (P, d).
    """

    running: Callable
    running_x: Callable
    running_u: Callable
    terminal: Callable
    terminal_x: Callable
    name: str = "custom"


def quadratic_cost(Q, R, G, name="quadratic"):
    """f = 1/2 (x^T Q x + u^T R u), Phi = 1/2 x^T G x with constant matrices."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))

    def run(t, x, u):
        return 0.5 * (np.sum(x * matvec(Q, x), axis=-1) + np.sum(u * matvec(R, u), axis=-1))

    return CostSpec(
        run,
        lambda t, x, u: 0.5 * (matvec(Q, x) + rmatvec(Q, x)),
        lambda t, x, u: 0.5 * (matvec(R, u) + rmatvec(R, u)),
        lambda x: 0.5 * np.sum(x * matvec(G, x), axis=-1),
        lambda x: 0.5 * (matvec(G, x) + rmatvec(G, x)),
        name=name,
    )


def zero_cost():
    return CostSpec(
        lambda t, x, u: np.zeros(np.shape(x)[:-1]),
        lambda t, x, u: np.zeros(np.shape(x)),
        lambda t, x, u: np.zeros(np.shape(u)),
        lambda x: np.zeros(np.shape(x)[:-1]),
        lambda x: np.zeros(np.shape(x)),
        name="zero",
    )


def cost_gradient_mismatch(cost, t, x, u, step=1e-6):
    """Max relative deviation of f_x, f_u, Phi_x from central differences
    at a batch of points."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))

    def fd(fn, base, other_first):
        cols = []
        for j in range(base.shape[-1]):
            h = step * (1.0 + np.abs(base[:, j]))
            e = np.zeros_like(base)
            e[:, j] = h
            cols.append((fn(base + e) - fn(base - e)) / (2 * h))
        return np.stack(cols, axis=-1)

    pairs = [
        (cost.running_x(t, x, u), fd(lambda z: cost.running(t, z, u), x, True)),
        (cost.running_u(t, x, u), fd(lambda z: cost.running(t, x, z), u, False)),
        (cost.terminal_x(x), fd(cost.terminal, x, True)),
    ]
    worst = 0.0
    for ana, num in pairs:
        scale = max(1.0, float(np.max(np.abs(ana))))
        worst = max(worst, float(np.max(np.abs(ana - num))) / scale)
    return worst


@dataclass(frozen=True)
class ControlProblem:
    """State dynamics dx = b dt + M(dt, x, u) with cost J; optional box U."""

    field: object
    drift: object
    cost: CostSpec
    x0: np.ndarray
    grid: TimeGrid
    lower: np.ndarray = None
    upper: np.ndarray = None
    convex: bool = False
    name: str = "problem"

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.field.state_dim,):
            raise InputError(f"x0 has {x0.size} entries, state dimension is {self.field.state_dim}")
        object.__setattr__(self, "x0", x0)

    @property
    def coeffs(self):
        return AdjointCoeffs.from_problem(self.drift, self.cost)

    def simulate(self, law, n_paths, seed, threads=1, dW=None):
        return simulate_state(self.field, self.drift, law, self.x0, self.grid, n_paths, seed, threads=threads, dW=dW)

    def simulate_process(self, values, bar, threads=1):
        """State driven by a per-path control process on bar's increments."""
        law = ControlLaw.process(values, lower=self.lower, upper=self.upper)
        return self.simulate(law, bar.n_paths, bar.seed, threads=threads, dW=bar.dW)


def cost_samples(cost, bundle):
    """Per-path sum_n f(t_n, x_n, u_n) dt + Phi(x_N)."""
    P, N, dt = bundle.n_paths, bundle.grid.n_steps, bundle.grid.dt
    total = np.zeros(P)
    for n, t in enumerate(bundle.grid.times[:-1]):
        total += np.asarray(cost.running(t, bundle.x[:, n], bundle.u[:, n]), dtype=float).reshape(P) * dt
    return total + np.asarray(cost.terminal(bundle.x[:, N]), dtype=float).reshape(P)


def estimate_cost(cost, bundle):
    return MCEstimate.from_samples(cost_samples(cost, bundle))


def _vec(a, n):
    a = np.asarray(a, dtype=float)
    if a.shape[-1:] != (n,):
        raise InputError(f"expected trailing dimension {n}, got shape {a.shape}")
    return a


def hamiltonian(field, drift, cost, t, x, u, y, z, anchor):
    """H = <y, b(t, x, u)> + tr[z q(t, xbar, ubar, x, u)] + f(t, x, u).

    ``anchor`` = (xbar, ubar) fixes the other slot of the local
    characteristic at the reference pair.
    """
    d, k = field.state_dim, field.control_dim
    x, u, y = _vec(x, d), _vec(u, k), _vec(y, d)
    z = np.asarray(z, dtype=float)
    if z.shape[-2:] != (d, d):
        raise InputError(f"z must be {d}x{d}")
    xb, ub = _vec(anchor[0], d), _vec(anchor[1], k)
    q = local_characteristic(field, t, xb, ub, x, u)
    tr = np.sum(np.swapaxes(z, -1, -2) * q, axis=(-2, -1))
    return np.sum(y * drift.eval(t, x, u), axis=-1) + tr + cost.running(t, x, u)


def hamiltonian_u(field, drift, cost, t, xbar, ubar, y, z):
    """H_u along the reference pair: b_u^T y + sum_k d_u sigma_k^T z sigma_k + f_u."""
    d, k = field.state_dim, field.control_dim
    xbar, ubar, y = _vec(xbar, d), _vec(ubar, k), _vec(y, d)
    return (rmatvec(drift.grad_u(t, xbar, ubar), y) + trace_form_grad_u(field, z, t, xbar, ubar)
            + cost.running_u(t, xbar, ubar))


# ---------------------------------------------------------------------------
# Gateaux derivative

@dataclass
class GateauxResult:
    eps: tuple
    fd: list                 # MCEstimate per eps
    extrapolated: MCEstimate
    formula: MCEstimate
    discrepancy: MCEstimate  # extrapolated - formula, per-path SE
    smallest_eps_gap: MCEstimate
    rel_tol: float = 0.05
    n_se: float = 3.0
    atol: float = 1e-6

    @property
    def tolerance(self):
        return max(self.n_se * self.discrepancy.se, self.rel_tol * abs(self.formula.mean), self.atol)

    @property
    def passed(self):
        return abs(self.discrepancy.mean) <= self.tolerance

    def rows(self):
        out = [("fd", e, f.mean, f.se) for e, f in zip(self.eps, self.fd)]
        out += [("extrapolated", 0.0, self.extrapolated.mean, self.extrapolated.se),
                ("formula", 0.0, self.formula.mean, self.formula.se),
                ("discrepancy", 0.0, self.discrepancy.mean, self.discrepancy.se)]
        return ["quantity", "eps", "mean", "se"], out

    def verdict(self):
        return (f"gateaux: extrapolated {self.extrapolated:.6g} vs formula {self.formula:.6g}; "
                f"|diff| {abs(self.discrepancy.mean):.3g} <= {self.tolerance:.3g}: "
                f"{'PASS' if self.passed else 'FAIL'}")


def gateaux_formula_samples(problem, bar, hat):
    """Per-path sum_n (f_x xhat_n + f_u du_n) dt + Phi_x(xbar_N) xhat_N."""
    cost = problem.cost
    P, N, dt = bar.n_paths, bar.grid.n_steps, bar.grid.dt
    total = np.zeros(P)
    for n, t in enumerate(bar.grid.times[:-1]):
        xb, ub = bar.x[:, n], bar.u[:, n]
        total += (np.sum(cost.running_x(t, xb, ub) * hat.x[:, n], axis=1)
                  + np.sum(cost.running_u(t, xb, ub) * hat.u[:, n], axis=1)) * dt
    return total + np.sum(cost.terminal_x(bar.x[:, N]) * hat.x[:, N], axis=1)


def gateaux_check(problem, ubar, u, eps_list=DEFAULT_EPS, n_paths=20000, seed=0, threads=1,
                  rel_tol=0.05, atol=1e-6, bar=None):
    """One-sided difference quotients (J(u^eps) - J(ubar)) / eps on common
    increments, their Richardson extrapolation to eps = 0, and the
    derivative formula evaluated with the variational process."""
    eps = tuple(float(e) for e in eps_list)
    if len(eps) < 2 or any(not 0 < e <= 1 for e in eps):
        raise InputError("eps_list needs at least two values in (0, 1]")
    if bar is None:
        bar = problem.simulate(ubar, n_paths, seed, threads=threads)
    base = cost_samples(problem.cost, bar)
    u_proc = realize(u, bar)
    direction = u_proc - bar.u
    quotients = []
    for e in eps:
        pert = problem.simulate_process(bar.u + e * direction, bar, threads=threads)
        quotients.append((cost_samples(problem.cost, pert) - base) / e)
    w = richardson_weights(eps)
    extrap = sum(wi * qi for wi, qi in zip(w, quotients))
    hat = simulate_variational(problem.field, problem.drift, bar, direction, threads=threads)
    formula = gateaux_formula_samples(problem, bar, hat)
    return GateauxResult(
        eps=eps,
        fd=[MCEstimate.from_samples(q) for q in quotients],
        extrapolated=MCEstimate.from_samples(extrap),
        formula=MCEstimate.from_samples(formula),
        discrepancy=MCEstimate.from_samples(extrap - formula),
        smallest_eps_gap=MCEstimate.from_samples(quotients[int(np.argmin(eps))] - formula),
        rel_tol=rel_tol,
        atol=atol,
    )


# ---------------------------------------------------------------------------
# variational inequality

@dataclass
class VIScan:
    """Per-candidate, per-node estimates of E[H_u (u - ubar)]."""

    names: list
    times: np.ndarray
    mean: np.ndarray   # (n_candidates, N)
    se: np.ndarray
    n_se: float = 3.0
    atol: float = ATOL

    @property
    def min_vi(self):
        if self.mean.size == 0:
            return 0.0
        return float(np.min(self.mean))

    def violations(self):
        """(candidate, node) pairs with estimate below -max(n_se SE, atol)."""
        bad = self.mean < -np.maximum(self.n_se * self.se, self.atol)
        return [(self.names[i], int(n)) for i, n in zip(*np.nonzero(bad))]

    def stationary(self):
        """Every estimate within the band around zero (interior optimum)."""
        return bool(np.all(np.abs(self.mean) <= np.maximum(self.n_se * self.se, self.atol)))

    @property
    def passed(self):
        return not self.violations()

    def rows(self):
        out = []
        for i, name in enumerate(self.names):
            for n, t in enumerate(self.times):
                out.append((name, t, self.mean[i, n], self.se[i, n]))
        return ["candidate", "t", "mean", "se"], out

    def verdict(self):
        v = self.violations()
        msg = f"variational inequality: min over nodes/candidates {self.min_vi:.6g}"
        if v:
            worst = int(np.argmin(self.mean.min(axis=1)))
            return msg + f"; {len(v)} violations beyond -{self.n_se:g} SE (worst candidate {self.names[worst]}): FAIL"
        return msg + ": PASS"


def variational_inequality_scan(problem, bar, adj, candidates, n_se=3.0, atol=ATOL):
    """Estimate E[H_u (u(t) - ubar(t))] at each node for each candidate.

    ``candidates`` is a list of ControlLaws (evaluated along the reference
    trajectories) or (name, process) pairs with arrays shaped like bar.u.
    """
    grad = control_gradient_terms(problem.field, adj, bar, problem.coeffs)
    N = bar.grid.n_steps
    names, means, ses = [], [], []
    for i, cand in enumerate(candidates):
        if isinstance(cand, ControlLaw):
            name, values = cand.name or f"candidate-{i}", realize(cand, bar)
        else:
            name, values = cand
        du = np.asarray(values, dtype=float) - bar.u
        prod = np.sum(grad * du[:, :N], axis=2)
        m, s = mean_and_se(prod, axis=0)
        names.append(name)
        means.append(m)
        ses.append(s)
    shape = (len(names), N)
    return VIScan(names, bar.grid.times[:-1], np.reshape(means, shape), np.reshape(ses, shape), n_se, atol)


# ---------------------------------------------------------------------------
# sufficiency

@dataclass
class SufficiencyResult:
    names: list
    diffs: list              # MCEstimate of J(u) - J(ubar)
    n_se: float = 3.0
    atol: float = ATOL
    convexity_warnings: list = dc_field(default_factory=list)

    def failures(self):
        return [n for n, d in zip(self.names, self.diffs) if d.mean < -max(self.n_se * d.se, self.atol)]

    @property
    def passed(self):
        return not self.failures()

    @property
    def mean_excess(self):
        return float(np.mean([d.mean for d in self.diffs])) if self.diffs else 0.0

    def rows(self):
        return ["candidate", "diff_mean", "diff_se"], [(n, d.mean, d.se) for n, d in zip(self.names, self.diffs)]

    def verdict(self):
        f = self.failures()
        msg = (f"sufficiency: {len(self.diffs)} perturbations, min J(u)-J(ubar) "
               f"{min((d.mean for d in self.diffs), default=0.0):.6g}, mean excess {self.mean_excess:.6g}")
        for w in self.convexity_warnings:
            msg += f"\n  warning: {w}"
        return msg + (f"; {len(f)} below -{self.n_se:g} SE: FAIL" if f else ": PASS")


def random_perturbation(grid, control_dim, seed, index, n_modes=4):
    """Deterministic open-loop direction: random cosine series with unit
    discrete L2 norm, sum_n |du_n|^2 dt = 1.  Shape (N + 1, k)."""
    g = rng.substream(seed, index, rng.PERTURBATION)
    coef = g.standard_normal((n_modes, control_dim))
    t = grid.times / grid.T
    basis = np.cos(np.pi * np.arange(n_modes)[:, None] * t[None, :])  # (modes, N + 1)
    du = basis.T @ coef
    norm = np.sqrt(np.sum(du[:-1] ** 2) * grid.dt)
    return du / norm if norm > 0 else du


def midpoint_convexity_violations(problem, bar, adj, n_pairs=200, seed=0, tol=1e-10):
    """Sample random pairs around the reference states and test midpoint
    convexity of H(t, ., ., y, z) and of Phi.  Returns messages."""
    g = rng.substream(seed, 0, rng.SAMPLING)
    P, N = bar.n_paths, bar.grid.n_steps
    d, k = problem.field.state_dim, problem.field.control_dim
    rows = g.integers(0, P, n_pairs)
    nodes = g.integers(0, N, n_pairs)
    out = []
    worst_h = worst_phi = 0.0
    for r, n in zip(rows, nodes):
        t = bar.grid.times[n]
        xb, ub = bar.x[r, n], bar.u[r, n]
        y, z = adj.y_pred[r, n], adj.z[r, n]
        x1, x2 = xb + g.standard_normal(d), xb + g.standard_normal(d)
        u1, u2 = ub + g.standard_normal(k), ub + g.standard_normal(k)
        if problem.lower is not None or problem.upper is not None:
            u1, u2 = np.clip(u1, problem.lower, problem.upper), np.clip(u2, problem.lower, problem.upper)

        def H(x, u):
            return float(hamiltonian(problem.field, problem.drift, problem.cost, t, x, u, y, z, (xb, ub)))

        gap = H((x1 + x2) / 2, (u1 + u2) / 2) - 0.5 * (H(x1, u1) + H(x2, u2))
        scale = 1.0 + abs(H(x1, u1)) + abs(H(x2, u2))
        worst_h = max(worst_h, gap / scale)
        phi = problem.cost.terminal
        pg = float(phi(((x1 + x2) / 2)[None])[0] - 0.5 * (phi(x1[None])[0] + phi(x2[None])[0]))
        worst_phi = max(worst_phi, pg / (1.0 + abs(float(phi(x1[None])[0])) + abs(float(phi(x2[None])[0]))))
    if worst_h > tol:
        out.append(f"Hamiltonian fails midpoint convexity on sampled pairs (relative excess {worst_h:.3g})")
    if worst_phi > tol:
        out.append(f"terminal cost fails midpoint convexity on sampled pairs (relative excess {worst_phi:.3g})")
    return out


def sufficiency_check(problem, bar, adj=None, n_samples=50, seed=0, threads=1, extra=(), n_se=3.0, atol=ATOL):
    """Compare J(ubar) with J at random admissible perturbations.

    Each perturbation adds a random unit-norm open-loop direction to the
    reference control process; ``extra`` ControlLaws are simulated as given.
    All candidates reuse the reference increments.
    """
    if not problem.convex:
        raise InputError(f"problem {problem.name!r} is not declared convex; the sufficiency check does not apply")
    warns = []
    if adj is not None:
        warns = midpoint_convexity_violations(problem, bar, adj, seed=seed)
        for w in warns:
            warnings.warn(w, stacklevel=2)
    base = cost_samples(problem.cost, bar)
    names, diffs = [], []
    for i in range(n_samples):
        du = random_perturbation(bar.grid, bar.control_dim, seed, i)
        pert = problem.simulate_process(bar.u + du[None], bar, threads=threads)
        names.append(f"perturbation-{i}")
        diffs.append(MCEstimate.from_samples(cost_samples(problem.cost, pert) - base))
    for j, law in enumerate(extra):
        other = problem.simulate(law, bar.n_paths, bar.seed, threads=threads, dW=bar.dW)
        names.append(law.name or f"extra-{j}")
        diffs.append(MCEstimate.from_samples(cost_samples(problem.cost, other) - base))
    return SufficiencyResult(names, diffs, n_se, atol, warns)


@dataclass
class MPReport:
    """Collected maximum-principle checks for one reference control."""

    gateaux: GateauxResult = None
    vi: VIScan = None
    sufficiency: SufficiencyResult = None

    def parts(self):
        return [(n, p) for n, p in (("gateaux", self.gateaux), ("vi", self.vi), ("sufficiency", self.sufficiency))
                if p is not None]

    @property
    def passed(self):
        return all(p.passed for _, p in self.parts())

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        for name, part in self.parts():
            header, rows = part.rows()
            w.writerow(["check"] + header)
            for r in rows:
                w.writerow([name] + [repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        return buf.getvalue()

    def verdict(self):
        return "\n".join(p.verdict() for _, p in self.parts())
