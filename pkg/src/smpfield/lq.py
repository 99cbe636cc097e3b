"""Linear-quadratic problems: linear state equation driven by a field with
linear factors sigma_j = C_j x + D_j u (+ optional constant offset),
quadratic cost, the Riccati oracle, a brute-force dynamic-programming
cross-check and the stationarity / optimality checks.

Coefficients are either constant matrices or per-node tables with a
leading time axis of length n_steps or n_steps + 1.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InputError, SolverError
from .field import MartingaleField, SigmaFactor, matvec, rmatvec, trace_form_grad_u
from .forward import ControlLaw, Drift, TimeGrid
from .principle import ATOL, ControlProblem, CostSpec, cost_samples, sufficiency_check
from .stats import MCEstimate, mean_and_se


def _table(a, shape, name):
    a = np.asarray(a, dtype=float)
    if a.shape == shape:
        return a
    if a.ndim == len(shape) + 1 and a.shape[1:] == shape:
        return a
    if a.size == int(np.prod(shape)):
        return a.reshape(shape)
    raise InputError(f"{name} has shape {a.shape}, expected {shape} or (n_nodes,) + {shape}")


def _at(table, ndim, n):
    if table.ndim == ndim:
        return table
    return table[min(n, table.shape[0] - 1)]


@dataclass
class LQSpec:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    G: np.ndarray
    C: list
    D: list
    x0: np.ndarray
    T: float = 1.0
    offsets: list = None
    r_min: float = 1e-10

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        d = A.shape[-1] if A.ndim else 1
        B = np.asarray(self.B, dtype=float)
        k = B.shape[-1] if B.ndim >= 2 else 1
        self.A = _table(A, (d, d), "A")
        self.B = _table(B, (d, k), "B")
        self.Q = _table(self.Q, (d, d), "Q")
        self.R = _table(self.R, (k, k), "R")
        self.G = _table(self.G, (d, d), "G")
        if len(self.C) != len(self.D) or not self.C:
            raise InputError("C and D need one entry per factor (at least one)")
        self.C = [_table(c, (d, d), f"C[{j}]") for j, c in enumerate(self.C)]
        self.D = [_table(c, (d, k), f"D[{j}]") for j, c in enumerate(self.D)]
        offs = self.offsets if self.offsets is not None else [np.zeros(d)] * len(self.C)
        if len(offs) != len(self.C):
            raise InputError("offsets need one entry per factor")
        self.offsets = [np.asarray(o, dtype=float).reshape(d) for o in offs]
        self.x0 = np.asarray(self.x0, dtype=float).reshape(d)
        if not self.T > 0:
            raise InputError("T must be positive")
        self.validate()

    @property
    def state_dim(self):
        return self.x0.size

    @property
    def control_dim(self):
        return self.R.shape[-1]

    @property
    def brownian_dim(self):
        return len(self.C)

    def coefficient(self, name, n):
        if name in ("C", "D"):
            return [_at(t, 2, n) for t in getattr(self, name)]
        return _at(getattr(self, name), 2, n)

    def validate(self):
        """Symmetry, Q, G PSD and R PD (smallest eigenvalue >= r_min) on every node."""
        for name, tab in (("Q", self.Q), ("G", self.G), ("R", self.R)):
            mats = tab if tab.ndim == 3 else tab[None]
            for n, M in enumerate(mats):
                if not np.allclose(M, M.T, atol=1e-12):
                    raise InputError(f"{name} is not symmetric at node {n}")
                ev = np.linalg.eigvalsh(M)
                floor = self.r_min if name == "R" else -1e-12 * max(1.0, float(np.max(np.abs(ev))))
                if ev[0] < floor:
                    kind = "positive definite" if name == "R" else "positive semidefinite"
                    raise InputError(f"{name} is not {kind} at node {n} (smallest eigenvalue {ev[0]:.3g})")

    def grid(self, n_steps):
        return TimeGrid(self.T, n_steps)

    def _node(self, grid):
        return lambda t: int(min(max(np.floor(t / grid.dt + 1e-9), 0), grid.n_steps))

    def field(self, grid):
        node = self._node(grid)
        factors = []
        for j in range(self.brownian_dim):
            Cj, Dj, cj = self.C[j], self.D[j], self.offsets[j]

            def ev(t, x, u, Cj=Cj, Dj=Dj, cj=cj):
                n = node(t)
                return matvec(_at(Cj, 2, n), x) + matvec(_at(Dj, 2, n), u) + cj

            def gx(t, x, u, Cj=Cj):
                M = _at(Cj, 2, node(t))
                return np.broadcast_to(M, np.shape(x)[:-1] + M.shape)

            def gu(t, x, u, Dj=Dj):
                M = _at(Dj, 2, node(t))
                return np.broadcast_to(M, np.shape(u)[:-1] + M.shape)

            factors.append(SigmaFactor(ev, gx, gu, name="linear"))
        return MartingaleField(factors, self.state_dim, self.control_dim)

    def drift(self, grid):
        node = self._node(grid)
        A, B = self.A, self.B
        return Drift(
            lambda t, x, u: matvec(_at(A, 2, node(t)), x) + matvec(_at(B, 2, node(t)), u),
            lambda t, x, u: np.broadcast_to(_at(A, 2, node(t)), np.shape(x)[:-1] + A.shape[-2:]),
            lambda t, x, u: np.broadcast_to(_at(B, 2, node(t)), np.shape(u)[:-1] + B.shape[-2:]),
            name="linear",
        )

    def cost(self, grid):
        node = self._node(grid)
        Q, R, G = self.Q, self.R, self.G

        def run(t, x, u):
            n = node(t)
            return 0.5 * (np.sum(x * matvec(_at(Q, 2, n), x), axis=-1) + np.sum(u * matvec(_at(R, 2, n), u), axis=-1))

        return CostSpec(
            run,
            lambda t, x, u: matvec(_at(Q, 2, node(t)), x),
            lambda t, x, u: matvec(_at(R, 2, node(t)), u),
            lambda x: 0.5 * np.sum(x * matvec(G, x), axis=-1),
            lambda x: matvec(G, x),
            name="lq",
        )

    def problem(self, grid, name="lq"):
        return ControlProblem(self.field(grid), self.drift(grid), self.cost(grid), self.x0, grid, convex=True, name=name)


@dataclass
class RiccatiSolution:
    """Value V_n(x) = 1/2 x^T P_n x + p_n^T x + c_n and control u_n = -K_n x - k_n.

    p, k and c vanish unless the factors carry constant offsets.
    """

    grid: TimeGrid
    P: np.ndarray   # (N + 1, d, d)
    K: np.ndarray   # (N, k, d)
    p: np.ndarray   # (N + 1, d)
    kff: np.ndarray  # (N, k)
    c: np.ndarray   # (N + 1,)

    def value(self, x0):
        x0 = np.asarray(x0, dtype=float)
        return float(0.5 * x0 @ self.P[0] @ x0 + self.p[0] @ x0 + self.c[0])

    def control_law(self, name="riccati"):
        K, kff, grid = self.K, self.kff, self.grid

        def fb(t, x):
            n = min(grid.index(t), grid.n_steps - 1)
            return -(matvec(K[n], x) + kff[n])

        return ControlLaw.from_feedback(fb, K.shape[1], name=name)

    def export_csv(self, path, config_hash=None):
        N = self.grid.n_steps
        d, k = self.P.shape[1], self.K.shape[1]
        with open(path, "w", newline="") as fh:
            if config_hash is not None:
                fh.write(f"# config_hash={config_hash}\n")
            w = csv.writer(fh)
            w.writerow(["t"] + [f"P_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
                       + [f"K_{i + 1}{j + 1}" for i in range(k) for j in range(d)])
            for n, t in enumerate(self.grid.times):
                Kn = self.K[n].ravel() if n < N else [""] * (k * d)
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.P[n].ravel()]
                           + [v if v == "" else repr(float(v)) for v in Kn])


def riccati_oracle(spec, grid):
    """Exact dynamic programming for the Euler-discretised problem.

    With F = I + A dt, H = B dt and x' = F x + H u + sum_j (C_j x + D_j u + c_j) dW_j,
    minimising 1/2 (x^T Q x + u^T R u) dt + E V_{n+1}(x') over u gives

        Suu = R dt + H^T P H + dt sum D_j^T P D_j
        Sux = H^T P F + dt sum D_j^T P C_j
        Sxx = Q dt + F^T P F + dt sum C_j^T P C_j
        K   = Suu^{-1} Sux,   P_n = Sxx - Sux^T K,

    which tends to the stochastic Riccati equation as dt -> 0.
    """
    d, k, N, dt = spec.state_dim, spec.control_dim, grid.n_steps, grid.dt
    P = np.empty((N + 1, d, d))
    p = np.zeros((N + 1, d))
    c = np.zeros(N + 1)
    K = np.empty((N, k, d))
    kff = np.zeros((N, k))
    P[N] = spec.G
    I = np.eye(d)
    for n in range(N - 1, -1, -1):
        A, B, Q, R = (spec.coefficient(s, n) for s in "ABQR")
        Cs, Ds = spec.coefficient("C", n), spec.coefficient("D", n)
        Pn1, pn1 = P[n + 1], p[n + 1]
        F, H = I + A * dt, B * dt
        Suu = R * dt + H.T @ Pn1 @ H
        Sux = H.T @ Pn1 @ F
        Sxx = Q * dt + F.T @ Pn1 @ F
        lx, lu = F.T @ pn1, H.T @ pn1
        c0 = c[n + 1]
        for Cj, Dj, oj in zip(Cs, Ds, spec.offsets):
            Suu = Suu + dt * Dj.T @ Pn1 @ Dj
            Sux = Sux + dt * Dj.T @ Pn1 @ Cj
            Sxx = Sxx + dt * Cj.T @ Pn1 @ Cj
            lx = lx + dt * Cj.T @ Pn1 @ oj
            lu = lu + dt * Dj.T @ Pn1 @ oj
            c0 = c0 + 0.5 * dt * oj @ Pn1 @ oj
        Suu = 0.5 * (Suu + Suu.T)
        if np.linalg.eigvalsh(Suu)[0] <= 0:
            raise SolverError(f"control Hessian not positive definite at node {n}", node=n)
        K[n] = np.linalg.solve(Suu, Sux)
        kff[n] = np.linalg.solve(Suu, lu)
        Pn = Sxx - Sux.T @ K[n]
        P[n] = 0.5 * (Pn + Pn.T)
        p[n] = lx - Sux.T @ kff[n]
        c[n] = c0 - 0.5 * lu @ kff[n]
    return RiccatiSolution(grid, P, K, p, kff, c)


def brute_force_dp(spec, grid):
    """Independent discrete DP for scalar problems on coarse grids.

    The value function is represented by its values at x in {-1, 0, 1};
    the expectation over each Brownian step uses 3-point Gauss-Hermite
    quadrature per factor (exact for quadratics) and the minimisation over
    u fits the exact parabola through three trial controls.  Returns
    (P, K, kff) with V_n(x) = 1/2 P_n x^2 + ..., u_n = -K_n x - kff_n.
    """
    if spec.state_dim != 1 or spec.control_dim != 1:
        raise InputError("brute-force oracle handles scalar problems only")
    if grid.n_steps > 8:
        raise InputError("brute-force oracle is meant for coarse grids (n_steps <= 8)")
    N, dt, m = grid.n_steps, grid.dt, spec.brownian_dim
    nodes, weights = np.polynomial.hermite_e.hermegauss(3)
    weights = weights / weights.sum()
    mesh = np.array(np.meshgrid(*[nodes] * m, indexing="ij")).reshape(m, -1).T * np.sqrt(dt)
    wmesh = np.prod(np.array(np.meshgrid(*[weights] * m, indexing="ij")).reshape(m, -1), axis=0)
    G = float(spec.G.reshape(-1)[0])
    coef = (0.5 * G, 0.0, 0.0)  # V(x) = a x^2 + b x + c

    def V(cf, x):
        return cf[0] * x * x + cf[1] * x + cf[2]

    def parabola(f0, fm, fp):
        # values at -1, 0, 1 -> (a, b, c)
        return 0.5 * (fp + fm) - f0, 0.5 * (fp - fm), f0

    Ps = np.empty(N + 1)
    Ks = np.empty(N)
    ks = np.empty(N)
    Ps[N] = G
    for n in range(N - 1, -1, -1):
        A = float(spec.coefficient("A", n).reshape(-1)[0])
        B = float(spec.coefficient("B", n).reshape(-1)[0])
        Q = float(spec.coefficient("Q", n).reshape(-1)[0])
        R = float(spec.coefficient("R", n).reshape(-1)[0])
        Cs = [float(c.reshape(-1)[0]) for c in spec.coefficient("C", n)]
        Ds = [float(c.reshape(-1)[0]) for c in spec.coefficient("D", n)]
        os_ = [float(o[0]) for o in spec.offsets]
        nxt = coef

        def g(x, u):
            drift = x + (A * x + B * u) * dt
            s = np.array([Cj * x + Dj * u + oj for Cj, Dj, oj in zip(Cs, Ds, os_)])
            xs = drift + mesh @ s
            return 0.5 * (Q * x * x + R * u * u) * dt + float(wmesh @ V(nxt, xs))

        def vmin(x):
            a, b, c = parabola(g(x, 0.0), g(x, -1.0), g(x, 1.0))
            if a <= 0:
                raise SolverError(f"non-convex step problem at node {n}", node=n)
            u = -b / (2 * a)
            return c - b * b / (4 * a), u

        v0, u0 = vmin(0.0)
        vm, _ = vmin(-1.0)
        vp, up = vmin(1.0)
        coef = parabola(v0, vm, vp)
        Ps[n] = 2 * coef[0]
        ks[n] = -u0
        Ks[n] = -(up - u0)
    return Ps, Ks, ks


def lq_cost(spec, bundle, grid=None):
    """MC estimate of 1/2 E[sum (x^T Q x + u^T R u) dt + x_N^T G x_N]."""
    grid = grid or bundle.grid
    return MCEstimate.from_samples(cost_samples(spec.cost(grid), bundle))


@dataclass
class StationarityResult:
    times: np.ndarray
    mean: np.ndarray  # (N, k)
    se: np.ndarray
    scale: float
    rel: float = 0.02
    n_se: float = 3.0
    atol: float = ATOL

    @property
    def bands(self):
        return np.maximum(np.maximum(self.n_se * self.se, self.rel * self.scale), self.atol)

    @property
    def max_abs(self):
        return float(np.max(np.abs(self.mean))) if self.mean.size else 0.0

    @property
    def worst_node(self):
        ratio = np.max(np.abs(self.mean) / self.bands, axis=1)
        return int(np.argmax(ratio))

    @property
    def passed(self):
        return bool(np.all(np.abs(self.mean) <= self.bands))

    def rows(self):
        out = []
        for n, t in enumerate(self.times):
            for i in range(self.mean.shape[1]):
                out.append((t, i + 1, self.mean[n, i], self.se[n, i], self.bands[n, i]))
        return ["t", "component", "mean", "se", "band"], out

    def verdict(self):
        n = self.worst_node
        return (f"stationarity: max node residual {self.max_abs:.6g}; worst node t={self.times[n]:.4g} "
                f"mean {self.mean[n].tolist()} se {self.se[n].tolist()} band {self.bands[n].tolist()}: "
                f"{'PASS' if self.passed else 'FAIL'}")


def stationarity_residual(spec, adj, bar, rel=0.02, n_se=3.0, atol=ATOL):
    """Per-node mean and SE of B^T y + d_u tr[z q] + R ubar.

    The band at each node is max(n_se SE, rel * scale, atol) where scale is
    the node average of E|R ubar|.
    """
    grid = bar.grid
    field = spec.field(grid)
    N, k = grid.n_steps, spec.control_dim
    mean = np.empty((N, k))
    se = np.empty((N, k))
    ru_norm = np.empty(N)
    for n, t in enumerate(grid.times[:-1]):
        xb, ub = bar.x[:, n], bar.u[:, n]
        B, R = spec.coefficient("B", n), spec.coefficient("R", n)
        ru = matvec(R, ub)
        res = rmatvec(np.broadcast_to(B, (bar.n_paths,) + B.shape), adj.y_pred[:, n])
        res = res + trace_form_grad_u(field, adj.z[:, n], t, xb, ub) + ru
        mean[n], se[n] = mean_and_se(res, axis=0)
        ru_norm[n] = float(np.mean(np.linalg.norm(ru, axis=1)))
    return StationarityResult(grid.times[:-1], mean, se, float(np.mean(ru_norm)), rel, n_se, atol)


@dataclass
class Certificate:
    stationarity: StationarityResult
    sufficiency: object

    @property
    def passed(self):
        return self.stationarity.passed and self.sufficiency.passed

    def verdict(self):
        return (self.stationarity.verdict() + "\n" + self.sufficiency.verdict()
                + f"\noptimality certificate: {'PASS' if self.passed else 'FAIL'}")


def lq_optimality_certificate(spec, ubar, grid, n_samples=50, n_paths=20000, seed=0, threads=1,
                              basis=None, extra=None, bar=None, adj=None):
    """Stationarity of ubar followed by the sampled sufficiency check.

    ``extra`` defaults to the Riccati feedback so that a suboptimal ubar
    meets the optimal control among the candidates.  A reference bundle and
    its adjoint may be passed in to avoid recomputing them.
    """
    from .adjoint import solve_adjoint

    prob = spec.problem(grid)
    if bar is None:
        bar = prob.simulate(ubar, n_paths, seed, threads=threads)
        adj = None
    if adj is None:
        adj = solve_adjoint(prob.field, bar, prob.coeffs, basis)
    st = stationarity_residual(spec, adj, bar)
    if extra is None:
        extra = [riccati_oracle(spec, grid).control_law()]
    suff = sufficiency_check(prob, bar, adj, n_samples=n_samples, seed=seed, threads=threads, extra=extra)
    return Certificate(st, suff)
