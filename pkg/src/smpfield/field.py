"""Martingale fields given by a finite factor decomposition.

A field M(t, x, u) is represented as ``sum_k sigma_k(t, x, u) dW^k`` for
finitely many user-supplied factors.  Its local characteristic

    q(t, x, u, y, v) = sum_k sigma_k(t, x, u) sigma_k(t, y, v)^T

is never stored; every function below recomputes it from the factors, so
transpose symmetry and positive semidefiniteness on the diagonal hold by
construction.

All functions accept batched arguments: ``x`` of shape ``(..., d)``,
``u`` of shape ``(..., k)``.  Factor callables must broadcast the same way,
returning ``(..., d)`` values, ``(..., d, d)`` state Jacobians and
``(..., d, k)`` control Jacobians.

Gradient convention: gradients are returned as column vectors (arrays of
shape ``(..., d)`` / ``(..., k)``), i.e. the transpose of the row-vector
derivatives written in the theory.
"""

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .errors import InputError

Array = np.ndarray


def matvec(M, v):
    """``M @ v`` over trailing axes, summed in a fixed order.

    Used instead of BLAS-backed matmul inside simulation loops so that a
    path's result does not depend on how many other paths share the batch.
    """
    M = np.asarray(M)
    v = np.asarray(v)
    out = M[..., :, 0] * v[..., None, 0]
    for j in range(1, M.shape[-1]):
        out = out + M[..., :, j] * v[..., None, j]
    return out


def rmatvec(M, w):
    """``M^T @ w`` over trailing axes, summed in a fixed order."""
    M = np.asarray(M)
    w = np.asarray(w)
    out = M[..., 0, :] * w[..., 0, None]
    for i in range(1, M.shape[-2]):
        out = out + M[..., i, :] * w[..., i, None]
    return out


@dataclass(frozen=True)
class SigmaFactor:
    """One column sigma_k of the diffusion, with its analytic Jacobians."""

    eval: Callable
    grad_x: Callable
    grad_u: Callable
    name: str = "custom"
    finite_difference: bool = False

    @classmethod
    def from_function(cls, fn, state_dim, control_dim, step=1e-6, name="custom-fd"):
        """Build a factor whose Jacobians are central finite differences.

        Reports flag fields built this way: adjoint accuracy is limited by
        the gradient error.
        """

        def jac(t, x, u, wrt):
            x = np.asarray(x, dtype=float)
            u = np.asarray(u, dtype=float)
            base = x if wrt == "x" else u
            cols = []
            for j in range(base.shape[-1]):
                h = step * (1.0 + np.abs(base[..., j]))
                e = np.zeros_like(base)
                e[..., j] = h
                if wrt == "x":
                    diff = np.asarray(fn(t, x + e, u)) - np.asarray(fn(t, x - e, u))
                else:
                    diff = np.asarray(fn(t, x, u + e)) - np.asarray(fn(t, x, u - e))
                cols.append(diff / (2.0 * h[..., None]))
            return np.stack(cols, axis=-1)

        return cls(
            eval=fn,
            grad_x=lambda t, x, u: jac(t, x, u, "x"),
            grad_u=lambda t, x, u: jac(t, x, u, "u"),
            name=name,
            finite_difference=True,
        )


@dataclass(frozen=True)
class MartingaleField:
    factors: tuple
    state_dim: int
    control_dim: int
    names: tuple = dc_field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if len(self.factors) < 1:
            raise InputError("a martingale field needs at least one factor")
        if self.state_dim < 1 or self.control_dim < 1:
            raise InputError("state_dim and control_dim must be positive")
        x = np.zeros(self.state_dim)
        u = np.zeros(self.control_dim)
        for i, f in enumerate(self.factors):
            val = np.shape(f.eval(0.0, x, u))
            gx = np.shape(f.grad_x(0.0, x, u))
            gu = np.shape(f.grad_u(0.0, x, u))
            d, k = self.state_dim, self.control_dim
            if val != (d,) or gx != (d, d) or gu != (d, k):
                raise InputError(
                    f"factor {i} ({f.name}) has shapes {val}, {gx}, {gu}; "
                    f"expected ({d},), ({d}, {d}), ({d}, {k})"
                )

    @property
    def brownian_dim(self):
        return len(self.factors)

    @property
    def uses_finite_differences(self):
        return any(f.finite_difference for f in self.factors)

    def check_args(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1:] != (self.state_dim,):
            raise InputError(f"state has trailing shape {x.shape[-1:]}, expected ({self.state_dim},)")
        if u.shape[-1:] != (self.control_dim,):
            raise InputError(f"control has trailing shape {u.shape[-1:]}, expected ({self.control_dim},)")
        return x, u

    def sigma(self, t, x, u):
        """Diffusion matrix [sigma_1 ... sigma_m], shape (..., d, m)."""
        x, u = self.check_args(x, u)
        return np.stack([_bcast(f.eval(t, x, u), x, u, (self.state_dim,)) for f in self.factors], axis=-1)

    def sigma_x(self, t, x, u):
        """State Jacobians, shape (..., m, d, d)."""
        x, u = self.check_args(x, u)
        shp = (self.state_dim, self.state_dim)
        return np.stack([_bcast(f.grad_x(t, x, u), x, u, shp) for f in self.factors], axis=-3)

    def sigma_u(self, t, x, u):
        """Control Jacobians, shape (..., m, d, k)."""
        x, u = self.check_args(x, u)
        shp = (self.state_dim, self.control_dim)
        return np.stack([_bcast(f.grad_u(t, x, u), x, u, shp) for f in self.factors], axis=-3)


def _bcast(value, x, u, tail):
    """Broadcast a factor output (constants are allowed) to the batch shape."""
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    return np.broadcast_to(np.asarray(value, dtype=float), batch + tail)


def local_characteristic(field, t, x, u, y, v):
    """q(t, x, u, y, v) = sum_k sigma_k(t, x, u) sigma_k(t, y, v)^T."""
    s1 = field.sigma(t, x, u)
    s2 = field.sigma(t, y, v)
    q = s1[..., :, None, 0] * s2[..., None, :, 0]
    for k in range(1, field.brownian_dim):
        q = q + s1[..., :, None, k] * s2[..., None, :, k]
    return q


def increment(field, t, x, u, dW):
    """Discrete field increment sum_k sigma_k(t, x, u) dW_k."""
    dW = np.asarray(dW, dtype=float)
    if dW.shape[-1:] != (field.brownian_dim,):
        raise InputError(f"dW has trailing shape {dW.shape[-1:]}, expected ({field.brownian_dim},)")
    return matvec(field.sigma(t, x, u), dW)


def _check_square(field, z):
    z = np.asarray(z, dtype=float)
    d = field.state_dim
    if z.shape[-2:] != (d, d):
        raise InputError(f"z has trailing shape {z.shape[-2:]}, expected ({d}, {d})")
    return z


def trace_form_grad_x(field, z, t, x, u):
    """sum_k (d sigma_k / dx)^T z sigma_k  evaluated at (t, x, u).

    This is the gradient of x' -> tr[z q(t, x, u, x', u')] at x' = x (the
    same as the first-slot gradient of tr[z q*(t, x', u', x, u)]).  It is the
    density of the covariation between ``z dM`` and ``d_x M h``, which is
    what the adjoint equation and the duality identity require.
    """
    z = _check_square(field, z)
    s = field.sigma(t, x, u)
    sx = field.sigma_x(t, x, u)
    g = 0.0
    for k in range(field.brownian_dim):
        g = g + rmatvec(sx[..., k, :, :], matvec(z, s[..., k]))
    return np.broadcast_to(g, s.shape[:-2] + (field.state_dim,)).copy()


def trace_form_grad_u(field, z, t, x, u):
    """sum_k (d sigma_k / du)^T z sigma_k; control-slot twin of trace_form_grad_x."""
    z = _check_square(field, z)
    s = field.sigma(t, x, u)
    su = field.sigma_u(t, x, u)
    g = 0.0
    for k in range(field.brownian_dim):
        g = g + rmatvec(su[..., k, :, :], matvec(z, s[..., k]))
    return np.broadcast_to(g, s.shape[:-2] + (field.control_dim,)).copy()


def condition_q_residual(field, t, x, u, y, v, A):
    """LHS minus RHS of the linearity condition on q.

    tr[A (q*(x,u,y,v) - q*(x,u,x,u))]
        - <grad_y tr[A q*(x,u,y,v)]|_{y=x}, y - x>
        - <grad_v tr[A q*(x,u,y,v)]|_{v=u}, v - u>

    Zero whenever every factor is affine in (x, u).
    """
    A = _check_square(field, A)
    x, u = field.check_args(x, u)
    y, v = field.check_args(y, v)
    q_xy = local_characteristic(field, t, x, u, y, v)
    q_xx = local_characteristic(field, t, x, u, x, u)
    # tr[A B^T] = sum_ij A_ij B_ij
    lhs = np.sum(A * (q_xy - q_xx), axis=(-2, -1))
    At = np.swapaxes(A, -1, -2)
    gx = trace_form_grad_x(field, At, t, x, u)
    gu = trace_form_grad_u(field, At, t, x, u)
    return lhs - np.sum(gx * (y - x), axis=-1) - np.sum(gu * (v - u), axis=-1)


def polarization_constant(field, t, x, u, y, v):
    """Empirical constant C in
    ||q(x,u,x,u) - 2 q(x,u,y,v) + q(y,v,y,v)|| <= C (|x-y|^2 + |u-v|^2)
    over a batch of sampled argument pairs (pairs at distance 0 skipped)."""
    x, u = field.check_args(x, u)
    y, v = field.check_args(y, v)
    num = (
        local_characteristic(field, t, x, u, x, u)
        - 2.0 * local_characteristic(field, t, x, u, y, v)
        + local_characteristic(field, t, y, v, y, v)
    )
    num = np.linalg.norm(num.reshape(num.shape[:-2] + (-1,)), axis=-1)
    den = np.sum((x - y) ** 2, axis=-1) + np.sum((u - v) ** 2, axis=-1)
    mask = den > 0
    if not np.any(mask):
        return 0.0
    return float(np.max(num[mask] / den[mask]))


def gradient_mismatch(factor, t, x, u, rel_step=1e-6):
    """Max relative error of a factor's analytic Jacobians against central
    finite differences at one point."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    fd = SigmaFactor.from_function(factor.eval, x.size, u.size, step=rel_step)
    worst = 0.0
    for ana, num in ((factor.grad_x(t, x, u), fd.grad_x(t, x, u)), (factor.grad_u(t, x, u), fd.grad_u(t, x, u))):
        ana = np.asarray(ana, dtype=float)
        scale = max(1.0, float(np.max(np.abs(ana))))
        worst = max(worst, float(np.max(np.abs(ana - num))) / scale)
    return worst


# ---------------------------------------------------------------------------
# factor library

def _as_matrix(a, rows, cols, name):
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if m.shape != (rows, cols):
        raise InputError(f"{name} has shape {m.shape}, expected ({rows}, {cols})")
    return m


def linear_factor(C, D, offset=None, name="linear"):
    """sigma(t, x, u) = C x + D u + offset with constant matrices."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    d = C.shape[0]
    C = _as_matrix(C, d, d, "C")
    D = np.asarray(D, dtype=float)
    D = D.reshape(d, -1)
    c = np.zeros(d) if offset is None else np.asarray(offset, dtype=float).reshape(d)

    def ev(t, x, u):
        return matvec(C, x) + matvec(D, u) + c

    def gx(t, x, u):
        return np.broadcast_to(C, np.shape(x)[:-1] + C.shape)

    def gu(t, x, u):
        return np.broadcast_to(D, np.shape(u)[:-1] + D.shape)

    return SigmaFactor(ev, gx, gu, name=name)


def timevarying_linear_factor(C_of_t, D_of_t, offset_of_t=None, name="linear"):
    """sigma(t, x, u) = C(t) x + D(t) u + c(t) for coefficient callables."""

    def ev(t, x, u):
        out = matvec(C_of_t(t), x) + matvec(D_of_t(t), u)
        if offset_of_t is not None:
            out = out + offset_of_t(t)
        return out

    def gx(t, x, u):
        C = np.asarray(C_of_t(t))
        return np.broadcast_to(C, np.shape(x)[:-1] + C.shape)

    def gu(t, x, u):
        D = np.asarray(D_of_t(t))
        return np.broadcast_to(D, np.shape(u)[:-1] + D.shape)

    return SigmaFactor(ev, gx, gu, name=name)


def constant_factor(c):
    c = np.atleast_1d(np.asarray(c, dtype=float))
    d = c.size

    def zero_jac(t, x, u, n):
        return np.zeros(np.shape(x)[:-1] + (d, n))

    return SigmaFactor(
        lambda t, x, u: np.broadcast_to(c, np.shape(x)[:-1] + (d,)),
        lambda t, x, u: zero_jac(t, x, u, d),
        lambda t, x, u: zero_jac(t, x, u, np.shape(u)[-1]),
        name="constant",
    )


def bilinear_factor(C, D, E=None, offset=None):
    """sigma_i = (C x)_i + (D u)_i + sum_{j,l} E_ijl x_j u_l + offset_i."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    d = C.shape[0]
    D = np.asarray(D, dtype=float).reshape(d, -1)
    k = D.shape[1]
    E = np.zeros((d, d, k)) if E is None else np.asarray(E, dtype=float).reshape(d, d, k)
    c = np.zeros(d) if offset is None else np.asarray(offset, dtype=float).reshape(d)

    def ev(t, x, u):
        out = matvec(C, x) + matvec(D, u) + c
        for j in range(d):
            for l in range(k):
                if E[:, j, l].any():
                    out = out + E[:, j, l] * (x[..., j] * u[..., l])[..., None]
        return out

    def gx(t, x, u):
        # d sigma_i / d x_j = C_ij + sum_l E_ijl u_l
        return C + matvec(E, u[..., None, :])

    def gu(t, x, u):
        # d sigma_i / d u_l = D_il + sum_j E_ijl x_j
        return D + _contract_x(E, x)

    return SigmaFactor(ev, gx, gu, name="bilinear")


def _contract_x(E, x):
    # sum_j E_ijl x_j, shape (..., d, k)
    out = E[:, 0, :] * x[..., 0, None, None]
    for j in range(1, E.shape[1]):
        out = out + E[:, j, :] * x[..., j, None, None]
    return out


def scalar_gbm_factor(vol):
    """sigma(x) = vol * x for a one-dimensional state."""
    vol = float(vol)
    return SigmaFactor(
        lambda t, x, u: vol * np.asarray(x, dtype=float),
        lambda t, x, u: np.full(np.shape(x)[:-1] + (1, 1), vol),
        lambda t, x, u: np.zeros(np.shape(x)[:-1] + (1, np.shape(u)[-1])),
        name="scalar-gbm",
    )


def scalar_quadratic_factor(a=1.0):
    """sigma(x) = a x^2 for a one-dimensional state (violates global bounds)."""
    a = float(a)
    return SigmaFactor(
        lambda t, x, u: a * np.asarray(x, dtype=float) ** 2,
        lambda t, x, u: (2.0 * a * np.asarray(x, dtype=float))[..., None],
        lambda t, x, u: np.zeros(np.shape(x)[:-1] + (1, np.shape(u)[-1])),
        name="scalar-quadratic",
    )


def identity_factors(state_dim):
    """Factors sigma_k = e_k, k = 1..d: plain additive Brownian noise."""
    return [constant_factor(np.eye(state_dim)[k]) for k in range(state_dim)]


FACTOR_LIBRARY = {
    "linear": lambda p: [linear_factor(p["C"], p["D"], p.get("offset"))],
    "bilinear": lambda p: [bilinear_factor(p["C"], p["D"], p.get("E"), p.get("offset"))],
    "constant": lambda p: [constant_factor(p["c"])],
    "scalar-gbm": lambda p: [scalar_gbm_factor(p.get("vol", 1.0))],
    "scalar-quadratic": lambda p: [scalar_quadratic_factor(p.get("a", 1.0))],
    "identity": lambda p: identity_factors(int(p["dim"])),
}


def make_factors(kind, params):
    """Instantiate registered factors by name."""
    try:
        builder = FACTOR_LIBRARY[kind]
    except KeyError:
        raise InputError(f"unknown factor kind {kind!r}; known: {sorted(FACTOR_LIBRARY)}") from None
    try:
        return builder(dict(params))
    except KeyError as exc:
        raise InputError(f"factor {kind!r} is missing parameter {exc.args[0]!r}") from None
