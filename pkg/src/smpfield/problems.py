"""Registered test problems, selectable by name from experiment configs.

Each builder takes a parameter dict and a TimeGrid and returns a Setup:
the control problem, the reference control ubar, the comparison control u
used for perturbations, and the candidate controls scanned by the
variational inequality.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import InputError
from .field import MartingaleField, bilinear_factor
from .forward import ControlLaw, linear_drift
from .lq import LQSpec, riccati_oracle
from .principle import ControlProblem, quadratic_cost


@dataclass
class Setup:
    problem: ControlProblem
    ubar: ControlLaw
    u: ControlLaw
    candidates: list = dc_field(default_factory=list)
    lq: LQSpec = None
    riccati: object = None
    notes: str = ""


def shifted(law, shift, name=None):
    """law + shift, keeping the law's kind where possible."""
    shift = np.atleast_1d(np.asarray(shift, dtype=float))
    if law.kind == "table":
        return ControlLaw("table", law.control_dim, table=law.table + shift, lower=law.lower, upper=law.upper,
                          name=name or f"{law.name}+shift")
    if law.kind == "feedback":
        fb = law.feedback
        return ControlLaw.from_feedback(lambda t, x: np.asarray(fb(t, x), dtype=float) + shift, law.control_dim,
                                        lower=law.lower, upper=law.upper, name=name or f"{law.name}+shift")
    return ControlLaw.process(law.table + shift, lower=law.lower, upper=law.upper, name=name or f"{law.name}+shift")


def scalar_bilinear(params, grid):
    """b = u, sigma = x + u + kappa x u, f = (x^2 + u^2) / 2, Phi = x^2 / 2.

    With kappa = 0 every coefficient is affine in (x, u), so the state is
    affine in the control and the first-order expansion is exact.
    """
    p = {"kappa": 0.0, "x0": 1.0, "ubar": 0.5, "shift": 1.0}
    _merge(p, params, "scalar-bilinear")
    kappa = float(p["kappa"])
    fld = MartingaleField([bilinear_factor([[1.0]], [[1.0]], [[[kappa]]])], 1, 1)
    prob = ControlProblem(fld, linear_drift([[0.0]], [[1.0]]), quadratic_cost(1.0, 1.0, 1.0), [p["x0"]], grid,
                          convex=(kappa == 0.0), name="scalar-bilinear")
    ubar = ControlLaw.constant(p["ubar"], grid.n_steps, name="ubar")
    u = ControlLaw.constant(p["ubar"] + p["shift"], grid.n_steps, name="u")
    refl = ControlLaw.constant(p["ubar"] - p["shift"], grid.n_steps, name="reflection")
    return Setup(prob, ubar, u, [u, refl])


def lq(params, grid):
    """General LQ problem; ``control`` selects ubar: "riccati", "zero" or a
    constant value.  The comparison control is ubar shifted by ``shift``."""
    p = {"A": [[0.0]], "B": [[1.0]], "Q": [[1.0]], "R": [[1.0]], "G": [[0.0]], "C": [[[0.0]]], "D": [[[0.0]]],
         "offsets": None, "x0": [1.0], "control": "riccati", "shift": 1.0}
    _merge(p, params, "lq")
    spec = LQSpec(A=p["A"], B=p["B"], Q=p["Q"], R=p["R"], G=p["G"],
                  C=list(np.asarray(p["C"], dtype=float)), D=list(np.asarray(p["D"], dtype=float)),
                  x0=p["x0"], T=grid.T, offsets=p["offsets"])
    return _lq_setup(spec, grid, p["control"], p["shift"])


def scalar_lq(params, grid):
    """Scalar A = 0, B = 1, Q = R = 1, G = 0, C = 0, sigma = D u."""
    p = {"A": 0.0, "B": 1.0, "Q": 1.0, "R": 1.0, "G": 0.0, "C": 0.0, "D": 0.0, "x0": 1.0,
         "control": "riccati", "shift": 1.0}
    _merge(p, params, "scalar-lq")
    spec = LQSpec(A=p["A"], B=p["B"], Q=p["Q"], R=p["R"], G=p["G"], C=[p["C"]], D=[p["D"]], x0=p["x0"], T=grid.T)
    return _lq_setup(spec, grid, p["control"], p["shift"])


def deterministic_lq(params, grid):
    """Scalar LQ with a zero field: every check is exact up to rounding."""
    p = {"A": 0.0, "B": 1.0, "Q": 1.0, "R": 1.0, "G": 1.0, "x0": 1.0, "control": "zero", "shift": 1.0}
    _merge(p, params, "deterministic-lq")
    spec = LQSpec(A=p["A"], B=p["B"], Q=p["Q"], R=p["R"], G=p["G"], C=[0.0], D=[0.0], x0=p["x0"], T=grid.T)
    return _lq_setup(spec, grid, p["control"], p["shift"])


def _lq_setup(spec, grid, control, shift):
    sol = riccati_oracle(spec, grid)
    opt = sol.control_law("riccati")
    k = spec.control_dim
    if control == "riccati":
        ubar = opt
    elif control == "zero":
        ubar = ControlLaw.constant(np.zeros(k), grid.n_steps, name="zero")
    elif isinstance(control, (int, float, list)):
        ubar = ControlLaw.constant(control, grid.n_steps, name="constant")
    else:
        raise InputError(f"unknown LQ control {control!r}")
    u = shifted(ubar, np.full(k, float(shift)), name="shifted")
    candidates = [u, shifted(ubar, np.full(k, -float(shift)), name="reflection")]
    if control != "riccati":
        candidates.append(opt)
    return Setup(spec.problem(grid, name="lq"), ubar, u, candidates, lq=spec, riccati=sol)


def _merge(defaults, params, name):
    unknown = set(params) - set(defaults)
    if unknown:
        raise InputError(f"problem {name!r} got unknown parameters {sorted(unknown)}")
    defaults.update(params)


PROBLEMS = {
    "scalar-bilinear": scalar_bilinear,
    "lq": lq,
    "scalar-lq": scalar_lq,
    "deterministic-lq": deterministic_lq,
}


def build(name, params, grid):
    try:
        builder = PROBLEMS[name]
    except KeyError:
        raise InputError(f"unknown problem {name!r}; known: {sorted(PROBLEMS)}") from None
    return builder(dict(params or {}), grid)


def describe():
    return {name: (fn.__doc__ or "").strip().splitlines()[0] for name, fn in PROBLEMS.items()}
