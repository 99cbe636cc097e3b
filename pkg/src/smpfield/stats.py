"""Monte Carlo estimates, log-log slopes and Richardson extrapolation."""

from dataclasses import dataclass

import numpy as np
from scipy import stats as _st

from .errors import InputError


@dataclass(frozen=True)
class MCEstimate:
    """Sample mean with its standard error.

    ``deterministic`` marks estimates that carry no sampling noise (all
    samples identical); their ``se`` is exactly zero.
    """

    mean: float
    se: float
    n: int = 1
    deterministic: bool = False

    @classmethod
    def from_samples(cls, samples):
        s = np.asarray(samples, dtype=float).ravel()
        if s.size == 0:
            raise InputError("no samples")
        mean = float(np.mean(s))
        if s.size == 1 or np.all(s == s[0]):
            return cls(mean, 0.0, int(s.size), True)
        se = float(np.std(s, ddof=1) / np.sqrt(s.size))
        return cls(mean, se, int(s.size), False)

    def within(self, target, n_se=3.0, atol=0.0, rtol=0.0):
        band = max(n_se * self.se, atol, rtol * abs(target))
        return abs(self.mean - target) <= band

    def __format__(self, spec):
        spec = spec or ".6g"
        return f"{self.mean:{spec}} ± {self.se:{spec}}"


def mean_and_se(samples, axis=0):
    """Vectorised mean and standard error along ``axis``."""
    s = np.asarray(samples, dtype=float)
    n = s.shape[axis]
    mean = s.mean(axis=axis)
    if n < 2:
        return mean, np.zeros_like(mean)
    se = s.std(axis=axis, ddof=1) / np.sqrt(n)
    return mean, se


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    lower: float
    upper: float

    def within(self, lo, hi):
        return lo <= self.slope <= hi


def slope(xs, ys, level=0.95):
    """OLS slope of log(ys) against log(xs) with a confidence interval."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError("xs and ys must be 1-d and of equal length")
    if x.size < 3:
        raise InputError("slope needs at least 3 points")
    if np.any(x <= 0) or np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise InputError("slope needs strictly positive, finite values")
    lx, ly = np.log(x), np.log(y)
    lxc = lx - lx.mean()
    sxx = float(lxc @ lxc)
    if sxx == 0.0:
        raise InputError("xs must not all be equal")
    b = float(lxc @ (ly - ly.mean())) / sxx
    a = float(ly.mean() - b * lx.mean())
    resid = ly - (a + b * lx)
    dof = x.size - 2
    s2 = float(resid @ resid) / dof
    half = float(_st.t.ppf(0.5 + level / 2, dof)) * np.sqrt(s2 / sxx)
    return SlopeFit(b, a, b - half, b + half)


def richardson_weights(eps):
    """Lagrange weights w with sum_i w_i g(eps_i) = p(0) for the
    interpolating polynomial p of degree len(eps) - 1."""
    e = np.asarray(eps, dtype=float)
    if len(set(e.tolist())) != e.size:
        raise InputError("eps values must be distinct")
    w = np.ones(e.size)
    for i in range(e.size):
        for j in range(e.size):
            if i != j:
                w[i] *= e[j] / (e[j] - e[i])
    return w
