"""K heterogeneous classes scaled by n: index rule, limiting cumulant, finite-n knapsack."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational
from typing import Sequence

import numpy as np

from .errors import InfeasibleMix, OutOfDomain


def _q(v) -> Fraction:
    """Exact rational for a user-supplied number (decimal literals stay decimal)."""
    if isinstance(v, Rational):
        return Fraction(v)
    return Fraction(repr(float(v)))


@dataclass(frozen=True)
class ClassMix:
    """Class fractions a_k, peaks r_k, means rho_k, tail indices nu_k.

    Stored sorted by nondecreasing gamma_k = (nu_k - 1)/(r_k - rho_k);
    ``order`` maps sorted position to the caller's class index.
    """

    fractions: tuple
    peaks: tuple
    means: tuple
    nus: tuple
    order: tuple = ()

    def __post_init__(self) -> None:
        cols = [tuple(c) for c in (self.fractions, self.peaks, self.means, self.nus)]
        K = len(cols[0])
        if K == 0 or any(len(c) != K for c in cols):
            raise ValueError("class arrays must be nonempty and of equal length")
        a, r, rho, nu = cols
        if any(x <= 0 for x in a) or abs(float(sum(_q(x) for x in a)) - 1.0) > 1e-12:
            raise ValueError("class fractions must be positive and sum to 1")
        if any(not 0 < m < p for m, p in zip(rho, r)):
            raise ValueError("need 0 < rho_k < r_k for every class")
        if any(v <= 1 for v in nu):
            raise ValueError("tail indices must exceed 1")
        gam = [(_q(v) - 1) / (_q(p) - _q(m)) for v, p, m in zip(nu, r, rho)]
        perm = sorted(range(K), key=lambda k: gam[k])
        base = tuple(self.order) if self.order else tuple(range(K))
        for name, col in zip(("fractions", "peaks", "means", "nus"), cols):
            object.__setattr__(self, name, tuple(col[k] for k in perm))
        object.__setattr__(self, "order", tuple(base[k] for k in perm))

    @property
    def K(self) -> int:
        return len(self.fractions)

    def columns(self, exact: bool = False):
        conv = _q if exact else float
        return ([conv(v) for v in self.fractions], [conv(v) for v in self.peaks],
                [conv(v) for v in self.means], [conv(v) for v in self.nus])

    def gammas(self, exact: bool = False) -> list:
        _, r, rho, nu = self.columns(exact)
        return [(v - 1) / (p - m) for v, p, m in zip(nu, r, rho)]

    def sigmas(self, exact: bool = False) -> list:
        """sigma_1..sigma_{K+1}: classes before k at peak, the rest at mean."""
        a, r, rho, _ = self.columns(exact)
        out = []
        for k in range(self.K + 1):
            out.append(sum((a[m] * r[m] for m in range(k)), 0 * a[0])
                       + sum((a[m] * rho[m] for m in range(k, self.K)), 0 * a[0]))
        return out

    def to_dict(self) -> dict:
        inv = sorted(range(self.K), key=lambda k: self.order[k])
        return {"classes": [{"fraction": float(self.fractions[k]), "peak_rate": float(self.peaks[k]),
                             "mean_rate": float(self.means[k]), "nu": float(self.nus[k])} for k in inv]}

    @classmethod
    def from_dict(cls, d: dict) -> ClassMix:
        cl = d["classes"]
        return cls(tuple(c["fraction"] for c in cl), tuple(c["peak_rate"] for c in cl),
                   tuple(c["mean_rate"] for c in cl), tuple(c["nu"] for c in cl))


@dataclass(frozen=True)
class IndexRule:
    order: tuple[int, ...]
    gamma: tuple
    sigma: tuple
    level: int  # 1-based position (in gamma order) of the partially peaking class
    peak_fractions: tuple  # n_k*/n in gamma order
    mu: object


def _feasible(sig) -> None:
    if sig[0] >= 1:
        raise InfeasibleMix(f"sum a_k rho_k = {float(sig[0]):.6g} >= 1: unstable")
    if sig[-1] <= 1:
        raise InfeasibleMix(f"sum a_k r_k = {float(sig[-1]):.6g} <= 1: no heavy-tailed regime")


def _level(sig, x) -> int:
    """0-based k with sigma[k] < x <= sigma[k+1]."""
    for k in range(len(sig) - 1):
        if sig[k] < x <= sig[k + 1]:
            return k
    raise OutOfDomain(f"{x} outside ({sig[0]}, {sig[-1]}]")


def index_rule(mix: ClassMix, exact: bool = False) -> IndexRule:
    """Greedy solution of the relaxed knapsack: cheapest cost per unit drift first."""
    a, r, rho, nu = mix.columns(exact)
    gam = mix.gammas(exact)
    sig = mix.sigmas(exact)
    _feasible(sig)
    l = _level(sig, 1)
    frac = [a[k] if k < l else 0 * a[0] for k in range(mix.K)]
    frac[l] = (1 - sig[l]) / (r[l] - rho[l])
    mu = sum((a[k] * (nu[k] - 1) for k in range(l)), 0 * a[0]) + (1 - sig[l]) * gam[l]
    return IndexRule(mix.order, tuple(gam), tuple(sig), l + 1, tuple(frac), mu)


def limiting_cumulant(mix: ClassMix, theta):
    """sum_k a_k max(theta rho_k, theta r_k - nu_k + 1), for theta >= 0."""
    a, r, rho, nu = (np.asarray(c, dtype=float) for c in mix.columns())
    th = np.asarray(theta, dtype=float)
    if np.any(th < 0):
        raise OutOfDomain("theta must be nonnegative")
    t = th[..., None]
    out = (a * np.maximum(t * rho, t * r - nu + 1.0)).sum(axis=-1)
    return out if out.ndim else float(out)


def limiting_rate_function(mix: ClassMix, x, exact: bool = False):
    """Large-t limit of the scaled rate function; increasing on (sum a rho, sum a r)."""
    a, r, rho, nu = mix.columns(exact)
    gam = mix.gammas(exact)
    sig = mix.sigmas(exact)
    x = _q(x) if exact else float(x)
    if not sig[0] < x < sig[-1]:
        raise OutOfDomain(f"x={float(x):.6g} outside ({float(sig[0]):.6g}, {float(sig[-1]):.6g})")
    l = _level(sig, x)
    g = gam[l]
    val = g * x
    for k in range(mix.K):
        val -= a[k] * (g * r[k] - nu[k] + 1) if k < l else a[k] * g * rho[k]
    return val


@dataclass(frozen=True)
class FiniteN:
    n: int
    populations: tuple[int, ...]
    counts: tuple[int, ...]
    mu_n: Fraction
    bounds: tuple[Fraction, Fraction]
    adjusted_bounds: tuple[Fraction, Fraction]

    def to_dict(self, order: Sequence[int]) -> dict:
        inv = sorted(range(len(order)), key=lambda k: order[k])
        return {
            "n": self.n,
            "populations": [self.populations[k] for k in inv],
            "peaking": [self.counts[k] for k in inv],
            "mu_n": float(self.mu_n),
            "lower": float(self.bounds[0]),
            "upper": float(self.bounds[1]),
            "lower_adjusted": float(self.adjusted_bounds[0]),
            "upper_adjusted": float(self.adjusted_bounds[1]),
        }


def _relaxed_cost(theta, cost, caps, need: Fraction, start: int = 0) -> Fraction | None:
    """Cheapest fractional cover of ``need`` using classes start.. in gamma order."""
    if need < 0:
        return Fraction(0)
    total = Fraction(0)
    for k in range(start, len(theta)):
        take = min(Fraction(caps[k]), need / theta[k])
        total += take * cost[k]
        need -= take * theta[k]
        if need <= 0:
            return total
    return None


def finite_n_exponent(mix: ClassMix, n: int) -> FiniteN:
    """Exact integer optimum of the n-flow knapsack (populations floor(n a_k))."""
    if n < 1:
        raise ValueError("n must be a positive integer")
    a, r, rho, nu = mix.columns(exact=True)
    caps = [math.floor(n * ak) for ak in a]
    theta = [p - m for p, m in zip(r, rho)]
    cost = [v - 1 for v in nu]
    need0 = n - sum(N * m for N, m in zip(caps, rho))
    if sum(N * t for N, t in zip(caps, theta)) <= need0:
        raise InfeasibleMix(f"n={n}: even all flows at peak do not exceed capacity")

    best: list = [None, None]

    def visit(i: int, need: Fraction, spent: Fraction, chosen: tuple[int, ...]) -> None:
        if need < 0:
            if best[0] is None or spent < best[0]:
                best[0], best[1] = spent, chosen + (0,) * (len(theta) - i)
            return
        if i == len(theta):
            return
        lb = _relaxed_cost(theta, cost, caps, need, i)
        if lb is None or (best[0] is not None and spent + lb >= best[0]):
            return
        top = min(caps[i], math.floor(need / theta[i]) + 1)
        for k in range(top, -1, -1):
            visit(i + 1, need - k * theta[i], spent + k * cost[i], chosen + (k,))

    visit(0, need0, Fraction(0), ())
    rule = index_rule(mix, exact=True)
    g_l = rule.gamma[rule.level - 1]
    lo_adj = _relaxed_cost(theta, cost, caps, need0)
    return FiniteN(n, tuple(caps), best[1], best[0],
                   (n * rule.mu, n * rule.mu + g_l),
                   (lo_adj, lo_adj + max(cost)))
