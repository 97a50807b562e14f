"""Criticality of flow subsets and selection of the (weakly) dominant sets.

Two routes produce the dominant collection and are cross-checked on every
call: a vectorised scan over all 2^n subsets minimising the cost
mu_S = sum(nu_j - 1) over strictly critical sets, and a 0/1 knapsack solved
by branch-and-bound over the complement U = I_2 \\ S.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import CriticalCase, TooManyFlows
from .model import SystemSpec, validate_system

DRIFT_TOL = 1e-9
TIE_RTOL = 1e-9
ENUM_LIMIT = 20


@dataclass(frozen=True)
class SetMetrics:
    subset: tuple[int, ...]
    r_S: float
    rho_S: float
    c_S: float
    d_S: float
    mu_S: float
    min_theta: float

    @property
    def critical(self) -> bool:
        return self.d_S >= -DRIFT_TOL

    @property
    def strictly_critical(self) -> bool:
        return self.d_S > DRIFT_TOL

    @property
    def minimally_critical(self) -> bool:
        return self.critical and self.d_S < self.min_theta

    @property
    def classification(self) -> str:
        if not self.critical:
            return "noncritical"
        if self.minimally_critical:
            return "minimally critical"
        return "strictly critical" if self.strictly_critical else "critical"


def _unit(sys: SystemSpec, require_heavy: bool = True) -> SystemSpec:
    return validate_system(sys, require_heavy=require_heavy).normalized


def drift(S: Sequence[int], sys: SystemSpec) -> SetMetrics:
    """Metrics of subset ``S`` (0-based indices into ``heavy_flows``) at unit capacity."""
    u = _unit(sys, require_heavy=False)
    flows = u.heavy_flows
    S = tuple(sorted(set(S)))
    if any(not 0 <= j < len(flows) for j in S):
        raise IndexError(f"subset {S} not within the {len(flows)} heavy flows")
    r_S = sum(flows[j].peak_rate for j in S)
    rho_S = sum(flows[j].rho for j in S)
    c_S = 1.0 - (u.total_rate - rho_S)
    mu_S = sum(flows[j].nu - 1.0 for j in S)
    min_theta = min((flows[j].theta for j in S), default=float("inf"))
    return SetMetrics(S, r_S, rho_S, c_S, r_S - c_S, mu_S, min_theta)


@dataclass
class _Table:
    """All 2^n subsets as bitmasks, with vectorised metrics."""

    n: int
    masks: np.ndarray
    d: np.ndarray
    mu: np.ndarray
    r: np.ndarray
    rho: np.ndarray
    min_theta: np.ndarray
    rest: float

    @classmethod
    def build(cls, u: SystemSpec, limit: int) -> _Table:
        flows = u.heavy_flows
        n = len(flows)
        if n > limit:
            raise TooManyFlows(f"{n} heavy flows exceeds the enumeration limit {limit}")
        peak = np.array([f.peak_rate for f in flows])
        rho = np.array([f.rho for f in flows])
        cost = np.array([f.nu - 1.0 for f in flows])
        theta = peak - rho
        masks = np.arange(1 << n, dtype=np.int64)
        member = ((masks[:, None] >> np.arange(n)) & 1).astype(bool)
        r_S = member @ peak
        rho_S = member @ rho
        mu = member @ cost
        min_theta = np.where(member, theta, np.inf).min(axis=1) if n else np.full(1, np.inf)
        d = r_S - (1.0 - (u.total_rate - rho_S))
        return cls(n, masks, d, mu, r_S, rho_S, min_theta, u.total_rate)

    def subset(self, k: int) -> tuple[int, ...]:
        m = int(self.masks[k])
        return tuple(j for j in range(self.n) if m >> j & 1)

    def metrics(self, k: int) -> SetMetrics:
        c = 1.0 - (self.rest - self.rho[k])
        return SetMetrics(self.subset(k), float(self.r[k]), float(self.rho[k]), float(c),
                          float(self.d[k]), float(self.mu[k]), float(self.min_theta[k]))


def _lex(subsets: list[tuple[int, ...]]) -> list[tuple[int, ...]]:
    return sorted(subsets)


def minimally_critical_sets(sys: SystemSpec, limit: int = ENUM_LIMIT) -> list[tuple[int, ...]]:
    t = _Table.build(_unit(sys), limit)
    hit = np.nonzero((t.d >= -DRIFT_TOL) & (t.d < t.min_theta))[0]
    return _lex([t.subset(k) for k in hit])


def _knapsack_all_optima(values: np.ndarray, weights: np.ndarray, cap: float,
                         tie: float) -> list[frozenset[int]]:
    """All subsets U with sum(w) <= cap whose value is within ``tie`` of the max.

    Depth-first branch-and-bound, items in decreasing value/weight order,
    fractional (Dantzig) bound for pruning.
    """
    n = len(values)
    order = sorted(range(n), key=lambda j: (-values[j] / weights[j], j))
    v = [float(values[j]) for j in order]
    w = [float(weights[j]) for j in order]
    best = -np.inf
    found: list[tuple[float, tuple[int, ...]]] = []

    def bound(i: int, room: float, val: float) -> float:
        for k in range(i, n):
            if w[k] <= room:
                room -= w[k]
                val += v[k]
            else:
                return val + v[k] * room / w[k]
        return val

    def visit(i: int, room: float, val: float, chosen: tuple[int, ...]) -> None:
        nonlocal best
        if i == n:
            if val >= best - tie:
                found.append((val, chosen))
                best = max(best, val)
            return
        if bound(i, room, val) < best - tie:
            return
        if w[i] <= room:
            visit(i + 1, room - w[i], val + v[i], chosen + (order[i],))
        visit(i + 1, room, val, chosen)

    if cap >= 0:
        visit(0, cap, 0.0, ())
    return [frozenset(c) for val, c in found if val >= best - tie]


@dataclass(frozen=True)
class DominanceReport:
    n_flows: int
    metrics: tuple[SetMetrics, ...] = field(repr=False)
    minimally_critical: tuple[tuple[int, ...], ...]
    dominant: tuple[tuple[int, ...], ...]
    mu_star: float
    critical_case: bool
    critical_sets: tuple[tuple[int, ...], ...]
    instant_dominant: tuple[int, ...] = ()
    instant_mu: float = float("inf")

    @property
    def exponent(self) -> float:
        """Tail index of P{V > x}: min over dominant sets and instantaneous flows."""
        return min(self.mu_star, self.instant_mu)

    def classified(self) -> Iterator[tuple[tuple[int, ...], str]]:
        for m in self.metrics:
            yield m.subset, m.classification

    def to_dict(self, ids: Sequence[str] | None = None, instant_ids: Sequence[str] | None = None) -> dict:
        name = (lambda S: [ids[j] for j in S]) if ids else (lambda S: [j + 1 for j in S])
        iname = (lambda i: instant_ids[i]) if instant_ids else (lambda i: i + 1)
        return {
            "n_flows": self.n_flows,
            "subsets": [
                {"set": name(m.subset), "d_S": m.d_S, "mu_S": m.mu_S, "c_S": m.c_S,
                 "classification": m.classification}
                for m in self.metrics
            ],
            "minimally_critical": [name(S) for S in self.minimally_critical],
            "dominant": [name(S) for S in self.dominant],
            "mu_star": self.mu_star if np.isfinite(self.mu_star) else None,
            "critical_case": self.critical_case,
            "critical_sets": [name(S) for S in self.critical_sets],
            "instant_dominant": [iname(i) for i in self.instant_dominant],
            "exponent": self.exponent if np.isfinite(self.exponent) else None,
        }


def dominant_sets(sys: SystemSpec, limit: int = ENUM_LIMIT,
                  allow_critical: bool = False) -> DominanceReport:
    """Weakly dominant sets of heavy flows (and weakly dominant instantaneous flows).

    Raises ``CriticalCase`` if some critical set has zero drift, unless
    ``allow_critical`` is set, in which case the report flags it and the
    dominant collection is left empty.
    """
    u = _unit(sys)
    t = _Table.build(u, limit)
    flows = u.heavy_flows
    metrics = tuple(sorted((t.metrics(k) for k in range(len(t.masks))), key=lambda m: m.subset))
    mincrit = tuple(_lex([t.subset(k) for k in np.nonzero((t.d >= -DRIFT_TOL) & (t.d < t.min_theta))[0]]))

    zero = np.nonzero(np.abs(t.d) <= DRIFT_TOL)[0]
    critical_sets = tuple(_lex([t.subset(k) for k in zero]))
    if critical_sets:
        if not allow_critical:
            raise CriticalCase("critical set(s) with zero drift: "
                               f"{[[j + 1 for j in S] for S in critical_sets]}")
        return DominanceReport(t.n, metrics, mincrit, (), float("nan"), True, critical_sets)

    strict = t.d > DRIFT_TOL
    mu_star = float(t.mu[strict].min())
    tie = TIE_RTOL * max(abs(mu_star), 1.0)
    direct = {t.subset(k) for k in np.nonzero(strict & (t.mu <= mu_star + tie))[0]}

    # knapsack over the complement: maximise removed cost subject to keeping d_S > 0
    values = np.array([f.nu - 1.0 for f in flows])
    weights = np.array([f.theta for f in flows])
    cap = (u.total_rate - sum(f.rho for f in flows)) + sum(f.peak_rate for f in flows) - 1.0 - DRIFT_TOL
    everyone = frozenset(range(t.n))
    knap = {tuple(sorted(everyone - U)) for U in _knapsack_all_optima(values, weights, cap, tie)}
    if knap != direct:
        raise RuntimeError(f"knapsack route {sorted(knap)} disagrees with enumeration {sorted(direct)}")
    dominant = tuple(_lex(list(direct)))
    for S in dominant:
        m = t.metrics(int(sum(1 << j for j in S)))
        if not m.minimally_critical:
            raise RuntimeError(f"dominant set {S} is not minimally critical")

    inst_cost = [f.nu - 1.0 for f in u.instant_flows]
    K: tuple[int, ...] = ()
    inst_mu = float("inf")
    if inst_cost:
        inst_mu = min(inst_cost)
        itie = TIE_RTOL * max(abs(inst_mu), 1.0)
        if inst_mu <= mu_star + tie:
            K = tuple(i for i, cst in enumerate(inst_cost) if cst <= inst_mu + itie)
        if inst_mu < mu_star - tie:
            dominant = ()
    return DominanceReport(t.n, metrics, mincrit, dominant, mu_star, False, critical_sets, K, inst_mu)
