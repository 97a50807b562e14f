"""Tail asymptotes for single flows, reduced systems and the full multiplexer."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dominance import DominanceReport, dominant_sets
from .errors import RateOrder
from .kappa import DEFAULT_SAMPLES, KappaEstimate, kappa_total, product_tail
from .model import InstantFlow, OnOffFlow, ReducedSystem, SystemSpec, validate_system


def _out(v):
    v = np.asarray(v, dtype=float)
    return v if v.ndim else float(v)


def single_flow_tail(f: OnOffFlow, c: float, x):
    """(1 - p) rho/(c - rho) P{A^r > x/(r - c)}, for rho < c < r."""
    if not f.rho < c < f.peak_rate:
        raise RateOrder(f"need rho={f.rho:.6g} < c={c:.6g} < r={f.peak_rate:.6g}")
    x = np.asarray(x, dtype=float)
    return _out((1.0 - f.p) * f.rho / (c - f.rho) * f.on.residual_tail(x / (f.peak_rate - c)))


def instantaneous_flow_tail(f: InstantFlow, c: float, x):
    """rho/(c - rho) P{B^r > x}, for rho < c."""
    if not f.rho < c:
        raise RateOrder(f"need rho={f.rho:.6g} < c={c:.6g}")
    return _out(f.rho / (c - f.rho) * f.burst.residual_tail(np.asarray(x, dtype=float)))


def reduced_system_tail(rs: ReducedSystem, x, *, kappa: KappaEstimate | None = None,
                        samples: int = DEFAULT_SAMPLES, seed: int | None = None,
                        workers: int | None = None):
    """kappa * prod p_i * prod P{A_i^r > x/(r-c)}; returns (value, standard error)."""
    if kappa is None:
        if seed is None:
            raise ValueError("seed is required when kappa must be estimated")
        kappa = kappa_total(rs, samples=samples, seed=seed, workers=workers)
    base = math.prod(f.p for f in rs.flows) * np.asarray(product_tail(rs, x), dtype=float)
    return _out(kappa.value * base), _out(kappa.standard_error * base)


@dataclass(frozen=True)
class TailBounds:
    lower: object
    upper: object | None
    K: float | None
    upper_is_asymptotic: bool = True


def tail_bounds(flows: Sequence[OnOffFlow], c: float, x) -> TailBounds:
    """Non-asymptotic lower bound P_S^c(x) and asymptotic upper bound K_S^c P_S^c(x)."""
    flows = tuple(flows)
    r_S = sum(f.peak_rate for f in flows)
    if not c < r_S:
        raise RateOrder(f"lower bound needs c={c:.6g} < r_S={r_S:.6g}")
    u = np.asarray(x, dtype=float) / (r_S - c)
    lower = np.ones_like(u)
    for f in flows:
        lower = lower * f.p * f.on.residual_tail(u)
    lower = _out(lower)
    if not c > r_S - min(f.theta for f in flows):
        return TailBounds(lower, None, None)
    K = math.prod(f.theta / (f.theta + c - r_S) for f in flows)
    return TailBounds(lower, _out(K * np.asarray(lower)), K)


@dataclass(frozen=True)
class TailTerm:
    label: str
    kind: str  # "set" or "instant"
    members: tuple[int, ...]
    capacity: float
    value: np.ndarray
    standard_error: np.ndarray
    kappa: KappaEstimate | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None


@dataclass(frozen=True)
class WorkloadTail:
    x: np.ndarray
    value: np.ndarray
    standard_error: np.ndarray
    exponent: float
    terms: tuple[TailTerm, ...]
    report: DominanceReport = field(repr=False)


def _label(S: Sequence[int]) -> str:
    return "{" + ",".join(str(j + 1) for j in S) + "}"


def workload_tail(sys: SystemSpec, x, *, samples: int = DEFAULT_SAMPLES, seed: int,
                  workers: int | None = None, report: DominanceReport | None = None) -> WorkloadTail:
    """Reduced-load composition over all weakly dominant sets and flows.

    ``x`` is in the system's own traffic units; rates are normalised to unit
    capacity internally.
    """
    norm = validate_system(sys).normalized
    if report is None:
        report = dominant_sets(sys)
    xs = np.atleast_1d(np.asarray(x, dtype=float)) / sys.capacity
    total = norm.total_rate
    terms = []
    for S in report.dominant:
        flows = tuple(norm.heavy_flows[j] for j in S)
        c_S = 1.0 - (total - sum(f.rho for f in flows))
        rs = ReducedSystem(flows, c_S)
        k = kappa_total(rs, samples=samples, seed=seed, workers=workers)
        v, se = reduced_system_tail(rs, xs, kappa=k)
        b = tail_bounds(flows, c_S, xs)
        terms.append(TailTerm(_label(S), "set", tuple(S), c_S, np.atleast_1d(v), np.atleast_1d(se), k,
                              np.atleast_1d(b.lower), None if b.upper is None else np.atleast_1d(b.upper)))
    for i in report.instant_dominant:
        f = norm.instant_flows[i]
        c_i = 1.0 - (total - f.rho)
        v = np.atleast_1d(instantaneous_flow_tail(f, c_i, xs))
        terms.append(TailTerm(f"b{i + 1}", "instant", (i,), c_i, v, np.zeros_like(v)))
    value = np.sum([t.value for t in terms], axis=0)
    # every set reuses the same kappa stream, so errors add linearly (worst-case correlation)
    se = np.sum([t.standard_error for t in terms], axis=0)
    return WorkloadTail(xs * sys.capacity, value, se, report.exponent, tuple(terms), report)


@dataclass(frozen=True)
class TailCurve:
    points: tuple[tuple[float, float], ...]
    metadata: dict


def tail_curve(sys: SystemSpec, xs: Sequence[float], *, samples: int = DEFAULT_SAMPLES,
               seed: int, workers: int | None = None) -> TailCurve:
    wt = workload_tail(sys, xs, samples=samples, seed=seed, workers=workers)
    theorem = "reduced-load equivalence"
    if any(t.kind == "instant" for t in wt.terms):
        theorem += " with instantaneous input"
    elif len(wt.terms) > 1:
        theorem += " (weakly dominant sets)"
    return TailCurve(tuple(zip(map(float, wt.x), map(float, wt.value))),
                     {"system": sys.digest(), "theorem": theorem, "mu": wt.exponent})
