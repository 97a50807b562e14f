"""The reduced-system integral P_J0(x) and the prefactors kappa_J0.

For a reduced system (flows J against capacity c, drift r - c > 0 only when
all flows are On) the workload tail is

    P{V > x} ~ prod_j p_j * sum_{J0 subset J} P_J0(x),

where J0 are the flows whose long On period started before time 0.  Two
evaluators of P_J0 are kept side by side:

* ``quadrature`` integrates the defining |J1|-dimensional integral over the
  start offsets y in (0, inf)^|J1| directly;
* ``monte_carlo`` uses the equivalent probabilistic form obtained from the
  linear change of variables z = (G - I) y: with excesses E_i = A_i^r - x/(r-c)
  conditioned on being positive and T = g.E_J1 / (eg - 1),

      P_J0(x) = prod_i P{A_i^r > x/(r-c)} / (eg - 1)
                * P{E_k <= T for k in J1, E_i >= T for i in J0}.

Letting x grow, E_i / x converges to Z_i with P{Z_i > y} = (1 + y(r-c))^(1-nu_i)
and kappa_J0 is the same expression in the Z_i. The constraints on J1 come
from y >= 0 and matter as soon as |J1| >= 2.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np
from scipy import integrate

from .errors import BadPartition
from .model import OnOffFlow, ReducedSystem

DEFAULT_SAMPLES = 1_000_000
CHUNK = 1 << 16
QUAD_MAX_DIM = 3
QUAD_RTOL = 1e-9

_KAPPA_STREAM = 0x6B61
_PJ0_STREAM = 0x706A


@dataclass(frozen=True)
class KappaEstimate:
    value: float
    standard_error: float
    method: str
    sample_count: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "standard_error", float(self.standard_error))
        object.__setattr__(self, "sample_count", int(self.sample_count))


def _workers(workers: int | None) -> int:
    cap = os.environ.get("HTQL_THREADS")
    n = workers if workers is not None else (int(cap) if cap else 1)
    if cap:
        n = min(n, int(cap))
    return max(1, n)


def _stream(seed: int, tag: int, chunk: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(tag, chunk))
    return np.random.Generator(np.random.Philox(ss))


def _chunks(samples: int) -> list[int]:
    full, rest = divmod(int(samples), CHUNK)
    return [CHUNK] * full + ([rest] if rest else [])


def _merge(parts: Sequence[tuple[int, float, float]]) -> tuple[int, float, float]:
    """Combine (count, mean, M2) triples in the given order (Chan et al.)."""
    n, mean, m2 = 0, 0.0, 0.0
    for nb, mb, m2b in parts:
        if nb == 0:
            continue
        tot = n + nb
        delta = mb - mean
        mean += delta * nb / tot
        m2 += m2b + delta * delta * n * nb / tot
        n = tot
    return n, mean, m2


def _run_chunks(fn, samples: int, workers: int | None) -> tuple[int, float, float]:
    sizes = _chunks(samples)
    jobs = list(enumerate(sizes))
    w = _workers(workers)
    if w == 1 or len(jobs) == 1:
        parts = [fn(i, m) for i, m in jobs]
    else:
        with ThreadPoolExecutor(max_workers=w) as ex:
            parts = list(ex.map(lambda job: fn(*job), jobs))
    return _merge(parts)


def _stats(y: np.ndarray) -> tuple[int, float, float]:
    m = float(y.mean())
    return len(y), m, float(((y - m) ** 2).sum())


def _check_partition(rs: ReducedSystem, J0: Sequence[int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    J0 = tuple(sorted(set(int(j) for j in J0)))
    if any(not 0 <= j < rs.n for j in J0):
        raise BadPartition(f"J0={J0} is not a subset of J={{0..{rs.n - 1}}}")
    J1 = tuple(j for j in range(rs.n) if j not in J0)
    return J0, J1


def product_tail(rs: ReducedSystem, x):
    """prod_i P{A_i^r > x/(r-c)}."""
    u = np.asarray(x, dtype=float) / rs.drift
    out = np.ones_like(u)
    for f in rs.flows:
        out = out * f.on.residual_tail(u)
    return out if out.ndim else float(out)


def _threshold(g: np.ndarray, E1: np.ndarray) -> np.ndarray:
    return (E1 @ g) / (g.sum() - 1.0)


def _event(g: np.ndarray, E: np.ndarray, J0: tuple[int, ...], J1: tuple[int, ...]) -> np.ndarray:
    T = _threshold(g, E[:, J1])
    ok = np.ones(len(E), dtype=bool)
    for k in J1:
        ok &= E[:, k] <= T
    for i in J0:
        ok &= E[:, i] >= T
    return ok


# ---------------------------------------------------------------- P_J0(x)

def _pj0_quadrature(rs: ReducedSystem, J0, J1, x: float) -> KappaEstimate:
    drift = rs.drift
    theta = np.array([rs.flows[j].theta for j in J1])
    alphas = math.prod(rs.flows[j].on.mean() for j in J1)
    on1 = [rs.flows[j].on for j in J1]
    on0 = [rs.flows[j].on for j in J0]
    # integrate in units of the natural time scale x/(r-c)
    L = max(x / drift, min(d.scale for d in on1))
    dim = len(J1)

    def f(u: np.ndarray) -> np.ndarray:
        y = u * L
        lin = y @ theta + x
        val = np.ones(len(y))
        for k, d in enumerate(on1):
            val *= d.tail((lin - drift * y[:, k]) / drift)
        for d in on0:
            val *= d.residual_tail(lin / drift)
        return val * (L ** dim / alphas)

    if dim == 1:
        est, err = integrate.quad(lambda u: float(f(np.array([[u]]))[0]), 0.0, np.inf,
                                  epsabs=0.0, epsrel=QUAD_RTOL, limit=500)
    else:
        res = integrate.cubature(f, np.zeros(dim), np.full(dim, np.inf), rtol=QUAD_RTOL, atol=0.0,
                                 max_subdivisions=200_000)
        est, err = float(res.estimate), float(res.error)
    return KappaEstimate(float(est), max(float(err), np.finfo(float).eps * abs(est)), "quadrature")


def _pj0_monte_carlo(rs: ReducedSystem, J0, J1, x: float, samples: int, seed: int,
                     workers: int | None) -> KappaEstimate:
    level = x / rs.drift
    g = rs.g(J1)
    base = product_tail(rs, x) / (g.sum() - 1.0)
    flows = rs.flows

    def chunk(i: int, m: int):
        rng = _stream(seed, _PJ0_STREAM, i)
        E = np.column_stack([f.on.sample_residual(rng, m, above=level) - level for f in flows])
        return _stats(_event(g, E, J0, J1).astype(float))

    n, mean, m2 = _run_chunks(chunk, samples, workers)
    se = math.sqrt(m2 / (n - 1) / n) if n > 1 else float("nan")
    return KappaEstimate(base * mean, base * se, "monte_carlo", n)


def p_j0_value(rs: ReducedSystem, J0: Sequence[int], x: float, method: str = "auto", *,
               samples: int = DEFAULT_SAMPLES, seed: int | None = None,
               workers: int | None = None, max_quad_dim: int = QUAD_MAX_DIM) -> KappaEstimate:
    """Evaluate P_J0(x); ``method`` is auto, closed_form, quadrature or monte_carlo."""
    J0, J1 = _check_partition(rs, J0)
    x = float(x)
    if method == "auto":
        if not J1 or (rs.n == 1 and not J0):
            method = "closed_form"
        else:
            method = "quadrature" if len(J1) <= max_quad_dim else "monte_carlo"
    if method == "closed_form":
        if not J1:
            return KappaEstimate(product_tail(rs, x), 0.0, "closed_form")
        if rs.n == 1:
            f = rs.flows[0]
            c = rs.capacity
            val = (rs.drift / (c - f.rho)) * f.on.residual_tail(x / rs.drift)
            return KappaEstimate(float(val), 0.0, "closed_form")
        raise ValueError("no closed form for this partition")
    if not J1:
        return KappaEstimate(product_tail(rs, x), 0.0, "closed_form")
    if method == "quadrature":
        return _pj0_quadrature(rs, J0, J1, x)
    if method == "monte_carlo":
        if seed is None:
            raise ValueError("Monte Carlo evaluation needs an explicit seed")
        return _pj0_monte_carlo(rs, J0, J1, x, samples, seed, workers)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------- kappa

def sample_z(rng: np.random.Generator, nus: Sequence[float], gamma: float, size: int) -> np.ndarray:
    """Independent Z_i with P{Z_i > y} = (1 + y/gamma)^(1 - nu_i), by inverse CDF."""
    u = 1.0 - rng.random((size, len(nus)))
    return gamma * (u ** (1.0 / (1.0 - np.asarray(nus, dtype=float))) - 1.0)


def _closed_kappa(rs: ReducedSystem, J0, J1) -> float | None:
    if not J1:
        return 1.0
    if len(J1) == 1 and not J0:
        return 1.0 / (float(rs.g(J1)[0]) - 1.0)
    return None


def _orbits(rs: ReducedSystem) -> list[tuple[tuple[int, ...], int]]:
    """One representative J0 per class of exchangeable partitions, with multiplicity."""
    classes: dict[tuple, list[int]] = {}
    for j, f in enumerate(rs.flows):
        key = (f.peak_rate, f.rho, f.nu)
        classes.setdefault(key, []).append(j)
    groups = list(classes.values())
    out = []
    for ks in product(*(range(len(gr) + 1) for gr in groups)):
        J0 = tuple(sorted(j for gr, k in zip(groups, ks) for j in gr[:k]))
        mult = math.prod(math.comb(len(gr), k) for gr, k in zip(groups, ks))
        out.append((J0, mult))
    return out


def _kappa_mc(rs: ReducedSystem, terms: list[tuple[tuple[int, ...], tuple[int, ...], float]],
              samples: int, seed: int, workers: int | None) -> tuple[int, float, float]:
    nus = [f.nu for f in rs.flows]
    gamma = rs.gamma
    prepared = [(J0, J1, rs.g(J1), w / (rs.g(J1).sum() - 1.0)) for J0, J1, w in terms]

    def chunk(i: int, m: int):
        # common random numbers: one Z matrix serves every partition
        Z = sample_z(_stream(seed, _KAPPA_STREAM, i), nus, gamma, m)
        y = np.zeros(m)
        for J0, J1, g, w in prepared:
            y += w * _event(g, Z, J0, J1)
        return _stats(y)

    return _run_chunks(chunk, samples, workers)


def _surrogate(rs: ReducedSystem) -> ReducedSystem:
    """Same rates and indices with exact Pareto On periods (kappa depends on nothing else)."""
    return ReducedSystem(tuple(OnOffFlow.from_rates(f.peak_rate, f.rho, f.nu, "pareto")
                               for f in rs.flows), rs.capacity)


def kappa_j0(rs: ReducedSystem, J0: Sequence[int], *, samples: int = DEFAULT_SAMPLES,
             seed: int, method: str = "auto", workers: int | None = None) -> KappaEstimate:
    J0, J1 = _check_partition(rs, J0)
    closed = _closed_kappa(rs, J0, J1)
    if closed is not None and method in ("auto", "closed_form"):
        return KappaEstimate(closed, 0.0, "closed_form")
    if method == "quadrature":
        # with Pareto tails the excess over x/(r-c) has exactly the Z law once x/(r-c) >= x_m,
        # so the finite-x ratio equals kappa
        sur = _surrogate(rs)
        x = 2.0 * sur.drift * max(f.on.scale for f in sur.flows)
        p = p_j0_value(sur, J0, x, "quadrature")
        den = product_tail(sur, x)
        return KappaEstimate(p.value / den, p.standard_error / den, "quadrature")
    if method not in ("auto", "monte_carlo"):
        raise ValueError(f"unknown method {method!r}")
    n, mean, m2 = _kappa_mc(rs, [(J0, J1, 1.0)], samples, seed, workers)
    return KappaEstimate(mean, math.sqrt(m2 / (n - 1) / n), "monte_carlo", n)


def kappa_total(rs: ReducedSystem, *, samples: int = DEFAULT_SAMPLES, seed: int,
                workers: int | None = None) -> KappaEstimate:
    """kappa = sum over all J0 of kappa_J0 (common random numbers across partitions)."""
    closed = 0.0
    mc_terms = []
    for J0, mult in _orbits(rs):
        J0, J1 = _check_partition(rs, J0)
        k = _closed_kappa(rs, J0, J1)
        if k is not None:
            closed += mult * k
        else:
            mc_terms.append((J0, J1, float(mult)))
    if not mc_terms:
        return KappaEstimate(closed, 0.0, "closed_form")
    n, mean, m2 = _kappa_mc(rs, mc_terms, samples, seed, workers)
    return KappaEstimate(closed + mean, math.sqrt(m2 / (n - 1) / n), "monte_carlo", n)
