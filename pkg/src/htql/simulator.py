"""Fluid queue fed by On-Off flows: exact piecewise-linear workload paths.

Each replication draws, per flow, the full alternating sequence of On and
Off periods up to the horizon from its own counter-based stream, merges the
toggle epochs, and evolves the reflected workload between consecutive
epochs in closed form.  Tail probabilities are estimated by the exact
fraction of time the path spends above each level.

Under stationary initialization the estimator is also reported with a
control variate: for each flow i whose peak rate alone overloads the rest
of the system (drift d_i = r_i + background + sum_{j != i} rho_j - c > 0),
the time flow i is On with remaining On time above x/d_i has the known
stationary mean p_i P{A_i^r > x/d_i} per unit time.  This is the event
that drives P{V > x} for large x, so regressing the occupation fraction on
these controls across replications removes most of the heavy-tailed
replication noise without biasing the estimate.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import IO, Sequence

import numpy as np

from .errors import ConfigError, UnstableSim
from .kappa import _workers
from .model import HeavyTailDist, OnOffFlow, SystemSpec

OFF_LAWS = ("exponential", "deterministic", "lomax")
INIT_MODES = ("stationary", "warmup")

_MIN_CHUNK = 256


@dataclass(frozen=True)
class SimConfig:
    horizon: float
    replications: int = 1
    seed: int = 0
    init: str = "stationary"
    warmup_fraction: float = 0.1
    off_law: str = "exponential"
    off_lomax_index: float = 3.0
    levels: tuple[float, ...] = ()
    background_rate: float = 0.0
    workers: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(float(x) for x in self.levels))
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if int(self.replications) != self.replications or self.replications < 1:
            raise ConfigError("replications must be an integer >= 1")
        if self.init not in INIT_MODES:
            raise ConfigError(f"init must be one of {INIT_MODES}")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.off_law not in OFF_LAWS:
            raise ConfigError(f"off_law must be one of {OFF_LAWS}")
        if not self.off_lomax_index > 1:
            raise ConfigError("off_lomax_index must exceed 1")
        if any(not x > 0 for x in self.levels):
            raise ConfigError("levels must be positive")
        if self.background_rate < 0:
            raise ConfigError("background_rate must be nonnegative")

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "replications": self.replications, "seed": self.seed,
                "init": self.init, "warmup_fraction": self.warmup_fraction, "off_law": self.off_law,
                "off_lomax_index": self.off_lomax_index, "levels": list(self.levels),
                "background_rate": self.background_rate}


class _OffLaw:
    """Off-period law with a given mean, plus its stationary residual."""

    def __init__(self, law: str, mean: float, lomax_index: float = 3.0) -> None:
        self.law, self.m = law, mean
        self.dist = HeavyTailDist.with_mean("lomax", mean, lomax_index) if law == "lomax" else None

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.law == "exponential":
            return rng.exponential(self.m, size)
        if self.law == "deterministic":
            return np.full(size, self.m)
        return self.dist.sample(rng, size)

    def sample_residual(self, rng: np.random.Generator) -> float:
        if self.law == "exponential":
            return float(rng.exponential(self.m))
        if self.law == "deterministic":
            return float(rng.uniform(0.0, self.m))
        return float(self.dist.sample_residual(rng))


def flow_stream(seed: int, replication: int, flow: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replication), int(flow)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class FlowState:
    """On indicator at time 0, first toggle epoch, and the flow's own stream."""

    on: bool
    next_toggle: float
    rng: np.random.Generator = field(repr=False)


def init_stationary(flows: Sequence[OnOffFlow], seed: int, replication: int = 0,
                    off_law: str = "exponential", off_lomax_index: float = 3.0) -> list[FlowState]:
    """Start each flow in its stationary regime.

    On with probability p; the first toggle comes after a residual On period,
    or after a residual Off period when starting Off.
    """
    out = []
    for i, f in enumerate(flows):
        rng = flow_stream(seed, replication, i)
        on = bool(rng.random() < f.p)
        if on:
            first = float(f.on.sample_residual(rng))
        else:
            first = _OffLaw(off_law, f.off_mean, off_lomax_index).sample_residual(rng)
        out.append(FlowState(on, max(first, np.finfo(float).tiny), rng))
    return out


def init_fresh(flows: Sequence[OnOffFlow], seed: int, replication: int = 0,
               off_law: str = "exponential", off_lomax_index: float = 3.0) -> list[FlowState]:
    """Every flow starts at the beginning of an Off period (used with warmup)."""
    out = []
    for i, f in enumerate(flows):
        rng = flow_stream(seed, replication, i)
        first = float(_OffLaw(off_law, f.off_mean, off_lomax_index).sample(rng, 1)[0])
        out.append(FlowState(False, first, rng))
    return out


def toggle_times(flow: OnOffFlow, state: FlowState, horizon: float, off: _OffLaw,
                 overshoot: bool = False) -> np.ndarray:
    """All toggle epochs in (0, horizon), continuing the state's stream.

    With ``overshoot`` the first epoch at or beyond the horizon is kept too,
    so the period straddling the horizon has its true end.
    """
    t0 = state.next_toggle
    if t0 >= horizon:
        return np.array([t0]) if overshoot else np.empty(0)
    cycle = flow.on.mean() + flow.off_mean
    parts = [np.array([t0])]
    last = t0
    while last < horizon:
        n = max(_MIN_CHUNK, int(1.2 * (horizon - last) / cycle) + 16)
        a = flow.on.sample(state.rng, n)
        u = off.sample(state.rng, n)
        d = np.empty(2 * n)
        # after an On->Off toggle an Off period follows, and vice versa
        first, second = (u, a) if state.on else (a, u)
        d[0::2], d[1::2] = first, second
        t = last + np.cumsum(d)
        parts.append(t)
        last = t[-1]
    t = np.concatenate(parts)
    return t[: np.searchsorted(t, horizon, side="left") + (1 if overshoot else 0)]


def on_at(state_on: bool, toggles: np.ndarray, t: float) -> bool:
    """Indicator J(t) from the initial state and the toggle epochs."""
    return bool(state_on) ^ bool(np.searchsorted(toggles, t, side="right") % 2)


@dataclass(frozen=True)
class Trajectory:
    """Workload at breakpoints t_0 = 0 < ... < t_m = T and net rate on each segment."""

    times: np.ndarray
    workload: np.ndarray
    rates: np.ndarray
    start: float = 0.0  # occupation is counted on [start, T]
    # per flow: (starts, ends) of On periods meeting [0, T]; ends may exceed T
    on_periods: tuple[tuple[np.ndarray, np.ndarray], ...] = ()

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def with_zero_crossings(self) -> tuple[np.ndarray, np.ndarray]:
        """Breakpoints plus the interior epochs where the workload hits 0."""
        t0, w0, r = self.times[:-1], self.workload[:-1], self.rates
        dt = np.diff(self.times)
        hit = (r < 0) & (w0 > 0) & (w0 < -r * dt)
        tz = t0[hit] + w0[hit] / -r[hit]
        t = np.concatenate([self.times, tz])
        w = np.concatenate([self.workload, np.zeros(tz.size)])
        k = np.argsort(t, kind="stable")
        return t[k], w[k]

    def write_records(self, fh: IO[str]) -> None:
        """One JSON line per breakpoint: epoch, net rate on the next segment, workload."""
        rates = np.append(self.rates, self.rates[-1] if self.rates.size else 0.0)
        for t, r, w in zip(self.times, rates, self.workload):
            fh.write(json.dumps({"t": float(t), "rate": float(r), "workload": float(w)}) + "\n")


def trajectory_from_schedule(times: Sequence[float], rates: Sequence[float], w0: float = 0.0,
                             start: float = 0.0) -> Trajectory:
    """Reflected workload for piecewise-constant net input rate.

    ``times`` are the breakpoints (first 0, last the horizon); ``rates[k]``
    is the net rate on [times[k], times[k+1]).  W_k = S_k - min(0, min_j S_j)
    with S the free increment sum (Lindley in closed form).
    """
    t = np.asarray(times, dtype=float)
    r = np.asarray(rates, dtype=float)
    if t.ndim != 1 or t.size < 2 or r.size != t.size - 1:
        raise ValueError("need m+1 breakpoints and m segment rates")
    dt = np.diff(t)
    if np.any(dt < 0):
        raise ValueError("breakpoints must be nondecreasing")
    s = np.concatenate([[w0], w0 + np.cumsum(r * dt)])
    w = s - np.minimum(np.minimum.accumulate(s), 0.0)
    return Trajectory(t, np.maximum(w, 0.0), r, start)


def _check_stable(flows: Sequence[OnOffFlow], capacity: float, background: float) -> None:
    load = background + sum(f.rho for f in flows)
    if load >= capacity:
        raise UnstableSim(f"mean input {load:.6g} >= capacity {capacity:.6g}")


def _on_periods(on: bool, tt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    starts = np.concatenate([[0.0], tt[1::2]]) if on else tt[0::2]
    ends = tt[0::2] if on else tt[1::2]
    m = min(starts.size, ends.size)
    return starts[:m], ends[:m]


def simulate_replication(flows: Sequence[OnOffFlow], capacity: float, cfg: SimConfig,
                         replication: int) -> Trajectory:
    _check_stable(flows, capacity, cfg.background_rate)
    T = float(cfg.horizon)
    init = init_stationary if cfg.init == "stationary" else init_fresh
    states = init(flows, cfg.seed, replication, cfg.off_law, cfg.off_lomax_index)
    start = 0.0 if cfg.init == "stationary" else cfg.warmup_fraction * T
    rate0 = cfg.background_rate - capacity
    # a zero-jump epoch at the end of the warmup so that segments split there
    epochs, deltas = ([np.array([start])], [np.zeros(1)]) if start > 0 else ([np.empty(0)], [np.empty(0)])
    periods = []
    for f, st in zip(flows, states):
        on0 = st.on
        full = toggle_times(f, st, T, _OffLaw(cfg.off_law, f.off_mean, cfg.off_lomax_index), overshoot=True)
        periods.append(_on_periods(on0, full))
        tt = full[full < T]
        sign = np.where(np.arange(tt.size) % 2 == 0, -1.0, 1.0) * (1.0 if on0 else -1.0)
        epochs.append(tt)
        deltas.append(sign * f.peak_rate)
        if on0:
            rate0 += f.peak_rate
    t = np.concatenate(epochs)
    d = np.concatenate(deltas)
    k = np.argsort(t, kind="stable")
    t, d = t[k], d[k]
    times = np.concatenate([[0.0], t, [T]])
    rates = rate0 + np.concatenate([[0.0], np.cumsum(d)])
    return replace(trajectory_from_schedule(times, rates, start=start), on_periods=tuple(periods))


def simulate_workload(flows: Sequence[OnOffFlow], capacity: float, cfg: SimConfig) -> list[Trajectory]:
    """All replications, in replication-id order."""
    _check_stable(flows, capacity, cfg.background_rate)
    with ThreadPoolExecutor(_workers(cfg.workers)) as ex:
        return list(ex.map(lambda i: simulate_replication(flows, capacity, cfg, i),
                           range(cfg.replications)))


def occupation_times(tr: Trajectory, levels: Sequence[float]) -> tuple[np.ndarray, float]:
    """Exact time spent strictly above each level on [start, T]; also the counted time."""
    t0, w, r = tr.times[:-1], tr.workload[:-1], tr.rates
    dt = np.diff(tr.times)
    keep = t0 >= tr.start
    t0, w, r, dt = t0[keep], w[keep], r[keep], dt[keep]
    up, down = r > 0, r < 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = []
        for x in levels:
            occ = np.where(up, dt - np.clip((x - w) / r, 0.0, dt),
                           np.where(down, np.clip((w - x) / -r, 0.0, dt), np.where(w > x, dt, 0.0)))
            out.append(occ.sum())
    return np.array(out), float(dt.sum())


def time_average_workload(tr: Trajectory) -> float:
    t0, w, r = tr.times[:-1], tr.workload[:-1], tr.rates
    dt = np.diff(tr.times)
    keep = t0 >= tr.start
    w, r, dt = w[keep], r[keep], dt[keep]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        tau = np.where(r < 0, np.minimum(dt, w / -r), dt)
    area = w * tau + 0.5 * r * tau ** 2
    return float(area.sum() / dt.sum())


def normalize_levels(levels: Sequence[float]) -> tuple[float, ...]:
    lv = sorted({float(x) for x in levels})
    if not lv or lv[0] <= 0:
        raise ConfigError("levels must be a nonempty list of positive values")
    return tuple(lv)


def control_drifts(flows: Sequence[OnOffFlow], capacity: float, background: float = 0.0) -> np.ndarray:
    """d_i = r_i + background + sum_{j != i} rho_j - c for each flow."""
    rho = np.array([f.rho for f in flows])
    return np.array([f.peak_rate for f in flows]) + background + rho.sum() - rho - capacity


def residual_occupation(tr: Trajectory, drifts: Sequence[float], levels: Sequence[float]) -> np.ndarray:
    """Time on [start, T] that flow i is On with remaining On time above x/d_i.

    Rows follow the flows with d_i > 0, columns follow ``levels``.
    """
    T, out = tr.horizon, []
    for (s, e), d in zip(tr.on_periods, drifts):
        if d <= 0:
            continue
        lo = np.maximum(s, tr.start)
        out.append([np.clip(np.minimum(e - x / d, T) - lo, 0.0, None).sum() for x in levels])
    return np.array(out).reshape(-1, len(levels))


def control_means(flows: Sequence[OnOffFlow], drifts: Sequence[float], levels: Sequence[float]) -> np.ndarray:
    """Stationary time fraction p_i P{A_i^r > x/d_i} of each control."""
    x = np.asarray(levels, dtype=float)
    rows = [f.p * np.asarray(f.on.residual_tail(x / d), dtype=float) for f, d in zip(flows, drifts) if d > 0]
    return np.array(rows).reshape(-1, x.size)


def control_variate(y: np.ndarray, c: np.ndarray, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Regression estimator per level.

    ``y`` is replications x levels, ``c`` replications x controls x levels
    and ``mu`` controls x levels.  Returns the intercept of y on (c - mu)
    and its least-squares standard error; nan where there are no controls
    or too few replications to fit them.
    """
    R, L = y.shape
    m = c.shape[1]
    est, se = np.full(L, np.nan), np.full(L, np.nan)
    if m == 0 or R < m + 2:
        return est, se
    for k in range(L):
        Z = np.column_stack([np.ones(R), c[:, :, k] - mu[:, k]])
        coef, _, rank, _ = np.linalg.lstsq(Z, y[:, k], rcond=None)
        if rank < m + 1:
            # a control that never fired carries no information; fall back to the plain mean
            est[k], se[k] = y[:, k].mean(), y[:, k].std(ddof=1) / np.sqrt(R)
            continue
        resid = y[:, k] - Z @ coef
        s2 = resid @ resid / (R - m - 1)
        est[k] = coef[0]
        se[k] = np.sqrt(s2 * np.linalg.inv(Z.T @ Z)[0, 0])
    return est, se


@dataclass(frozen=True)
class EmpiricalTail:
    levels: tuple[float, ...]
    estimates: np.ndarray  # pooled time fraction above each level
    per_rep: np.ndarray  # replications x levels
    mean: np.ndarray  # mean of per-replication fractions
    stderr: np.ndarray
    total_time: float
    mean_workload: np.ndarray = field(default_factory=lambda: np.empty(0))
    # control-variate estimate and its standard error; nan when unavailable
    cv_estimates: np.ndarray = field(default_factory=lambda: np.empty(0))
    cv_stderr: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def replications(self) -> int:
        return int(self.per_rep.shape[0])


def _summarize(tr: Trajectory, lv: tuple[float, ...], drifts: np.ndarray | None) -> tuple:
    occ, span = occupation_times(tr, lv)
    ctrl = residual_occupation(tr, drifts, lv) if drifts is not None else None
    return occ, span, time_average_workload(tr), ctrl


def _aggregate(lv: tuple[float, ...], summaries: Sequence[tuple], mu: np.ndarray | None) -> EmpiricalTail:
    occ, span, wbar, ctrl = zip(*summaries)
    occ, span = np.array(occ), np.array(span)
    if not span.sum() > 0:
        raise ValueError("no simulated time to estimate from")
    per = np.minimum.accumulate(np.clip(occ / span[:, None], 0.0, 1.0), axis=1)
    pooled = np.minimum.accumulate(np.clip(occ.sum(axis=0) / span.sum(), 0.0, 1.0))
    R = per.shape[0]
    se = per.std(axis=0, ddof=1) / np.sqrt(R) if R > 1 else np.full(len(lv), np.nan)
    if mu is not None:
        c = np.array(ctrl) / span[:, None, None]
        cv, cv_se = control_variate(occ / span[:, None], c, mu)
    else:
        cv, cv_se = np.full(len(lv), np.nan), np.full(len(lv), np.nan)
    return EmpiricalTail(lv, pooled, per, per.mean(axis=0), se, float(span.sum()), np.array(wbar), cv, cv_se)


def estimate_tail(trajectories: Sequence[Trajectory], levels: Sequence[float],
                  flows: Sequence[OnOffFlow] | None = None, capacity: float | None = None,
                  background: float = 0.0) -> EmpiricalTail:
    """Occupation-fraction estimates; pass the simulated flows to get the control-variate estimate.

    The control means are stationary values, so only trajectories with a
    stationary start (``start == 0``) qualify.
    """
    lv = normalize_levels(levels)
    drifts = mu = None
    if flows is not None and capacity is not None and all(tr.start == 0 and tr.on_periods
                                                          for tr in trajectories):
        drifts = control_drifts(flows, capacity, background)
        mu = control_means(flows, drifts, lv)
    return _aggregate(lv, [_summarize(tr, lv, drifts) for tr in trajectories], mu)


def run_simulation(sys: SystemSpec, cfg: SimConfig, records: IO[str] | None = None) -> EmpiricalTail:
    """Simulate ``sys``; its light-traffic rate replaces ``cfg.background_rate``.

    Replications are summarized as they finish and then dropped, unless
    ``records`` asks for the event stream.
    """
    if sys.instant_flows:
        raise ConfigError("instantaneous flows are not simulated")
    if not cfg.levels:
        raise ConfigError("simulation needs at least one level")
    cfg = replace(cfg, background_rate=sys.light_rate)
    flows, c = sys.heavy_flows, sys.capacity
    _check_stable(flows, c, cfg.background_rate)
    lv = normalize_levels(cfg.levels)
    drifts = mu = None
    if cfg.init == "stationary":
        drifts = control_drifts(flows, c, cfg.background_rate)
        mu = control_means(flows, drifts, lv)

    def one(i: int) -> tuple:
        tr = simulate_replication(flows, c, cfg, i)
        return _summarize(tr, lv, drifts), (tr if records is not None else None)

    with ThreadPoolExecutor(_workers(cfg.workers)) as ex:
        done = list(ex.map(one, range(cfg.replications)))
    if records is not None:
        for _, tr in done:
            tr.write_records(records)
    return _aggregate(lv, [d[0] for d in done], mu)
