"""Flows, On-period distributions and multiplexing systems."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import LightRegime, RateOrder, UnstableSystem

RATE_TOL = 1e-12

FAMILIES = ("pareto", "lomax")


@dataclass(frozen=True)
class HeavyTailDist:
    """Regularly varying law on (0, inf) with tail index ``index`` > 1.

    ``pareto``: P{X > x} = (scale/x)^index for x >= scale.
    ``lomax``:  P{X > x} = (1 + x/scale)^-index.
    """

    kind: str
    scale: float
    index: float

    def __post_init__(self) -> None:
        if self.kind not in FAMILIES:
            # lognormal/Weibull are subexponential but not regularly varying;
            # the reduced-load results do not apply to them
            raise ValueError(f"unsupported family {self.kind!r}; expected one of {FAMILIES}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("scale must be positive and finite")
        if not self.index > 1:
            raise ValueError("tail index must exceed 1 (finite mean)")

    @classmethod
    def pareto(cls, xm: float, nu: float) -> HeavyTailDist:
        return cls("pareto", float(xm), float(nu))

    @classmethod
    def lomax(cls, sigma: float, nu: float) -> HeavyTailDist:
        return cls("lomax", float(sigma), float(nu))

    @classmethod
    def with_mean(cls, kind: str, mean: float, nu: float) -> HeavyTailDist:
        if kind == "pareto":
            return cls(kind, mean * (nu - 1.0) / nu, nu)
        return cls(kind, mean * (nu - 1.0), nu)

    @property
    def nu(self) -> float:
        return self.index

    def mean(self) -> float:
        if self.kind == "pareto":
            return self.index * self.scale / (self.index - 1.0)
        return self.scale / (self.index - 1.0)

    def scaled(self, factor: float) -> HeavyTailDist:
        return HeavyTailDist(self.kind, self.scale * factor, self.index)

    def tail(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "pareto":
            out = np.where(x <= self.scale, 1.0, (self.scale / np.maximum(x, self.scale)) ** self.index)
        else:
            out = (1.0 + np.maximum(x, 0.0) / self.scale) ** (-self.index)
        return out if out.ndim else float(out)

    def residual_tail(self, x):
        """P{X^r > x}, X^r the stationary residual lifetime (equilibrium law)."""
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        nu, s = self.index, self.scale
        if self.kind == "pareto":
            alpha = self.mean()
            below = (s - x + s / (nu - 1.0)) / alpha
            above = (s / np.maximum(x, s)) ** (nu - 1.0) / nu
            out = np.where(x < s, below, above)
        else:
            out = (1.0 + x / s) ** (1.0 - nu)
        return out if out.ndim else float(out)

    def tail_inverse(self, q):
        """x with tail(x) = q, for q in (0, 1]."""
        q = np.asarray(q, dtype=float)
        if self.kind == "pareto":
            out = self.scale * q ** (-1.0 / self.index)
        else:
            out = self.scale * (q ** (-1.0 / self.index) - 1.0)
        return out if out.ndim else float(out)

    def residual_tail_inverse(self, q):
        """x with residual_tail(x) = q, for q in (0, 1]."""
        q = np.asarray(q, dtype=float)
        nu, s = self.index, self.scale
        if self.kind == "pareto":
            alpha = self.mean()
            # residual_tail(scale) = 1/nu separates the linear and power branches
            out = np.where(q >= 1.0 / nu, alpha * (1.0 - q), s * (nu * q) ** (-1.0 / (nu - 1.0)))
        else:
            out = s * (q ** (-1.0 / (nu - 1.0)) - 1.0)
        return out if out.ndim else float(out)

    def sample(self, rng: np.random.Generator, size=None):
        return self.tail_inverse(1.0 - rng.random(size))

    def sample_residual(self, rng: np.random.Generator, size=None, above: float = 0.0):
        """Draw X^r, optionally conditioned on X^r > ``above``."""
        q = (1.0 - rng.random(size)) * self.residual_tail(above)
        return self.residual_tail_inverse(q)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scale": self.scale, "index": self.index}

    @classmethod
    def from_dict(cls, d: dict) -> HeavyTailDist:
        return cls(str(d["kind"]), float(d["scale"]), float(d["index"]))


@dataclass(frozen=True)
class OnOffFlow:
    """Fluid On-Off source: rate ``peak_rate`` while On, silent while Off.

    Only the Off mean enters the asymptotics; the Off law is picked by the
    simulator.
    """

    peak_rate: float
    on: HeavyTailDist
    off_mean: float

    def __post_init__(self) -> None:
        if not self.peak_rate > 0:
            raise ValueError("peak_rate must be positive")
        if not self.off_mean > 0:
            raise ValueError("off_mean must be positive")

    @classmethod
    def from_rates(cls, peak_rate: float, mean_rate: float, nu: float,
                   kind: str = "pareto", on_mean: float | None = None) -> OnOffFlow:
        """Build a flow from (r, rho, nu); the On mean defaults to that of a unit-scale law."""
        if not 0 < mean_rate < peak_rate:
            raise RateOrder("need 0 < mean_rate < peak_rate")
        on = (HeavyTailDist(kind, 1.0, nu) if on_mean is None
              else HeavyTailDist.with_mean(kind, on_mean, nu))
        p = mean_rate / peak_rate
        return cls(float(peak_rate), on, on.mean() * (1.0 - p) / p)

    @property
    def lam(self) -> float:
        return 1.0 / self.off_mean

    @property
    def nu(self) -> float:
        return self.on.index

    @property
    def p(self) -> float:
        la = self.lam * self.on.mean()
        return la / (1.0 + la)

    @property
    def rho(self) -> float:
        return self.p * self.peak_rate

    @property
    def theta(self) -> float:
        """Peak minus mean rate."""
        return self.peak_rate - self.rho

    def scaled(self, rate_factor: float) -> OnOffFlow:
        return OnOffFlow(self.peak_rate * rate_factor, self.on, self.off_mean)

    def to_dict(self) -> dict:
        return {"peak_rate": self.peak_rate, "on": self.on.to_dict(), "off_mean": self.off_mean}

    @classmethod
    def from_dict(cls, d: dict) -> OnOffFlow:
        if "off_mean" in d:
            return cls(float(d["peak_rate"]), HeavyTailDist.from_dict(d["on"]), float(d["off_mean"]))
        on = d.get("on")
        if on is not None:
            dist = HeavyTailDist.from_dict(on)
            p = float(d["mean_rate"]) / float(d["peak_rate"])
            if not 0 < p < 1:
                raise RateOrder("need 0 < mean_rate < peak_rate")
            return cls(float(d["peak_rate"]), dist, dist.mean() * (1 - p) / p)
        return cls.from_rates(float(d["peak_rate"]), float(d["mean_rate"]), float(d["nu"]),
                              kind=d.get("kind", "pareto"))


def residual_tail(d: HeavyTailDist, x):
    return d.residual_tail(x)


def flow_rates(f: OnOffFlow) -> tuple[float, float]:
    """(fraction of time On, mean rate)."""
    return f.p, f.rho


@dataclass(frozen=True)
class InstantFlow:
    """Renewal stream of instantaneous bursts."""

    burst: HeavyTailDist
    interarrival_mean: float

    def __post_init__(self) -> None:
        if not self.interarrival_mean > 0:
            raise ValueError("interarrival_mean must be positive")

    @property
    def nu(self) -> float:
        return self.burst.index

    @property
    def rho(self) -> float:
        return self.burst.mean() / self.interarrival_mean

    def scaled(self, traffic_factor: float) -> InstantFlow:
        return InstantFlow(self.burst.scaled(traffic_factor), self.interarrival_mean)

    def to_dict(self) -> dict:
        return {"burst": self.burst.to_dict(), "interarrival_mean": self.interarrival_mean}

    @classmethod
    def from_dict(cls, d: dict) -> InstantFlow:
        return cls(HeavyTailDist.from_dict(d["burst"]), float(d["interarrival_mean"]))


@dataclass(frozen=True)
class SystemSpec:
    capacity: float
    light_rate: float
    heavy_flows: tuple[OnOffFlow, ...]
    instant_flows: tuple[InstantFlow, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "heavy_flows", tuple(self.heavy_flows))
        object.__setattr__(self, "instant_flows", tuple(self.instant_flows))
        if not self.capacity > 0:
            raise ValueError("capacity must be positive")
        if self.light_rate < 0:
            raise ValueError("light_rate must be nonnegative")

    @property
    def total_rate(self) -> float:
        return (self.light_rate + sum(f.rho for f in self.heavy_flows)
                + sum(f.rho for f in self.instant_flows))

    @property
    def peak_load(self) -> float:
        """Light mean + heavy peaks + instantaneous means."""
        return (self.light_rate + sum(f.peak_rate for f in self.heavy_flows)
                + sum(f.rho for f in self.instant_flows))

    def normalized(self) -> SystemSpec:
        """Same system in units where the capacity is 1 (traffic measured in capacity-time)."""
        k = 1.0 / self.capacity
        if k == 1.0:
            return self
        return SystemSpec(1.0, self.light_rate * k,
                          tuple(f.scaled(k) for f in self.heavy_flows),
                          tuple(f.scaled(k) for f in self.instant_flows))

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "light_rate": self.light_rate,
            "flows": [f.to_dict() for f in self.heavy_flows],
            "instant_flows": [f.to_dict() for f in self.instant_flows],
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ValidationReport:
    stable: bool
    heavy: bool
    total_rate: float
    peak_load: float
    normalized: SystemSpec = field(repr=False)


def validate_system(s: SystemSpec, require_heavy: bool = True) -> ValidationReport:
    """Check stability and the heavy-regime condition; return the unit-capacity system."""
    norm = s.normalized()
    rho, peak = norm.total_rate, norm.peak_load
    if rho >= 1.0 - RATE_TOL:
        raise UnstableSystem(f"mean input {rho:.6g} >= capacity (normalized)")
    heavy = peak > 1.0 + RATE_TOL
    if require_heavy and not heavy:
        raise LightRegime(
            f"light mean + heavy peaks = {peak:.6g} <= capacity: workload tail is not "
            "governed by the heavy-tailed On periods")
    return ValidationReport(True, heavy, rho, peak, norm)


@dataclass(frozen=True)
class ReducedSystem:
    """Flows J = {0..N-1} against capacity c, with every flow needed for positive drift."""

    flows: tuple[OnOffFlow, ...]
    capacity: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "flows", tuple(self.flows))
        if not self.flows:
            raise ValueError("reduced system needs at least one flow")
        r = self.total_peak
        lo = r - min(f.theta for f in self.flows)
        if not lo < self.capacity < r:
            raise RateOrder(f"capacity {self.capacity:.6g} outside ({lo:.6g}, {r:.6g}): "
                            "all flows must be On for positive drift")

    @property
    def n(self) -> int:
        return len(self.flows)

    @property
    def total_peak(self) -> float:
        return sum(f.peak_rate for f in self.flows)

    @property
    def drift(self) -> float:
        return self.total_peak - self.capacity

    @property
    def gamma(self) -> float:
        return 1.0 / self.drift

    def g(self, members: Sequence[int]) -> np.ndarray:
        d = self.drift
        return np.array([self.flows[j].theta / d for j in members])

    def scaled(self, s: float) -> ReducedSystem:
        return ReducedSystem(tuple(f.scaled(s) for f in self.flows), self.capacity * s)
