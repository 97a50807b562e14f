"""Command line: analyze, simulate, compare and manysources.

Config file (JSON)::

    {
      "capacity": 1.0,
      "light_rate": 0.25,
      "flows": [{"id": "f1", "peak_rate": 0.3, "mean_rate": 0.1, "nu": 2.0}, ...],
      "instant_flows": [{"id": "b1", "burst": {"kind": "pareto", "scale": 1, "index": 2.5},
                         "interarrival_mean": 10}],
      "analyze": {"x": [10, 100], "samples": 1000000, "seed": 0},
      "sim": {"horizon": 1e6, "replications": 8, "seed": 0, "levels": [20, 50],
              "init": "stationary", "off_law": "exponential"},
      "manysources": {"classes": [{"fraction": 0.6, "peak_rate": 1.5, "mean_rate": 0.3,
                                   "nu": 1.6}, ...], "n": [10, 100]}
    }

A flow is either the shorthand (peak_rate, mean_rate, nu[, kind]) with a
unit-scale On law, or the canonical form (peak_rate, on{kind, scale, index},
off_mean) that ``RunConfig.to_dict`` writes back.

Exit codes: 0 success, 2 invalid input, 3 domain refusal.  With
``--records PATH`` the simulate command also writes one JSON line per
workload breakpoint: {"t": epoch, "rate": net rate until the next epoch,
"workload": workload at the epoch}.

empirical.csv and compare.csv carry, next to the plain occupation
estimate, the control-variate estimate (cv_tail / cv_empirical, with
cv_ratio against the asymptote); it is nan when the simulation starts
with a warmup instead of in stationarity.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .asymptotics import workload_tail
from .dominance import dominant_sets
from .errors import ConfigError, DomainRefusal, HTQLError
from .kappa import DEFAULT_SAMPLES, _workers
from .manysources import ClassMix, finite_n_exponent, index_rule
from .model import InstantFlow, OnOffFlow, SystemSpec
from .simulator import SimConfig, run_simulation

EXIT_OK, EXIT_INPUT, EXIT_REFUSAL = 0, 2, 3


def _increasing(xs: Sequence[float], what: str) -> tuple[float, ...]:
    xs = tuple(float(x) for x in xs)
    if any(not (x > 0 and math.isfinite(x)) for x in xs):
        raise ConfigError(f"{what} must be positive and finite")
    if any(b <= a for a, b in zip(xs, xs[1:])):
        raise ConfigError(f"{what} must be strictly increasing")
    return xs


@dataclass(frozen=True)
class RunConfig:
    system: SystemSpec | None = None
    flow_ids: tuple[str, ...] = ()
    instant_ids: tuple[str, ...] = ()
    x: tuple[float, ...] = ()
    samples: int = DEFAULT_SAMPLES
    seed: int = 0
    sim: SimConfig | None = None
    mix: ClassMix | None = None
    n_values: tuple[int, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        try:
            return cls._parse(d)
        except HTQLError:
            raise
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise ConfigError(f"invalid config: {type(e).__name__}: {e}") from e

    @classmethod
    def _parse(cls, d: dict) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        system, ids, iids = None, (), ()
        if "flows" in d or "capacity" in d:
            flows_raw = list(d.get("flows", []))
            inst_raw = list(d.get("instant_flows", []))
            ids = tuple(str(f.get("id", f"f{i + 1}")) for i, f in enumerate(flows_raw))
            iids = tuple(str(f.get("id", f"b{i + 1}")) for i, f in enumerate(inst_raw))
            if len(set(ids + iids)) != len(ids) + len(iids):
                raise ConfigError("flow ids must be unique")
            system = SystemSpec(float(d["capacity"]), float(d.get("light_rate", 0.0)),
                                tuple(OnOffFlow.from_dict(f) for f in flows_raw),
                                tuple(InstantFlow.from_dict(f) for f in inst_raw))
        an = d.get("analyze", {})
        x = _increasing(an.get("x", ()), "analyze.x")
        samples = int(an.get("samples", DEFAULT_SAMPLES))
        if samples < 2:
            raise ConfigError("analyze.samples must be at least 2")
        seed = int(an.get("seed", 0))
        sim = None
        if "sim" in d:
            s = dict(d["sim"])
            s.pop("background_rate", None)
            levels = _increasing(s.pop("levels", ()), "sim.levels")
            sim = SimConfig(levels=levels, background_rate=system.light_rate if system else 0.0, **s)
        mix, nv = None, ()
        if "manysources" in d:
            ms = d["manysources"]
            mix = ClassMix.from_dict(ms)
            nv = tuple(int(n) for n in ms.get("n", ()))
            if any(n < 1 for n in nv):
                raise ConfigError("manysources.n values must be positive integers")
        return cls(system, ids, iids, x, samples, seed, sim, mix, nv)

    def to_dict(self) -> dict:
        out: dict = {}
        if self.system is not None:
            out["capacity"] = self.system.capacity
            out["light_rate"] = self.system.light_rate
            out["flows"] = [{"id": i, **f.to_dict()} for i, f in zip(self.flow_ids, self.system.heavy_flows)]
            out["instant_flows"] = [{"id": i, **f.to_dict()}
                                    for i, f in zip(self.instant_ids, self.system.instant_flows)]
        out["analyze"] = {"x": list(self.x), "samples": self.samples, "seed": self.seed}
        if self.sim is not None:
            s = self.sim.to_dict()
            s.pop("background_rate")
            out["sim"] = s
        if self.mix is not None:
            out["manysources"] = {**self.mix.to_dict(), "n": list(self.n_values)}
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def require_system(self) -> SystemSpec:
        if self.system is None or not self.system.heavy_flows:
            raise ConfigError("config needs capacity and a nonempty flows list")
        return self.system


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------- output

def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if v != 0 and abs(v) < 1e-4:
        return f"{v:.10e}"
    return f"{v:.12g}"


def write_csv(path: Path, cfg: RunConfig, seed: int, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_sha256={cfg.digest()} seed={seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- commands

def _analysis(cfg: RunConfig, xs: Sequence[float]):
    sys_ = cfg.require_system()
    report = dominant_sets(sys_)
    wt = workload_tail(sys_, xs, samples=cfg.samples, seed=cfg.seed, report=report)
    return sys_, report, wt


def _bounds(wt) -> tuple[np.ndarray, np.ndarray]:
    sets = [t for t in wt.terms if t.kind == "set"]
    nan = np.full(len(wt.x), np.nan)
    if not sets:
        return nan, nan
    lower = np.max([t.lower for t in sets], axis=0)
    upper = nan if any(t.upper is None for t in sets) else np.sum([t.upper for t in sets], axis=0)
    return lower, upper


def run_analyze(cfg: RunConfig, out: Path) -> dict:
    if not cfg.x:
        raise ConfigError("analyze needs an x grid (analyze.x or --levels)")
    sys_, report, wt = _analysis(cfg, cfg.x)
    dom = report.to_dict(cfg.flow_ids, cfg.instant_ids)
    dom["terms"] = [{"label": t.label, "kind": t.kind, "capacity": t.capacity,
                     "kappa": None if t.kappa is None else t.kappa.value,
                     "kappa_stderr": None if t.kappa is None else t.kappa.standard_error}
                    for t in wt.terms]
    write_json(out / "dominance.json", dom)
    names = ["term_" + ("+".join(cfg.flow_ids[j] for j in t.members) if t.kind == "set"
                        else cfg.instant_ids[t.members[0]]) for t in wt.terms]
    lower, upper = _bounds(wt)
    ks = [t.kappa for t in wt.terms if t.kappa is not None]
    kappa = sum(k.value for k in ks) if ks else float("nan")
    kse = sum(k.standard_error for k in ks) if ks else float("nan")
    rows = [[x, wt.value[i], *(t.value[i] for t in wt.terms), lower[i], upper[i], kappa, kse]
            for i, x in enumerate(wt.x)]
    write_csv(out / "tail.csv", cfg, cfg.seed,
              ["x", "asymptote", *names, "lower_bound", "upper_bound", "kappa", "kappa_stderr"], rows)
    return dom


def _sim_config(cfg: RunConfig) -> SimConfig:
    if cfg.sim is None:
        raise ConfigError("config has no sim block")
    sim = cfg.sim
    if not sim.levels:
        if not cfg.x:
            raise ConfigError("simulation needs levels (sim.levels, analyze.x or --levels)")
        sim = replace(sim, levels=cfg.x)
    return replace(sim, workers=_workers(None))


def run_simulate(cfg: RunConfig, out: Path, records: Path | None = None):
    sys_ = cfg.require_system()
    sim = _sim_config(cfg)
    if records is not None:
        with open(records, "w", encoding="utf-8") as fh:
            emp = run_simulation(sys_, sim, fh)
    else:
        emp = run_simulation(sys_, sim)
    rows = [[x, emp.estimates[i], emp.stderr[i], emp.replications, emp.total_time, emp.cv_estimates[i],
             emp.cv_stderr[i]] for i, x in enumerate(emp.levels)]
    write_csv(out / "empirical.csv", cfg, sim.seed,
              ["x", "empirical_tail", "stderr", "replications", "total_time", "cv_tail", "cv_stderr"], rows)
    return emp


def run_compare(cfg: RunConfig, out: Path):
    sys_ = cfg.require_system()
    sim = _sim_config(cfg)
    xs = sim.levels
    _, _, wt = _analysis(cfg, xs)
    emp = run_simulation(sys_, sim)
    lower, _ = _bounds(wt)
    rows = []
    for i, x in enumerate(xs):
        e, a = emp.estimates[i], wt.value[i]
        se = emp.stderr[i] if np.isfinite(emp.stderr[i]) else 0.0
        ok = bool(np.isnan(lower[i]) or e >= lower[i] - 3.0 * se)
        cv = emp.cv_estimates[i]
        rows.append([x, e, a, e / a if a > 0 else float("nan"), lower[i], ok, cv,
                     cv / a if a > 0 else float("nan")])
    write_csv(out / "compare.csv", cfg, sim.seed,
              ["x", "empirical", "asymptote", "ratio", "lower_bound", "within_bounds", "cv_empirical",
               "cv_ratio"], rows)
    return rows


def run_manysources(cfg: RunConfig, out: Path) -> dict:
    if cfg.mix is None:
        raise ConfigError("config has no manysources block")
    mix = cfg.mix
    rule = index_rule(mix, exact=True)
    rep = {
        "order": [k + 1 for k in rule.order],
        "gamma": [float(g) for g in rule.gamma],
        "sigma": [float(s) for s in rule.sigma],
        "level": rule.level,
        "level_class": rule.order[rule.level - 1] + 1,
        "peak_fractions": [float(q) for q in rule.peak_fractions],
        "mu": float(rule.mu),
        "mu_exact": str(rule.mu),
        "finite_n": [finite_n_exponent(mix, n).to_dict(mix.order) for n in cfg.n_values],
    }
    write_json(out / "manysources.json", rep)
    rows = [[r["n"], r["mu_n"], r["lower"], r["upper"], r["lower_adjusted"], r["upper_adjusted"]]
            for r in rep["finite_n"]]
    write_csv(out / "manysources.csv", cfg, 0,
              ["n", "mu_n", "lower", "upper", "lower_adjusted", "upper_adjusted"], rows)
    return rep


# ---------------------------------------------------------------- entry point

def _levels(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise ConfigError(f"--levels: {e}") from e


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="htql", description="Heavy-tailed fluid queue tail analysis.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("analyze", "dominant sets and tail asymptotes"),
                        ("simulate", "empirical workload tail by simulation"),
                        ("compare", "simulation against the asymptote"),
                        ("manysources", "index rule and finite-n exponents")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="JSON config file")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--seed", type=int)
        if name != "manysources":
            s.add_argument("--levels", help="comma-separated x values")
        if name in ("analyze", "compare"):
            s.add_argument("--samples", type=int, help="Monte Carlo samples for kappa")
        if name in ("simulate", "compare"):
            s.add_argument("--horizon", type=float)
            s.add_argument("--reps", type=int)
        if name == "simulate":
            s.add_argument("--records", help="write per-breakpoint JSON lines here")
    return p


def _apply_flags(cfg: RunConfig, a: argparse.Namespace) -> RunConfig:
    upd: dict = {}
    if getattr(a, "levels", None):
        upd["x"] = _increasing(_levels(a.levels), "--levels")
    if getattr(a, "samples", None) is not None:
        if a.samples < 2:
            raise ConfigError("--samples must be at least 2")
        upd["samples"] = a.samples
    if a.seed is not None:
        upd["seed"] = a.seed
    cfg = replace(cfg, **upd)
    if cfg.sim is not None:
        s: dict = {}
        if "x" in upd:
            s["levels"] = upd["x"]
        if a.seed is not None:
            s["seed"] = a.seed
        if getattr(a, "horizon", None) is not None:
            s["horizon"] = a.horizon
        if getattr(a, "reps", None) is not None:
            s["replications"] = a.reps
        cfg = replace(cfg, sim=replace(cfg.sim, **s))
    elif getattr(a, "horizon", None) is not None or getattr(a, "reps", None) is not None:
        raise ConfigError("--horizon/--reps need a sim block in the config")
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_flags(load_config(args.config), args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "analyze":
            dom = run_analyze(cfg, out)
            print(f"dominant: {dom['dominant']}  mu*: {dom['mu_star']}  exponent: {dom['exponent']}")
        elif args.command == "simulate":
            emp = run_simulate(cfg, out, Path(args.records) if args.records else None)
            print(f"simulated time {emp.total_time:g} over {emp.replications} replications")
        elif args.command == "compare":
            rows = run_compare(cfg, out)
            print("ratios: " + ", ".join(fmt(r[3]) for r in rows))
        else:
            rep = run_manysources(cfg, out)
            print(f"mu = {rep['mu_exact']} ({rep['mu']:g}), l = {rep['level']}")
    except DomainRefusal as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_REFUSAL
    except HTQLError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, OSError) as e:
        print(f"ConfigError: {e}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
