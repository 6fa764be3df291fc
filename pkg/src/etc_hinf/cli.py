"""Command-line interface: config ingestion, experiment commands, and
CSV/JSON persistence.

Commands: ``gamma-table``, ``simulate``, ``adversary``, ``sweep``,
``check-a5``.  Exit codes: 0 success, 2 configuration error, 3 numerical
failure, 4 probing-regularity (assumption-5) violation with a printed
witness.
"""

import argparse
import concurrent.futures
import json
import os
import sys

import numpy as np

from . import adversary, policies, riccati, simcore
from .errors import (
    AssumptionFiveViolated,
    ConfigError,
    DegenerateTrace,
    EtcHinfError,
)

try:
    import jsonschema
except ImportError:  # pragma: no cover - declared dependency
    jsonschema = None

_MATRIX = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
_VECTOR = {"type": "array", "items": {"type": "number"}}

_SCHEDULER_SCHEMA = {
    "type": "object",
    "properties": {
        "type": {"enum": ["periodic", "pattern", "threshold", "game_trigger",
                          "deadband"]},
        "h": {"type": "integer", "minimum": 1},
        "bits": {"type": "string"},
        "x_weight": _MATRIX,
        "rho": {"type": "number", "exclusiveMinimum": 0},
        "hbar": {"type": "integer", "minimum": 1},
        "gamma_bar": {"type": "number", "exclusiveMinimum": 0},
        "weight_mode": {"enum": ["direct", "inverse"]},
        "inner": {"type": "object"},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "eps_low": {"type": "number", "exclusiveMinimum": 0},
        "tol_match": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["type"],
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "system": {
            "type": "object",
            "properties": {"A": _MATRIX, "B": _MATRIX, "Q": _MATRIX, "R": _MATRIX},
            "required": ["A", "B", "Q", "R"],
        },
        "controller": {
            "type": "object",
            "properties": {
                "type": {"enum": ["hold", "game_predictive"]},
                "k": _MATRIX,
                "gamma_bar": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["type"],
        },
        "scheduler": _SCHEDULER_SCHEMA,
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "gamma_tilde": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "h": {"type": "integer", "minimum": 1},
        "hbar": {"type": "integer", "minimum": 1},
        "w0": _VECTOR,
        "eps_bar": {"type": "number", "exclusiveMinimum": 0},
        "eps_low": {"type": "number", "exclusiveMinimum": 0},
        "horizon": {"type": "integer", "minimum": 1},
        "disturbance": {
            "type": "object",
            "properties": {
                "type": {"enum": ["zero", "file", "probing", "adversary"]},
                "path": {"type": "string"},
                "eps": {"type": "number"},
                "w0_override": {"type": "boolean"},
            },
            "required": ["type"],
        },
        "tolerances": {
            "type": "object",
            "properties": {
                "tol_gamma": {"type": "number", "exclusiveMinimum": 0},
                "tol_fixpoint": {"type": "number", "exclusiveMinimum": 0},
                "grid_points": {"type": "integer", "minimum": 3},
                "rate_tol": {"type": "number", "exclusiveMinimum": 0},
                "zeta_q_max": {"type": "integer", "minimum": 1},
                "max_iter": {"type": "integer", "minimum": 1},
            },
        },
        "sweep": {
            "type": "object",
            "properties": {
                "h_list": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "schedulers": {"type": "array", "items": _SCHEDULER_SCHEMA},
                "gamma_margin": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "check_a5": {
            "type": "object",
            "properties": {
                "samples": {"type": "integer", "minimum": 0},
                "radius": {"type": "number", "exclusiveMinimum": 0},
                "grid_points": {"type": "integer", "minimum": 2},
                "pilot_horizon": {"type": "integer", "minimum": 1},
            },
        },
        "seed": {"type": "integer"},
    },
    "required": ["system"],
}


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError("cannot read config %s: %s" % (path, exc)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config %s is not valid JSON: %s" % (path, exc)) from exc
    if jsonschema is not None:
        try:
            jsonschema.validate(cfg, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError("config %s: %s" % (path, exc.message)) from exc
    return cfg


def build_system(cfg):
    sysd = cfg["system"]
    return riccati.SystemModel.from_matrices(sysd["A"], sysd["B"], sysd["Q"], sysd["R"])


def _tol(cfg, key, default):
    return cfg.get("tolerances", {}).get(key, default)


def build_controller(cfg, sysm, bundles):
    spec = cfg.get("controller")
    if spec is None:
        raise ConfigError("config needs a controller")
    if spec["type"] == "hold":
        if "k" in spec:
            return policies.HoldController(sysm, spec["k"])
        gb = spec.get("gamma_bar", cfg.get("gamma"))
        if gb is None:
            raise ConfigError("hold controller needs 'k' or 'gamma_bar'")
        return policies.HoldController(sysm, bundles(gb).k_gain)
    gb = spec.get("gamma_bar", cfg.get("gamma"))
    if gb is None:
        raise ConfigError("game_predictive controller needs 'gamma_bar'")
    return policies.GamePredictiveController(sysm, bundles(gb))


def build_scheduler(spec, cfg, sysm, bundles):
    kind = spec["type"]
    if kind == "periodic":
        return policies.PeriodicScheduler(spec.get("h", cfg.get("h", 1)))
    if kind == "pattern":
        return policies.PatternScheduler(spec["bits"])
    if kind == "threshold":
        return policies.ThresholdScheduler(
            spec["x_weight"], spec["rho"], spec.get("hbar", cfg.get("hbar", 2)))
    if kind == "game_trigger":
        gb = spec.get("gamma_bar", cfg.get("gamma"))
        return policies.GameTriggerScheduler(
            sysm, bundles(gb), spec.get("hbar", cfg.get("hbar", 2)),
            weight_mode=spec.get("weight_mode", "direct"))
    if kind == "deadband":
        inner = build_scheduler(spec["inner"], cfg, sysm, bundles)
        gamma = spec.get("gamma", cfg.get("gamma"))
        h = cfg.get("h", 1)
        return policies.DeadbandWrappedScheduler(
            inner, sysm, bundles(gamma, h),
            eps_low=spec.get("eps_low", cfg.get("eps_low", 0.03)),
            tol_match=spec.get("tol_match", 1e-9))
    raise ConfigError("unknown scheduler type %r" % kind)


class _BundleCache:
    def __init__(self, sysm, cfg):
        self.sysm = sysm
        self.cfg = cfg
        self._cache = {}

    def __call__(self, gamma, h=None):
        key = (float(gamma), h)
        if key not in self._cache:
            self._cache[key] = riccati.make_bundle(
                self.sysm, gamma, h=h,
                tol_fixpoint=_tol(self.cfg, "tol_fixpoint", riccati.DEFAULT_TOL_FIXPOINT),
                max_iter=_tol(self.cfg, "max_iter", riccati.DEFAULT_MAX_ITER))
        return self._cache[key]


def build_pair(cfg, sysm):
    bundles = _BundleCache(sysm, cfg)
    controller = build_controller(cfg, sysm, bundles)
    scheduler = build_scheduler(cfg.get("scheduler", {"type": "periodic", "h": 1}),
                                cfg, sysm, bundles)
    return controller, scheduler, bundles


def _json_dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gamma_table(cfg, out_dir, h_max):
    sysm = build_system(cfg)
    table = riccati.gamma_table(
        sysm, h_max,
        tol_gamma=_tol(cfg, "tol_gamma", riccati.DEFAULT_TOL_GAMMA),
        tol_fixpoint=_tol(cfg, "tol_fixpoint", riccati.DEFAULT_TOL_FIXPOINT))
    lines = ["h,gamma_h"] + ["%d,%.17g" % (h + 1, g) for h, g in enumerate(table)]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out_dir is not None:
        with open(os.path.join(out_dir, "gamma_table.csv"), "w", newline="") as fh:
            fh.write(text)
    return 0


def _metrics_dict(metrics):
    return {
        "z2_total": metrics.z2_total,
        "w2_total": metrics.w2_total,
        "ratio": metrics.ratio,
        "rate": metrics.rate,
        "rate_tail": metrics.rate_tail,
        "hbar_avg": metrics.hbar_avg,
        "eta_at": {str(t): v for t, v in sorted(metrics.eta_at.items())},
    }


def _probing_bundle(cfg, bundles):
    gamma_eff = cfg.get("gamma_tilde") or cfg.get("gamma")
    if gamma_eff is None:
        raise ConfigError("probing disturbance needs 'gamma' or 'gamma_tilde'")
    from .errors import AssumptionFourViolated

    try:
        return bundles(gamma_eff, cfg.get("h"))
    except AssumptionFourViolated:
        return bundles(gamma_eff)


def cmd_simulate(cfg, out_dir):
    sysm = build_system(cfg)
    dist = cfg.get("disturbance", {"type": "zero"})
    if dist["type"] == "adversary":
        return cmd_adversary(cfg, out_dir)
    controller, scheduler, bundles = build_pair(cfg, sysm)
    if dist["type"] == "zero":
        source = simcore.ZeroSource()
    elif dist["type"] == "file":
        data = simcore.read_trace_csv(dist["path"])
        source = simcore.FileSource(list(data["w"]))
    else:
        source = simcore.ProbingSource(_probing_bundle(cfg, bundles),
                                       eps=dist.get("eps", 0.0))
    w0 = None
    if dist.get("w0_override", dist["type"] not in ("file", "zero")):
        w0 = np.asarray(cfg.get("w0", np.eye(sysm.n)[:, 0]), dtype=float)
    gamma_eta = cfg.get("gamma_tilde") or cfg.get("gamma")
    pbar = bundles(gamma_eta).pbar if gamma_eta is not None else None
    trace = simcore.run_closed_loop(sysm, controller, scheduler, source,
                                    horizon=cfg.get("horizon", 1000),
                                    gamma_for_eta=gamma_eta, w0=w0)
    metrics = simcore.trace_metrics(trace, gamma=gamma_eta, pbar=pbar)
    simcore.write_trace_csv(os.path.join(out_dir, "trace.csv"), trace,
                            gamma=gamma_eta, pbar=pbar)
    _json_dump(_metrics_dict(metrics), os.path.join(out_dir, "metrics.json"))
    return 0


def adversary_config_from(cfg, sysm):
    return adversary.AdversaryConfig(
        gamma=cfg.get("gamma_tilde") or cfg["gamma"],
        h=cfg["h"],
        w0=np.asarray(cfg.get("w0", np.eye(sysm.n)[:, 0]), dtype=float),
        eps_bar=cfg.get("eps_bar", 0.1),
        eps_low=cfg.get("eps_low", 0.01),
        horizon_cap=cfg.get("horizon", 100_000),
        grid_points=_tol(cfg, "grid_points", 201),
        rate_tol=_tol(cfg, "rate_tol", 1e-3),
        zeta_q_max=_tol(cfg, "zeta_q_max", 10_000),
        tol_fixpoint=_tol(cfg, "tol_fixpoint", riccati.DEFAULT_TOL_FIXPOINT),
        max_iter=_tol(cfg, "max_iter", riccati.DEFAULT_MAX_ITER),
    )


def cmd_adversary(cfg, out_dir):
    sysm = build_system(cfg)
    controller, scheduler, bundles = build_pair(cfg, sysm)
    acfg = adversary_config_from(cfg, sysm)
    verdict = adversary.run_adversary(sysm, controller, scheduler, acfg)
    trace_path = os.path.join(out_dir, "trace.csv")
    bundle = bundles(acfg.gamma)
    simcore.write_trace_csv(trace_path, verdict.trace, gamma=acfg.gamma,
                            pbar=bundle.pbar)
    _json_dump(verdict.to_json_dict(trace_csv=trace_path),
               os.path.join(out_dir, "verdict.json"))
    metrics = simcore.trace_metrics(verdict.trace, gamma=acfg.gamma, pbar=bundle.pbar)
    _json_dump(_metrics_dict(metrics), os.path.join(out_dir, "metrics.json"))
    sys.stdout.write("%s ratio=%.6g rate=%.6g\n"
                     % (verdict.outcome, verdict.ratio, verdict.rate))
    return 0


def _sweep_cell(sysm, cfg, sched_spec):
    """One sweep row: effective period, measured rate/ratio, ladder value."""
    if sched_spec["type"] == "periodic":
        h_eff = sched_spec["h"]
        label = "periodic(%d)" % h_eff
    elif sched_spec["type"] == "pattern":
        h_eff = policies.PatternScheduler.max_gap(sched_spec["bits"])
        label = "pattern(%s)" % sched_spec["bits"]
    else:
        raise ConfigError("sweep supports periodic and pattern schedulers")
    tol_gamma = _tol(cfg, "tol_gamma", riccati.DEFAULT_TOL_GAMMA)
    g_h = riccati.gamma_h(sysm, h_eff, tol_gamma=tol_gamma)
    margin = cfg.get("sweep", {}).get("gamma_margin", 0.02)
    gamma = g_h * (1.0 + margin)
    bundle = riccati.make_bundle(sysm, gamma)
    controller = policies.GamePredictiveController(sysm, bundle)
    scheduler = build_scheduler(sched_spec, cfg, sysm,
                                lambda g, h=None: bundle)
    source = simcore.ProbingSource(bundle, eps=0.0)
    trace = simcore.run_closed_loop(
        sysm, controller, scheduler, source, horizon=cfg.get("horizon", 2000),
        w0=np.asarray(cfg.get("w0", np.eye(sysm.n)[:, 0]), dtype=float))
    metrics = simcore.trace_metrics(trace)
    return (label, h_eff, metrics.rate, metrics.ratio, g_h)


def cmd_sweep(cfg, out_dir):
    sysm = build_system(cfg)
    sweep = cfg.get("sweep", {})
    specs = [{"type": "periodic", "h": h} for h in sweep.get("h_list", [])]
    specs += list(sweep.get("schedulers", []))
    max_workers = int(os.environ.get("ETC_HINF_THREADS", "0")) or None
    rows = []
    if specs:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as pool:
            rows = list(pool.map(lambda s: _sweep_cell(sysm, cfg, s), specs))
    lines = ["scheduler,h,rate,ratio,gamma_h"]
    for label, h_eff, rate, ratio, g_h in rows:
        lines.append("%s,%d,%.17g,%.17g,%.17g" % (label, h_eff, rate, ratio, g_h))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out_dir is not None:
        with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
            fh.write(text)
    return 0


def cmd_check_a5(cfg, out_dir, seed=None):
    sysm = build_system(cfg)
    params = cfg.get("check_a5", {})

    def make_pair():
        controller, scheduler, _ = build_pair(cfg, sysm)
        return controller, scheduler

    report = adversary.check_assumption5(
        sysm, make_pair,
        gamma=cfg.get("gamma_tilde") or cfg["gamma"],
        h=cfg["h"],
        eps_low=cfg.get("eps_low", 0.01),
        n_samples=params.get("samples", 20),
        radius=params.get("radius", 2.0),
        seed=cfg.get("seed", 0) if seed is None else seed,
        grid_points=params.get("grid_points", 21),
        pilot_horizon=params.get("pilot_horizon", 60),
        pilot_w0=cfg.get("w0"),
    )
    payload = report.to_json_dict()
    _json_dump(payload, os.path.join(out_dir, "a5_report.json"))
    sys.stdout.write("assumption-5 check: %d violations over %d samples\n"
                     % (len(report.violations), report.samples_checked))
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="etc-hinf",
        description="Event-triggered H-infinity control experiments")
    parser.add_argument("command",
                        choices=["gamma-table", "simulate", "adversary",
                                 "sweep", "check-a5"])
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--h-max", type=int, default=5,
                        help="largest period for gamma-table")
    parser.add_argument("--seed", type=int, default=None,
                        help="seed override for sampled checks")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "gamma-table":
            return cmd_gamma_table(cfg, args.out, args.h_max)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out)
        if args.command == "adversary":
            return cmd_adversary(cfg, args.out)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.out)
        return cmd_check_a5(cfg, args.out, seed=args.seed)
    except AssumptionFiveViolated as exc:
        print("assumption-5 violation: %s" % exc, file=sys.stderr)
        return 4
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except (EtcHinfError, np.linalg.LinAlgError, DegenerateTrace) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
