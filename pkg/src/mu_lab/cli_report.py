"""Scenario-driven pipeline: parameter checks, certificates, conjugacy, reports.

A scenario is a strict JSON document (unknown keys are rejected with their
path).  The `run` subcommand executes check-params -> verify-dichotomy ->
build-conjugacy -> verify-conjugacy, short-circuiting on the first failing
stage; individual subcommands expose each stage on its own.  Reports are
deterministic for a fixed scenario and seed, timings aside.

Exit codes: 0 pass, 1 config error, 2 admissibility failure, 3 certificate
failure, 4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys as _sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .admissibility import (
    ParamSet,
    default_xi,
    delta_ceiling,
    full_report,
    lambda_ceiling,
)
from .conjugacy import (
    ConjugacyResult,
    EtaField,
    GridSpec,
    TruncationPolicy,
    invertibility_check,
    picard_solve,
    verify_residuals,
)
from .dde_core import (
    LinearDelaySystem,
    Perturbation,
    PerturbationParams,
    linear_cross_perturbation,
    parse_system_terms,
    saturating_cross_perturbation,
)
from .dichotomy import (
    DEFAULT_SCAN,
    DichotomyModel,
    derived_constant_D,
    diagonal_model,
    sin_wobble_model,
    verify_bounds,
    _power_coordinate,
)
from .errors import (
    ConfigError,
    EmptyWindow,
    ExpressionError,
    MissingSeries,
    MuLabError,
    NotContracting,
    TruncationUnreachable,
    XiOutOfWindow,
)
from .growth_rate import rate_by_id, ratio_bound_N

SCHEMA_RUN = "mu-lab/run-report/v1"
SCHEMA_RESULT = "mu-lab/conjugacy-result/v1"

EXIT_PASS = 0
EXIT_CONFIG = 1
EXIT_ADMISSIBILITY = 2
EXIT_CERTIFICATE = 3
EXIT_SOLVER = 4


def _check_keys(section: dict, allowed: set, path: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {path}")


def _require(section: dict, key: str, path: str):
    if key not in section:
        raise ConfigError(f"missing required key {key!r} in {path}")
    return section[key]


@dataclass
class Scenario:
    """Raw but validated scenario sections."""

    name: str
    growth_rate: str
    delay: float
    seed: int
    model: dict
    params: dict
    perturbation: dict
    grids: dict
    tolerances: dict
    checks: dict
    raw: dict


@dataclass
class ResolvedScenario:
    scenario: Scenario
    mu: object
    model: Optional[DichotomyModel]
    sys: Optional[LinearDelaySystem]
    params: Optional[ParamSet]
    pert: object
    grid: GridSpec
    trunc: TruncationPolicy
    solver_tol: float
    max_sweeps: int
    cert_tol: float
    checks: dict
    seed: int


_TOP_KEYS = {
    "name",
    "growth_rate",
    "delay",
    "seed",
    "model",
    "params",
    "perturbation",
    "grids",
    "tolerances",
    "checks",
}
_PARAM_KEYS = {
    "alpha",
    "beta",
    "theta",
    "nu",
    "eps",
    "a",
    "gamma",
    "xi",
    "q",
    "K",
    "K_tilde",
    "delta",
    "delta_frac",
    "lambda",
    "lambda_frac",
}
_MODEL_KEYS = {"kind", "stable_power", "unstable_power", "alpha0", "theta0", "theta_override", "n", "terms"}
_PERT_KEYS = {"shape", "reads", "gain"}
_GRID_KEYS = {"m", "t_min", "t_max", "t_step", "b_max", "b_step"}
_TOL_KEYS = {"tail_tol", "max_span", "solver_tol", "max_sweeps", "cert_tol"}
_CHECK_KEYS = {
    "window",
    "cert_samples",
    "cert_m",
    "residual_samples",
    "residual_horizon_delays",
    "core_window",
    "b_scale",
    "residual_mu_max",
}

_GRID_DEFAULTS = {"m": 64, "t_min": -4.5, "t_max": 4.5, "t_step": 0.25, "b_max": 6.0, "b_step": 0.03125}
_TOL_DEFAULTS = {"tail_tol": 1e-6, "max_span": 60.0, "solver_tol": 1e-6, "max_sweeps": 25, "cert_tol": 0.05}
_CHECK_DEFAULTS = {
    "window": [-10.0, 10.0],
    "cert_samples": 200,
    "cert_m": 48,
    "residual_samples": 200,
    "residual_horizon_delays": 3.0,
    "core_window": [-2.0, 2.0],
    "b_scale": 2.0,
    "residual_mu_max": 5e-3,
}


def parse_scenario(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ConfigError("scenario root must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "scenario")
    name = str(_require(doc, "name", "scenario"))
    growth = str(_require(doc, "growth_rate", "scenario"))
    if growth not in ("exp", "poly", "log"):
        raise ConfigError(f"growth_rate must be exp/poly/log, got {growth!r}")
    delay = float(_require(doc, "delay", "scenario"))
    if delay <= 0:
        raise ConfigError(f"delay must be positive, got {delay}")
    seed = int(doc.get("seed", 0))
    model = dict(_require(doc, "model", "scenario"))
    _check_keys(model, _MODEL_KEYS, "scenario.model")
    params = dict(doc.get("params", {}))
    _check_keys(params, _PARAM_KEYS, "scenario.params")
    pert = dict(doc.get("perturbation", {"shape": "zero"}))
    _check_keys(pert, _PERT_KEYS, "scenario.perturbation")
    grids = dict(_GRID_DEFAULTS)
    user_grids = dict(doc.get("grids", {}))
    _check_keys(user_grids, _GRID_KEYS, "scenario.grids")
    grids.update(user_grids)
    tols = dict(_TOL_DEFAULTS)
    user_tols = dict(doc.get("tolerances", {}))
    _check_keys(user_tols, _TOL_KEYS, "scenario.tolerances")
    tols.update(user_tols)
    checks = dict(_CHECK_DEFAULTS)
    user_checks = dict(doc.get("checks", {}))
    _check_keys(user_checks, _CHECK_KEYS, "scenario.checks")
    checks.update(user_checks)
    for rec in pert.get("reads", []):
        _check_keys(dict(rec), {"coord", "lag_frac"}, "scenario.perturbation.reads[]")
    return Scenario(
        name=name,
        growth_rate=growth,
        delay=delay,
        seed=seed,
        model=model,
        params=params,
        perturbation=pert,
        grids=grids,
        tolerances=tols,
        checks=checks,
        raw=doc,
    )


def load_scenario(path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"scenario file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario is not valid JSON: {exc}") from exc
    return parse_scenario(doc)


def _resolve_model(sc: Scenario, p: dict):
    kind = _require(sc.model, "kind", "scenario.model")
    mu = rate_by_id(sc.growth_rate)
    r = sc.delay
    if kind == "diagonal_flow":
        alpha = float(p.get("alpha", 0.8))
        beta = float(p.get("beta", 0.6))
        coords = [
            _power_coordinate(mu, float(sc.model.get("stable_power", -alpha))),
            _power_coordinate(mu, float(sc.model.get("unstable_power", beta))),
        ]
        kw = dict(
            alpha=alpha,
            beta=beta,
            theta=float(p.get("theta", 0.4)),
            nu=float(p.get("nu", 0.2)),
            eps=float(p.get("eps", 0.1)),
            a=float(p.get("a", 1.0)),
        )
        if "K" in p:
            kw["K"] = float(p["K"])
        if "K_tilde" in p:
            kw["K_tilde"] = float(p["K_tilde"])
        model = diagonal_model(mu, r, coords, label=sc.name, **kw)
        return mu, model, model.sys
    if kind == "sin_wobble":
        if sc.growth_rate != "exp":
            raise ConfigError("sin_wobble model requires growth_rate 'exp'")
        model = sin_wobble_model(
            r,
            alpha0=float(sc.model.get("alpha0", 1.0)),
            theta0=float(sc.model.get("theta0", 0.1)),
            theta=(float(sc.model["theta_override"]) if "theta_override" in sc.model else None),
        )
        return mu, model, model.sys
    if kind == "linear_terms":
        n = int(_require(sc.model, "n", "scenario.model"))
        try:
            sys_ = parse_system_terms(r, n, _require(sc.model, "terms", "scenario.model"), label=sc.name)
        except ExpressionError as exc:
            raise ConfigError(f"scenario.model.terms: {exc}") from exc
        return mu, None, sys_
    raise ConfigError(f"unknown model kind {kind!r}")


def _resolve_params(sc: Scenario, mu, model: Optional[DichotomyModel]) -> Optional[ParamSet]:
    p = sc.params
    if not p and model is None:
        return None
    if model is not None:
        defaults = {
            "alpha": model.alpha,
            "beta": model.beta,
            "theta": model.theta,
            "nu": model.nu,
            "eps": model.eps,
            "a": model.a,
            "K": model.K,
            "K_tilde": model.K_tilde,
        }
        N = ratio_bound_N(mu, sc.delay, DEFAULT_SCAN)
        D = derived_constant_D(model, N)
    else:
        required = {"alpha", "beta", "theta", "nu", "eps", "a", "K", "K_tilde"}
        missing = sorted(required - set(p))
        if missing:
            raise ConfigError(f"scenario.params needs {missing} when the model has no flow structure")
        defaults = {}
        N = ratio_bound_N(mu, sc.delay, DEFAULT_SCAN)
        D = None

    def get(key, fallback=None):
        if key in p:
            return float(p[key])
        if key in defaults:
            return float(defaults[key])
        if fallback is not None:
            return float(fallback)
        raise ConfigError(f"scenario.params.{key} is required")

    base = dict(
        alpha=get("alpha"),
        beta=get("beta"),
        theta=get("theta"),
        nu=get("nu"),
        eps=get("eps"),
        a=get("a"),
        gamma=get("gamma", 1.5),
        q=get("q", 1.0),
        K=get("K"),
        K_tilde=get("K_tilde"),
        N=N,
    )
    if D is None:
        probe = ParamSet(xi=1.0, delta=1.0, lam=1.0, D=1.0, **base)
        D = derived_constant_D_from_params(probe)
    probe = ParamSet(xi=1.0, delta=1.0, lam=1.0, D=D, **base)
    try:
        xi = float(p["xi"]) if "xi" in p else default_xi(probe)
    except EmptyWindow as exc:
        raise ConfigError(f"scenario.params: {exc}") from exc
    probe = probe.with_(xi=xi)
    if "delta" in p and "delta_frac" in p:
        raise ConfigError("scenario.params: give delta or delta_frac, not both")
    if "lambda" in p and "lambda_frac" in p:
        raise ConfigError("scenario.params: give lambda or lambda_frac, not both")
    delta = float(p["delta"]) if "delta" in p else float(p.get("delta_frac", 0.5)) * delta_ceiling(probe)
    if "lambda" in p:
        lam = float(p["lambda"])
    else:
        try:
            lam = float(p.get("lambda_frac", 0.5)) * lambda_ceiling(probe)
        except (EmptyWindow, XiOutOfWindow) as exc:
            raise ConfigError(f"scenario.params: lambda_frac needs xi inside its window ({exc})") from exc
    return ParamSet(xi=xi, delta=delta, lam=lam, D=D, **base)


def derived_constant_D_from_params(p: ParamSet) -> float:
    K1 = p.K * p.K_tilde * p.N ** (abs(p.a - p.beta) + p.nu)
    return float(max(K1, p.K_tilde * p.N**p.a * (1.0 + K1), p.K * p.K_tilde * p.N ** (p.a + p.alpha + p.theta)))


def _resolve_perturbation(sc: Scenario, mu, model, params: Optional[ParamSet]):
    shape = sc.perturbation.get("shape", "zero")
    n = model.n if model is not None else int(sc.model.get("n", 1))
    if shape == "zero":
        return Perturbation.zero(n)
    if params is None:
        raise ConfigError("non-zero perturbation needs a params section")
    reads_spec = sc.perturbation.get("reads")
    if reads_spec is None:
        reads_spec = [{"coord": 0, "lag_frac": 1.0}, {"coord": 1, "lag_frac": 0.5}][:n]
    reads = [(int(rec["coord"]), float(rec["lag_frac"]) * sc.delay) for rec in reads_spec]
    for coord, lag in reads:
        if not 0 <= coord < n:
            raise ConfigError(f"perturbation read coordinate {coord} outside 0..{n - 1}")
        if not 0.0 <= lag <= sc.delay:
            raise ConfigError(f"perturbation read lag {lag} outside [0, delay]")
    pp = PerturbationParams(delta=params.delta, gamma=params.gamma, lam=params.lam, xi=params.xi, eps=params.eps)
    if shape == "saturating_cross":
        return saturating_cross_perturbation(mu, pp, reads=reads, n=n)
    if shape == "linear_cross":
        gain = float(_require(sc.perturbation, "gain", "scenario.perturbation"))
        return linear_cross_perturbation(mu, pp, reads=reads, n=n, gain=gain)
    raise ConfigError(f"unknown perturbation shape {shape!r}")


def resolve(sc: Scenario) -> ResolvedScenario:
    mu, model, sys_ = _resolve_model(sc, sc.params)
    params = _resolve_params(sc, mu, model)
    pert = _resolve_perturbation(sc, mu, model, params)
    g = sc.grids
    grid = GridSpec(
        t_min=float(g["t_min"]),
        t_max=float(g["t_max"]),
        t_step=float(g["t_step"]),
        b_max=float(g["b_max"]),
        b_step=float(g["b_step"]),
        m=int(g["m"]),
    )
    t = sc.tolerances
    trunc = TruncationPolicy(tail_tol=float(t["tail_tol"]), max_span=float(t["max_span"]))
    return ResolvedScenario(
        scenario=sc,
        mu=mu,
        model=model,
        sys=sys_,
        params=params,
        pert=pert,
        grid=grid,
        trunc=trunc,
        solver_tol=float(t["solver_tol"]),
        max_sweeps=int(t["max_sweeps"]),
        cert_tol=float(t["cert_tol"]),
        checks=sc.checks,
        seed=sc.seed,
    )


def _threads_from_env() -> Optional[int]:
    raw = os.environ.get("MU_LAB_THREADS")
    if raw is None:
        return None
    try:
        val = int(raw)
    except ValueError as exc:
        raise ConfigError(f"MU_LAB_THREADS must be an integer, got {raw!r}") from exc
    if val < 1:
        raise ConfigError(f"MU_LAB_THREADS must be >= 1, got {val}")
    return val


def _to_builtin(obj):
    if isinstance(obj, dict):
        return {k: _to_builtin(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_builtin(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def run_admissibility(res: ResolvedScenario) -> dict:
    if res.params is None:
        raise ConfigError("scenario has no params section; nothing to check")
    report = full_report(res.params)
    return {
        "status": "pass" if report.passed else "fail",
        "report": report.to_dict(),
        "params": {k: getattr(res.params, k) for k in (
            "alpha", "beta", "theta", "nu", "eps", "a", "gamma", "xi", "delta", "lam", "q", "K", "K_tilde", "N", "D",
        )},
    }


def run_dichotomy(res: ResolvedScenario, samples: Optional[int] = None, seed: Optional[int] = None) -> dict:
    if res.model is None:
        raise ConfigError("verify-dichotomy needs a flow-structured model kind")
    cert = verify_bounds(
        res.model,
        tuple(res.checks["window"]),
        samples if samples is not None else int(res.checks["cert_samples"]),
        seed=seed if seed is not None else res.seed,
        tol=res.cert_tol,
        m=int(res.checks["cert_m"]),
    )
    doc = cert.to_dict()
    doc["series"] = {
        c.name: [list(row) for row in c.samples] for c in cert.checks
    }
    return {"status": "pass" if cert.passed else "fail", "certificate": doc}


def run_conjugacy(res: ResolvedScenario) -> dict:
    if res.model is None:
        raise ConfigError("build-conjugacy needs a flow-structured model kind")
    if res.model.d_u == 0:
        return {"status": "trivial", "note": "no unstable direction; the conjugacy is the identity"}
    try:
        result = picard_solve(
            res.model,
            res.pert,
            res.params,
            res.grid,
            res.trunc,
            solver_tol=res.solver_tol,
            max_sweeps=res.max_sweeps,
            require_admissible=False,
        )
    except NotContracting as exc:
        return {"status": "not_contracting", "sweeps": getattr(exc, "sweeps", []), "error": str(exc)}
    except TruncationUnreachable as exc:
        return {"status": "truncation_unreachable", "error": str(exc)}
    if not result.converged:
        return {"status": "no_convergence", "summary": result.summary()}
    rows = verify_residuals(
        result.eta,
        res.model,
        res.pert,
        n_samples=int(res.checks["residual_samples"]),
        horizon=float(res.checks["residual_horizon_delays"]) * res.scenario.delay,
        core=tuple(res.checks["core_window"]),
        b_scale=float(res.checks["b_scale"]),
        seed=res.seed + 1,
    )
    result.attach_residuals(rows)
    inv = invertibility_check(result, res.model)
    max_mu = max((r.weighted for r in rows), default=0.0)
    residual_ok = max_mu <= float(res.checks["residual_mu_max"])
    return {
        "status": "converged",
        "summary": result.summary(),
        "invertibility": inv,
        "residuals": {
            "samples": len(rows),
            "max_mu": max_mu,
            "max_raw": max((r.raw for r in rows), default=0.0),
            "pass": residual_ok,
            "rows": [r.to_dict() for r in rows],
        },
        "_result": result,
    }


def run_pipeline(res) -> dict:
    """Full pipeline with short-circuiting; returns the run report dict.

    Accepts a ResolvedScenario or a parsed Scenario.
    """
    if isinstance(res, Scenario):
        res = resolve(res)
    report = {
        "schema": SCHEMA_RUN,
        "name": res.scenario.name,
        "seed": res.seed,
        "threads": _threads_from_env(),
        "stages": {},
        "timings": {},
    }
    t0 = time.time()
    adm = run_admissibility(res)
    report["timings"]["admissibility"] = time.time() - t0
    report["stages"]["admissibility"] = adm
    if adm["status"] != "pass":
        report["status"] = "admissibility_failed"
        report["exit_code"] = EXIT_ADMISSIBILITY
        return _to_builtin(report)

    t0 = time.time()
    dich = run_dichotomy(res)
    report["timings"]["dichotomy"] = time.time() - t0
    report["stages"]["dichotomy"] = dich
    if dich["status"] != "pass":
        report["status"] = "certificate_failed"
        report["exit_code"] = EXIT_CERTIFICATE
        return _to_builtin(report)

    t0 = time.time()
    conj = run_conjugacy(res)
    conj.pop("_result", None)
    report["timings"]["conjugacy"] = time.time() - t0
    report["stages"]["conjugacy"] = conj
    if conj["status"] in ("not_contracting", "truncation_unreachable", "no_convergence"):
        report["status"] = "solver_failed"
        report["exit_code"] = EXIT_SOLVER
        return _to_builtin(report)
    if conj["status"] == "converged" and not conj["residuals"]["pass"]:
        report["status"] = "solver_failed"
        report["exit_code"] = EXIT_SOLVER
        return _to_builtin(report)

    report["status"] = "pass"
    report["exit_code"] = EXIT_PASS
    return _to_builtin(report)


def report_json(report: dict) -> str:
    return json.dumps(_to_builtin(report), sort_keys=True, indent=2)


def strip_timings(report: dict) -> dict:
    out = dict(report)
    out.pop("timings", None)
    return out


def emit_plot_data(report: dict, kind: str) -> str:
    """CSV series extracted from a run report."""
    stages = report.get("stages", {})
    if kind == "contraction":
        conj = stages.get("conjugacy", {})
        sweeps = conj.get("summary", {}).get("sweeps")
        if not sweeps:
            raise MissingSeries("report has no conjugacy sweeps")
        lines = ["k,delta_1mu,ratio"]
        for s in sweeps:
            ratio = "" if s["ratio"] is None else f"{s['ratio']:.12g}"
            lines.append(f"{s['k']},{s['delta_1mu']:.12g},{ratio}")
        return "\n".join(lines) + "\n"
    if kind == "residual":
        conj = stages.get("conjugacy", {})
        rows = conj.get("residuals", {}).get("rows")
        if rows is None:
            raise MissingSeries("report has no residual table")
        lines = ["t,s,b,raw,mu"]
        for r in rows:
            lines.append(f"{r['t']:.12g},{r['s']:.12g},{r['b']:.12g},{r['raw']:.12g},{r['mu']:.12g}")
        return "\n".join(lines) + "\n"
    if kind == "envelope":
        dich = stages.get("dichotomy", {})
        series = dich.get("certificate", {}).get("series", {}).get("stable")
        if series is None:
            raise MissingSeries("report has no stable-bound series")
        lines = ["t,s,measured,bound,ratio"]
        for t, s, meas, bound, ratio in series:
            lines.append(f"{t:.12g},{s:.12g},{meas:.12g},{bound:.12g},{ratio:.12g}")
        return "\n".join(lines) + "\n"
    raise MissingSeries(f"unknown series kind {kind!r}")


# ---------------------------------------------------------------------------
# conjugacy result persistence
# ---------------------------------------------------------------------------


def save_conjugacy_result(path, res: ResolvedScenario, conj: dict) -> None:
    path = Path(path)
    doc = {
        "schema": SCHEMA_RESULT,
        "scenario": res.scenario.raw,
        "status": conj["status"],
    }
    for key in ("summary", "invertibility", "residuals", "sweeps", "error", "note"):
        if key in conj:
            doc[key] = conj[key]
    result: Optional[ConjugacyResult] = conj.get("_result")
    if result is not None:
        eta = result.eta
        np.savez_compressed(
            Path(str(path) + ".eta.npz"),
            t_grid=eta.t_grid,
            b_grid=eta.b_grid,
            values=eta.values,
            dvalues=eta.dvalues,
            r=np.array(eta.r),
            xi=np.array(eta.xi),
            eps=np.array(eta.eps),
        )
        rows = doc.get("residuals", {}).get("rows", [])
        csv_lines = ["t,s,b,raw,mu"] + [
            f"{r['t']:.12g},{r['s']:.12g},{r['b']:.12g},{r['raw']:.12g},{r['mu']:.12g}" for r in rows
        ]
        Path(str(path) + ".residuals.csv").write_text("\n".join(csv_lines) + "\n")
    path.write_text(report_json(doc))


def load_conjugacy_result(path):
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("schema") != SCHEMA_RESULT:
        raise ConfigError(f"{path} is not a conjugacy result document")
    res = resolve(parse_scenario(doc["scenario"]))
    npz_path = Path(str(path) + ".eta.npz")
    if not npz_path.exists():
        raise ConfigError(f"field sidecar missing: {npz_path}")
    data = np.load(npz_path)
    eta = EtaField(
        t_grid=data["t_grid"],
        b_grid=data["b_grid"],
        values=data["values"],
        dvalues=data["dvalues"],
        r=float(data["r"]),
        mu=res.mu,
        xi=float(data["xi"]),
        eps=float(data["eps"]),
    )
    return doc, res, eta


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _apply_tol_overrides(doc: dict, overrides) -> dict:
    if not overrides:
        return doc
    doc = json.loads(json.dumps(doc))
    tols = doc.setdefault("tolerances", {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--tol expects name=value, got {item!r}")
        key, val = item.split("=", 1)
        if key not in _TOL_KEYS:
            raise ConfigError(f"--tol key must be one of {sorted(_TOL_KEYS)}, got {key!r}")
        tols[key] = float(val) if key != "max_sweeps" else int(val)
    return doc


def _load_resolved(args) -> ResolvedScenario:
    try:
        doc = json.loads(Path(args.config).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"scenario file not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario is not valid JSON: {exc}") from exc
    doc = _apply_tol_overrides(doc, getattr(args, "tol", None))
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    return resolve(parse_scenario(doc))


def _emit(args, payload: str) -> None:
    if getattr(args, "out", None):
        Path(args.out).write_text(payload)
    else:
        print(payload, end="" if payload.endswith("\n") else "\n")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mu-lab", description="dichotomy and conjugacy laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="scenario JSON file")
        p.add_argument("--out", help="write output to this path instead of stdout")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--tol", action="append", help="override a tolerance, name=value", default=None)

    add_common(sub.add_parser("check-params", help="evaluate every scalar hypothesis"))
    p = sub.add_parser("verify-dichotomy", help="measure the five bound families")
    add_common(p)
    p.add_argument("--samples", type=int, help="override the sample count")
    p = sub.add_parser("build-conjugacy", help="solve for the correction field")
    add_common(p)
    p = sub.add_parser("verify-conjugacy", help="re-check residuals of a stored result")
    p.add_argument("--result", required=True, help="result JSON from build-conjugacy")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", help="write output to this path instead of stdout")
    p = sub.add_parser("run", help="full pipeline with short-circuiting")
    add_common(p)
    p = sub.add_parser("emit-plot", help="extract a CSV series from a run report")
    p.add_argument("--report", required=True)
    p.add_argument("--kind", required=True, choices=["envelope", "residual", "contraction"])
    p.add_argument("--out", help="write CSV here instead of stdout")

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return EXIT_CONFIG
    except MissingSeries as exc:
        print(f"missing series: {exc}", file=_sys.stderr)
        return EXIT_CONFIG
    except MuLabError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_SOLVER


def _dispatch(args) -> int:
    if args.command == "check-params":
        res = _load_resolved(args)
        out = run_admissibility(res)
        _emit(args, report_json(out))
        return EXIT_PASS if out["status"] == "pass" else EXIT_ADMISSIBILITY
    if args.command == "verify-dichotomy":
        res = _load_resolved(args)
        out = run_dichotomy(res, samples=args.samples)
        slim = {"status": out["status"], "certificate": {k: v for k, v in out["certificate"].items() if k != "series"}}
        _emit(args, report_json(slim))
        return EXIT_PASS if out["status"] == "pass" else EXIT_CERTIFICATE
    if args.command == "build-conjugacy":
        res = _load_resolved(args)
        out = run_conjugacy(res)
        target = args.out or "result.json"
        save_conjugacy_result(target, res, out)
        status = out["status"]
        print(f"{res.scenario.name}: conjugacy {status} -> {target}")
        if status in ("converged", "trivial"):
            return EXIT_PASS
        return EXIT_SOLVER
    if args.command == "verify-conjugacy":
        doc, res, eta = load_conjugacy_result(args.result)
        rows = verify_residuals(
            eta,
            res.model,
            res.pert,
            n_samples=args.samples,
            horizon=float(res.checks["residual_horizon_delays"]) * res.scenario.delay,
            core=tuple(res.checks["core_window"]),
            b_scale=float(res.checks["b_scale"]),
            seed=args.seed,
        )
        max_mu = max((r.weighted for r in rows), default=0.0)
        ok = max_mu <= float(res.checks["residual_mu_max"])
        payload = report_json(
            {
                "samples": len(rows),
                "max_mu": max_mu,
                "threshold": float(res.checks["residual_mu_max"]),
                "pass": ok,
            }
        )
        _emit(args, payload)
        return EXIT_PASS if ok else EXIT_SOLVER
    if args.command == "run":
        res = _load_resolved(args)
        report = run_pipeline(res)
        _emit(args, report_json(report))
        return int(report["exit_code"])
    if args.command == "emit-plot":
        report = json.loads(Path(args.report).read_text())
        _emit(args, emit_plot_data(report, args.kind))
        return EXIT_PASS
    raise ConfigError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    raise SystemExit(main())
