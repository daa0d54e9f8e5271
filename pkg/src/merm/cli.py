"""Config-driven command line: estimate on CSV data, simulate, bias bounds.

Exit codes: 0 success, 2 config/validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import ast
import json
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .corrected import ScalarMomentFn
from .dataset import DataError, Dataset, read_csv
from .effects import bias_bound, rank_diagnostics
from .gamma import CorrectionScheme, exponential_v_family
from .gmm import (
    EstimationError,
    EstimatorConfig,
    Problem,
    WeightingPolicy,
    estimate,
)
from .models.bases import xz_basis
from .models.builders import build_product_spec
from .models.regression import (
    NlrResidual,
    PolynomialRegression,
    ProbitRegression,
    RationalFractionRegression,
)
from .moments import MomentError, MomentSpec, NumericProvider
from .simulation import (
    DESIGN_TAGS,
    EstimatorSpec,
    emit_table,
    make_design,
    resolve_workers,
    run_replications,
)

SCHEMA_VERSION = 1

_MODEL_TAGS = ("linear", "polynomial", "rational_fraction", "probit", "nlr_expression")
_POLICY_TAGS = ("identity", "two_step_eff", "two_step_eff_regularized", "cue_regularized")


class ConfigError(ValueError):
    pass


def _load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def validate(config: dict) -> list[str]:
    """All schema violations in the config, empty when runnable."""
    problems: list[str] = []
    if not isinstance(config, dict):
        return ["config must be a JSON object"]
    if config.get("schema_version") != SCHEMA_VERSION:
        problems.append(f"schema_version must be {SCHEMA_VERSION}")
    mode = config.get("mode")
    if mode not in ("estimate", "simulate", "bias-bound"):
        problems.append("mode must be one of estimate|simulate|bias-bound")
        return problems

    if mode in ("estimate", "bias-bound"):
        est = config.get("estimate")
        if not isinstance(est, dict):
            problems.append("estimate: section missing")
            return problems
        if not est.get("data"):
            problems.append("estimate.data: data path missing")
        cols = est.get("columns")
        if not isinstance(cols, dict) or "x" not in cols:
            problems.append("estimate.columns: column-role map with an 'x' entry required")
        model = est.get("model", {})
        tag = model.get("tag")
        if tag not in _MODEL_TAGS:
            problems.append(f"estimate.model.tag: must be one of {'|'.join(_MODEL_TAGS)}")
        if tag == "nlr_expression" and not model.get("rho"):
            problems.append("estimate.model.rho: expression required for nlr_expression")
        scheme = est.get("scheme", {})
        K = scheme.get("K", 2)
        if not isinstance(K, int) or K < 2:
            problems.append("estimate.scheme.K: K must be >= 2")
        regime = scheme.get("regime", "classical_scalar")
        if regime not in ("classical_scalar", "classical_multivariate", "weakly_classical"):
            problems.append("estimate.scheme.regime: unknown regime")
        if regime == "weakly_classical" and isinstance(K, int) and K > 4:
            problems.append("estimate.scheme.K: weakly_classical supports K <= 4")
        policy = est.get("weighting", {}).get("policy", "two_step_eff_regularized")
        if policy not in _POLICY_TAGS:
            problems.append(f"estimate.weighting.policy: must be one of {'|'.join(_POLICY_TAGS)}")
        if tag in _MODEL_TAGS and tag != "nlr_expression" and isinstance(K, int) and K >= 2:
            dim_theta = {"linear": 2, "polynomial": 4, "rational_fraction": 3, "probit": 2}.get(tag)
            basis_kind = est.get("basis", {}).get("kind", "K2-basis" if K <= 2 else "K4-basis")
            try:
                from .moments import basis_terms

                m = len(basis_terms(basis_kind, est.get("basis", {}).get("degree")))
            except MomentError as exc:
                problems.append(f"estimate.basis.kind: {exc}")
                m = None
            if regime == "classical_scalar" and m is not None and dim_theta is not None:
                if m < dim_theta + K - 1:
                    problems.append(
                        f"overidentification violated: m={m} moments cannot identify "
                        f"dim(theta)={dim_theta} plus K-1={K-1} nuisance parameters"
                    )
    if mode == "bias-bound":
        bb = config.get("bias_bound", {})
        kb = bb.get("kurtosis_bound")
        if kb is not None and kb < 1:
            problems.append("bias_bound.kurtosis_bound: must be >= 1")
    if mode == "simulate":
        sim = config.get("simulate")
        if not isinstance(sim, dict):
            problems.append("simulate: section missing")
            return problems
        design = sim.get("design", {})
        if design.get("tag") not in DESIGN_TAGS:
            problems.append(f"simulate.design.tag: must be one of {'|'.join(DESIGN_TAGS)}")
        R = sim.get("replications", 100)
        if not isinstance(R, int) or R < 2:
            problems.append("simulate.replications: must be an integer >= 2")
    return problems


_ALLOWED_FUNCS = {
    "exp": np.exp, "log": np.log, "sqrt": np.sqrt, "tanh": np.tanh,
    "erf": None, "sin": np.sin, "cos": np.cos, "abs": np.abs,
}


def _compile_rho_expression(expr: str, dim_theta: int):
    """A restricted evaluator for user regression functions rho(x, w*, theta).

    Understands arithmetic, powers, the functions exp/log/sqrt/tanh/erf/
    sin/cos/abs, the variables ``x`` and ``w1..w9``, and indexed ``theta[i]``.
    """
    from scipy.special import erf

    funcs = dict(_ALLOWED_FUNCS)
    funcs["erf"] = erf
    tree = ast.parse(expr, mode="eval")
    for node in ast.walk(tree):
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in funcs:
                raise ConfigError(f"function not allowed in rho expression: {ast.dump(node.func)}")
        elif isinstance(node, ast.Name):
            if node.id not in funcs and node.id != "x" and node.id != "theta" and not (
                node.id.startswith("w") and node.id[1:].isdigit()
            ):
                raise ConfigError(f"name not allowed in rho expression: {node.id}")
        elif isinstance(node, ast.Attribute):
            raise ConfigError("attribute access not allowed in rho expression")
        elif not isinstance(
            node,
            (
                ast.Expression, ast.BinOp, ast.UnaryOp, ast.Constant, ast.Subscript,
                ast.Index if hasattr(ast, "Index") else ast.Expression,
                ast.Load, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub,
                ast.UAdd, ast.Tuple, ast.Slice, ast.Call, ast.Name,
            ),
        ):
            raise ConfigError(f"syntax not allowed in rho expression: {type(node).__name__}")
    code = compile(tree, "<rho>", "eval")

    def rho(x, s, theta):
        env = {"x": x[:, 0], "theta": theta, **funcs}
        for name, col in s.items():
            if name.startswith("w"):
                env[name] = col
        out = eval(code, {"__builtins__": {}}, env)
        return np.broadcast_to(np.asarray(out, dtype=float), (x.shape[0],)).copy()

    return rho


def _build_expression_spec(expr: str, dim_theta: int, basis_kind: str, degree, w_extras):
    rho = _compile_rho_expression(expr, dim_theta)
    basis = xz_basis(basis_kind, degree=degree, extras=tuple(w_extras))

    def eval_fn(x, s, theta):
        resid = s["y"] - rho(x, s, theta)
        return resid[:, None] * basis.value(x, s, 0)

    provider = NumericProvider(eval_fn, max_order=6)
    return MomentSpec(
        m=len(basis), dim_theta=dim_theta, d=1, eval=eval_fn, deriv=provider,
        required_columns=("y", "z"),
    )


def _build_model_spec(est_cfg: dict, K: int) -> MomentSpec:
    model = est_cfg.get("model", {})
    tag = model["tag"]
    basis_cfg = est_cfg.get("basis", {})
    kind = basis_cfg.get("kind", "K2-basis" if K <= 2 else "K4-basis")
    degree = basis_cfg.get("degree")
    extras = tuple(basis_cfg.get("extras", ()))
    if tag == "nlr_expression":
        dim_theta = int(model["dim_theta"])
        return _build_expression_spec(model["rho"], dim_theta, kind, degree, extras)
    rho = {
        "linear": PolynomialRegression(degree=1),
        "polynomial": PolynomialRegression(degree=3),
        "rational_fraction": RationalFractionRegression(),
        "probit": ProbitRegression(),
    }[tag]
    basis = xz_basis(kind, degree=degree, extras=extras)
    return build_product_spec(
        [(NlrResidual(rho), basis)],
        dim_theta=rho.dim_theta,
        required_columns=("y", "z") + extras,
        max_order=6,
    )


def _build_scheme(est_cfg: dict) -> CorrectionScheme:
    scheme_cfg = est_cfg.get("scheme", {})
    regime = scheme_cfg.get("regime", "classical_scalar")
    K = int(scheme_cfg.get("K", 2))
    if regime == "weakly_classical":
        fam = scheme_cfg.get("v_family", "exponential")
        if fam != "exponential":
            raise ConfigError(f"unknown v_family {fam!r}")
        return CorrectionScheme(regime=regime, K=K, v_family=exponential_v_family(K))
    mask = tuple(tuple(int(v) for v in kap) for kap in scheme_cfg.get("zero_mask", ()))
    d = int(scheme_cfg.get("d", 1))
    return CorrectionScheme(regime=regime, K=K, d=d, zero_mask=mask)


def _result_report(result, config: dict) -> dict:
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "estimates": {
            label: {"value": float(v), "se": float(se)}
            for label, v, se in zip(
                result.beta_hat.labels(), result.beta_hat.packed, result.std_errors
            )
        },
        "theta": result.theta.tolist(),
        "nuisance": result.nuisance.tolist(),
        "Sigma": result.Sigma_hat.tolist(),
        "objective": result.objective_value,
        "converged": result.converged,
        "iterations": result.iterations,
        "n": result.n,
        "m": result.m,
        "weighting": result.policy_tag,
        "diagnostics": {
            k: v for k, v in result.diagnostics.items() if not isinstance(v, np.ndarray)
        },
    }
    if result.j_stat is not None:
        report["j_test"] = {
            "statistic": result.j_stat.statistic,
            "dof": result.j_stat.dof,
            "p_value": result.j_stat.p_value,
        }
    return report


def _run_estimate(config: dict, mode: str) -> int:
    est_cfg = config["estimate"]
    data = read_csv(est_cfg["data"], est_cfg["columns"])
    scheme = _build_scheme(est_cfg)
    spec = _build_model_spec(est_cfg, scheme.K)
    problem = Problem(spec=spec, scheme=scheme, data=data)
    opt = est_cfg.get("optimizer", {})
    cfg = EstimatorConfig(
        policy=WeightingPolicy(est_cfg.get("weighting", {}).get("policy", "two_step_eff_regularized")),
        starts=int(opt.get("starts", 5)),
        jitter=float(opt.get("jitter", 0.1)),
        max_iter=int(opt.get("max_iter", 500)),
        seed=int(config.get("seed", 0)),
        theta_start=opt.get("theta_start"),
        restrict_gamma=bool(est_cfg.get("restrictions", False)),
    )
    result = estimate(problem, cfg)
    report = _result_report(result, config)
    try:
        diag = rank_diagnostics(problem, result)
        report["rank_diagnostics"] = diag.as_dict()
    except Exception:
        pass
    if mode == "bias-bound":
        bb = config.get("bias_bound", {})
        v = bb.get("v")
        if v is None:
            coord = int(bb.get("coord", 0))
            v = np.zeros(result.beta_hat.packed.size)
            v[coord] = 1.0
        rep = bias_bound(
            problem,
            result,
            np.asarray(v, dtype=float),
            kurtosis_bound=bb.get("kurtosis_bound"),
            symmetric_eps=bool(bb.get("symmetric", True)),
            assumption=bb.get("assumption", "bounded"),
        )
        report["bias_bound"] = rep.as_dict()
    out_path = config.get("output", {}).get("report", "merm_report.json")
    Path(out_path).write_text(json.dumps(report, indent=2) + "\n")
    print(f"report written to {out_path}")
    return 0


def _run_simulate(config: dict, reps_override=None, seed_override=None) -> int:
    sim = config["simulate"]
    dcfg = dict(sim.get("design", {}))
    tag = dcfg.pop("tag")
    if seed_override is not None:
        dcfg["seed"] = int(seed_override)
    est_list = []
    for e in sim.get("estimators", ({"kind": "naive"}, {"kind": "merm", "K": 2})):
        est_list.append(
            EstimatorSpec(
                kind=e.get("kind", "merm"),
                K=int(e.get("K", 2)),
                policy=e.get("policy", "two_step_eff_regularized"),
                starts=int(e.get("starts", 2)),
                label=e.get("label", ""),
            )
        )
    design = make_design(
        tag,
        n=dcfg.get("n"),
        tau=dcfg.get("tau"),
        theta0=dcfg.get("theta0"),
        seed=int(dcfg.get("seed", config.get("seed", 0))),
        estimators=est_list,
    )
    R = int(reps_override if reps_override is not None else sim.get("replications", 100))
    workers = resolve_workers(sim.get("workers"))
    result = run_replications(design, R, workers=workers)
    out = config.get("output", {})
    csv_path = out.get("csv", "merm_mc.csv")
    Path(csv_path).write_text(emit_table(result, "csv"))
    json_path = out.get("report", "merm_mc.json")
    Path(json_path).write_text(json.dumps(result.as_dict(), indent=2) + "\n")
    table_path = out.get("table")
    table = emit_table(result, "text")
    if table_path:
        Path(table_path).write_text(table)
    print(table, end="")
    print(f"csv written to {csv_path}; json written to {json_path}")
    return 0


def run(config: dict, reps_override=None, seed_override=None) -> int:
    problems = validate(config)
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return 2
    mode = config["mode"]
    try:
        if mode == "simulate":
            return _run_simulate(config, reps_override, seed_override)
        return _run_estimate(config, mode)
    except (DataError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EstimationError, MomentError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="merm",
        description="errors-in-variables robust GMM estimation and simulation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_est = sub.add_parser("estimate", help="estimate on CSV data per config")
    p_est.add_argument("--config", required=True)
    p_sim = sub.add_parser("simulate", help="run a Monte Carlo campaign per config")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--reps", type=int, default=None)
    p_sim.add_argument("--seed", type=int, default=None)
    p_bb = sub.add_parser("bias-bound", help="estimate, then bound the residual bias")
    p_bb.add_argument("--config", required=True)
    p_val = sub.add_parser("validate", help="list config problems without running")
    p_val.add_argument("config")
    args = parser.parse_args(argv)

    try:
        config = _load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.command == "validate":
        problems = validate(config)
        for p in problems:
            print(p)
        return 0 if not problems else 2

    if args.command in ("estimate", "bias-bound"):
        config = dict(config)
        config["mode"] = args.command
        return run(config)
    if args.command == "simulate":
        config = dict(config)
        config["mode"] = "simulate"
        return run(config, reps_override=args.reps, seed_override=args.seed)
    return 2


if __name__ == "__main__":
    sys.exit(main())
