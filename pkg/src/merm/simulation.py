"""Monte Carlo designs, replication campaigns, and result tables."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import scipy.optimize

from .dataset import Dataset
from .gamma import CorrectionScheme
from .gmm import (
    EstimationError,
    EstimatorConfig,
    Problem,
    WeightingPolicy,
    estimate,
)
from .models.bases import BasisColumn, PolyBasis, xz_basis
from .models.builders import build_product_spec
from .models.logit import (
    MnlModel,
    MnlProbability,
    MnlResidual,
    UtilitySpec,
    marginal_effects,
    mnl_mle,
    choice_probabilities,
)
from .models.regression import (
    NlrResidual,
    PolynomialRegression,
    ProbitRegression,
    RationalFractionRegression,
)
from . import numdiff

_Z975 = 1.959964

DESIGN_TAGS = (
    "polynomial",
    "rational_fraction",
    "probit",
    "multinomial_logit",
    "calibrated_logit",
    "linear_attenuation",
)


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator entry of a design: the naive benchmark or a MERM variant."""

    kind: str  # "naive" | "merm"
    K: int = 2
    policy: str = "two_step_eff_regularized"
    starts: int = 2
    jitter: float = 0.1
    gtol: float = 1e-7
    label: str = ""

    def resolved_label(self, design_tag: str) -> str:
        if self.label:
            return self.label
        if self.kind == "naive":
            return {
                "polynomial": "OLS",
                "rational_fraction": "NLLS",
                "probit": "NLLS",
                "multinomial_logit": "MLE",
                "calibrated_logit": "MLE",
                "linear_attenuation": "OLS",
            }[design_tag]
        return f"K={self.K}"


@dataclass(frozen=True)
class McDesign:
    """A simulation design: DGP tag, sample size, noise ratio, estimators."""

    tag: str
    n: int
    tau: float
    theta0: tuple[float, ...]
    seed: int = 0
    estimators: tuple[EstimatorSpec, ...] = ()
    display_scale: float = 1.0

    def __post_init__(self):
        if self.tag not in DESIGN_TAGS:
            raise ValueError(f"unknown design tag {self.tag!r}")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.n < 50:
            raise ValueError("n must be >= 50")
        dim = len(_DESIGNS[self.tag].theta0)
        if len(self.theta0) != dim:
            raise ValueError(f"theta0 must have length {dim} for {self.tag}")


@dataclass(frozen=True)
class _DesignInfo:
    theta0: tuple[float, ...]
    n: int
    tau: float
    display_scale: float = 1.0


# Defaults per design; tau for the instrument designs makes sigma_eps = 0.5.
_TAU_S07 = 0.5 / math.sqrt(1.25)

_CALIBRATED_THETA0 = (0.0355, 0.2976, -2.0891, 0.0079, -0.9900, 1.8794, -0.0223, -0.0149)

_DESIGNS: dict[str, _DesignInfo] = {
    "polynomial": _DesignInfo((1.0, 1.0, 0.0, -0.5), 1000, _TAU_S07),
    "rational_fraction": _DesignInfo((1.0, 1.0, 2.0), 1000, _TAU_S07),
    "probit": _DesignInfo((-1.0, 2.0), 1000, _TAU_S07),
    "multinomial_logit": _DesignInfo((1.0, 0.0, 0.0, 0.0, 0.0, 0.0), 2000, 0.5, 100.0),
    "calibrated_logit": _DesignInfo(_CALIBRATED_THETA0, 2769, 0.5),
    "linear_attenuation": _DesignInfo((1.0, 1.0), 1000, 0.5),
}


def default_merm_estimator(tag: str, K: int) -> EstimatorSpec:
    """Per-design optimizer depth: the probit objective is multi-modal for
    K = 4 and needs a wide multi-start; the others are well behaved."""
    if tag == "probit":
        return EstimatorSpec("merm", K=K, starts=6, jitter=0.5)
    if tag in ("multinomial_logit", "calibrated_logit"):
        return EstimatorSpec("merm", K=K, starts=2, jitter=0.2)
    return EstimatorSpec("merm", K=K, starts=2, jitter=0.1)


def make_design(
    tag: str,
    n: int | None = None,
    tau: float | None = None,
    theta0: Sequence[float] | None = None,
    seed: int = 0,
    estimators: Sequence[EstimatorSpec] | None = None,
) -> McDesign:
    """A design with the documented defaults, overridable field by field."""
    info = _DESIGNS[tag]
    if estimators is None:
        estimators = (
            EstimatorSpec("naive"),
            default_merm_estimator(tag, 2),
            default_merm_estimator(tag, 4),
        )
    return McDesign(
        tag=tag,
        n=info.n if n is None else int(n),
        tau=info.tau if tau is None else float(tau),
        theta0=tuple(info.theta0 if theta0 is None else theta0),
        seed=int(seed),
        estimators=tuple(estimators),
        display_scale=info.display_scale,
    )


@dataclass(frozen=True)
class Truth:
    """Latents and target values attached to a generated dataset."""

    theta0: np.ndarray
    x_star: np.ndarray
    target_names: tuple[str, ...]
    target_values: np.ndarray


def _rep_rng(design: McDesign, replication_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=design.seed, spawn_key=(replication_index, 0))
    return np.random.default_rng(ss)


def _rep_est_seed(design: McDesign, replication_index: int, slot: int) -> int:
    ss = np.random.SeedSequence(entropy=design.seed, spawn_key=(replication_index, 1, slot))
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# Calibrated-logit synthetic covariates.  The published experiment resamples a
# proprietary travel survey; this generator substitutes documented synthetic
# marginals: log-normal income (mean 45, sd 17.5), Bernoulli urban indicator,
# and Gaussian price/time pairs per mode with mild within-mode correlation.
_CAL = {
    "income_mean": 45.0,
    "income_sd": 17.5,
    "urban_p": 0.35,
    "price_means": (165.0, 80.0, 60.0),  # air, car, train
    "time_means": (150.0, 420.0, 300.0),
    "price_sds": (25.0, 15.0, 10.0),
    "time_sds": (25.0, 50.0, 40.0),
    "price_time_corr": 0.3,
    "iv_kappa": 0.5,
    "x_scale": 20.0,
}


def _calibrated_population_point() -> tuple[float, dict]:
    s = {
        "urban": _CAL["urban_p"],
        "price1": _CAL["price_means"][0],
        "price2": _CAL["price_means"][1],
        "price0": _CAL["price_means"][2],
        "time1": _CAL["time_means"][0],
        "time2": _CAL["time_means"][1],
        "time0": _CAL["time_means"][2],
    }
    return _CAL["income_mean"], s


def simple_mnl_model() -> MnlModel:
    return MnlModel(
        dim_theta=6,
        options=(
            UtilitySpec(slope=0, terms=((1, "w1"), (2, None))),
            UtilitySpec(slope=3, terms=((4, "w2"), (5, None))),
            UtilitySpec(slope=None, terms=()),
        ),
    )


def calibrated_mnl_model() -> MnlModel:
    return MnlModel(
        dim_theta=8,
        options=(
            UtilitySpec(slope=0, terms=((1, "urban"), (2, None), (6, "price1"), (7, "time1"))),
            UtilitySpec(slope=3, terms=((4, "urban"), (5, None), (6, "price2"), (7, "time2"))),
            UtilitySpec(slope=None, terms=((6, "price0"), (7, "time0"))),
        ),
    )


def _mnl_draw_choices(model: MnlModel, x_star, s, theta0, rng) -> np.ndarray:
    """Indicators (n, 3) for options (1, 2, 0) via type-1 extreme value shocks."""
    u, _ = model.utilities(x_star, s, np.asarray(theta0, float))
    gum = rng.gumbel(size=u.shape)
    total = u + gum
    winner = np.argmax(total, axis=0)
    y = np.zeros((x_star.shape[0], 3))
    y[np.arange(x_star.shape[0]), winner] = 1.0
    return y


def generate_dgp(design: McDesign, replication_index: int) -> tuple[Dataset, Truth]:
    """Draw one replication's dataset plus the truth needed for scoring."""
    rng = _rep_rng(design, replication_index)
    theta0 = np.asarray(design.theta0, dtype=float)
    tag = design.tag

    if tag in ("polynomial", "rational_fraction", "probit", "linear_attenuation"):
        n = design.n
        z = rng.normal(0.0, 1.0, n)
        v = rng.normal(0.0, 0.5, n)
        x_star = z + v
        sigma_xstar = math.sqrt(1.25)
        eps = rng.normal(0.0, design.tau * sigma_xstar, n) if design.tau > 0 else np.zeros(n)
        x = x_star + eps
        rho = _REGRESSIONS[tag]
        mean = rho.value(x_star[:, None], {}, theta0)
        if tag == "probit":
            y = (rng.uniform(size=n) < mean).astype(float)
        else:
            y = mean + rng.normal(0.0, 0.5, n)
        data = Dataset(x=x, s={"y": y, "z": z})
        names = tuple(f"theta{i+1}" for i in range(theta0.size))
        return data, Truth(theta0, x_star, names, theta0.copy())

    if tag == "multinomial_logit":
        n = design.n
        model = simple_mnl_model()
        z = rng.normal(0.0, 1.0, n)
        v1 = rng.normal(1.0, math.sqrt(0.5), n)
        v0 = rng.normal(0.0, math.sqrt(0.5), n)
        x_star = v1 * z + v0
        sigma_xstar = math.sqrt(2.0)
        rho_w = 0.7
        w1 = rho_w * x_star / sigma_xstar + math.sqrt(1 - rho_w**2) * rng.normal(0.0, 1.0, n)
        w2 = rho_w * x_star / sigma_xstar + math.sqrt(1 - rho_w**2) * rng.normal(0.0, 1.0, n)
        eps = rng.normal(0.0, design.tau * sigma_xstar, n) if design.tau > 0 else np.zeros(n)
        s = {"w1": w1, "w2": w2, "z": z}
        y = _mnl_draw_choices(model, x_star, s, theta0, rng)
        s.update({"y1": y[:, 0], "y2": y[:, 1], "y0": y[:, 2]})
        data = Dataset(x=x_star + eps, s=s)
        names, values = _mnl_targets_truth(model, theta0, 0.0, {"w1": 0.0, "w2": 0.0})
        return data, Truth(theta0, x_star, names, values)

    if tag == "calibrated_logit":
        n = design.n
        model = calibrated_mnl_model()
        mu_log = math.log(_CAL["income_mean"]) - 0.5 * math.log(
            1.0 + (_CAL["income_sd"] / _CAL["income_mean"]) ** 2
        )
        sd_log = math.sqrt(math.log(1.0 + (_CAL["income_sd"] / _CAL["income_mean"]) ** 2))
        income = rng.lognormal(mu_log, sd_log, n)
        urban = (rng.uniform(size=n) < _CAL["urban_p"]).astype(float)
        corr = _CAL["price_time_corr"]
        s = {"urban": urban}
        for j, key in enumerate(("1", "2", "0")):
            zp = rng.normal(size=n)
            zt = corr * zp + math.sqrt(1 - corr**2) * rng.normal(size=n)
            s[f"price{key}"] = _CAL["price_means"][j] + _CAL["price_sds"][j] * zp
            s[f"time{key}"] = _CAL["time_means"][j] + _CAL["time_sds"][j] * zt
        zeta = rng.normal(size=n)
        kappa = _CAL["iv_kappa"]
        s["z"] = kappa * income / _CAL["income_sd"] + math.sqrt(1 - kappa**2) * zeta
        eps = rng.normal(0.0, design.tau * _CAL["income_sd"], n) if design.tau > 0 else np.zeros(n)
        y = _mnl_draw_choices(model, income, s, theta0, rng)
        s.update({"y1": y[:, 0], "y2": y[:, 1], "y0": y[:, 2]})
        s["dprice1"] = s["price1"] - s["price0"]
        s["dtime1"] = s["time1"] - s["time0"]
        s["dprice2"] = s["price2"] - s["price0"]
        s["dtime2"] = s["time2"] - s["time0"]
        data = Dataset(x=income + eps, s=s)
        xbar, spoint = _calibrated_population_point()
        names, values = _elasticity_targets_truth(model, theta0, xbar, spoint)
        return data, Truth(theta0, income, names, values)

    raise ValueError(f"unknown design tag {tag!r}")


_REGRESSIONS = {
    "polynomial": PolynomialRegression(degree=3),
    "rational_fraction": RationalFractionRegression(),
    "probit": ProbitRegression(),
    "linear_attenuation": PolynomialRegression(degree=1),
}


def _mnl_effect_fn(model: MnlModel, xbar: float, spoint: dict, j: int, wrt: str):
    def fn(theta):
        return float(marginal_effects(model, xbar, spoint, theta, wrt)[j])

    return fn


def _mnl_targets_truth(model, theta0, xbar, spoint):
    names, values = [], []
    for j, pj in enumerate(("p1", "p2", "p0")):
        for wrt, short in (("x", "x"), ("w1", "w1"), ("w2", "w2")):
            names.append(f"d{pj}/d{short}")
            values.append(_mnl_effect_fn(model, xbar, spoint, j, wrt)(np.asarray(theta0)))
    return tuple(names), np.array(values)


def _elasticity_fn(model: MnlModel, xbar: float, spoint: dict, j: int):
    def fn(theta):
        p = choice_probabilities(model, xbar, spoint, theta)
        dpdx = marginal_effects(model, xbar, spoint, theta, "x")
        return float(xbar / p[j] * dpdx[j])

    return fn


def _elasticity_targets_truth(model, theta0, xbar, spoint):
    names, values = [], []
    for j, pj in enumerate(("p1", "p2", "p0")):
        names.append(f"eps_{pj}")
        values.append(_elasticity_fn(model, xbar, spoint, j)(np.asarray(theta0)))
    return tuple(names), np.array(values)


def _design_targets(design: McDesign):
    """(names, functionals of theta) for the design's reported quantities."""
    theta0 = np.asarray(design.theta0, float)
    if design.tag == "multinomial_logit":
        model = simple_mnl_model()
        fns = [
            _mnl_effect_fn(model, 0.0, {"w1": 0.0, "w2": 0.0}, j, wrt)
            for j in range(3)
            for wrt in ("x", "w1", "w2")
        ]
        names, _ = _mnl_targets_truth(model, theta0, 0.0, {"w1": 0.0, "w2": 0.0})
        return names, fns
    if design.tag == "calibrated_logit":
        model = calibrated_mnl_model()
        xbar, spoint = _calibrated_population_point()
        fns = [_elasticity_fn(model, xbar, spoint, j) for j in range(3)]
        names, _ = _elasticity_targets_truth(model, theta0, xbar, spoint)
        return names, fns
    names = tuple(f"theta{i+1}" for i in range(theta0.size))
    fns = [lambda th, i=i: float(th[i]) for i in range(theta0.size)]
    return names, fns


def build_problem(design: McDesign, data: Dataset, K: int) -> Problem:
    """Moment spec + correction scheme for a MERM estimator on this design."""
    kind = "K2-basis" if K <= 2 else "K4-basis"
    max_order = max(K + 2, 6)
    if design.tag in ("polynomial", "rational_fraction", "probit"):
        rho = _REGRESSIONS[design.tag]
        basis = xz_basis(kind)
        spec = build_product_spec(
            [(NlrResidual(rho), basis)],
            dim_theta=rho.dim_theta,
            required_columns=("y", "z"),
            max_order=max_order,
        )
    elif design.tag == "linear_attenuation":
        rho = _REGRESSIONS[design.tag]
        basis = PolyBasis(
            (BasisColumn(0), BasisColumn(1), BasisColumn(0, (("z", 1),)))
        )
        spec = build_product_spec(
            [(NlrResidual(rho), basis)],
            dim_theta=rho.dim_theta,
            required_columns=("y", "z"),
            max_order=max_order,
        )
    elif design.tag == "multinomial_logit":
        model = simple_mnl_model()
        prob = MnlProbability(model, order=max_order)
        blocks = [
            (MnlResidual(prob, 0, "y1", max_order), xz_basis(kind, extras=("w1",))),
            (MnlResidual(prob, 1, "y2", max_order), xz_basis(kind, extras=("w2",))),
        ]
        spec = build_product_spec(
            blocks, dim_theta=6,
            required_columns=("y1", "y2", "z", "w1", "w2"),
            max_order=max_order,
        )
    elif design.tag == "calibrated_logit":
        model = calibrated_mnl_model()
        prob = MnlProbability(model, order=max_order)
        scale = _CAL["x_scale"]
        blocks = [
            (
                MnlResidual(prob, 0, "y1", max_order),
                xz_basis(kind, extras=("urban", "dprice1", "dtime1"), x_scale=scale),
            ),
            (
                MnlResidual(prob, 1, "y2", max_order),
                xz_basis(kind, extras=("urban", "dprice2", "dtime2"), x_scale=scale),
            ),
        ]
        spec = build_product_spec(
            blocks, dim_theta=8,
            required_columns=("y1", "y2", "z", "urban"),
            max_order=max_order,
        )
    else:
        raise ValueError(f"no MERM problem for design {design.tag!r}")
    scheme = CorrectionScheme(regime="classical_scalar", K=K)
    return Problem(spec=spec, scheme=scheme, data=data)


@dataclass(frozen=True)
class NaiveFit:
    theta: np.ndarray
    Sigma: np.ndarray  # asymptotic covariance of sqrt(n)(theta_hat - theta0)
    converged: bool


def naive_estimator(design_tag: str, data: Dataset, theta_dim: int | None = None) -> NaiveFit:
    """The design's no-correction benchmark: OLS, NLLS, or conditional MLE."""
    n = data.n
    x1 = data.x[:, 0]
    if design_tag in ("polynomial", "linear_attenuation"):
        deg = 3 if design_tag == "polynomial" else 1
        X = np.column_stack([x1**j for j in range(deg + 1)])
        y = data.column("y")
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        e = y - X @ coef
        XtX_inv = np.linalg.inv(X.T @ X / n)
        meat = (X * e[:, None]**2).T @ X / n
        return NaiveFit(coef, XtX_inv @ meat @ XtX_inv, True)
    if design_tag == "rational_fraction":
        # rho is linear in theta, so NLLS is least squares on (1, x, kernel)
        rho = _REGRESSIONS[design_tag]
        X = rho.dtheta(data.x, data.s, np.zeros(3))
        y = data.column("y")
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        e = y - X @ coef
        XtX_inv = np.linalg.inv(X.T @ X / n)
        meat = (X * e[:, None]**2).T @ X / n
        return NaiveFit(coef, XtX_inv @ meat @ XtX_inv, True)
    if design_tag == "probit":
        rho = _REGRESSIONS[design_tag]
        y = data.column("y")

        def resid(theta):
            return y - rho.value(data.x, data.s, theta)

        def jac(theta):
            return -rho.dtheta(data.x, data.s, theta)

        best = None
        for start in ((0.0, 1.0), (0.0, -1.0), (-0.5, 1.5), (0.5, -1.5), (0.0, 2.0)):
            res = scipy.optimize.least_squares(resid, np.array(start), jac=jac, method="lm")
            key = (res.cost, tuple(res.x))
            if best is None or key < best[0]:
                best = (key, res)
        res = best[1]
        theta = res.x
        J = rho.dtheta(data.x, data.s, theta)
        e = resid(theta)
        bread = np.linalg.inv(J.T @ J / n)
        meat = (J * e[:, None]**2).T @ J / n
        return NaiveFit(theta, bread @ meat @ bread, bool(best[1].status > 0))
    if design_tag in ("multinomial_logit", "calibrated_logit"):
        model = simple_mnl_model() if design_tag == "multinomial_logit" else calibrated_mnl_model()
        y = np.column_stack([data.column("y1"), data.column("y2"), data.column("y0")])
        theta, Sigma, ok = mnl_mle(model, x1, data.s, y)
        return NaiveFit(theta, Sigma, ok)
    raise ValueError(f"no naive estimator for design {design_tag!r}")


@dataclass(frozen=True)
class EstimatorStats:
    """Per-target aggregates for one estimator across replications."""

    bias: np.ndarray
    std: np.ndarray
    rmse: np.ndarray
    size: np.ndarray
    mc_se: np.ndarray
    used: int
    failures: int

    def as_dict(self):
        return {
            "bias": self.bias.tolist(),
            "std": self.std.tolist(),
            "rmse": self.rmse.tolist(),
            "size": self.size.tolist(),
            "mc_se": self.mc_se.tolist(),
            "used": self.used,
            "failures": self.failures,
        }


@dataclass(frozen=True)
class McResult:
    design_tag: str
    replications: int
    seed: int
    target_names: tuple[str, ...]
    true_values: np.ndarray
    estimators: Mapping[str, EstimatorStats]
    display_scale: float = 1.0

    def as_dict(self):
        return {
            "design": self.design_tag,
            "replications": self.replications,
            "seed": self.seed,
            "targets": list(self.target_names),
            "true_values": self.true_values.tolist(),
            "display_scale": self.display_scale,
            "estimators": {k: v.as_dict() for k, v in self.estimators.items()},
        }


def _estimate_targets_merm(design, spec_entry, problem, naive_theta, seed, fns):
    cfg = EstimatorConfig(
        policy=WeightingPolicy(spec_entry.policy),
        starts=spec_entry.starts,
        jitter=spec_entry.jitter,
        gtol=spec_entry.gtol,
        seed=seed,
        theta_start=naive_theta,
    )
    result = estimate(problem, cfg)
    p = problem.spec.dim_theta
    ests, ses = [], []
    for fn in fns:
        def f_beta(beta, fn=fn):
            return fn(beta[:p])

        grad = numdiff.jacobian(lambda b: np.array([f_beta(b)]), result.beta_hat.packed)[0]
        var = float(grad @ result.Sigma_hat @ grad)
        ests.append(f_beta(result.beta_hat.packed))
        ses.append(math.sqrt(max(var, 0.0) / problem.n))
    return np.array(ests), np.array(ses)


def _estimate_targets_naive(design, data, fns):
    fit = naive_estimator(design.tag, data)
    if not fit.converged:
        raise EstimationError("naive estimator did not converge")
    ests, ses = [], []
    for fn in fns:
        grad = numdiff.jacobian(lambda t: np.array([fn(t)]), fit.theta)[0]
        var = float(grad @ fit.Sigma @ grad)
        ests.append(fn(fit.theta))
        ses.append(math.sqrt(max(var, 0.0) / data.n))
    return np.array(ests), np.array(ses), fit.theta


def _replication_worker(args):
    design, rep = args
    data, truth = generate_dgp(design, rep)
    _, fns = _design_targets(design)
    out = {}
    naive_theta = None
    try:
        naive_est, naive_se, naive_theta = _estimate_targets_naive(design, data, fns)
        naive_ok = True
    except Exception:
        naive_est = naive_se = None
        naive_ok = False
    for slot, espec in enumerate(design.estimators):
        label = espec.resolved_label(design.tag)
        if espec.kind == "naive":
            out[label] = (naive_est, naive_se) if naive_ok else None
            continue
        try:
            problem = build_problem(design, data, espec.K)
            start = naive_theta if naive_theta is not None else np.zeros(problem.spec.dim_theta)
            est, se = _estimate_targets_merm(
                design, espec, problem, start, _rep_est_seed(design, rep, slot), fns
            )
            if not (np.all(np.isfinite(est)) and np.all(np.isfinite(se))):
                raise EstimationError("non-finite estimates")
            out[label] = (est, se)
        except Exception:
            out[label] = None
    return rep, out


def resolve_workers(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("MERM_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, min(os.cpu_count() or 1, 4))


def run_replications(design: McDesign, R: int, workers: int | None = None) -> McResult:
    """Run R replications and aggregate bias/std/rmse/size per estimator.

    Deterministic for fixed (design.seed, R): replication RNG streams are
    indexed by replication number, and aggregation is in replication order, so
    the result is bit-identical for any worker count.
    """
    if R < 2:
        raise ValueError("R must be >= 2")
    nworkers = resolve_workers(workers)
    jobs = [(design, r) for r in range(R)]
    if nworkers == 1:
        raw = [_replication_worker(j) for j in jobs]
    else:
        ctx = get_context("fork")
        chunk = max(1, R // (nworkers * 8))
        with ctx.Pool(nworkers) as pool:
            raw = pool.map(_replication_worker, jobs, chunksize=chunk)
    raw.sort(key=lambda t: t[0])

    _, truth0 = generate_dgp(design, 0)
    names = truth0.target_names
    true_vals = truth0.target_values
    labels = [e.resolved_label(design.tag) for e in design.estimators]

    stats = {}
    for label in labels:
        ests, ses = [], []
        failures = 0
        for _, out in raw:
            entry = out.get(label)
            if entry is None:
                failures += 1
                continue
            ests.append(entry[0])
            ses.append(entry[1])
        if not ests:
            raise EstimationError(f"all replications failed for estimator {label}")
        E = np.vstack(ests)
        S = np.vstack(ses)
        dev = E - true_vals[None, :]
        bias = dev.mean(axis=0)
        std = dev.std(axis=0)  # ddof=0 so rmse^2 = bias^2 + std^2 exactly
        rmse = np.sqrt(bias**2 + std**2)
        with np.errstate(divide="ignore", invalid="ignore"):
            tstats = np.abs(dev) / S
        size = (tstats > _Z975).mean(axis=0)
        mc_se = std / math.sqrt(E.shape[0])
        stats[label] = EstimatorStats(
            bias=bias, std=std, rmse=rmse, size=size, mc_se=mc_se,
            used=E.shape[0], failures=failures,
        )
    return McResult(
        design_tag=design.tag,
        replications=R,
        seed=design.seed,
        target_names=names,
        true_values=true_vals,
        estimators=stats,
        display_scale=design.display_scale,
    )


def emit_table(result: McResult, fmt: str = "text") -> str:
    """Render the bias/std/rmse/size table as text, csv, or markdown.

    The csv form carries raw (unscaled) values plus the display scale; the
    text and markdown forms apply the design's display scale (e.g. 100 for
    designs reported in units of 1e-2).
    """
    headers = ["estimator", "target", "true", "bias", "std", "rmse", "size"]
    if fmt == "csv":
        lines = [",".join(headers + ["mc_se", "used", "failures", "display_scale"])]
        for label, st in result.estimators.items():
            for i, name in enumerate(result.target_names):
                lines.append(
                    ",".join(
                        [label, name]
                        + [
                            repr(float(v))
                            for v in (
                                result.true_values[i],
                                st.bias[i],
                                st.std[i],
                                st.rmse[i],
                                st.size[i],
                                st.mc_se[i],
                            )
                        ]
                        + [str(st.used), str(st.failures), repr(float(result.display_scale))]
                    )
                )
        return "\n".join(lines) + "\n"

    sc = result.display_scale
    rows = []
    for label, st in result.estimators.items():
        for i, name in enumerate(result.target_names):
            rows.append(
                [
                    label,
                    name,
                    f"{result.true_values[i] * sc:.4f}",
                    f"{st.bias[i] * sc:.4f}",
                    f"{st.std[i] * sc:.4f}",
                    f"{st.rmse[i] * sc:.4f}",
                    f"{100 * st.size[i]:.2f}%",
                ]
            )
    if fmt == "markdown":
        out = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(headers)]
        out += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(out) + "\n"
    if fmt == "text":
        widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
        fmt_row = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))
        out = [fmt_row(headers), fmt_row(["-" * w for w in widths])]
        out += [fmt_row(r) for r in rows]
        if sc != 1.0:
            out.append(f"(bias/std/rmse scaled by {sc:g})")
        return "\n".join(out) + "\n"
    raise ValueError(f"unknown table format {fmt!r}")


def read_mc_csv(text: str) -> dict:
    """Parse an emit_table csv back into nested {estimator: {target: row}}."""
    lines = [ln for ln in text.strip().splitlines() if ln]
    header = lines[0].split(",")
    out: dict = {}
    for ln in lines[1:]:
        parts = ln.split(",")
        row = dict(zip(header, parts))
        est = row.pop("estimator")
        tgt = row.pop("target")
        parsed = {}
        for k, v in row.items():
            parsed[k] = int(v) if k in ("used", "failures") else float(v)
        out.setdefault(est, {})[tgt] = parsed
    return out
