"""Synthetic data-generating processes and Monte Carlo experiments.

Three outcome models are provided, each with two potential outcomes
(control ``t=0`` stored as level 1, treated ``t=1`` stored as level 2):

* ``nonlinear`` -- linear, quadratic and cosine terms plus linear and
  pairwise-interaction effect modification;
* ``piecewise`` -- step functions of each covariate's sign;
* ``selection`` -- linear in the first ten covariates only.

Covariates are Normal(1, 1) and the noise term is shared by both potential
outcomes.  See ``SimParams`` for how the noise reaches treatment assignment.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from matchml.data import Dataset, split
from matchml.dml import DmlConfig, mdml_run
from matchml.estimators import DEFAULT_ALPHA, MatchedML
from matchml.representation import (
    fit_prognostic,
    fit_propensity_representation,
    make_identity,
)
from matchml.rng import derive_seed, generator

DGPS = ("nonlinear", "piecewise", "selection")
N_SELECTED = 10


@dataclass(frozen=True)
class Coefficients:
    lam: np.ndarray
    beta_lin: np.ndarray
    beta_qua: np.ndarray
    beta_cos: np.ndarray
    delta: np.ndarray
    delta_int: np.ndarray

    def without_heterogeneity(self) -> "Coefficients":
        return replace(self, delta=np.zeros_like(self.delta),
                       delta_int=np.zeros_like(self.delta_int))


def draw_coefficients(p: int, seed: int) -> Coefficients:
    rng = generator(seed, 10)
    lam = rng.uniform(-4, 4, p)
    return Coefficients(
        lam=lam,
        beta_lin=lam.copy(),
        beta_qua=rng.uniform(0, 1, p) + lam,
        beta_cos=rng.uniform(0, 1, p) + lam,
        delta=rng.uniform(-1, 1, p),
        delta_int=rng.uniform(-0.5, 0.5, (p, p)),
    )


@dataclass(frozen=True)
class SimParams:
    """Settings for one draw of a DGP.

    ``coef_seed`` fixes the coefficient vectors (shared across replications
    of an experiment); ``seed`` drives covariates, noise and treatment.
    ``noise_convention`` says whether the per-unit sigma is a standard
    deviation (``"sd"``) or a variance (``"variance"``).

    By default treatment assignment sees the noiseless potential-outcome
    means and its own independent noise draw, so assignment is ignorable
    given X.  ``shared_noise=True`` feeds the realized potential outcomes
    and the outcome noise itself into the propensity instead; assignment
    then depends on the outcome noise and the ATE is not identified.
    """

    n: int
    p: int = 20
    dgp: str = "selection"
    alpha: float = 5.0
    tau: float = 5.0
    seed: int = 0
    coef_seed: Optional[int] = None
    noise_convention: str = "sd"
    noise_scale: float = 1.0
    x_shift: float = 0.0
    heterogeneity: bool = True
    shared_noise: bool = False

    def __post_init__(self):
        if self.dgp not in DGPS:
            raise ValueError(f"unknown dgp {self.dgp!r}; valid: {list(DGPS)}")
        if self.n < 2 or self.p < 1:
            raise ValueError("need n >= 2 and p >= 1")
        if self.dgp == "selection" and self.p < N_SELECTED:
            raise ValueError(f"selection DGP needs p >= {N_SELECTED}")
        if self.noise_convention not in ("sd", "variance"):
            raise ValueError("noise_convention must be 'sd' or 'variance'")

    def coefficients(self) -> Coefficients:
        c = draw_coefficients(self.p, self.seed if self.coef_seed is None else self.coef_seed)
        return c if self.heterogeneity else c.without_heterogeneity()


def conditional_mean(X, t, dgp: str, coef: Coefficients, alpha=5.0, tau=5.0) -> np.ndarray:
    """Noiseless potential-outcome mean for treatment indicator ``t`` in {0, 1}."""
    X = np.asarray(X, dtype=float)
    base = alpha + t * tau
    if dgp == "nonlinear":
        inter = np.einsum("ij,jk,ik->i", X, coef.delta_int, X)
        return (base + X @ coef.beta_lin + (X ** 2) @ coef.beta_qua + np.cos(X) @ coef.beta_cos
                + t * (X @ coef.delta) + t * inter)
    if dgp == "piecewise":
        pos = (X > 0).astype(float)
        return base + pos @ coef.beta_lin + t * (pos @ coef.delta)
    if dgp == "selection":
        Xs = X[:, :N_SELECTED]
        return base + Xs @ coef.beta_lin[:N_SELECTED] + t * (Xs @ coef.delta[:N_SELECTED])
    raise ValueError(f"unknown dgp {dgp!r}")


def true_ate(params: SimParams) -> float:
    """Population ATE under Normal(1 + shift, 1) covariates."""
    c = params.coefficients()
    m = 1.0 + params.x_shift
    if params.dgp == "selection":
        return params.tau + m * float(c.delta[:N_SELECTED].sum())
    if params.dgp == "piecewise":
        return params.tau + float(norm.cdf(m)) * float(c.delta.sum())
    second = m * m + np.eye(params.p)  # E[X_j X_k]
    return params.tau + m * float(c.delta.sum()) + float(np.sum(c.delta_int * second))


def gen_treatment(y0, y1, eps, rng_or_seed):
    """Propensity ``expit(u (y1 + y0) / 2 - eps)`` with u ~ Uniform(0.1, 1), then Bernoulli draws.

    Returns ``(propensities, treated)`` where ``treated`` is 0/1.
    """
    rng = rng_or_seed if isinstance(rng_or_seed, np.random.Generator) else generator(rng_or_seed, 20)
    y0, y1, eps = (np.asarray(a, dtype=float) for a in (y0, y1, eps))
    u = rng.uniform(0.1, 1.0, y0.shape[0])
    e = expit(u * (y1 + y0) / 2.0 - eps)
    treated = (rng.uniform(size=y0.shape[0]) < e).astype(np.int64)
    return e, treated


@dataclass
class SimOutput:
    dataset: Dataset
    mu0: np.ndarray
    mu1: np.ndarray
    cate: np.ndarray
    propensity: np.ndarray
    params: SimParams


def draw_covariates(n, p, rng, shift=0.0):
    return rng.normal(1.0 + shift, 1.0, (n, p))


def gen_dgp(params: SimParams) -> SimOutput:
    rng = generator(params.seed, 30)
    coef = params.coefficients()
    n, p = params.n, params.p
    X = draw_covariates(n, p, rng, params.x_shift)
    sigma = rng.uniform(1.0, 2.0, n)
    sd = sigma if params.noise_convention == "sd" else np.sqrt(sigma)
    eps = rng.normal(0.0, 1.0, n) * sd * params.noise_scale
    mu0 = conditional_mean(X, 0, params.dgp, coef, params.alpha, params.tau)
    mu1 = conditional_mean(X, 1, params.dgp, coef, params.alpha, params.tau)
    if params.shared_noise:
        e, treated = gen_treatment(mu0 + eps, mu1 + eps, eps, rng)
    else:
        eps_t = rng.normal(0.0, 1.0, n) * sd * params.noise_scale
        e, treated = gen_treatment(mu0, mu1, eps_t, rng)
    y = np.where(treated == 1, mu1, mu0) + eps
    ds = Dataset(X, y, treated + 1, n_levels=2, labels={1: 0, 2: 1}, require_all_levels=False)
    return SimOutput(ds, mu0, mu1, mu1 - mu0, e, params)


def gen_linear(n, beta, tau=5.0, noise=1.0, propensity=None, seed=0, discrete=None):
    """Linear test DGP ``y = x beta + tau * t + noise``.

    ``propensity=None`` gives a logistic assignment in the first covariate;
    a float gives randomized assignment.  ``discrete`` draws covariates
    uniformly from ``range(discrete)`` instead of Normal(0, 1).
    """
    rng = generator(seed, 40)
    beta = np.asarray(beta, dtype=float)
    p = beta.shape[0]
    if discrete:
        X = rng.integers(0, discrete, (n, p)).astype(float)
    else:
        X = rng.normal(0.0, 1.0, (n, p))
    e = np.full(n, float(propensity)) if propensity is not None else expit(0.5 * X[:, 0])
    treated = (rng.uniform(size=n) < e).astype(np.int64)
    mu0 = X @ beta
    mu1 = mu0 + tau
    y = np.where(treated == 1, mu1, mu0) + noise * rng.normal(size=n)
    ds = Dataset(X, y, treated + 1, n_levels=2, labels={1: 0, 2: 1}, require_all_levels=False)
    return SimOutput(ds, mu0, mu1, mu1 - mu0, e, None)


# ---------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class MethodConfig:
    name: str
    representation: str = "prognostic"  # prognostic | identity | propensity-score
    q: float = 2.0
    k: object = "auto"
    lam: float = 0.0


METHODS = {
    "prognostic": MethodConfig("prognostic", "prognostic"),
    "identity": MethodConfig("identity", "identity"),
    "propensity": MethodConfig("propensity", "propensity-score"),
}


def resolve_methods(names) -> list:
    out = []
    for m in names:
        if isinstance(m, MethodConfig):
            out.append(m)
        elif m in METHODS:
            out.append(METHODS[m])
        else:
            raise KeyError(f"unknown method {m!r}; valid: {sorted(METHODS)}")
    return out


def fit_mml(sim: SimOutput, method: MethodConfig, train_fraction: float, seed: int) -> MatchedML:
    """Split, learn the representation on the training part, index the rest."""
    ds = sim.dataset
    plan = split(ds, train_fraction, seed)
    if method.representation == "prognostic":
        rep = fit_prognostic(ds, plan.train_indices, arms=(2, 1), lam=method.lam)
    elif method.representation == "identity":
        rep = make_identity(ds.p)
    elif method.representation == "propensity-score":
        rep = fit_propensity_representation(ds, plan.train_indices, t=2)
    else:
        raise ValueError(f"unknown representation {method.representation!r}")
    ms = plan.match_indices
    est = MatchedML(rep, q=method.q, k=method.k)
    return est.fit(ds.covariates[ms], ds.outcomes[ms], ds.treatments[ms])


def _query_points(params: SimParams, n_queries: int, seed: int):
    rng = generator(seed, 50)
    Xq = draw_covariates(n_queries, params.p, rng, params.x_shift)
    coef = params.coefficients()
    tau = (conditional_mean(Xq, 1, params.dgp, coef, params.alpha, params.tau)
           - conditional_mean(Xq, 0, params.dgp, coef, params.alpha, params.tau))
    return Xq, tau


def _map(fn, items, threads: int):
    items = list(items)
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _rep_params(base: SimParams, seed: int, rep: int, redraw: bool) -> SimParams:
    data_seed = derive_seed(seed, 100, rep)
    coef_seed = data_seed if redraw else derive_seed(seed, 99)
    return replace(base, seed=data_seed, coef_seed=coef_seed)


def run_mae_experiment(dgp: str, n: int, methods: Sequence = ("prognostic", "identity"),
                       n_queries: int = 200, reps: int = 1, seed: int = 0, p: int = 20,
                       train_fraction: float = 0.25, ate: bool = False, folds: int = 5,
                       redraw_coefficients: bool = False, threads: int = 0, **sim_kw):
    """Mean absolute CATE error (and optionally ATE error) per method.

    Returns ``(rows, summary)``: tidy rows ``{method, rep, metric, value}`` and
    per ``(method, metric)`` means with standard errors across replications.
    """
    methods = resolve_methods(methods)
    base = SimParams(n=n, p=p, dgp=dgp, **sim_kw)

    def one(rep):
        params = _rep_params(base, seed, rep, redraw_coefficients)
        sim = gen_dgp(params)
        Xq, tau_q = _query_points(params, n_queries, derive_seed(seed, 101, rep))
        out = []
        for m in methods:
            est = fit_mml(sim, m, train_fraction, derive_seed(seed, 102, rep))
            tau_hat = est.cate_batch(Xq, 2, 1)[0]
            out.append({"method": m.name, "rep": rep, "metric": "cate_mae",
                        "value": float(np.mean(np.abs(tau_hat - tau_q)))})
            if ate:
                cfg = DmlConfig(folds=folds, representation=m.representation, q=m.q, k=m.k,
                                lam=m.lam, seed=derive_seed(seed, 103, rep))
                res = mdml_run(sim.dataset, cfg, 2, 1).ate
                out.append({"method": m.name, "rep": rep, "metric": "ate_abs_error",
                            "value": abs(res.pooled - true_ate(params))})
        return out

    rows = [r for chunk in _map(one, range(reps), threads) for r in chunk]
    return rows, summarize(rows)


def summarize(rows) -> list:
    groups = {}
    for r in rows:
        groups.setdefault((r["method"], r["metric"]), []).append(r["value"])
    out = []
    for (method, metric), vals in groups.items():
        v = np.asarray(vals, dtype=float)
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
        out.append({"method": method, "metric": metric, "mean": float(v.mean()), "se": se,
                    "reps": int(v.size)})
    return out


@dataclass
class CoverageResult:
    estimand: str
    coverage: float
    mean_width: float
    reps: int
    alpha: float
    rows: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {"estimand": self.estimand, "coverage": self.coverage,
                "mean_width": self.mean_width, "reps": self.reps, "alpha": self.alpha}


def run_coverage_experiment(dgp: str, n: int, estimand: str = "ate", reps: int = 200,
                            alpha: float = DEFAULT_ALPHA, seed: int = 0, p: int = 20,
                            method="prognostic", folds: int = 5, n_queries: int = 250,
                            train_fraction: float = 0.25, redraw_coefficients: bool = False,
                            threads: int = 0, min_reps: int = 50, **sim_kw) -> CoverageResult:
    """Fraction of replications whose interval covers the truth, and mean width.

    ``estimand="ate"`` uses cross-fitted matched AIPW; ``"cate"`` averages
    per-query coverage of matched CATE intervals at ``n_queries`` fresh points.
    """
    if reps < min_reps:
        raise ValueError(f"coverage needs at least {min_reps} replications")
    if estimand not in ("ate", "cate"):
        raise ValueError("estimand must be 'ate' or 'cate'")
    m = resolve_methods([method])[0]
    base = SimParams(n=n, p=p, dgp=dgp, **sim_kw)

    def one(rep):
        params = _rep_params(base, seed, rep, redraw_coefficients)
        sim = gen_dgp(params)
        if estimand == "ate":
            cfg = DmlConfig(folds=folds, representation=m.representation, q=m.q, k=m.k,
                            lam=m.lam, alpha=alpha, seed=derive_seed(seed, 103, rep))
            res = mdml_run(sim.dataset, cfg, 2, 1).ate
            truth = true_ate(params)
            return {"rep": rep, "estimate": res.pooled, "truth": truth,
                    "ci_low": res.ci[0], "ci_high": res.ci[1],
                    "covered": float(res.ci[0] <= truth <= res.ci[1]), "width": res.width}
        est = fit_mml(sim, m, train_fraction, derive_seed(seed, 102, rep))
        Xq, tau_q = _query_points(params, n_queries, derive_seed(seed, 101, rep))
        tau, se, lo, hi = est.cate_batch(Xq, 2, 1, alpha)
        tol = 1e-9 * (1 + np.abs(tau_q))
        cov = (lo - tol <= tau_q) & (tau_q <= hi + tol)
        return {"rep": rep, "estimate": float(np.mean(tau)), "truth": float(np.mean(tau_q)),
                "ci_low": float(np.mean(lo)), "ci_high": float(np.mean(hi)),
                "covered": float(cov.mean()), "width": float(np.mean(hi - lo))}

    rows = _map(one, range(reps), threads)
    return CoverageResult(estimand, float(np.mean([r["covered"] for r in rows])),
                          float(np.mean([r["width"] for r in rows])), reps, alpha, rows)
