"""Cross-fitted doubly-robust estimation of ARF, ATE and ATT on matched predictions.

For each of ``L`` folds the out-of-fold units are split again into a
training set (used to learn the representation) and a matching set (the
match candidates).  Propensities are fitted on all out-of-fold units.  Each
in-fold unit then gets matched predictions for both arms and AIPW scores;
fold means of the scores are averaged over folds.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from matchml.data import Dataset, kfold, split
from matchml.estimators import DEFAULT_ALPHA, EmptyMatchedGroup, MatchedML, z_value
from matchml.matching import MatchingError
from matchml.representation import (
    fit_prognostic,
    fit_propensity,
    fit_propensity_representation,
    make_diagonal,
    make_identity,
)
from matchml.rng import derive_seed


class DmlError(RuntimeError):
    pass


def dr_score_arf(mu_it, y_i, t_i, t, e_it):
    """AIPW score for the mean response under arm ``t`` (vectorizes over units)."""
    hit = np.asarray(t_i) == t
    out = mu_it + np.where(hit, (np.asarray(y_i, dtype=float) - mu_it) / e_it, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def dr_score_att(y_i, t_i, t, t_prime, mu_itp, e_it, e_itp, e_t):
    """Score for the effect of ``t`` versus ``t_prime`` among units receiving ``t``."""
    t_i = np.asarray(t_i)
    resid = np.asarray(y_i, dtype=float) - mu_itp
    treated = np.where(t_i == t, resid / e_t, 0.0)
    control = np.where(t_i == t_prime, e_it * resid / (e_t * e_itp), 0.0)
    out = treated - control
    return float(out) if np.ndim(out) == 0 else out


def dml_variance(contrasts, pooled: float) -> float:
    """``mean((contrast - pooled)^2)`` with the 1/n convention."""
    c = np.asarray(contrasts, dtype=float)
    if c.size < 2:
        raise ValueError("variance needs at least two score rows")
    return float(np.mean((c - pooled) ** 2))


def dml_ci(pooled: float, sigma2: float, n: int, alpha: float = DEFAULT_ALPHA):
    if sigma2 < 0 or n < 1:
        raise ValueError("need sigma2 >= 0 and n >= 1")
    half = z_value(alpha) * math.sqrt(sigma2 / n)
    return pooled - half, pooled + half


@dataclass(frozen=True)
class DmlConfig:
    folds: int = 5
    inner_fraction: float = 0.5
    mode: str = "knn"
    k: object = "auto"  # "auto" or a positive int
    gamma: Optional[float] = None
    representation: str = "prognostic"
    weights: Optional[tuple] = None  # diagonal representation only
    q: float = 2.0
    lam: float = 0.0
    clip: float = 0.01
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    tol: float = 1e-8
    max_iter: int = 100

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("need at least two folds")
        if not 0 < self.inner_fraction < 1:
            raise ValueError("inner_fraction must lie in (0, 1)")
        if self.mode not in ("knn", "caliper"):
            raise ValueError(f"unknown match mode {self.mode!r}")
        if self.mode == "caliper" and not (self.gamma and self.gamma > 0):
            raise ValueError("caliper mode needs gamma > 0")

    def echo(self) -> dict:
        d = asdict(self)
        d["q"] = "inf" if math.isinf(self.q) else self.q
        if d["weights"] is not None:
            d["weights"] = list(d["weights"])
        return d


@dataclass
class ScoreTable:
    """Per-unit scores and first-stage values, in unit order."""

    unit: np.ndarray
    fold: np.ndarray
    psi_t: np.ndarray
    psi_t_prime: np.ndarray
    psi_att: np.ndarray
    mu_t: np.ndarray
    mu_t_prime: np.ndarray
    e_t: np.ndarray
    e_t_prime: np.ndarray

    COLUMNS = ("unit", "fold", "psi_t", "psi_t_prime", "psi_att",
               "mu_t", "mu_t_prime", "e_t", "e_t_prime")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in zip(*(getattr(self, c) for c in self.COLUMNS)):
                w.writerow([int(row[0]), int(row[1]), *(repr(float(v)) for v in row[2:])])


@dataclass
class DmlResult:
    estimand: str
    t: int
    t_prime: Optional[int]
    pooled: float
    per_fold: list
    sigma2: float
    ci: tuple
    n: int
    alpha: float
    marginal_t: list = field(default_factory=list)
    marginal_t_prime: list = field(default_factory=list)
    scores: Optional[ScoreTable] = field(default=None, repr=False)
    propensity_converged: list = field(default_factory=list)

    @property
    def se(self) -> float:
        return math.sqrt(self.sigma2 / self.n)

    @property
    def width(self) -> float:
        return self.ci[1] - self.ci[0]

    def covers(self, truth: float) -> bool:
        return self.ci[0] <= truth <= self.ci[1]

    def to_dict(self, config: DmlConfig | None = None) -> dict:
        return {
            "estimand": self.estimand,
            "t": self.t,
            "t_prime": self.t_prime,
            "pooled": self.pooled,
            "per_fold": list(self.per_fold),
            "sigma2": self.sigma2,
            "ci": list(self.ci),
            "n": self.n,
            "alpha": self.alpha,
            "marginal_t": list(self.marginal_t),
            "marginal_t_prime": list(self.marginal_t_prime),
            "propensity_converged": list(self.propensity_converged),
            "config_echo": None if config is None else config.echo(),
            "seed": None if config is None else config.seed,
        }

    def to_json(self, config: DmlConfig | None = None) -> str:
        return json.dumps(self.to_dict(config), indent=2, sort_keys=True)


class MdmlOutput(NamedTuple):
    arf: DmlResult
    ate: DmlResult
    att: DmlResult


def _fit_representation(ds: Dataset, rows, cfg: DmlConfig, arms):
    kind = cfg.representation
    if kind == "prognostic":
        return fit_prognostic(ds, rows, arms=arms, lam=cfg.lam)
    if kind == "identity":
        return make_identity(ds.p)
    if kind == "diagonal":
        if cfg.weights is None:
            raise ValueError("diagonal representation needs weights")
        return make_diagonal(cfg.weights)
    if kind == "propensity-score":
        return fit_propensity_representation(ds, rows, t=arms[0], clip=cfg.clip,
                                             tol=cfg.tol, max_iter=cfg.max_iter)
    raise ValueError(f"unknown representation kind {kind!r}")


def _result(estimand, t, tp, fold_vals, contrasts, alpha, marg_t, marg_tp, scores, conv):
    pooled = float(np.mean(fold_vals))
    sigma2 = dml_variance(contrasts, pooled)
    n = contrasts.shape[0]
    return DmlResult(estimand, t, tp, pooled, [float(v) for v in fold_vals], sigma2,
                     dml_ci(pooled, sigma2, n, alpha), n, alpha, list(marg_t), list(marg_tp),
                     scores, list(conv))


def mdml_run(ds: Dataset, cfg: DmlConfig, t: int, t_prime: int,
             mu_fn: Callable | None = None, e_fn: Callable | None = None) -> MdmlOutput:
    """Cross-fitted matched AIPW estimates of ARF(t), ATE(t, t') and ATT(t, t').

    ``mu_fn(X, arm)`` / ``e_fn(X, arm)`` replace the matched outcome
    predictions / fitted propensities; they exist to exercise the
    double-robustness of the scores with known nuisances.
    """
    if t == t_prime:
        raise ValueError("t and t_prime must differ")
    n = ds.n
    X, y, T = ds.covariates, ds.outcomes, ds.treatments
    folds = kfold(n, cfg.folds, derive_seed(cfg.seed, 1))
    mu = {t: np.empty(n), t_prime: np.empty(n)}
    e = {t: np.empty(n), t_prime: np.empty(n)}
    marg = {t: [], t_prime: []}
    conv = []
    fold_of = folds.assignments
    failed = []
    for ell in range(1, cfg.folds + 1):
        inside = folds.fold(ell)
        comp = folds.complement(ell)
        if inside.size == 0:
            raise DmlError(f"fold {ell} is empty")
        for arm in (t, t_prime):
            marg[arm].append(float(np.mean(T[comp] == arm)))
            if marg[arm][-1] == 0:
                raise DmlError(f"arm {arm} has no units outside fold {ell}")
        if e_fn is None:
            pm = fit_propensity(ds, comp, clip=cfg.clip, tol=cfg.tol, max_iter=cfg.max_iter)
            conv.append(pm.converged)
            for arm in (t, t_prime):
                e[arm][inside] = pm.predict(X[inside], arm)
        else:
            conv.append(True)
            for arm in (t, t_prime):
                e[arm][inside] = np.clip(e_fn(X[inside], arm), cfg.clip, 1 - cfg.clip)
        if mu_fn is not None:
            for arm in (t, t_prime):
                mu[arm][inside] = mu_fn(X[inside], arm)
            continue
        sub = ds.subset(comp)
        plan = split(sub, cfg.inner_fraction, derive_seed(cfg.seed, 2, ell))
        ts, ms = comp[plan.train_indices], comp[plan.match_indices]
        rep = _fit_representation(ds, ts, cfg, (t, t_prime))
        if cfg.mode == "knn":
            est = MatchedML(rep, q=cfg.q, k=cfg.k)
        else:
            est = MatchedML(rep, q=cfg.q, caliper=cfg.gamma)
        est.fit(X[ms], y[ms], T[ms])
        for arm in (t, t_prime):
            if cfg.mode == "knn":
                try:
                    mu[arm][inside] = est.predict_arm(X[inside], arm)
                except MatchingError as exc:
                    raise DmlError(f"fold {ell}, arm {arm}: {exc}") from exc
            else:
                for i in inside:
                    try:
                        mu[arm][i] = est.crf(X[i], arm).value
                    except EmptyMatchedGroup:
                        failed.append((int(i), arm))
    if failed:
        units = sorted({i for i, _ in failed})
        raise DmlError(
            f"{len(units)} units have empty caliper groups (first: {units[:10]}); "
            "use a larger caliper or KNN mode"
        )

    e_t_marg = np.array(marg[t])[fold_of - 1]
    psi_t = dr_score_arf(mu[t], y, T, t, e[t])
    psi_tp = dr_score_arf(mu[t_prime], y, T, t_prime, e[t_prime])
    psi_att = dr_score_att(y, T, t, t_prime, mu[t_prime], e[t], e[t_prime], e_t_marg)
    scores = ScoreTable(np.arange(n), fold_of.copy(), psi_t, psi_tp, psi_att,
                        mu[t].copy(), mu[t_prime].copy(), e[t].copy(), e[t_prime].copy())

    def fold_means(v):
        return np.array([v[fold_of == ell].mean() for ell in range(1, cfg.folds + 1)])

    a = cfg.alpha
    arf = _result("ARF", t, None, fold_means(psi_t), psi_t, a, marg[t], [], scores, conv)
    ate = _result("ATE", t, t_prime, fold_means(psi_t) - fold_means(psi_tp), psi_t - psi_tp,
                  a, marg[t], marg[t_prime], scores, conv)
    att = _result("ATT", t, t_prime, fold_means(psi_att), psi_att, a, marg[t], marg[t_prime],
                  scores, conv)
    return MdmlOutput(arf, ate, att)
