"""Matched-group estimators of the conditional response and the CATE.

The CRF estimate at ``x`` for arm ``t`` is the mean outcome of the matched
group; the CATE is the difference of two such means.  Confidence intervals
use the matched-group sample variance divided by a per-arm effective sample
size: ``k`` for KNN matching, the observed group size ``N`` for caliper
matching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from matchml.matching import MatchedGroup, MatchIndex, build_index, check_q
from matchml.representation import Representation

DEFAULT_ALPHA = 0.05


class EmptyMatchedGroup(RuntimeError):
    """A caliper produced no matches for a query."""

    def __init__(self, t=None, gamma=None, query_id=None):
        self.t, self.gamma, self.query_id = t, gamma, query_id
        where = "" if query_id is None else f" for query {query_id}"
        super().__init__(
            f"no units of arm {t} within caliper {gamma}{where}; use a larger value of the caliper"
        )


# --------------------------------------------------------------------------
# normal quantile

_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(a: float) -> float:
    if a < _P_LOW:
        s = math.sqrt(-2.0 * math.log(a))
        return (((((_C[0] * s + _C[1]) * s + _C[2]) * s + _C[3]) * s + _C[4]) * s + _C[5]) / \
               ((((_D[0] * s + _D[1]) * s + _D[2]) * s + _D[3]) * s + 1.0)
    if a > 1.0 - _P_LOW:
        return -_acklam(1.0 - a)
    r = a - 0.5
    s = r * r
    return (((((_A[0] * s + _A[1]) * s + _A[2]) * s + _A[3]) * s + _A[4]) * s + _A[5]) * r / \
           (((((_B[0] * s + _B[1]) * s + _B[2]) * s + _B[3]) * s + _B[4]) * s + 1.0)


def normal_quantile(a: float) -> float:
    """Inverse standard-normal CDF.

    Acklam's rational approximation (relative error ~1e-9) followed by one
    Halley step against ``erfc``, which brings the error to machine level.
    """
    a = float(a)
    if not 0.0 < a < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {a}")
    if a == 0.5:
        return 0.0
    if a > 0.5:
        return -normal_quantile(1.0 - a)
    x = _acklam(a)
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - a
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def z_value(alpha: float) -> float:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return normal_quantile(1.0 - alpha / 2.0)


# --------------------------------------------------------------------------
# Lq unit ball


def ball_volume(d: int, q=2) -> float:
    """Volume of the unit Lq ball in ``d`` dimensions, ``(2 G(1/q + 1))^d / G(d/q + 1)``."""
    d = int(d)
    if d < 1:
        raise ValueError("dimension must be at least 1")
    q = check_q(q)
    if math.isinf(q):
        return float(2 ** d)
    return math.exp(d * math.log(2.0 * math.gamma(1.0 / q + 1.0)) - math.lgamma(d / q + 1.0))


# --------------------------------------------------------------------------
# CRF


@dataclass
class CrfEstimate:
    value: float
    corrected: float
    variance: float
    n_matched: int
    radius: float
    mode: str
    param: float  # k for KNN, caliper for caliper mode
    t: int = 0
    group: Optional[MatchedGroup] = field(default=None, repr=False)

    @property
    def effective_size(self) -> float:
        """Denominator of the variance of the estimate (``k`` or ``N``)."""
        return float(self.param) if self.mode == "knn" else float(self.n_matched)


def corrected_mean(mg: MatchedGroup, outcomes) -> float:
    """Sum of matched outcomes over ``N + 1``; zero for an empty group."""
    y = np.asarray(outcomes, dtype=float)[mg.indices]
    return float(y.sum() / (y.size + 1))


def crf_estimate(mg: MatchedGroup, outcomes) -> CrfEstimate:
    """Matched-group mean, its ``N/(N+1)`` corrected version and the 1/N sample variance."""
    if mg.size == 0:
        raise EmptyMatchedGroup(mg.t, mg.gamma_used)
    y = np.asarray(outcomes, dtype=float)[mg.indices]
    mu = float(y.mean())
    var = float(np.mean((y - mu) ** 2))
    param = mg.size if mg.mode == "knn" else mg.gamma_used
    return CrfEstimate(mu, corrected_mean(mg, outcomes), var, mg.size, mg.radius, mg.mode,
                       param, mg.t, mg)


# --------------------------------------------------------------------------
# CATE


@dataclass
class CateEstimate:
    tau: float
    se: float
    ci_low: float
    ci_high: float
    alpha: float
    crf_t: CrfEstimate
    crf_t_prime: CrfEstimate
    degenerate: bool = False

    @property
    def width(self) -> float:
        return self.ci_high - self.ci_low

    def covers(self, truth: float, atol: float = 1e-9) -> bool:
        return self.ci_low - atol <= truth <= self.ci_high + atol


def cate_from_crf(est_t: CrfEstimate, est_tp: CrfEstimate, alpha: float = DEFAULT_ALPHA) -> CateEstimate:
    tau = est_t.value - est_tp.value
    se = math.sqrt(est_t.variance / est_t.effective_size + est_tp.variance / est_tp.effective_size)
    half = z_value(alpha) * se
    return CateEstimate(tau, se, tau - half, tau + half, alpha, est_t, est_tp, degenerate=se == 0.0)


@dataclass(frozen=True)
class ArmConfig:
    """How to form the matched group for one arm."""

    mode: str = "knn"  # "knn" or "caliper"
    k: Optional[int] = None
    gamma: Optional[float] = None
    q: float = 2.0
    region: object = None

    def __post_init__(self):
        if self.mode == "knn":
            if self.k is None or self.k < 1:
                raise ValueError("KNN mode needs k >= 1")
        elif self.mode == "caliper":
            if self.gamma is None or not self.gamma > 0:
                raise ValueError("caliper mode needs gamma > 0")
        else:
            raise ValueError(f"unknown match mode {self.mode!r}")

    def query(self, index: MatchIndex, v, t) -> MatchedGroup:
        if self.mode == "knn":
            return index.knn(v, t, self.k, self.q, self.region)
        return index.caliper(v, t, self.gamma, self.q, self.region)


def _per_arm(obj, t):
    return obj[t] if isinstance(obj, dict) else obj


def cate_estimate(x, t: int, t_prime: int, configs, index, outcomes,
                  alpha: float = DEFAULT_ALPHA) -> CateEstimate:
    """CATE at an embedded query point with an asymptotic normal interval.

    ``x``, ``configs`` and ``index`` may each be a single object or a dict
    keyed by arm (for per-arm representations and per-arm ``k``).
    """
    ests = []
    for arm in (t, t_prime):
        cfg = _per_arm(configs, arm)
        g = cfg.query(_per_arm(index, arm), _per_arm(x, arm), arm)
        if g.size == 0:
            raise EmptyMatchedGroup(arm, cfg.gamma)
        ests.append(crf_estimate(g, outcomes))
    return cate_from_crf(ests[0], ests[1], alpha)


def auto_k(n_arm: int) -> int:
    """Default neighbour count: floor(sqrt(arm size)), at least one."""
    return max(int(math.isqrt(int(n_arm))), 1)


class MatchedML:
    """Match-and-average estimator over a fixed representation.

    Parameters
    ----------
    representation : Representation or None
        ``None`` means the covariates passed to :meth:`fit` are already
        embeddings (external representation).
    q : float
        Lq norm used for distances.
    k : int, "auto" or None
        KNN mode; ``"auto"`` uses floor(sqrt(n_arm)) per arm.
    caliper : float or None
        Caliper mode radius.  Exactly one of ``k`` and ``caliper`` is set.
    """

    def __init__(self, representation: Representation | None = None, q=2, k=None, caliper=None):
        if (k is None) == (caliper is None):
            raise ValueError("set exactly one of k and caliper")
        self.representation = representation
        self.q = check_q(q)
        self.k = k
        self.caliper = caliper
        self._index = {}

    def _embed(self, X, arm):
        if self.representation is None:
            X = np.asarray(X, dtype=float)
            return X[:, None] if X.ndim == 1 else X
        return self.representation.transform(X, arm=arm)

    def _arm_key(self, arm):
        rep = self.representation
        return arm if (rep is not None and rep.per_treatment) else None

    def fit(self, X, y, treatments) -> "MatchedML":
        """Index the matching set."""
        X = np.asarray(X, dtype=float)
        self.outcomes_ = np.asarray(y, dtype=float)
        self.treatments_ = np.asarray(treatments).astype(np.int64)
        self.covariates_ = X
        self._index = {}
        rep = self.representation
        arms = np.unique(self.treatments_).tolist()
        if rep is not None and rep.per_treatment:
            arms = [a for a in arms if a in rep.arms]  # no coordinate, nothing to match on
        keys = {self._arm_key(a) for a in arms}
        for key in keys:
            self._index[key] = build_index(self._embed(X, key), self.treatments_, X)
        return self

    def index(self, arm) -> MatchIndex:
        return self._index[self._arm_key(arm)]

    def arm_config(self, arm, region=None) -> ArmConfig:
        if self.caliper is not None:
            return ArmConfig("caliper", gamma=float(self.caliper), q=self.q, region=region)
        k = self.k
        if k == "auto":
            k = auto_k(self.index(arm).arm_size(arm))
        elif isinstance(k, dict):
            k = k[arm]
        return ArmConfig("knn", k=int(k), q=self.q, region=region)

    def embed_query(self, x, arm) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self._embed(x[None, :], self._arm_key(arm))[0]

    def match(self, x, t, region=None) -> MatchedGroup:
        return self.arm_config(t, region).query(self.index(t), self.embed_query(x, t), t)

    def crf(self, x, t, region=None) -> CrfEstimate:
        g = self.match(x, t, region)
        if g.size == 0:
            raise EmptyMatchedGroup(t, self.caliper)
        return crf_estimate(g, self.outcomes_)

    def cate(self, x, t, t_prime, alpha: float = DEFAULT_ALPHA, region=None) -> CateEstimate:
        return cate_from_crf(self.crf(x, t, region), self.crf(x, t_prime, region), alpha)

    def predict_arm(self, X, t) -> np.ndarray:
        """Vectorized matched means for arm ``t`` at each row of ``X`` (KNN mode)."""
        X = np.asarray(X, dtype=float)
        if self.caliper is not None:
            return np.array([self.crf(x, t).value for x in X])
        cfg = self.arm_config(t)
        E = self._embed(X, self._arm_key(t))
        idx, _ = self.index(t).knn_batch(E, t, cfg.k, self.q)
        return self.outcomes_[idx].mean(axis=1)

    def cate_batch(self, X, t, t_prime, alpha: float = DEFAULT_ALPHA):
        """``(tau, se, ci_low, ci_high)`` arrays for every row of ``X`` (KNN mode)."""
        X = np.asarray(X, dtype=float)
        if self.caliper is not None:
            ests = [self.cate(x, t, t_prime, alpha) for x in X]
            return tuple(np.array([getattr(e, f) for e in ests])
                         for f in ("tau", "se", "ci_low", "ci_high"))
        parts = []
        for arm in (t, t_prime):
            cfg = self.arm_config(arm)
            E = self._embed(X, self._arm_key(arm))
            idx, _ = self.index(arm).knn_batch(E, arm, cfg.k, self.q)
            y = self.outcomes_[idx]
            mu = y.mean(axis=1)
            var = np.mean((y - mu[:, None]) ** 2, axis=1)
            parts.append((mu, var / cfg.k))
        tau = parts[0][0] - parts[1][0]
        se = np.sqrt(parts[0][1] + parts[1][1])
        half = z_value(alpha) * se
        return tau, se, tau - half, tau + half
