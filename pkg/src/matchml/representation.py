"""Representation functions that map covariates into the match space.

Four concrete kinds are supported:

``identity``
    phi(x) = x, plain nearest-neighbour matching.
``diagonal``
    phi(x)_j = w_j * x_j, covering fixed-weight Mahalanobis matching and
    coarsened exact matching (``w_j = 1 / gamma_j`` with the sup norm).
``prognostic``
    per-arm ridge predictions of the outcome, one coordinate per arm.
``propensity-score``
    logistic-regression estimate of Pr(T = t | X = x), one coordinate.

Anything else (boosted trees, neural nets, ...) can be plugged in by
precomputing embeddings and handing them straight to the matching index.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from matchml.data import Dataset, Standardizer


class FitError(RuntimeError):
    """A first-stage model could not be fitted."""


class SeparationError(FitError):
    """Logistic likelihood has no finite maximizer."""


PRESETS = {
    "nearest-neighbor": ("identity", 2),
    "propensity-match": ("propensity-score", 1),
    "prognostic-match": ("prognostic", 1),
    "cem": ("diagonal", float("inf")),
    "mahalanobis": ("diagonal", 2),
}

PRESET_ALIASES = {
    "nn": "nearest-neighbor",
    "nearest-neighbour": "nearest-neighbor",
    "propensity": "propensity-match",
    "prognostic": "prognostic-match",
    "coarsened-exact": "cem",
}


def resolve_preset(name: str) -> str:
    name = name.strip().lower()
    name = PRESET_ALIASES.get(name, name)
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; valid: {sorted(PRESETS)}")
    return name


def preset_for(kind: str, q: float) -> str:
    for name, (k, qq) in PRESETS.items():
        if k == kind and qq == q:
            return name
    raise KeyError(f"no preset for kind={kind!r}, q={q}")


def _design(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.hstack([np.ones((X.shape[0], 1)), X])


def _expit(eta):
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _affine(X, coef) -> np.ndarray:
    # column-wise accumulation: a row gives the same bits alone or in a batch
    out = np.full(X.shape[0], coef[0])
    for j in range(X.shape[1]):
        out += X[:, j] * coef[j + 1]
    return out


def ridge_fit(X, y, lam: float = 0.0) -> np.ndarray:
    """Ridge coefficients ``(intercept, slopes)``; the intercept is not penalized."""
    if lam < 0:
        raise ValueError("ridge penalty must be non-negative")
    Z = _design(X)
    y = np.asarray(y, dtype=float)
    if lam == 0 and np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise FitError("design is rank deficient; refit with a positive ridge penalty (lam > 0)")
    pen = np.full(Z.shape[1], float(lam))
    pen[0] = 0.0
    A = Z.T @ Z + np.diag(pen)
    return np.linalg.solve(A, Z.T @ y)


@dataclass
class PropensityModel:
    """One-vs-rest logistic propensity model over treatment levels ``1..M``.

    For two levels a single model is fitted for level 2 and level 1 gets
    the complement, so the raw predictions sum to one exactly.
    """

    coefficients: dict  # level -> (p + 1,) array
    n_levels: int
    clip: float = 0.01
    converged: bool = True
    n_iter: int = 0

    def predict_raw(self, X, t: int) -> np.ndarray:
        if self.n_levels == 2 and t == 1 and 1 not in self.coefficients:
            return 1.0 - self.predict_raw(X, 2)
        if t not in self.coefficients:
            raise KeyError(f"no propensity model for level {t}")
        return _expit(_design(X) @ self.coefficients[t])

    def predict(self, X, t: int) -> np.ndarray:
        return np.clip(self.predict_raw(X, t), self.clip, 1.0 - self.clip)

    def to_dict(self) -> dict:
        return {
            "coefficients": {str(k): v.tolist() for k, v in self.coefficients.items()},
            "n_levels": self.n_levels,
            "clip": self.clip,
            "converged": self.converged,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, d) -> "PropensityModel":
        return cls({int(k): np.array(v, dtype=float) for k, v in d["coefficients"].items()},
                   int(d["n_levels"]), float(d["clip"]), bool(d["converged"]), int(d["n_iter"]))


def logistic_irls(X, z, tol: float = 1e-8, max_iter: int = 100, jitter: float = 1e-8):
    """Newton/IRLS maximum likelihood for a binary response ``z``.

    Returns ``(beta, converged, n_iter)``.  Convergence means the largest
    component of the mean score falls below ``tol``.
    """
    Z = _design(X)
    z = np.asarray(z, dtype=float)
    n, k = Z.shape
    beta = np.zeros(k)
    rate = np.clip(z.mean(), 1e-12, 1 - 1e-12)
    beta[0] = np.log(rate / (1 - rate))
    sign = 2 * z - 1

    def loglik(b):
        eta = Z @ b
        return float(np.sum(z * eta - np.logaddexp(0.0, eta)))

    ll = loglik(beta)
    for it in range(1, max_iter + 1):
        eta = Z @ beta
        p = _expit(eta)
        score = Z.T @ (z - p)
        if np.max(np.abs(score)) / n < tol:
            return beta, True, it - 1
        w = p * (1 - p)
        H = (Z * w[:, None]).T @ Z + jitter * np.eye(k)
        step = np.linalg.solve(H, score)
        t = 1.0
        while True:
            cand = beta + t * step
            ll_c = loglik(cand)
            if ll_c >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        beta, ll = cand, ll_c
        margin = sign * (Z @ beta)
        if np.all(margin > 0) and -ll < 1e-6:
            raise SeparationError(
                "covariates perfectly separate the treatment groups; rely on the clipped "
                "fallback (larger clip) or regularize more strongly"
            )
        if not np.all(np.isfinite(beta)) or np.max(np.abs(beta)) > 1e8:
            raise SeparationError(
                "logistic coefficients diverge (quasi-separation); rely on the clipped "
                "fallback or regularize more strongly"
            )
    eta = Z @ beta
    converged = np.max(np.abs(Z.T @ (z - _expit(eta)))) / n < tol
    return beta, bool(converged), max_iter


def fit_propensity(ds: Dataset, rows=None, t: int | None = None, tol: float = 1e-8,
                   max_iter: int = 100, clip: float = 0.01) -> PropensityModel:
    """Fit logistic propensity models on ``rows`` of ``ds``.

    With ``t`` given only that level's model is fitted; otherwise every level
    (a single model when there are two levels).  Non-convergence after
    ``max_iter`` is flagged on the model and warned about, not raised.
    """
    if not 0 < clip < 0.5:
        raise ValueError("clip must lie in (0, 0.5)")
    X, T = ds.covariates, ds.treatments
    if rows is not None:
        rows = np.asarray(rows)
        X, T = X[rows], T[rows]
    if ds.M == 2:
        levels = [2]
    elif t is not None:
        levels = [t]
    else:
        levels = list(range(1, ds.M + 1))
    coefs, conv, iters = {}, True, 0
    for lev in levels:
        z = (T == lev).astype(float)
        if z.min() == z.max():
            raise FitError(f"level {lev} is {'absent' if z.max() == 0 else 'the only level'} among rows")
        beta, ok, it = logistic_irls(X, z, tol=tol, max_iter=max_iter)
        coefs[lev] = beta
        conv &= ok
        iters = max(iters, it)
    if not conv:
        warnings.warn(f"propensity IRLS did not converge in {max_iter} iterations")
    return PropensityModel(coefs, ds.M, clip, conv, iters)


@dataclass
class Representation:
    """A fitted map from p covariates to the d-dimensional match space.

    When ``per_treatment`` is set, coordinate ``j`` belongs to arm
    ``arms[j]`` and matching within arm ``t`` uses only that coordinate.
    """

    kind: str
    d: int
    p: int
    weights: np.ndarray | None = None
    coefficients: dict = field(default_factory=dict)  # arm -> (p + 1,) ridge coefs
    arms: tuple = ()
    per_treatment: bool = False
    propensity: PropensityModel | None = None
    target_level: int | None = None
    standardizer: Standardizer | None = None

    def _prep(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.p:
            raise ValueError(f"expected {self.p} covariates, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("covariates must be finite")
        if self.standardizer is not None:
            X = self.standardizer.apply(X)
        return X

    def transform(self, X, arm: int | None = None) -> np.ndarray:
        """Embed a covariate matrix; returns ``(n, d)`` or ``(n, 1)`` for one arm."""
        X = self._prep(X)
        if self.kind == "identity":
            out = X.copy()
        elif self.kind == "diagonal":
            out = X * self.weights
        elif self.kind == "prognostic":
            out = np.column_stack([_affine(X, self.coefficients[a]) for a in self.arms])
        elif self.kind == "propensity-score":
            out = self.propensity.predict(X, self.target_level)[:, None]
        else:
            raise ValueError(f"unknown representation kind {self.kind!r}")
        if arm is not None and self.per_treatment:
            if arm not in self.arms:
                raise KeyError(f"representation has no coordinate for arm {arm}")
            out = out[:, [self.arms.index(arm)]]
        return out

    def apply(self, x, arm: int | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ValueError("apply expects a single covariate vector; use transform for matrices")
        return self.transform(x[None, :], arm=arm)[0]

    def output_dim(self, arm: int | None = None) -> int:
        return 1 if (arm is not None and self.per_treatment) else self.d

    def to_dict(self) -> dict:
        coefs = {str(a): c.tolist() for a, c in self.coefficients.items()}
        if self.weights is not None:
            coefs["weights"] = self.weights.tolist()
        if self.propensity is not None:
            coefs["propensity"] = self.propensity.to_dict()
        return {
            "kind": self.kind,
            "d": self.d,
            "p": self.p,
            "coefficients": coefs,
            "arms": list(self.arms),
            "per_treatment": self.per_treatment,
            "target_level": self.target_level,
            "standardizer": None if self.standardizer is None else self.standardizer.to_dict(),
            "clip": None if self.propensity is None else self.propensity.clip,
        }

    def to_json(self) -> str:
        # float repr is the shortest string that round-trips exactly
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Representation":
        d = json.loads(text)
        coefs = dict(d["coefficients"])
        weights = coefs.pop("weights", None)
        prop = coefs.pop("propensity", None)
        std = d.get("standardizer")
        return cls(
            kind=d["kind"],
            d=int(d["d"]),
            p=int(d["p"]),
            weights=None if weights is None else np.array(weights, dtype=float),
            coefficients={int(k): np.array(v, dtype=float) for k, v in coefs.items()},
            arms=tuple(d.get("arms", ())),
            per_treatment=bool(d.get("per_treatment", False)),
            propensity=None if prop is None else PropensityModel.from_dict(prop),
            target_level=d.get("target_level"),
            standardizer=None if std is None else Standardizer.from_dict(std),
        )


def make_identity(p: int) -> Representation:
    if p < 1:
        raise ValueError("p must be positive")
    return Representation("identity", d=p, p=p)


def make_diagonal(weights) -> Representation:
    w = np.asarray(weights, dtype=float).ravel()
    if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("diagonal weights must be finite and strictly positive")
    return Representation("diagonal", d=w.size, p=w.size, weights=w)


def fit_prognostic(ds: Dataset, rows=None, arms=None, lam: float = 0.0,
                   per_treatment: bool = True) -> Representation:
    """Per-arm ridge regression of the outcome on the covariates.

    ``arms`` may be a single level or a sequence; the representation has one
    coordinate per arm, in the order given.
    """
    if arms is None:
        arms = tuple(range(1, ds.M + 1))
    elif np.isscalar(arms):
        arms = (int(arms),)
    arms = tuple(int(a) for a in arms)
    X, y, T = ds.covariates, ds.outcomes, ds.treatments
    if rows is not None:
        rows = np.asarray(rows)
        X, y, T = X[rows], y[rows], T[rows]
    coefs = {}
    for a in arms:
        mask = T == a
        if mask.sum() < ds.p + 2:
            raise FitError(f"arm {a} has {mask.sum()} training units; need at least p + 2 = {ds.p + 2}")
        coefs[a] = ridge_fit(X[mask], y[mask], lam)
    return Representation("prognostic", d=len(arms), p=ds.p, coefficients=coefs, arms=arms,
                          per_treatment=per_treatment and len(arms) > 1)


def fit_propensity_representation(ds: Dataset, rows=None, t: int | None = None,
                                  clip: float = 0.01, **kw) -> Representation:
    """One-dimensional propensity-score representation for level ``t`` (default: highest)."""
    t = ds.M if t is None else t
    model = fit_propensity(ds, rows, clip=clip, **kw)
    return Representation("propensity-score", d=1, p=ds.p, propensity=model, target_level=t)
