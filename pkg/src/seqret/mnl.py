"""Multinomial logit estimation: likelihood, analytic derivatives, Newton fit.

Coefficients are stored as a ``(K-1, p)`` matrix whose rows are the
non-baseline alternatives in index order; the baseline row is implicitly
zero. Flattened vectors (gradient, Hessian, vcov) use row-major order, so
entry ``r * p + c`` belongs to non-baseline row ``r`` and design column ``c``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .core import DesignMatrix
from .exceptions import CollinearityError, SeqretError

logger = logging.getLogger(__name__)

SEPARATION_BOUND = 30.0
SEPARATION_RIDGE = 1e-4


def _as_array(design) -> np.ndarray:
    if isinstance(design, DesignMatrix):
        return design.values
    return np.asarray(design, dtype=float)


def _nonbase(K: int, baseline: int) -> np.ndarray:
    return np.array([a for a in range(K) if a != baseline])


def utilities(coefficients, design, baseline: int = 0) -> np.ndarray:
    """N x K utilities, zero for the baseline alternative."""
    X = _as_array(design)
    B = np.atleast_2d(np.asarray(coefficients, dtype=float))
    K = B.shape[0] + 1
    U = np.zeros((X.shape[0], K))
    with np.errstate(over="ignore", invalid="ignore"):
        U[:, _nonbase(K, baseline)] = X @ B.T
    if not np.all(np.isfinite(U)):
        rows, cols = np.where(~np.isfinite(U))
        raise SeqretError(f"non-finite utility at row {rows[0]}, alternative {cols[0]}")
    return U


def _log_softmax(U: np.ndarray) -> np.ndarray:
    m = U.max(axis=1, keepdims=True)
    Z = U - m
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def _probs(U: np.ndarray) -> np.ndarray:
    m = U.max(axis=1, keepdims=True)
    E = np.exp(U - m)
    return E / E.sum(axis=1, keepdims=True)


def _check_choices(choices, K: int) -> np.ndarray:
    y = np.asarray(choices)
    if y.ndim != 1 or (y.size and (y.min() < 0 or y.max() >= K)):
        raise SeqretError(f"choices must lie in 0..{K - 1}")
    return y.astype(np.intp)


def mnl_loglik(coefficients, design, choices, baseline: int = 0) -> float:
    """Sum over individuals of the log probability of the observed choice."""
    U = utilities(coefficients, design, baseline)
    y = _check_choices(choices, U.shape[1])
    lp = _log_softmax(U)
    return float(lp[np.arange(len(y)), y].sum())


def _onehot(y: np.ndarray, K: int) -> np.ndarray:
    Y = np.zeros((len(y), K))
    Y[np.arange(len(y)), y] = 1.0
    return Y


def mnl_gradient(coefficients, design, choices, baseline: int = 0) -> np.ndarray:
    X = _as_array(design)
    U = utilities(coefficients, X, baseline)
    K = U.shape[1]
    y = _check_choices(choices, K)
    R = _onehot(y, K) - _probs(U)
    return (R[:, _nonbase(K, baseline)].T @ X).ravel()


def _hessian_from_probs(P: np.ndarray, X: np.ndarray, baseline: int) -> np.ndarray:
    K = P.shape[1]
    nb = _nonbase(K, baseline)
    p = X.shape[1]
    H = np.empty(((K - 1) * p, (K - 1) * p))
    for r, a in enumerate(nb):
        for s in range(r, K - 1):
            b = nb[s]
            w = P[:, a] * ((a == b) - P[:, b])
            blk = -(X.T @ (X * w[:, None]))
            H[r * p:(r + 1) * p, s * p:(s + 1) * p] = blk
            if s != r:
                H[s * p:(s + 1) * p, r * p:(r + 1) * p] = blk.T
    return H


def mnl_hessian(coefficients, design, choices, baseline: int = 0) -> np.ndarray:
    """Observed Hessian; does not depend on the choices but validates them."""
    X = _as_array(design)
    U = utilities(coefficients, X, baseline)
    _check_choices(choices, U.shape[1])
    return _hessian_from_probs(_probs(U), X, baseline)


# ---------------------------------------------------------------------------
# Fitted model
# ---------------------------------------------------------------------------


@dataclass
class MnlConfig:
    tol: float = 1e-8
    max_iter: int = 200
    ridge: float = 0.0


@dataclass
class MnlModel:
    n_alternatives: int
    baseline: int
    coefficients: np.ndarray
    vcov: np.ndarray
    log_likelihood: float
    n_obs: int
    converged: bool
    iterations: int
    pseudo_r2: float
    columns: tuple = ()
    alternatives: tuple = ()
    ll_null: float = float("nan")
    ridge: float = 0.0
    separation: bool = False
    ll_history: list = field(default_factory=list)

    @property
    def n_params(self) -> int:
        return self.coefficients.size

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None)).reshape(self.coefficients.shape)

    @property
    def nonbase(self) -> np.ndarray:
        return _nonbase(self.n_alternatives, self.baseline)

    def index(self, alternative: int, column) -> int:
        """Flat coefficient index for (alternative index, column name or position)."""
        if alternative == self.baseline:
            raise KeyError("the baseline alternative has no coefficients")
        r = int(np.where(self.nonbase == alternative)[0][0])
        c = self.columns.index(column) if isinstance(column, str) else int(column)
        return r * len(self.columns) + c

    def select(self, columns: Sequence[str] | None = None, alternatives: Sequence[int] | None = None) -> list[int]:
        cols = self.columns if columns is None else columns
        alts = self.nonbase if alternatives is None else [a for a in alternatives if a != self.baseline]
        return [self.index(a, c) for a in alts for c in cols]

    def coef_table(self) -> pd.DataFrame:
        rows = []
        se = self.se
        for r, a in enumerate(self.nonbase):
            for c, name in enumerate(self.columns):
                alt = self.alternatives[a] if self.alternatives else a
                rows.append({"alternative": alt, "column": name, "coef": self.coefficients[r, c], "se": se[r, c]})
        return pd.DataFrame(rows)

    def to_dict(self) -> dict:
        k = self.vcov.shape[0]
        lower = [float(self.vcov[i, j]) for i in range(k) for j in range(i + 1)]
        return {
            "layout": list(self.columns),
            "alternatives": [int(a) if isinstance(a, (int, np.integer)) else a for a in self.alternatives],
            "n_alternatives": self.n_alternatives,
            "baseline": self.baseline,
            "coefficients": [float(v) for v in self.coefficients.ravel()],
            "vcov_lower": lower,
            "diagnostics": {
                "log_likelihood": self.log_likelihood,
                "ll_null": self.ll_null,
                "n_obs": self.n_obs,
                "converged": self.converged,
                "iterations": self.iterations,
                "pseudo_r2": self.pseudo_r2,
                "ridge": self.ridge,
                "separation": self.separation,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MnlModel":
        K = d["n_alternatives"]
        p = len(d["layout"])
        coef = np.array(d["coefficients"], dtype=float).reshape(K - 1, p)
        k = coef.size
        V = np.zeros((k, k))
        it = iter(d["vcov_lower"])
        for i in range(k):
            for j in range(i + 1):
                V[i, j] = V[j, i] = next(it)
        dg = d["diagnostics"]
        return cls(
            n_alternatives=K,
            baseline=d["baseline"],
            coefficients=coef,
            vcov=V,
            log_likelihood=dg["log_likelihood"],
            n_obs=dg["n_obs"],
            converged=dg["converged"],
            iterations=dg["iterations"],
            pseudo_r2=dg["pseudo_r2"],
            columns=tuple(d["layout"]),
            alternatives=tuple(d["alternatives"]),
            ll_null=dg["ll_null"],
            ridge=dg["ridge"],
            separation=dg["separation"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MnlModel":
        return cls.from_dict(json.loads(text))


def collinear_columns(X: np.ndarray, rtol: float = 1e-9) -> list[int]:
    """Positions of columns that pivoted QR marks as linearly dependent."""
    if X.shape[1] == 0:
        return []
    scale = np.sqrt((X ** 2).sum(axis=0))
    zero = scale == 0
    Xs = X / np.where(zero, 1.0, scale)
    _, R, piv = linalg.qr(Xs, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = rtol * max(X.shape) * (d[0] if d.size else 0.0)
    rank = int((d > tol).sum())
    dropped = set(piv[rank:].tolist()) | set(np.where(zero)[0].tolist())
    return sorted(dropped)


def _penalized(theta, X, Y, y, nb, baseline, ridge):
    K = Y.shape[1]
    p = X.shape[1]
    B = theta.reshape(K - 1, p)
    U = np.zeros((X.shape[0], K))
    U[:, nb] = X @ B.T
    lp = _log_softmax(U)
    ll = float(lp[np.arange(len(y)), y].sum())
    return ll, ll - 0.5 * ridge * float(theta @ theta), lp


def fit_mnl(design, choices, n_alternatives: int | None = None, baseline: int = 0,
            config: MnlConfig | None = None, alternatives: Sequence | None = None) -> MnlModel:
    """Maximum likelihood by Newton-Raphson with Armijo backtracking.

    ``config.ridge`` is an L2 penalty on the objective. If any coefficient
    passes +-30 during the iterations, quasi-complete separation is flagged
    and the penalty is raised to 1e-4.
    """
    cfg = config or MnlConfig()
    X = _as_array(design)
    columns = tuple(design.columns) if isinstance(design, DesignMatrix) else tuple(f"x{i}" for i in range(X.shape[1]))
    y = np.asarray(choices).astype(np.intp)
    K = int(n_alternatives if n_alternatives is not None else y.max() + 1)
    y = _check_choices(y, K)
    N, p = X.shape
    if not np.all(np.isfinite(X)):
        raise SeqretError("design contains non-finite entries")
    counts = np.bincount(y, minlength=K)
    if (counts == 0).any():
        raise SeqretError(f"alternatives never chosen: {np.where(counts == 0)[0].tolist()}")
    if cfg.ridge == 0:
        bad = collinear_columns(X)
        if bad:
            raise CollinearityError(f"collinear design columns: {[columns[i] for i in bad]}", [columns[i] for i in bad])

    nb = _nonbase(K, baseline)
    Y = _onehot(y, K)
    shares = counts / N
    ll_null = float((counts * np.log(shares)).sum())
    ridge = float(cfg.ridge)
    separation = False
    theta = np.zeros((K - 1) * p)
    ll, obj, lp = _penalized(theta, X, Y, y, nb, baseline, ridge)
    history = [ll]
    it = 0
    gtol = cfg.tol * max(1, N)
    for it in range(1, cfg.max_iter + 1):
        P = np.exp(lp)
        g = ((Y - P)[:, nb].T @ X).ravel() - ridge * theta
        if np.max(np.abs(g)) < gtol:
            it -= 1
            break
        H = _hessian_from_probs(P, X, baseline) - ridge * np.eye(theta.size)
        negH = -H
        direction = None
        damping = 0.0
        for attempt in range(3):
            try:
                c = linalg.cho_factor(negH + damping * np.eye(theta.size))
                direction = linalg.cho_solve(c, g)
                break
            except linalg.LinAlgError:
                damping = 1e-8 * max(np.trace(negH), 1.0) * (1e4 ** attempt)
        if direction is None:
            direction = g / max(np.max(np.abs(g)), 1.0)
        slope = float(g @ direction)
        step = 1.0
        accepted = False
        for _ in range(31):
            cand = theta + step * direction
            ll_c, obj_c, lp_c = _penalized(cand, X, Y, y, nb, baseline, ridge)
            if np.isfinite(obj_c) and obj_c >= obj + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # Newton direction failed; take a halving gradient step instead
            direction = g
            step = 1.0 / max(np.max(np.abs(g)), 1.0)
            for _ in range(31):
                cand = theta + step * direction
                ll_c, obj_c, lp_c = _penalized(cand, X, Y, y, nb, baseline, ridge)
                if np.isfinite(obj_c) and obj_c > obj:
                    accepted = True
                    break
                step *= 0.5
        if not accepted:
            logger.debug("line search stalled at iteration %d", it)
            break
        theta, ll, obj, lp = cand, ll_c, obj_c, lp_c
        history.append(ll)
        if not separation and np.max(np.abs(theta)) > SEPARATION_BOUND:
            separation = True
            ridge = max(ridge, SEPARATION_RIDGE)
            ll, obj, lp = _penalized(theta, X, Y, y, nb, baseline, ridge)
            logger.warning("quasi-complete separation suspected; applying ridge %g", ridge)

    P = np.exp(lp)
    g = ((Y - P)[:, nb].T @ X).ravel() - ridge * theta
    converged = bool(np.max(np.abs(g)) < gtol)
    info = -_hessian_from_probs(P, X, baseline) + ridge * np.eye(theta.size)
    try:
        vcov = linalg.inv(info, check_finite=True)
    except linalg.LinAlgError:
        vcov = linalg.pinvh(info)
    vcov = 0.5 * (vcov + vcov.T)
    return MnlModel(
        n_alternatives=K,
        baseline=baseline,
        coefficients=theta.reshape(K - 1, p),
        vcov=vcov,
        log_likelihood=ll,
        n_obs=N,
        converged=converged,
        iterations=it,
        pseudo_r2=1.0 - ll / ll_null if ll_null < 0 else 0.0,
        columns=columns,
        alternatives=tuple(alternatives) if alternatives is not None else tuple(range(K)),
        ll_null=ll_null,
        ridge=ridge,
        separation=separation,
        ll_history=history,
    )


def predict_proba(model: MnlModel, design) -> np.ndarray:
    if isinstance(design, DesignMatrix) and tuple(design.columns) != tuple(model.columns):
        raise SeqretError(f"design columns {design.columns} do not match model layout {model.columns}")
    X = _as_array(design)
    if X.shape[1] != model.coefficients.shape[1]:
        raise SeqretError(f"design has {X.shape[1]} columns, model expects {model.coefficients.shape[1]}")
    return _probs(utilities(model.coefficients, X, model.baseline))


class WaldResult(NamedTuple):
    stat: float
    df: int
    p: float


def wald_joint(model: MnlModel, selector) -> WaldResult:
    """Joint chi-square test that the selected coefficients are zero."""
    sel = np.asarray(selector)
    if sel.dtype == bool:
        sel = np.where(sel)[0]
    sel = sel.astype(int)
    if sel.size == 0:
        raise SeqretError("empty coefficient selector")
    theta = model.coefficients.ravel()[sel]
    V = model.vcov[np.ix_(sel, sel)]
    try:
        c = linalg.cho_factor(V)
    except linalg.LinAlgError as e:
        raise SeqretError("singular covariance submatrix in Wald test") from e
    stat = float(theta @ linalg.cho_solve(c, theta))
    df = int(sel.size)
    return WaldResult(stat, df, float(stats.chi2.sf(stat, df)))


def marginal_effects_at_means(model: MnlModel, design, variables: Sequence[str]) -> pd.DataFrame:
    """Derivatives of each choice probability at the covariate means.

    Delta-method standard errors use the analytic Jacobian of the effects
    with respect to all coefficients.
    """
    X = _as_array(design)
    cols = list(model.columns)
    for v in variables:
        if v not in cols:
            raise SeqretError(f"unknown variable {v!r}")
        x = X[:, cols.index(v)]
        if np.all(np.isin(x, (0.0, 1.0))):
            raise SeqretError(f"{v!r} is an indicator; use discrete-change effects instead")
    xbar = X.mean(axis=0)
    K, p = model.n_alternatives, len(cols)
    nb = model.nonbase
    Bfull = np.zeros((K, p))
    Bfull[nb] = model.coefficients
    u = Bfull @ xbar
    P = np.exp(u - u.max())
    P /= P.sum()
    bbar = P @ Bfull  # probability-weighted coefficient per column
    rows = []
    for v in variables:
        c = cols.index(v)
        effects = P * (Bfull[:, c] - bbar[c])
        # Jacobian wrt coefficient (d, k) for non-baseline d
        J = np.zeros((K, K - 1, p))
        for a in range(K):
            for r, d in enumerate(nb):
                dPa = P[a] * ((a == d) - P[d]) * xbar  # over k
                dbbar = P[d] * xbar * (Bfull[d, c] - bbar[c])
                dbbar[c] += P[d]
                J[a, r] = dPa * (Bfull[a, c] - bbar[c]) - P[a] * dbbar
                if a == d:
                    J[a, r, c] += P[a]
        Jf = J.reshape(K, -1)
        se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", Jf, model.vcov, Jf), 0, None))
        for a in range(K):
            alt = model.alternatives[a] if model.alternatives else a
            rows.append({"variable": v, "outcome": alt, "effect": effects[a], "se": se[a]})
    return pd.DataFrame(rows)
