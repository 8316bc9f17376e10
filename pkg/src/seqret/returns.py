"""Career returns from composed choice probabilities.

The reduced form regresses an outcome on covariates and the career
probabilities (baseline career omitted); the comparison regression uses the
observed career indicators instead. Coefficients are rescaled by each
career's largest predicted probability and screened against plausibility
bounds.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from .core import Career
from .exceptions import CollinearityError, SeqretError
from .nested import CareerProbabilityMatrix

OUTCOMES = ("log_wage", "employment")
DEFAULT_BOUNDS = {"employment": (-0.62, 0.38), "log_wage": (-1.04, 2.27)}
LNWAGE_BASE = 6.614
EMPL_BASE = 0.615
CREDIBLE, RESCALED, DROPPED = "credible", "rescaled_p95", "dropped"


@dataclass
class LinearFit:
    names: tuple
    coefficients: np.ndarray
    residuals: np.ndarray
    vcov: np.ndarray
    n_obs: int
    r2: float

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None))

    @property
    def t(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coefficients / self.se

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"term": self.names, "coef": self.coefficients, "se": self.se, "t": self.t})


def ols(X, y, names: Sequence[str] | None = None, rtol: float = 1e-10) -> LinearFit:
    """Least squares through QR with column pivoting.

    Columns the pivoting places beyond the numerical rank are reported in a
    :class:`CollinearityError`.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n, p = X.shape
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(p))
    if n <= p:
        raise SeqretError(f"{n} observations for {p} regressors")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise SeqretError("non-finite values in regression inputs")
    scale = np.sqrt((X ** 2).sum(axis=0))
    zero = scale == 0
    Q, R, piv = linalg.qr(X / np.where(zero, 1, scale), mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int((d > rtol * max(n, p) * d[0]).sum()) if d.size and d[0] > 0 else 0
    if rank < p:
        bad = sorted(set(piv[rank:].tolist()) | set(np.where(zero)[0].tolist()))
        raise CollinearityError(f"collinear regressors: {[names[i] for i in bad]}", [names[i] for i in bad])
    z = linalg.solve_triangular(R, Q.T @ y)
    beta = np.empty(p)
    beta[piv] = z
    beta /= scale
    resid = y - X @ beta
    Rinv = linalg.solve_triangular(R, np.eye(p))
    inv_s = np.empty((p, p))
    inv_s[np.ix_(piv, piv)] = Rinv @ Rinv.T
    xtx_inv = inv_s / np.outer(scale, scale)
    ssr = float(resid @ resid)
    sigma2 = ssr / (n - p)
    sst = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ssr / sst if sst > 0 else 0.0
    return LinearFit(names, beta, resid, sigma2 * xtx_inv, n, min(max(r2, 0.0), 1.0))


def _design(X, x_names, extra, extra_names):
    X = np.asarray(X, float)
    x_names = list(x_names) if x_names is not None else [f"x{i}" for i in range(X.shape[1])]
    if "const" not in x_names:
        X = np.column_stack([np.ones(len(X)), X])
        x_names = ["const"] + x_names
    return np.column_stack([X, extra]), x_names + list(extra_names)


def _career_block(values: np.ndarray, careers: Sequence[Career], baseline: Career, prefix: str):
    careers = list(careers)
    if baseline not in careers:
        raise SeqretError(f"baseline career {baseline.key()} is not among the feasible careers")
    keep = [k for k, c in enumerate(careers) if c != baseline]
    return values[:, keep], [f"{prefix}[{careers[k].key()}]" for k in keep]


def fit_reduced_form(P: CareerProbabilityMatrix, X, y, baseline: Career, rows=None,
                     x_names: Sequence[str] | None = None) -> LinearFit:
    """OLS of ``y`` on covariates and the non-baseline career probabilities."""
    sl = slice(None) if rows is None else rows
    block, names = _career_block(P.values[sl], P.careers, baseline, "P")
    Z, all_names = _design(np.asarray(X)[sl], x_names, block, names)
    return ols(Z, np.asarray(y)[sl], all_names)


def fit_ols_treatments(D: np.ndarray, careers: Sequence[Career], X, y, baseline: Career, rows=None,
                       x_names: Sequence[str] | None = None) -> LinearFit:
    """OLS of ``y`` on covariates and the observed career indicators."""
    sl = slice(None) if rows is None else rows
    block, names = _career_block(np.asarray(D, float)[sl], careers, baseline, "D")
    Z, all_names = _design(np.asarray(X)[sl], x_names, block, names)
    return ols(Z, np.asarray(y)[sl], all_names)


def fit_modified_first_stage(d, X, p, x_names: Sequence[str] | None = None) -> LinearFit:
    """Regress one career indicator on covariates and its own probability only."""
    Z, names = _design(X, x_names, np.asarray(p, float)[:, None], ["P"])
    return ols(Z, d, names)


def first_stage_diagnostics(P: CareerProbabilityMatrix, X, x_names=None, rows=None) -> pd.DataFrame:
    sl = slice(None) if rows is None else rows
    out = []
    for k, c in enumerate(P.careers):
        try:
            f = fit_modified_first_stage(P.treatments[sl, k], np.asarray(X)[sl], P.values[sl, k], x_names)
            out.append({"career": c.key(), "phi": f.coef("P"), "t": float(f.t[-1])})
        except SeqretError:
            out.append({"career": c.key(), "phi": np.nan, "t": np.nan})
    return pd.DataFrame(out)


# ---------------------------------------------------------------------------
# Rescaling and credibility
# ---------------------------------------------------------------------------

TABLE_COLUMNS = ["career", "label", "outcome", "alpha", "alpha_tilde", "se_boot", "gamma_ols", "max_p", "p95_p",
                 "credibility"]


def rescale_effects(fit: LinearFit, summary: pd.DataFrame, outcome: str, gamma: LinearFit | None = None,
                    prefix: str = "P") -> pd.DataFrame:
    """Returns table with alpha_tilde = alpha * max_p (credibility not yet set)."""
    rows = []
    by_key = summary.set_index("career")
    for name, a in zip(fit.names, fit.coefficients):
        if not name.startswith(prefix + "["):
            continue
        key = name[len(prefix) + 1:-1]
        s = by_key.loc[key]
        g = gamma.coef(f"D[{key}]") if gamma is not None and f"D[{key}]" in gamma.names else np.nan
        rows.append({
            "career": key,
            "label": s.get("label", key),
            "outcome": outcome,
            "alpha": float(a),
            "alpha_tilde": float(a) * float(s["max_p"]),
            "se_boot": np.nan,
            "gamma_ols": g,
            "max_p": float(s["max_p"]),
            "p95_p": float(s["p95_p"]),
            "credibility": "",
        })
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)


def credibility_filter(table: pd.DataFrame, bounds: Mapping | None = None, fallback: bool = True):
    """Classify each effect as credible, rescaled at the 95th percentile, or dropped.

    Always starts again from ``alpha`` so applying the filter twice changes
    nothing. Returns ``(table, counts)``.
    """
    bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
    out = table.copy()
    tilde, cred = [], []
    for a, mx, p95, outcome in zip(out["alpha"], out["max_p"], out["p95_p"], out["outcome"]):
        lo, hi = bounds[outcome]
        if not lo < hi:
            raise SeqretError(f"bounds for {outcome} must satisfy low < high")
        first = a * mx
        if lo <= first <= hi:
            tilde.append(first)
            cred.append(CREDIBLE)
            continue
        second = a * p95
        if fallback and lo <= second <= hi:
            tilde.append(second)
            cred.append(RESCALED)
        else:
            tilde.append(first)
            cred.append(DROPPED)
    out["alpha_tilde"] = tilde
    out["credibility"] = cred
    counts = {k: int(v) for k, v in out["credibility"].value_counts().items()}
    for k in (CREDIBLE, RESCALED, DROPPED):
        counts.setdefault(k, 0)
    return out, counts


class Level(NamedTuple):
    value: float
    flagged: bool


def level_translation(alpha_tilde: float, outcome: str, lnwage_base: float = LNWAGE_BASE,
                      empl_base: float = EMPL_BASE) -> Level:
    """Outcome level implied by a rescaled effect at the baseline averages."""
    if outcome == "log_wage":
        return Level(float(np.exp(lnwage_base + alpha_tilde)), False)
    if outcome == "employment":
        v = empl_base + alpha_tilde
        flagged = not 0.0 <= v <= 1.0
        if flagged:
            warnings.warn(f"implied employment probability {v:.3f} outside [0, 1]", stacklevel=2)
        return Level(float(v), flagged)
    raise SeqretError(f"unknown outcome {outcome!r}")


def compare_report(tables: Mapping[str, pd.DataFrame]) -> dict:
    """How often, and by how much, the indicator regression exceeds the reduced form."""
    out = {}
    for outcome, t in tables.items():
        kept = t[t["credibility"] != DROPPED] if "credibility" in t else t
        diff = (kept["gamma_ols"] - kept["alpha_tilde"]).to_numpy(float)
        diff = diff[np.isfinite(diff)]
        out[outcome] = {
            "n_careers": int(diff.size),
            "n_ols_greater": int((diff > 0).sum()),
            "mean_overestimate": float(diff.mean()) if diff.size else None,
        }
    return out
