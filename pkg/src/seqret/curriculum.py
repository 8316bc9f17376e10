"""Degree content versus estimated returns.

Curricula are degree x discipline-group credit matrices, one per level. The
ten discipline groups carry the field labels and are pooled into three
categories by a :class:`QuantGrouping`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .core import NO_MASTER, Career, ChoiceSet
from .exceptions import InputError, SeqretError

CATEGORIES = ("quantitative", "technical", "non_quantitative")
PROGRAM_CREDITS = {"bachelor": 180.0, "master": 120.0}

DEFAULT_GROUPING = {
    "Sci.Stat.": "quantitative",
    "Arch.Eng.": "quantitative",
    "Chem.Pharm.": "quantitative",
    "AVGB": "technical",
    "Econ.Mgmt.": "technical",
    "Health": "technical",
    "Educ.Psy.": "non_quantitative",
    "Law": "non_quantitative",
    "Lit.Lang.": "non_quantitative",
    "Pol.Soc.": "non_quantitative",
}


@dataclass(frozen=True)
class QuantGrouping:
    mapping: Mapping = field(default_factory=lambda: dict(DEFAULT_GROUPING))

    def __post_init__(self):
        bad = {g: c for g, c in self.mapping.items() if c not in CATEGORIES}
        if bad:
            raise InputError(f"unknown categories in grouping: {bad}")

    def check(self, groups: Sequence[str]):
        missing = [g for g in groups if g not in self.mapping]
        extra = [g for g in self.mapping if g not in groups]
        if missing or extra:
            raise InputError(f"grouping must map every discipline group once (missing {missing}, unknown {extra})")

    def indicator(self, groups: Sequence[str]) -> np.ndarray:
        """groups x 3 membership matrix."""
        self.check(groups)
        M = np.zeros((len(groups), len(CATEGORIES)))
        for i, g in enumerate(groups):
            M[i, CATEGORIES.index(self.mapping[g])] = 1.0
        return M


@dataclass(frozen=True)
class CurriculumMatrix:
    level: str
    credits: pd.DataFrame  # index: degree label, columns: discipline groups

    def __post_init__(self):
        if self.level not in PROGRAM_CREDITS:
            raise InputError(f"level must be bachelor or master, got {self.level!r}")
        v = self.credits.to_numpy(float)
        if (v < 0).any():
            raise InputError(f"negative credits in {self.level} curriculum")
        over = self.credits.index[v.sum(axis=1) > PROGRAM_CREDITS[self.level] + 1e-9].tolist()
        if over:
            raise InputError(f"{self.level} degrees exceed {PROGRAM_CREDITS[self.level]:g} credits: {over}")

    @classmethod
    def read_csv(cls, path, level: str) -> "CurriculumMatrix":
        try:
            df = pd.read_csv(path)
        except FileNotFoundError as e:
            raise InputError(f"curriculum file not found: {path}") from e
        return cls(level, df.set_index(df.columns[0]).astype(float))

    @classmethod
    def default(cls, level: str) -> "CurriculumMatrix":
        with resources.files("seqret.data").joinpath(f"curriculum_{level}.csv").open() as fh:
            df = pd.read_csv(fh)
        return cls(level, df.set_index(df.columns[0]).astype(float))

    @property
    def groups(self) -> list[str]:
        return list(self.credits.columns)

    def row(self, degree: str) -> np.ndarray:
        if degree not in self.credits.index:
            raise SeqretError(f"degree {degree!r} missing from {self.level} curriculum")
        return self.credits.loc[degree].to_numpy(float)

    def diagonal_share(self, degree: str) -> float:
        r = self.row(degree)
        return float(r[self.groups.index(degree)] / r.sum()) if degree in self.groups else float("nan")


def _grouped(credits: np.ndarray, M: np.ndarray, degree: str, level: str) -> np.ndarray:
    tot = credits.sum()
    if not tot > 0:
        raise SeqretError(f"{level} degree {degree!r} has zero credits")
    return credits @ M / tot


def credit_shares(bachelor: CurriculumMatrix, master: CurriculumMatrix, career: Career, choiceset: ChoiceSet,
                  grouping: QuantGrouping | None = None, split: str = "whole"):
    """Credit shares over (quantitative, technical, non_quantitative).

    ``whole`` pools the raw credits of both degrees, so each level weighs in
    with its actual credit total; NoMaster careers use the bachelor alone.
    ``by_level`` returns ``{"B": ..., "M": ...}`` (no "M" for NoMaster).
    """
    grouping = grouping or QuantGrouping()
    M = grouping.indicator(bachelor.groups)
    if master.groups != bachelor.groups:
        raise InputError("bachelor and master curricula use different discipline groups")
    b_deg = choiceset.label(career.bachelor)
    b = bachelor.row(b_deg)
    if split == "by_level":
        out = {"B": _grouped(b, M, b_deg, "bachelor")}
        if career.master != NO_MASTER:
            m_deg = choiceset.label(career.master)
            out["M"] = _grouped(master.row(m_deg), M, m_deg, "master")
        return out
    if split != "whole":
        raise SeqretError(f"split must be whole or by_level, got {split!r}")
    if career.master == NO_MASTER:
        return _grouped(b, M, b_deg, "bachelor")
    m_deg = choiceset.label(career.master)
    _grouped(b, M, b_deg, "bachelor")
    _grouped(master.row(m_deg), M, m_deg, "master")
    return _grouped(b + master.row(m_deg), M, b_deg, "career")


def shares_table(bachelor, master, careers, choiceset, grouping=None) -> pd.DataFrame:
    rows = []
    for c in careers:
        w = credit_shares(bachelor, master, c, choiceset, grouping)
        lv = credit_shares(bachelor, master, c, choiceset, grouping, split="by_level")
        r = {"career": c.key(), "label": choiceset.career_label(c)}
        r.update(dict(zip(CATEGORIES, w)))
        for k in ("B", "M"):
            v = lv.get(k, np.full(3, np.nan))
            r.update({f"{k}_{cat}": x for cat, x in zip(CATEGORIES, v)})
        rows.append(r)
    return pd.DataFrame(rows)


def quartile_of_rank(r: int, n: int) -> int:
    """Nearest-rank quartile (1..4) of 1-based rank ``r`` among ``n``."""
    return math.ceil(4 * r / n)


def quartile_composition(returns: Mapping | pd.Series, shares: pd.DataFrame) -> pd.DataFrame:
    """Mean share profile by quartile of the returns distribution.

    ``shares`` is indexed by career key; its columns are averaged as given
    (three categories, or the six by-level columns). Ties in returns are
    broken by career key so the assignment is deterministic.
    """
    r = pd.Series(returns, dtype=float).dropna()
    keys = [k for k in r.index if k in shares.index]
    if len(keys) < 4:
        raise SeqretError(f"need at least 4 careers with returns and shares, got {len(keys)}")
    order = sorted(keys, key=lambda k: (r[k], str(k)))
    n = len(order)
    q = pd.Series({k: quartile_of_rank(i + 1, n) for i, k in enumerate(order)})
    sub = shares.loc[order].astype(float)
    out = sub.groupby(q.loc[order].to_numpy()).mean()
    out.index.name = "quartile"
    return out


def quartile_members(returns: Mapping | pd.Series) -> dict[int, list]:
    r = pd.Series(returns, dtype=float).dropna()
    order = sorted(r.index, key=lambda k: (r[k], str(k)))
    out = {1: [], 2: [], 3: [], 4: []}
    for i, k in enumerate(order):
        out[quartile_of_rank(i + 1, len(order))].append(k)
    return out


def reciprocal_pairs(careers) -> list[tuple[Career, Career]]:
    """Pairs of distinct-field careers present in both orders, each listed once."""
    cs = {Career(*c) for c in careers}
    out = []
    for c in sorted(cs):
        if c.master in (NO_MASTER, c.bachelor):
            continue
        r = Career(c.master, c.bachelor)
        if r in cs and c < r:
            out.append((c, r))
    return out


def quant_rank(code: int, choiceset: ChoiceSet, bachelor: CurriculumMatrix, grouping=None) -> tuple:
    """Sort key for how quantitative a field is: category, then own quantitative share."""
    grouping = grouping or QuantGrouping()
    label = choiceset.label(code)
    cat = grouping.mapping.get(label, "non_quantitative")
    M = grouping.indicator(bachelor.groups)
    share = _grouped(bachelor.row(label), M, label, "bachelor")[0]
    return (2 - CATEGORIES.index(cat), share)


def symmetric_contrast(returns: pd.DataFrame, shares: pd.DataFrame, choiceset: ChoiceSet,
                       bachelor: CurriculumMatrix, grouping=None, value: str = "alpha_tilde"):
    """Compare each career (x, y) with its reciprocal (y, x).

    Pairs are oriented so the more quantitative field is the master of the
    first career. Returns ``(table, skipped)``.
    """
    have = returns.dropna(subset=[value])
    careers = sorted({Career.parse(k) for k in have["career"]})
    pairs = reciprocal_pairs(careers)
    rows, skipped = [], []
    outcomes = sorted(have["outcome"].unique())
    for a, b in pairs:
        ra = quant_rank(a.master, choiceset, bachelor, grouping)
        rb = quant_rank(b.master, choiceset, bachelor, grouping)
        first, second = (a, b) if ra >= rb else (b, a)
        row = {"first": first.key(), "second": second.key(),
               "first_label": choiceset.career_label(first), "second_label": choiceset.career_label(second),
               "quant_master_first": ra != rb}
        any_outcome = False
        for o in outcomes:
            t = have[have["outcome"] == o].set_index("career")[value]
            x, y = t.get(first.key(), np.nan), t.get(second.key(), np.nan)
            row[f"{o}_first"], row[f"{o}_second"], row[f"{o}_delta"] = x, y, x - y
            any_outcome |= bool(np.isfinite(x - y))
        for cat in CATEGORIES:
            row[f"{cat}_first"] = shares.loc[first.key(), cat] if first.key() in shares.index else np.nan
            row[f"{cat}_second"] = shares.loc[second.key(), cat] if second.key() in shares.index else np.nan
        if any_outcome:
            rows.append(row)
        else:
            skipped.append((first.key(), second.key()))
    return pd.DataFrame(rows), skipped


def returns_correlation(wage, empl, se_wage=None, se_empl=None) -> dict:
    """Weighted Pearson correlation of wage and employment returns.

    Weights are 1/(se_w^2 + se_e^2) when standard errors are given. The
    two-sided p-value uses the t transform on n_eff - 2 degrees of freedom,
    with n_eff = (sum w)^2 / sum w^2.
    """
    x = np.asarray(wage, float)
    y = np.asarray(empl, float)
    if x.shape != y.shape or x.ndim != 1:
        raise SeqretError("return vectors must be 1-d and of equal length")
    if se_wage is not None and se_empl is not None:
        w = 1.0 / (np.asarray(se_wage, float) ** 2 + np.asarray(se_empl, float) ** 2)
    else:
        w = np.ones_like(x)
    ok = np.isfinite(x) & np.isfinite(y) & np.isfinite(w)
    x, y, w = x[ok], y[ok], w[ok]
    if x.size < 3:
        raise SeqretError("need at least 3 careers with both returns")
    w = w / w.sum()
    mx, my = w @ x, w @ y
    vx, vy = w @ (x - mx) ** 2, w @ (y - my) ** 2
    if vx <= 0 or vy <= 0:
        raise SeqretError("zero variance in a returns vector")
    rho = float(w @ ((x - mx) * (y - my)) / math.sqrt(vx * vy))
    rho = max(-1.0, min(1.0, rho))
    n_eff = 1.0 / float(w @ w)
    dof = n_eff - 2
    if dof <= 0:
        p = float("nan")
    elif abs(rho) == 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt(dof / (1 - rho * rho))
        p = float(2 * stats.t.sf(abs(t), dof))
    return {"rho": rho, "p": p, "n": int(x.size), "n_eff": n_eff}


def top_careers(wage: pd.DataFrame, empl: pd.DataFrame, k: int = 5, value: str = "alpha_tilde") -> list[str]:
    """The ``k`` highest wage returns among careers with a positive employment return."""
    e = empl.set_index("career")[value]
    w = wage.dropna(subset=[value])
    w = w[w["career"].map(lambda c: e.get(c, np.nan) > 0)]
    return w.sort_values([value, "career"], ascending=[False, True])["career"].head(k).tolist()
