"""Dataset schema, choice sets, design matrices and column standardization.

Individuals are held in a :class:`pandas.DataFrame` with one row per graduate.
The column names follow the ``individuals.csv`` ingestion schema
(see :data:`BASE_COLUMNS`); the per-field instrument blocks are named
``ee_1..ee_L`` (entry-exam bindingness shares) and ``cred_1..cred_L``
(constrained master credits), with ``cred_std_1..cred_std_L`` added at
ingestion.
"""
from __future__ import annotations

import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence, Union

import numpy as np
import pandas as pd

from .exceptions import InputError

logger = logging.getLogger(__name__)

NO_MASTER = 0
MAX_CREDITS = 180.0

# (code, short label) as used throughout the tables
DEFAULT_FIELDS = (
    (1, "AVGB"),
    (2, "Arch.Eng."),
    (3, "Chem.Pharm."),
    (4, "Econ.Mgmt."),
    (5, "Educ.Psy."),
    (6, "Law"),
    (7, "Lit.Lang."),
    (8, "Health"),
    (9, "Pol.Soc."),
    (10, "Sci.Stat."),
)
LIT_LANG = 7

BASE_COLUMNS = (
    "id",
    "hs_grade_raw",
    "hs_grade_std",
    "hs_type",
    "gender",
    "parent_graduate",
    "parent_highrank",
    "local_employment_rate",
    "university_quality_std",
    "cohort_year",
    "macro_region",
    "years_since_graduation",
    "province",
    "bachelor",
    "master",
    "single_cycle",
    "employed",
    "log_wage",
    "log_distance",
)
HS_TYPES = ("humanities", "science", "other")


class FieldOfStudy(NamedTuple):
    code: int
    label: str


class Career(NamedTuple):
    """A (bachelor, master) pair; ``master == 0`` means no master's degree."""

    bachelor: int
    master: int

    def key(self) -> str:
        return f"{self.bachelor}-{self.master}"

    @classmethod
    def parse(cls, key: str) -> "Career":
        b, m = key.split("-")
        return cls(int(b), int(m))


@dataclass(frozen=True)
class ChoiceSet:
    """The bachelor fields; the master set is the same fields plus NoMaster."""

    fields: tuple = tuple(FieldOfStudy(*f) for f in DEFAULT_FIELDS)

    def __post_init__(self):
        codes = [f.code for f in self.fields]
        if len(set(codes)) != len(codes):
            raise InputError("field codes must be unique")
        if sorted(codes) != list(range(1, len(codes) + 1)):
            raise InputError("field codes must be 1..L")

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    @property
    def codes(self) -> list[int]:
        return [f.code for f in self.fields]

    @property
    def master_codes(self) -> list[int]:
        return [NO_MASTER] + self.codes

    def label(self, code: int) -> str:
        if code == NO_MASTER:
            return "NoMaster"
        return self.fields[code - 1].label

    def career_label(self, career: Career) -> str:
        return f"({self.label(career.bachelor)}, {self.label(career.master)})"

    def code_of(self, label: str) -> int:
        for f in self.fields:
            if f.label == label:
                return f.code
        if label == "NoMaster":
            return NO_MASTER
        raise InputError(f"unknown field label {label!r}")

    @property
    def ee_columns(self) -> list[str]:
        return [f"ee_{c}" for c in self.codes]

    @property
    def cred_columns(self) -> list[str]:
        return [f"cred_{c}" for c in self.codes]

    @property
    def cred_std_columns(self) -> list[str]:
        return [f"cred_std_{c}" for c in self.codes]

    def to_dict(self) -> dict:
        return {"fields": [{"code": f.code, "label": f.label} for f in self.fields]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChoiceSet":
        return cls(tuple(FieldOfStudy(int(f["code"]), str(f["label"])) for f in d["fields"]))

    @classmethod
    def load(cls, path) -> "ChoiceSet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def first(cls, n: int) -> "ChoiceSet":
        """Sub choice set with the first ``n`` default fields (small fixtures)."""
        return cls(tuple(FieldOfStudy(*f) for f in DEFAULT_FIELDS[:n]))


# ---------------------------------------------------------------------------
# Design layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Factor:
    """Categorical column coded as indicators with one reference level dropped.

    ``reference=None`` resolves to the minimum for numeric levels and the
    first level in row order otherwise.
    """

    name: str
    reference: object = None
    levels: tuple | None = None


@dataclass(frozen=True)
class Interaction:
    left: str
    right: str

    @property
    def name(self) -> str:
        return f"{self.left}:{self.right}"


Term = Union[str, Factor, Interaction]


@dataclass(frozen=True)
class Layout:
    terms: tuple = ()

    def to_list(self) -> list:
        out = []
        for t in self.terms:
            if isinstance(t, Factor):
                d = {"factor": t.name, "reference": _jsonable(t.reference)}
                if t.levels is not None:
                    d["levels"] = [_jsonable(v) for v in t.levels]
                out.append(d)
            elif isinstance(t, Interaction):
                out.append({"interaction": [t.left, t.right]})
            else:
                out.append(t)
        return out

    @classmethod
    def from_list(cls, items: Sequence) -> "Layout":
        terms: list[Term] = []
        for it in items:
            if isinstance(it, str):
                terms.append(it)
            elif "factor" in it:
                lv = it.get("levels")
                terms.append(Factor(it["factor"], it.get("reference"), tuple(lv) if lv is not None else None))
            elif "interaction" in it:
                a, b = it["interaction"]
                terms.append(Interaction(a, b))
            else:
                raise InputError(f"bad layout term {it!r}")
        return cls(tuple(terms))

    def without(self, name: str) -> "Layout":
        return Layout(tuple(t for t in self.terms if _term_name(t) != name))


def _term_name(t: Term) -> str:
    return t if isinstance(t, str) else t.name


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


def default_layout() -> Layout:
    """Six individual covariates, two controls and year/region/experience FE."""
    return Layout(
        (
            "hs_grade_std",
            Factor("hs_type", "other"),
            "gender",
            "parent_graduate",
            "parent_highrank",
            "local_employment_rate",
            "university_quality_std",
            Factor("cohort_year"),
            Factor("macro_region"),
            Factor("years_since_graduation"),
        )
    )


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    columns: tuple
    layout: Layout = field(default_factory=Layout)

    @property
    def column_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.columns)}

    @property
    def shape(self):
        return self.values.shape

    def select(self, columns: Sequence[str]) -> "DesignMatrix":
        idx = self.column_index
        return DesignMatrix(self.values[:, [idx[c] for c in columns]], tuple(columns), self.layout)


def _resolve_factor(f: Factor, col: pd.Series) -> Factor:
    observed = list(pd.unique(col.dropna()))
    if f.levels is not None:
        declared = list(f.levels)
        unseen = [v for v in observed if v not in declared]
        if unseen:
            raise InputError(f"factor {f.name!r}: levels {unseen} not in declared levels {declared}")
        levels = declared
    else:
        if all(isinstance(v, (int, float, np.integer, np.floating)) for v in observed):
            levels = sorted(observed)
        else:
            levels = observed  # first-appearance order
    ref = f.reference
    if ref is None:
        if not levels:
            raise InputError(f"factor {f.name!r} has no levels")
        ref = levels[0]
    if ref not in levels:
        raise InputError(f"factor {f.name!r}: reference level {ref!r} unseen in data (levels {levels})")
    return Factor(f.name, _jsonable(ref), tuple(_jsonable(v) for v in levels))


def _level_sort_key(v):
    return (0, v, "") if isinstance(v, (int, float)) else (1, 0, str(v))


def build_design_matrix(records: pd.DataFrame, layout: Layout) -> DesignMatrix:
    """Assemble the design matrix for ``layout``.

    Factor levels are resolved on first use and stored in the returned
    ``DesignMatrix.layout``; passing that resolved layout back in reproduces
    the same columns on any subset or transformed copy of the data.
    """
    n = len(records)
    blocks: list[np.ndarray] = []
    names: list[str] = []
    resolved: list[Term] = []
    for term in layout.terms:
        if isinstance(term, Factor):
            if term.name not in records.columns:
                raise InputError(f"unknown field name {term.name!r}")
            col = records[term.name]
            f = _resolve_factor(term, col)
            non_ref = sorted((v for v in f.levels if v != f.reference), key=_level_sort_key)
            vals = col.to_numpy()
            for lv in non_ref:
                blocks.append((vals == lv).astype(float)[:, None])
                names.append(f"{f.name}[{lv}]")
            resolved.append(f)
        elif isinstance(term, Interaction):
            for part in (term.left, term.right):
                if part not in records.columns:
                    raise InputError(f"unknown field name {part!r}")
            v = records[term.left].to_numpy(float) * records[term.right].to_numpy(float)
            blocks.append(v[:, None])
            names.append(term.name)
            resolved.append(term)
        else:
            if term not in records.columns:
                raise InputError(f"unknown field name {term!r}")
            blocks.append(records[term].to_numpy(float)[:, None])
            names.append(term)
            resolved.append(term)
    values = np.hstack(blocks) if blocks else np.empty((n, 0))
    if not np.all(np.isfinite(values)):
        bad = [names[j] for j in np.where(~np.isfinite(values).all(axis=0))[0]]
        raise InputError(f"non-finite design entries in columns {bad}")
    return DesignMatrix(np.ascontiguousarray(values), tuple(names), Layout(tuple(resolved)))


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


def standardize_by_group(values, group, return_fallback: bool = False):
    """Within-group z-scores using the population sd (divide by n).

    Groups with fewer than two non-missing values or zero variance use the
    global mean and sd instead and are reported through a warning. Missing
    values stay missing.
    """
    v = np.asarray(values, dtype=float)
    g = pd.Series(np.asarray(group, dtype=object))
    ok = ~np.isnan(v)
    if not ok.any():
        raise InputError("empty standardization input")
    gmean = v[ok].mean()
    gsd = v[ok].std()
    s = pd.Series(v)
    grouped = s.groupby(g.values)
    mean = grouped.transform("mean").to_numpy()
    sd = grouped.transform(lambda x: x.std(ddof=0)).to_numpy()
    count = grouped.transform("count").to_numpy()
    fallback = (count < 2) | ~(sd > 0)
    out = np.full_like(v, np.nan)
    regular = ok & ~fallback
    out[regular] = (v[regular] - mean[regular]) / sd[regular]
    fb = ok & fallback
    if fb.any():
        bad = sorted({str(x) for x in g.values[fb]})
        warnings.warn(f"standardization fell back to global moments for groups {bad}", stacklevel=2)
        out[fb] = (v[fb] - gmean) / gsd if gsd > 0 else 0.0
    if return_fallback:
        return out, fb
    return out


# ---------------------------------------------------------------------------
# Careers
# ---------------------------------------------------------------------------


def career_counts(records: pd.DataFrame) -> Counter:
    pairs = zip(records["bachelor"].astype(int), records["master"].astype(int))
    return Counter(Career(b, m) for b, m in pairs)


def filter_careers(records, min_count: int) -> list[Career]:
    """Careers observed at least ``min_count`` times, sorted by (bachelor, master).

    ``records`` is either an individuals frame or a mapping Career -> count.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = records if isinstance(records, Mapping) else career_counts(records)
    return sorted(Career(int(c[0]), int(c[1])) for c, n in counts.items() if n >= min_count)


def in_careers(records: pd.DataFrame, careers: Iterable[Career]) -> np.ndarray:
    """Boolean mask of records whose observed career is in ``careers``."""
    keys = {(c.bachelor, c.master) for c in careers}
    b = records["bachelor"].to_numpy(int)
    m = records["master"].to_numpy(int)
    return np.fromiter(((x, y) in keys for x, y in zip(b, m)), bool, len(records))


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def required_columns(choiceset: ChoiceSet) -> list[str]:
    return list(BASE_COLUMNS) + choiceset.ee_columns + choiceset.cred_columns


_NUMERIC = (
    "hs_grade_raw",
    "hs_grade_std",
    "gender",
    "parent_graduate",
    "parent_highrank",
    "local_employment_rate",
    "university_quality_std",
    "cohort_year",
    "years_since_graduation",
    "bachelor",
    "master",
    "single_cycle",
    "employed",
    "log_wage",
    "log_distance",
)
# outcomes may be missing (log_wage when not employed); everything else is listwise
_OPTIONAL = ("log_wage", "hs_grade_raw", "hs_grade_std")


def validate_records(df: pd.DataFrame, choiceset: ChoiceSet | None = None) -> tuple[pd.DataFrame, dict]:
    """Drop invalid rows, add derived columns and return ``(clean, report)``.

    Listwise deletion on covariates, instruments and choices, with a
    per-field count in the report. ``hs_grade_std`` is computed from
    ``hs_grade_raw`` by province when absent, and ``cred_std_*`` is the
    global standardization of all credit columns jointly.
    """
    cs = choiceset or ChoiceSet()
    missing_cols = [c for c in required_columns(cs) if c not in df.columns]
    if "hs_grade_std" in missing_cols and "hs_grade_raw" in df.columns:
        missing_cols.remove("hs_grade_std")
        df = df.assign(hs_grade_std=np.nan)
    if missing_cols:
        raise InputError(f"missing columns: {missing_cols}")
    df = df.copy()
    for c in list(_NUMERIC) + cs.ee_columns + cs.cred_columns:
        df[c] = pd.to_numeric(df[c], errors="coerce")

    n_in = len(df)
    report: dict = {"n_input": n_in, "dropped_missing": {}, "dropped_invalid": {}}
    if df["hs_grade_std"].isna().all():
        if df["hs_grade_raw"].isna().all():
            raise InputError("neither hs_grade_std nor hs_grade_raw is available")
        df["hs_grade_std"] = standardize_by_group(df["hs_grade_raw"].to_numpy(), df["province"].astype(str).to_numpy())
        report["hs_grade_std"] = "computed by province"

    keep = np.ones(n_in, bool)
    for c in required_columns(cs):
        if c in _OPTIONAL:
            continue
        miss = df[c].isna().to_numpy() | (df[c].astype(str).str.strip() == "").to_numpy()
        if miss.any():
            report["dropped_missing"][c] = int((miss & keep).sum())
        keep &= ~miss
    miss = df["hs_grade_std"].isna().to_numpy()
    if miss.any():
        report["dropped_missing"]["hs_grade_std"] = int((miss & keep).sum())
    keep &= ~miss

    L = cs.n_fields
    checks = {
        "bachelor_code": ~df["bachelor"].isin(cs.codes),
        "master_code": ~df["master"].isin(cs.master_codes),
        "hs_type": ~df["hs_type"].isin(HS_TYPES),
        "wage_iff_employed": (df["employed"] == 1) != df["log_wage"].notna(),
        "binary_flags": ~(
            df[["gender", "parent_graduate", "parent_highrank", "single_cycle", "employed"]].isin([0, 1]).all(axis=1)
        ),
        "single_cycle_master": (df["single_cycle"] == 1) & (df["master"] != df["bachelor"]),
        "ee_range": ~df[cs.ee_columns].apply(lambda s: s.between(0, 1)).all(axis=1),
        "cred_range": ~df[cs.cred_columns].apply(lambda s: s.between(0, MAX_CREDITS)).all(axis=1),
        "log_distance": df["log_distance"] < 0,
    }
    for name, bad in checks.items():
        bad = bad.to_numpy() & keep
        if bad.any():
            report["dropped_invalid"][name] = int(bad.sum())
        keep &= ~bad
    df = df.loc[keep].reset_index(drop=True)
    if df.empty:
        raise InputError("no valid records after validation")
    for c in ("bachelor", "master", "single_cycle", "employed", "gender", "parent_graduate", "parent_highrank",
              "cohort_year", "years_since_graduation"):
        df[c] = df[c].astype(int)
    df["macro_region"] = df["macro_region"].astype(str)
    df["province"] = df["province"].astype(str)

    cred = df[cs.cred_columns].to_numpy(float)
    mu, sd = cred.mean(), cred.std()
    std = (cred - mu) / sd if sd > 0 else cred - mu
    for j, c in enumerate(cs.cred_std_columns):
        df[c] = std[:, j]
    report["n_valid"] = len(df)
    report["n_fields"] = L
    report["credit_standardization"] = {"mean": float(mu), "sd": float(sd)}
    return df, report


def load_individuals(path, choiceset: ChoiceSet | None = None) -> tuple[pd.DataFrame, dict]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"input file not found: {path}")
    df = pd.read_csv(path, keep_default_na=True, na_values=[""])
    return validate_records(df, choiceset)


def write_individuals(df: pd.DataFrame, path, choiceset: ChoiceSet | None = None) -> None:
    cs = choiceset or ChoiceSet()
    cols = required_columns(cs)
    df[cols].to_csv(path, index=False, float_format="%.10g")
