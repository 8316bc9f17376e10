"""Counterfactual admission policies on the bachelor choice model.

A policy rewrites the entry-exam instruments, the fitted stage-1
coefficients are kept, and enrollment shares are re-predicted. Only the
intensive margin is simulated: everybody still enrolls somewhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .core import ChoiceSet
from .exceptions import InputError, SeqretError
from .nested import StageOneModel, prepare_sample, stage1_design

LOW_N = 30


@dataclass(frozen=True)
class PolicyTransform:
    kind: str  # identity | min | value | field
    value: float | None = None
    field: int | None = None
    scope: tuple | None = None  # bachelor codes; None means all

    @classmethod
    def parse(cls, text: str, choiceset: ChoiceSet | None = None) -> "PolicyTransform":
        """``identity``, ``min``, ``one`` or ``set:<field>=<value>``."""
        t = text.strip()
        if t in ("identity", "min"):
            return cls(t)
        if t == "one":
            return cls("value", 1.0)
        if t.startswith("set:") and "=" in t:
            f, v = t[4:].split("=", 1)
            try:
                code = int(f)
            except ValueError:
                if choiceset is None:
                    raise InputError(f"field {f!r} must be a code without a choice set")
                code = choiceset.code_of(f)
            try:
                val = float(v)
            except ValueError as e:
                raise InputError(f"bad value in transform {text!r}") from e
            return cls("field", val, code)
        raise InputError(f"unknown transform {text!r} (expected min, one, identity or set:<field>=<v>)")

    def describe(self) -> str:
        if self.kind == "value":
            return "one" if self.value == 1.0 else f"value={self.value:g}"
        if self.kind == "field":
            return f"set_{self.field}={self.value:g}"
        return self.kind

    def fields(self, choiceset: ChoiceSet) -> list[int]:
        if self.kind == "field":
            return [self.field]
        return list(self.scope) if self.scope is not None else choiceset.codes

    def apply(self, records: pd.DataFrame, choiceset: ChoiceSet) -> tuple[pd.DataFrame, list[int]]:
        """Transformed copy of ``records`` and the fields pushed outside the observed support."""
        scope = self.fields(choiceset)
        if not scope:
            raise SeqretError("empty transform scope")
        bad = [f for f in scope if f not in choiceset.codes]
        if bad:
            raise SeqretError(f"transform scope outside the choice set: {bad}")
        if self.value is not None and not 0.0 <= self.value <= 1.0:
            raise SeqretError(f"instrument value {self.value} outside [0, 1]")
        out = records.copy()
        if self.kind == "identity":
            return out, []
        flagged = []
        for f in scope:
            col = f"ee_{f}"
            obs = records[col].to_numpy(float)
            new = np.full(len(obs), obs.min() if self.kind == "min" else self.value)
            if new.min() < obs.min() or new.max() > obs.max():
                flagged.append(f)
            out[col] = new
        return out, flagged


@dataclass
class SimulationReport:
    transform: str
    table: pd.DataFrame
    baseline_probs: np.ndarray
    counterfactual_probs: np.ndarray
    out_of_support: list
    subgroups: dict = field(default_factory=dict)


def _share_table(codes, labels, observed, p0, p1) -> pd.DataFrame:
    base = p0.mean(axis=0)
    cf = p1.mean(axis=0)
    delta = cf - base
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(base > 0, 100 * delta / base, np.nan)
        rel_obs = np.where(observed > 0, 100 * delta / observed, np.nan)
    return pd.DataFrame({
        "field": codes,
        "label": labels,
        "observed": observed,
        "baseline": base,
        "counterfactual": cf,
        "delta_pp": 100 * delta,
        "delta_rel": rel,
        "delta_rel_observed": rel_obs,
    })


def predict_stage1(s1: StageOneModel, records: pd.DataFrame, choiceset: ChoiceSet) -> np.ndarray:
    s = prepare_sample(records, choiceset, s1.layout, s1.stage1_extra)
    return s1.predict(s)


def simulate_policy(s1: StageOneModel, records: pd.DataFrame, transform: PolicyTransform,
                    choiceset: ChoiceSet) -> SimulationReport:
    """Predicted bachelor shares before and after ``transform``.

    Relative changes are reported against both the predicted and the
    observed baseline share.
    """
    new, flagged = transform.apply(records, choiceset)
    p0 = predict_stage1(s1, records, choiceset)
    p1 = p0 if transform.kind == "identity" else predict_stage1(s1, new, choiceset)
    codes = s1.bachelors
    b = records["bachelor"].to_numpy(int)
    observed = np.array([(b == c).mean() for c in codes])
    table = _share_table(codes, [choiceset.label(c) for c in codes], observed, p0, p1)
    return SimulationReport(transform.describe(), table, p0, p1, flagged)


def _groups(records: pd.DataFrame, key: str) -> np.ndarray:
    if key == "hs_grade_pos":
        return (records["hs_grade_std"].to_numpy(float) > 0).astype(int)
    if key not in records:
        raise SeqretError(f"unknown decomposition key {key!r}")
    return records[key].to_numpy()


def decompose_simulation(report: SimulationReport, records: pd.DataFrame, keys) -> SimulationReport:
    """Per-subgroup shares and deltas; subgroups under 30 rows are flagged ``low_n``."""
    codes = report.table["field"].tolist()
    labels = report.table["label"].tolist()
    b = records["bachelor"].to_numpy(int)
    subgroups = {}
    for key in keys:
        g = _groups(records, key)
        parts = []
        for level in sorted(pd.unique(g), key=str):
            rows = g == level
            observed = np.array([(b[rows] == c).mean() for c in codes])
            t = _share_table(codes, labels, observed, report.baseline_probs[rows], report.counterfactual_probs[rows])
            t.insert(0, "low_n", int(rows.sum()) < LOW_N)
            t.insert(0, "n", int(rows.sum()))
            t.insert(0, "group", level)
            parts.append(t)
        subgroups[key] = pd.concat(parts, ignore_index=True)
    return SimulationReport(report.transform, report.table, report.baseline_probs, report.counterfactual_probs,
                            report.out_of_support, {**report.subgroups, **subgroups})


def instrument_derivative(s1: StageOneModel, records: pd.DataFrame, choiceset: ChoiceSet, f: int) -> np.ndarray:
    """Analytic dP_i,f / d ee_f for every individual (interaction terms included)."""
    s = prepare_sample(records, choiceset, s1.layout, s1.stage1_extra)
    dm = stage1_design(s).select(s1.mnl.columns)
    P = s1.predict(s)
    m = s1.mnl
    K, p = m.n_alternatives, len(m.columns)
    B = np.zeros((K, p))
    B[m.nonbase] = m.coefficients
    col = f"ee_{f}"
    # dU_a/d ee_f = sum over columns c that contain ee_f of B[a, c] * d x_c / d ee_f
    dU = np.zeros((len(s), K))
    for c, name in enumerate(m.columns):
        if name == col:
            dU += B[:, c][None, :]
        elif ":" in name and col in name.split(":"):
            other = [x for x in name.split(":") if x != col][0]
            dU += records[other].to_numpy(float)[:, None] * B[:, c][None, :]
    a = s1.bachelors.index(f)
    return P[:, a] * (dU[:, a] - (P * dU).sum(axis=1))
