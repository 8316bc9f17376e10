"""Pipeline configuration and the estimation chain shared by the CLI and the bootstrap."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .core import LIT_LANG, NO_MASTER, Career, ChoiceSet, Layout, default_layout
from .exceptions import InputError, SeqretError, StageError
from .mnl import MnlConfig
from .nested import NestedConfig, NestedFit, PreparedSample, fit_nested
from .returns import DEFAULT_BOUNDS, OUTCOMES, LinearFit, credibility_filter, fit_ols_treatments, fit_reduced_form, \
    rescale_effects

DECOMPOSE_KEYS = ("gender", "parent_graduate", "parent_highrank", "hs_grade_pos")
PATH_KEYS = ("individuals", "choiceset", "curriculum_bachelor", "curriculum_master", "out_dir")


@dataclass
class PipelineConfig:
    individuals: str | None = None
    choiceset: str | None = None
    curriculum_bachelor: str | None = None
    curriculum_master: str | None = None
    out_dir: str = "seqret_out"
    layout: list | None = None
    stage1_extra: list = field(default_factory=list)
    min_count: int = 100
    baseline_bachelor: int = LIT_LANG
    baseline_career: str = f"{LIT_LANG}-{NO_MASTER}"
    outcomes: list = field(default_factory=lambda: list(OUTCOMES))
    bootstrap: dict = field(default_factory=lambda: {"enabled": True, "n_iter": 104, "seed": 0})
    bounds: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_BOUNDS.items()})
    fallback_percentile: float = 0.95
    simulations: list = field(default_factory=lambda: ["min", "one"])
    decompose_keys: list = field(default_factory=lambda: list(DECOMPOSE_KEYS))
    quant_grouping: dict | None = None
    mnl: dict = field(default_factory=dict)
    seed: int = 0
    threads: int = 1

    @classmethod
    def from_dict(cls, d: Mapping, base_dir=None) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if base_dir is not None:
            for k in PATH_KEYS:
                if d.get(k) is not None and not Path(d[k]).is_absolute():
                    d[k] = str(Path(base_dir) / d[k])
        if "bootstrap" in d:
            d["bootstrap"] = {**cls().bootstrap, **d["bootstrap"]}
        if "bounds" in d:
            d["bounds"] = {**cls().bounds, **d["bounds"]}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        p = Path(path)
        if not p.exists():
            raise InputError(f"config file not found: {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise InputError(f"config {p} is not valid JSON: {e}") from e
        return cls.from_dict(d, base_dir=p.parent)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Content hash of everything that can change the artifacts."""
        d = self.to_dict()
        d.pop("threads")
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()

    def resolved_layout(self) -> Layout:
        return Layout.from_list(self.layout) if self.layout is not None else default_layout()

    def nested_config(self, sample: PreparedSample | None = None) -> NestedConfig:
        return NestedConfig(
            layout=sample.layout if sample is not None else self.resolved_layout(),
            stage1_extra=sample.stage1_extra if sample is not None else Layout.from_list(self.stage1_extra),
            min_count=self.min_count,
            baseline_bachelor=self.baseline_bachelor,
            mnl=MnlConfig(**self.mnl),
        )

    def bound_tuples(self) -> dict:
        return {k: tuple(v) for k, v in self.bounds.items()}

    def load_choiceset(self) -> ChoiceSet:
        if self.choiceset:
            if not Path(self.choiceset).exists():
                raise InputError(f"choiceset file not found: {self.choiceset}")
            return ChoiceSet.load(self.choiceset)
        return ChoiceSet.first(10)


@dataclass
class ModelRun:
    nested: NestedFit
    baseline: Career
    fits: dict  # outcome -> (reduced form, indicator regression)
    tables: dict  # outcome -> returns table
    counts: dict  # outcome -> credibility counts
    summary: pd.DataFrame

    def returns_table(self) -> pd.DataFrame:
        return pd.concat([self.tables[o] for o in self.tables], ignore_index=True)


def outcome_rows(sample: PreparedSample, P, outcome: str) -> tuple[np.ndarray, np.ndarray]:
    """Estimation rows and outcome vector; records in excluded careers are left out."""
    in_career = P.treatments.sum(axis=1) == 1
    if outcome == "log_wage":
        return in_career & (sample.employed == 1), sample.log_wage
    if outcome == "employment":
        return in_career, sample.employed.astype(float)
    raise SeqretError(f"unknown outcome {outcome!r}")


def estimate(sample: PreparedSample, cfg: PipelineConfig) -> ModelRun:
    """Choice model, composition, then returns for every configured outcome."""
    nested = fit_nested(sample, cfg.nested_config(sample))
    base = Career.parse(cfg.baseline_career)
    P = nested.probs
    if base not in P.careers:
        raise StageError("returns", f"baseline career {base.key()} did not survive the career filter")
    summary = P.summary(sample.choiceset, q=cfg.fallback_percentile)
    fits, tables, counts = {}, {}, {}
    for outcome in cfg.outcomes:
        rows, y = outcome_rows(sample, P, outcome)
        try:
            rf = fit_reduced_form(P, sample.base, y, base, rows, x_names=sample.base_columns)
            gamma = fit_ols_treatments(P.treatments, P.careers, sample.base, y, base, rows,
                                       x_names=sample.base_columns)
        except SeqretError as e:
            raise StageError("returns", f"{outcome}: {e}") from e
        t = rescale_effects(rf, summary, outcome, gamma)
        tables[outcome], counts[outcome] = credibility_filter(t, cfg.bound_tuples())
        fits[outcome] = (rf, gamma)
    return ModelRun(nested, base, fits, tables, counts, summary)


def run_statistic(run: ModelRun) -> pd.Series:
    """Named parameter vector recorded by each bootstrap replicate."""
    vals = {}
    for outcome, t in run.tables.items():
        for key, a, mx, g in zip(t["career"], t["alpha"], t["max_p"], t["gamma_ols"]):
            vals[f"{outcome}:alpha[{key}]"] = a
            vals[f"{outcome}:alpha_tilde[{key}]"] = a * mx
            vals[f"{outcome}:gamma[{key}]"] = g
    return pd.Series(vals, dtype=float)


def coefficient_frame(fit: LinearFit, outcome: str, model: str) -> pd.DataFrame:
    t = fit.table()
    t.insert(0, "model", model)
    t.insert(0, "outcome", outcome)
    return t
