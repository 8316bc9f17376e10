"""Sequential two-stage choice model and composed career probabilities.

Stage 1 is a multinomial logit over bachelor fields. Stage 2 is one logit
per bachelor over the masters that survive the career filter, with
"NoMaster" as the omitted alternative. Career probabilities are the product
of the two.

Estimation works on a :class:`PreparedSample`, a column-array view of the
validated records with the covariate layout resolved once on the full data.
Resampling a prepared sample is a row gather, which keeps bootstrap
replicates cheap and guarantees the same fixed-effect references in every
replicate.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .core import (
    LIT_LANG,
    NO_MASTER,
    Career,
    ChoiceSet,
    DesignMatrix,
    Layout,
    build_design_matrix,
    filter_careers,
    default_layout,
)
from .exceptions import SeqretError, StageError
from .mnl import MnlConfig, MnlModel, WaldResult, collinear_columns, fit_mnl, predict_proba, wald_joint


@dataclass
class NestedConfig:
    layout: Layout = field(default_factory=default_layout)
    stage1_extra: Layout = field(default_factory=Layout)
    min_count: int = 100
    baseline_bachelor: int = LIT_LANG
    mnl: MnlConfig = field(default_factory=MnlConfig)


@dataclass(frozen=True)
class PreparedSample:
    choiceset: ChoiceSet
    layout: Layout  # resolved
    stage1_extra: Layout  # resolved
    ids: np.ndarray
    base: np.ndarray
    base_columns: tuple
    extra: np.ndarray
    extra_columns: tuple
    ee: np.ndarray
    cred_std: np.ndarray
    log_distance: np.ndarray
    bachelor: np.ndarray
    master: np.ndarray
    single_cycle: np.ndarray
    employed: np.ndarray
    log_wage: np.ndarray

    def __len__(self):
        return len(self.ids)

    def take(self, idx) -> "PreparedSample":
        idx = np.asarray(idx)
        kw = {}
        for name in ("ids", "base", "extra", "ee", "cred_std", "log_distance", "bachelor", "master",
                     "single_cycle", "employed", "log_wage"):
            kw[name] = getattr(self, name)[idx]
        return replace(self, **kw)

    def career_counts(self) -> Counter:
        return Counter(Career(int(b), int(m)) for b, m in zip(self.bachelor, self.master))

    def careers_of(self) -> list[Career]:
        return [Career(int(b), int(m)) for b, m in zip(self.bachelor, self.master)]


def prepare_sample(records: pd.DataFrame, choiceset: ChoiceSet, layout: Layout,
                   stage1_extra: Layout | None = None) -> PreparedSample:
    dm = build_design_matrix(records, layout)
    extra = stage1_extra or Layout()
    if extra.terms:
        em = build_design_matrix(records, extra)
        ev, ec, el = em.values, em.columns, em.layout
    else:
        ev, ec, el = np.empty((len(records), 0)), (), extra
    wage = records["log_wage"].to_numpy(float) if "log_wage" in records else np.full(len(records), np.nan)
    return PreparedSample(
        choiceset=choiceset,
        layout=dm.layout,
        stage1_extra=el,
        ids=records["id"].to_numpy(),
        base=dm.values,
        base_columns=dm.columns,
        extra=ev,
        extra_columns=tuple(ec),
        ee=records[choiceset.ee_columns].to_numpy(float),
        cred_std=records[choiceset.cred_std_columns].to_numpy(float),
        log_distance=records["log_distance"].to_numpy(float),
        bachelor=records["bachelor"].to_numpy(int),
        master=records["master"].to_numpy(int),
        single_cycle=records["single_cycle"].to_numpy(int),
        employed=records["employed"].to_numpy(int) if "employed" in records else np.zeros(len(records), int),
        log_wage=wage,
    )


# ---------------------------------------------------------------------------
# Designs
# ---------------------------------------------------------------------------


def stage1_design(s: PreparedSample) -> DesignMatrix:
    cols = ("const",) + s.base_columns + s.extra_columns + tuple(s.choiceset.ee_columns)
    X = np.column_stack([np.ones(len(s)), s.base, s.extra, s.ee])
    return DesignMatrix(X, cols, s.layout)


def stage2_design(s: PreparedSample, masters, rows=None) -> DesignMatrix:
    cs = s.choiceset
    pos = {c: i for i, c in enumerate(cs.codes)}
    mcols = [pos[m] for m in masters if m != NO_MASTER]
    sl = slice(None) if rows is None else rows
    n = len(s) if rows is None else int(np.size(s.ids[sl]))
    cols = ("const",) + s.base_columns + tuple(f"cred_std_{m}" for m in masters if m != NO_MASTER) + ("log_distance",)
    X = np.column_stack([np.ones(n), s.base[sl], s.cred_std[sl][:, mcols], s.log_distance[sl]])
    return DesignMatrix(X, cols, s.layout)


def _drop_degenerate(dm: DesignMatrix, protect=("const",)) -> tuple[DesignMatrix, list[str]]:
    """Remove zero-variance and collinear columns (never the protected ones)."""
    X = dm.values
    keep = []
    dropped = []
    for j, c in enumerate(dm.columns):
        if c in protect or np.ptp(X[:, j]) > 0:
            keep.append(j)
        else:
            dropped.append(c)
    sub = X[:, keep]
    # drop collinear columns last-first so earlier columns are kept
    while True:
        bad = collinear_columns(sub)
        bad = [b for b in bad if dm.columns[keep[b]] not in protect]
        if not bad:
            break
        j = max(bad)
        dropped.append(dm.columns[keep[j]])
        del keep[j]
        sub = X[:, keep]
    cols = tuple(dm.columns[j] for j in keep)
    return DesignMatrix(sub, cols, dm.layout), dropped


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------


@dataclass
class StageOneModel:
    mnl: MnlModel
    z_block: tuple
    dropped_columns: list = field(default_factory=list)
    layout: Layout = field(default_factory=Layout)  # resolved, for rebuilding designs
    stage1_extra: Layout = field(default_factory=Layout)

    @property
    def bachelors(self) -> list[int]:
        return list(self.mnl.alternatives)

    def predict(self, s: PreparedSample) -> np.ndarray:
        return predict_proba(self.mnl, stage1_design(s).select(self.mnl.columns))


def fit_stage1(s: PreparedSample, config: NestedConfig | None = None) -> StageOneModel:
    cfg = config or NestedConfig()
    codes = s.choiceset.codes
    if cfg.baseline_bachelor not in codes:
        raise StageError("stage1", f"baseline bachelor {cfg.baseline_bachelor} not in the choice set")
    pos = {c: i for i, c in enumerate(codes)}
    missing = sorted(set(codes) - set(np.unique(s.bachelor).tolist()))
    if missing:
        raise StageError("stage1", f"bachelor alternatives never observed: {missing}")
    dm, dropped = _drop_degenerate(stage1_design(s))
    y = np.array([pos[b] for b in s.bachelor])
    model = fit_mnl(dm, y, n_alternatives=len(codes), baseline=pos[cfg.baseline_bachelor], config=cfg.mnl,
                    alternatives=codes)
    return StageOneModel(model, tuple(c for c in s.choiceset.ee_columns if c in dm.columns), dropped,
                         s.layout, s.stage1_extra)


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------


@dataclass
class StageTwoModel:
    conditioning_bachelor: int
    mnl: MnlModel
    feasible_masters: list
    dropped_instruments: list = field(default_factory=list)
    dropped_columns: list = field(default_factory=list)
    wald_exclusion: WaldResult | None = None
    wald_credits: WaldResult | None = None

    def predict(self, s: PreparedSample) -> np.ndarray:
        full = stage2_design(s, self.feasible_masters)
        return predict_proba(self.mnl, full.select(self.mnl.columns))


@dataclass
class StageTwoReport:
    models: dict
    skipped: dict  # bachelor -> reason

    def __getitem__(self, j):
        return self.models[j]

    def __contains__(self, j):
        return j in self.models

    def values(self):
        return self.models.values()


def stage2_masters(careers, bachelor: int) -> list[int]:
    return sorted(c.master for c in careers if c.bachelor == bachelor)


def _wald_or_none(model: MnlModel, columns) -> WaldResult | None:
    cols = [c for c in columns if c in model.columns]
    if not cols:
        return None
    try:
        return wald_joint(model, model.select(cols))
    except SeqretError:
        return None


def fit_stage2(s: PreparedSample, careers, config: NestedConfig | None = None) -> StageTwoReport:
    """One conditional logit per bachelor on its non-single-cycle students."""
    cfg = config or NestedConfig()
    models, skipped = {}, {}
    for j in s.choiceset.codes:
        feas = stage2_masters(careers, j)
        rows = np.where((s.bachelor == j) & (s.single_cycle == 0) & np.isin(s.master, feas))[0]
        observed = sorted(set(s.master[rows].tolist()))
        masters = [m for m in feas if m in observed]
        if rows.size == 0:
            skipped[j] = "no non-single-cycle students in feasible careers"
            continue
        if len(masters) < 2:
            skipped[j] = f"only one feasible master {masters}"
            continue
        # NoMaster is the omitted alternative; if it fell below min_count
        # (possible inside a bootstrap replicate) the lowest master takes over
        dm, dropped = _drop_degenerate(stage2_design(s, masters, rows))
        pos = {m: i for i, m in enumerate(masters)}
        y = np.array([pos[m] for m in s.master[rows]])
        try:
            model = fit_mnl(dm, y, n_alternatives=len(masters), baseline=0, config=cfg.mnl, alternatives=masters)
        except SeqretError as e:
            raise StageError("stage2", f"bachelor {j}: {e}") from e
        instruments = [f"cred_std_{m}" for m in masters if m != NO_MASTER] + ["log_distance"]
        models[j] = StageTwoModel(
            conditioning_bachelor=j,
            mnl=model,
            feasible_masters=masters,
            dropped_instruments=[c for c in dropped if c in instruments],
            dropped_columns=[c for c in dropped if c not in instruments],
            wald_exclusion=_wald_or_none(model, instruments),
            wald_credits=_wald_or_none(model, instruments[:-1]),
        )
    return StageTwoReport(models, skipped)


def exclusion_tests(report: StageTwoReport, choiceset: ChoiceSet | None = None) -> pd.DataFrame:
    rows = []
    for j, m in sorted(report.models.items()):
        for name, w in (("all", m.wald_exclusion), ("credits", m.wald_credits)):
            rows.append({
                "bachelor": choiceset.label(j) if choiceset else j,
                "test": name,
                "stat": w.stat if w else np.nan,
                "df": w.df if w else 0,
                "p": w.p if w else np.nan,
                "dropped_instruments": ";".join(m.dropped_instruments),
            })
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------


def nearest_rank(values: np.ndarray, q: float, axis: int = 0) -> np.ndarray:
    """Nearest-rank percentile: the ceil(q*n)-th smallest value."""
    v = np.sort(np.asarray(values, float), axis=axis)
    n = v.shape[axis]
    k = max(1, math.ceil(q * n)) - 1
    return np.take(v, k, axis=axis)


@dataclass
class CareerProbabilityMatrix:
    ids: np.ndarray
    careers: list
    values: np.ndarray
    excluded_mass: np.ndarray
    treatments: np.ndarray  # N x C indicators of the observed career

    @property
    def max_per_career(self) -> np.ndarray:
        return self.values.max(axis=0)

    @property
    def p95_per_career(self) -> np.ndarray:
        return nearest_rank(self.values, 0.95)

    def percentile_per_career(self, q: float) -> np.ndarray:
        return nearest_rank(self.values, q)

    def column(self, career: Career) -> np.ndarray:
        return self.values[:, self.careers.index(career)]

    def summary(self, choiceset: ChoiceSet | None = None, q: float = 0.95) -> pd.DataFrame:
        """Per-career mean treatment, mean, max and nearest-rank ``q`` percentile of P.

        The percentile column is named ``p95_p`` whatever ``q`` is.
        """
        return pd.DataFrame({
            "career": [c.key() for c in self.careers],
            "label": [choiceset.career_label(c) if choiceset else c.key() for c in self.careers],
            "mean_d": self.treatments.mean(axis=0),
            "mean_p": self.values.mean(axis=0),
            "max_p": self.max_per_career,
            "p95_p": self.percentile_per_career(q),
        })

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values, columns=[c.key() for c in self.careers])
        df.insert(0, "id", self.ids)
        return df


def compose_career_probabilities(s1: StageOneModel, s2: StageTwoReport, s: PreparedSample,
                                 careers) -> CareerProbabilityMatrix:
    """P_ijm = P_ij * P(m|j) over the feasible careers.

    Single-cycle individuals put their whole own-field mass on the
    same-field career. Bachelors without a stage-2 model but with a single
    feasible master pass the stage-1 probability straight through; if there
    is no feasible master at all the mass is reported as excluded.
    """
    careers = sorted(careers)
    col = {c: k for k, c in enumerate(careers)}
    P1 = s1.predict(s)
    bpos = {b: i for i, b in enumerate(s1.bachelors)}
    N = len(s)
    V = np.zeros((N, len(careers)))
    sc = s.single_cycle == 1
    for j in s1.bachelors:
        pj = P1[:, bpos[j]]
        feas = stage2_masters(careers, j)
        if j in s2:
            m2 = s2[j]
            P2 = m2.predict(s)
            for a, m in enumerate(m2.feasible_masters):
                if Career(j, m) in col:  # otherwise the mass stays excluded
                    V[:, col[Career(j, m)]] = pj * P2[:, a]
        elif len(feas) == 1:
            V[:, col[Career(j, feas[0])]] = pj
        elif len(feas) > 1:
            if np.any((s.bachelor == j) & ~sc):
                raise StageError("compose", f"no stage-2 model for bachelor {j}")
            # single-cycle-only field: stage-1 mass on the same-field career
            if Career(j, j) in col:
                V[:, col[Career(j, j)]] = pj
        # single-cycle individuals of field j: all own-field mass on (j, j)
        own = sc & (s.bachelor == j)
        if own.any():
            for m in feas:
                V[own, col[Career(j, m)]] = 0.0
            if Career(j, j) in col:
                V[own, col[Career(j, j)]] = pj[own]
    excluded = 1.0 - V.sum(axis=1)
    D = np.zeros_like(V)
    obs = [col.get(Career(int(b), int(m)), -1) for b, m in zip(s.bachelor, s.master)]
    obs = np.asarray(obs)
    ok = obs >= 0
    D[np.where(ok)[0], obs[ok]] = 1.0
    return CareerProbabilityMatrix(s.ids, careers, V, excluded, D)


# ---------------------------------------------------------------------------
# Whole choice model
# ---------------------------------------------------------------------------


@dataclass
class NestedFit:
    careers: list
    stage1: StageOneModel
    stage2: StageTwoReport
    probs: CareerProbabilityMatrix

    @property
    def converged(self) -> bool:
        return self.stage1.mnl.converged and all(m.mnl.converged for m in self.stage2.values())


def fit_nested(s: PreparedSample, config: NestedConfig | None = None) -> NestedFit:
    cfg = config or NestedConfig()
    careers = filter_careers(s.career_counts(), cfg.min_count)
    if not careers:
        raise StageError("careers", f"no career reaches min_count={cfg.min_count}")
    try:
        s1 = fit_stage1(s, cfg)
    except StageError:
        raise
    except SeqretError as e:
        raise StageError("stage1", str(e)) from e
    s2 = fit_stage2(s, careers, cfg)
    probs = compose_career_probabilities(s1, s2, s, careers)
    return NestedFit(careers, s1, s2, probs)
