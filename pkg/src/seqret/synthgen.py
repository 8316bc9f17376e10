"""Synthetic populations with known ground truth, plus independent oracles.

The generator draws covariates, instruments, sequential choices and outcomes
from the same two-stage logit structure the estimator assumes. A Gaussian
latent taste can load on both the choice utilities and the outcomes
(``selection_strength``) to create selection on unobservables; at strength 0
the choice model is exactly a multinomial logit at each stage.

:func:`enumerate_probabilities` and :func:`grid_mle_oracle` carry their own
softmax code and never call into :mod:`seqret.mnl`.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .core import (
    NO_MASTER,
    Career,
    ChoiceSet,
    Factor,
    FieldOfStudy,
    Interaction,
    Layout,
    build_design_matrix,
    default_layout,
    standardize_by_group,
)

REGIONS = ("North-West", "North-East", "Center", "South", "Islands")


@dataclass
class DgpConfig:
    n_individuals: int = 50_000
    n_fields: int = 10
    seed: int = 0
    param_seed: int = 2024
    selection_strength: float = 0.0
    single_cycle_fields: tuple = ()
    single_cycle_share: float = 0.3
    baseline_bachelor: int | None = None
    n_extra_masters: int = 2
    cohort_years: tuple = (2007, 2008, 2009, 2010)
    experience_levels: tuple = (3, 5)
    n_provinces: int = 20
    instrument_strength: float = 2.0
    ineligible_share: float = 0.1
    wage_noise_sd: float = 0.3
    alpha_wage_sd: float = 0.3
    alpha_empl_sd: float = 0.05
    employment_career_effects: bool = True
    wage_selection_loading: float = 0.5
    empl_selection_loading: float = 0.05
    # planted gender x entry-exam effect on one bachelor's utility
    gender_instrument_effect: float = 0.0
    gender_instrument_field: int = 1
    layout: list | None = None
    # {"alpha_wage": {"j-m": v}, "alpha_empl": {...}, "feasible": {"j": [m, ...]}}
    overrides: dict = field(default_factory=dict)

    @property
    def baseline(self) -> int:
        if self.baseline_bachelor is not None:
            return self.baseline_bachelor
        return 7 if self.n_fields >= 7 else 1

    def resolved_layout(self) -> Layout:
        return Layout.from_list(self.layout) if self.layout is not None else default_layout()

    def stage1_extra(self) -> Layout:
        if self.gender_instrument_effect:
            return Layout((Interaction("gender", f"ee_{self.gender_instrument_field}"),))
        return Layout()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["single_cycle_fields"] = list(self.single_cycle_fields)
        d["cohort_years"] = list(self.cohort_years)
        d["experience_levels"] = list(self.experience_levels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DgpConfig":
        d = dict(d)
        for k in ("single_cycle_fields", "cohort_years", "experience_levels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# Parameter draws. Utilities are specified per factor level and re-expressed
# in whatever reference parametrization the design matrix resolves to.
# ---------------------------------------------------------------------------


def _draw_block(rng, layout: Layout, alternatives, scale_num, scale_fe, intercepts):
    draws = {}
    for a in alternatives:
        s = {"const": intercepts[a], "terms": {}}
        for t in layout.terms:
            if isinstance(t, Factor):
                s["terms"][t.name] = ("factor", None, scale_fe if t.name != "hs_type" else scale_num)
            elif isinstance(t, Interaction):
                s["terms"][t.name] = ("num", 0.0, None)
            else:
                s["terms"][t] = ("num", float(rng.normal(0, scale_num)), None)
        draws[a] = s
    return draws


def _resolve_block(draws, dm, rng_levels, extra: dict) -> np.ndarray:
    """Full coefficient rows (const + design columns + extras) per alternative."""
    rows = {}
    for a, s in draws.items():
        coef = {"const": s["const"]}
        for t in dm.layout.terms:
            if isinstance(t, Factor):
                eff = rng_levels[(a, t.name)]
                ref = eff[t.reference]
                coef["const"] += ref
                for lv in t.levels:
                    if lv != t.reference:
                        coef[f"{t.name}[{lv}]"] = eff[lv] - ref
            elif isinstance(t, Interaction):
                coef[t.name] = s["terms"].get(t.name, ("num", 0.0))[1]
            else:
                coef[t] = s["terms"][t][1]
        coef.update(extra.get(a, {}))
        rows[a] = coef
    return rows


def _level_effects(rng, draws, dm_layout: Layout, all_levels: dict):
    out = {}
    for a, s in draws.items():
        for t in dm_layout.terms:
            if isinstance(t, Factor):
                scale = s["terms"][t.name][2]
                levels = sorted(all_levels[t.name], key=str)
                vals = rng.normal(0, scale, len(levels))
                vals[0] = 0.0
                out[(a, t.name)] = dict(zip(levels, vals.tolist()))
    return out


def _all_levels(cfg: DgpConfig) -> dict:
    return {
        "hs_type": ["humanities", "science", "other"],
        "cohort_year": list(cfg.cohort_years),
        "macro_region": list(REGIONS),
        "years_since_graduation": list(cfg.experience_levels),
    }


def feasible_masters(cfg: DgpConfig) -> dict[int, list[int]]:
    rng = np.random.default_rng([cfg.param_seed, 7])
    L = cfg.n_fields
    over = cfg.overrides.get("feasible", {})
    out = {}
    for j in range(1, L + 1):
        if str(j) in over:
            out[j] = sorted(set(int(m) for m in over[str(j)]) | {NO_MASTER})
            continue
        others = [m for m in range(1, L + 1) if m != j]
        k = min(cfg.n_extra_masters, len(others))
        extra = rng.choice(others, size=k, replace=False).tolist() if k else []
        out[j] = sorted({NO_MASTER, j, *extra})
    return out


# ---------------------------------------------------------------------------
# Population
# ---------------------------------------------------------------------------


def _covariates(cfg: DgpConfig, rng, n: int | None = None) -> pd.DataFrame:
    n = cfg.n_individuals if n is None else n
    L = cfg.n_fields
    prov = rng.integers(0, cfg.n_provinces, n)
    prov_rng = np.random.default_rng([cfg.param_seed, 11])
    prov_offset = prov_rng.normal(0, 1, cfg.n_provinces)
    prov_empl = prov_rng.uniform(0.45, 0.8, cfg.n_provinces)
    raw = 80 + 4 * prov_offset[prov] + 8 * rng.standard_normal(n)
    df = pd.DataFrame({
        "id": np.arange(1, n + 1),
        "hs_grade_raw": raw,
        "hs_grade_std": standardize_by_group(raw, prov),
        "hs_type": rng.choice(["humanities", "science", "other"], n, p=[0.15, 0.39, 0.46]),
        "gender": (rng.random(n) < 0.62).astype(int),
        "parent_graduate": (rng.random(n) < 0.26).astype(int),
        "parent_highrank": (rng.random(n) < 0.21).astype(int),
        "local_employment_rate": np.clip(prov_empl[prov] + rng.normal(0, 0.02, n), 0, 1),
        "university_quality_std": rng.standard_normal(n),
        "cohort_year": rng.choice(np.asarray(cfg.cohort_years), n),
        "macro_region": np.asarray(REGIONS, dtype=object)[prov % len(REGIONS)],
        "years_since_graduation": rng.choice(np.asarray(cfg.experience_levels), n),
        "province": np.char.add("P", prov.astype(str)),
        "log_distance": np.log1p(rng.exponential(30.0, n)),
    })
    for f in range(1, L + 1):
        df[f"ee_{f}"] = rng.beta(1.2, 1.2, n)
    base = np.random.default_rng([cfg.param_seed, 13]).uniform(30, 120, L)
    for f in range(1, L + 1):
        c = np.clip(base[f - 1] + rng.normal(0, 20, n), 0, 179)
        c[rng.random(n) < cfg.ineligible_share] = 180.0
        df[f"cred_{f}"] = c
    cred = df[[f"cred_{f}" for f in range(1, L + 1)]].to_numpy()
    std = (cred - cred.mean()) / cred.std()
    for f in range(1, L + 1):
        df[f"cred_std_{f}"] = std[:, f - 1]
    return df


def _softmax_draw(U: np.ndarray, rng) -> np.ndarray:
    m = U.max(axis=1, keepdims=True)
    P = np.exp(U - m)
    P /= P.sum(axis=1, keepdims=True)
    u = rng.random(len(U))[:, None]
    return np.minimum((P.cumsum(axis=1) < u).sum(axis=1), U.shape[1] - 1)


def generate_population(cfg: DgpConfig) -> tuple[pd.DataFrame, dict]:
    """Draw a population; returns ``(records, truth)``.

    ``truth`` holds full coefficient matrices (baseline row zero) in the same
    column parametrization the pipeline builds from these records.
    """
    L = cfg.n_fields
    if L < 2:
        raise ValueError("need at least two fields")
    if not 1 <= cfg.baseline <= L:
        raise ValueError("baseline bachelor outside the choice set")
    cs = ChoiceSet.first(L) if L <= 10 else ChoiceSet(tuple(FieldOfStudy(i, f"F{i}") for i in range(1, L + 1)))
    rng = np.random.default_rng(cfg.seed)
    prng = np.random.default_rng([cfg.param_seed, 1])
    s = cfg.selection_strength
    layout = cfg.resolved_layout()
    df = _covariates(cfg, rng)
    base_dm = build_design_matrix(df, layout)
    # intercepts are calibrated on a reference sample that depends only on
    # param_seed, so the truth does not move with the data seed
    ref = _covariates(cfg, np.random.default_rng([cfg.param_seed, 17]), n=20_000)
    ref_dm = build_design_matrix(ref, base_dm.layout)
    levels = _all_levels(cfg)

    # stage 1
    bachelors = list(range(1, L + 1))
    b_idx = cfg.baseline - 1
    extra1 = cfg.stage1_extra()
    dm1_extra = build_design_matrix(df, extra1) if extra1.terms else None
    intercepts = {a: float(prng.normal(0, 0.3)) for a in range(L)}
    spec1 = _draw_block(prng, layout, range(L), 0.25, 0.1, intercepts)
    lev1 = _level_effects(prng, spec1, base_dm.layout, levels)
    lam_scale = cfg.instrument_strength / 2
    extra_coef = {}
    for a in range(L):
        e = {}
        for f in range(1, L + 1):
            v = prng.normal(0, lam_scale)
            if f - 1 == a:
                v -= lam_scale
            e[f"ee_{f}"] = float(v)
        if dm1_extra is not None:
            e[extra1.terms[0].name] = cfg.gender_instrument_effect if a == cfg.gender_instrument_field - 1 else 0.0
        extra_coef[a] = e
    cols1 = ["const"] + list(base_dm.columns) + ([extra1.terms[0].name] if dm1_extra is not None else []) + [f"ee_{f}" for f in range(1, L + 1)]
    rows1 = _resolve_block(spec1, base_dm, lev1, extra_coef)
    B1 = np.array([[rows1[a].get(c, 0.0) for c in cols1] for a in range(L)])

    def stage1_x(d, dm):
        blocks = [np.ones(len(d)), dm.values]
        if dm1_extra is not None:
            blocks.append(build_design_matrix(d, extra1).values)
        return np.column_stack(blocks + [d[[f"ee_{f}" for f in range(1, L + 1)]].to_numpy()])

    X1 = stage1_x(df, base_dm)
    B1[:, 0] += prng.normal(0, 0.25, L) - stage1_x(ref, ref_dm).mean(axis=0) @ B1.T
    B1 -= B1[b_idx]  # normalize against the baseline bachelor

    theta = rng.standard_normal(len(df))
    lrng = np.random.default_rng([cfg.param_seed, 3])
    kappa1 = lrng.uniform(0.5, 1.5, L)
    kappa1[b_idx] = 0.0
    U1 = X1 @ B1.T + s * np.outer(theta, kappa1)
    bachelor = _softmax_draw(U1, rng) + 1

    # stage 2
    feas = feasible_masters(cfg)
    stage2_truth = {}
    master = np.zeros(len(df), int)
    single = np.zeros(len(df), int)
    kappa2 = {}
    sc_fields = set(int(f) for f in cfg.single_cycle_fields)
    for j in bachelors:
        alts = feas[j]
        cred_cols = [f"cred_std_{m}" for m in alts if m != NO_MASTER]
        cols2 = ["const"] + list(base_dm.columns) + cred_cols + ["log_distance"]
        p2 = np.random.default_rng([cfg.param_seed, 100 + j])
        ints = {a: 0.0 for a in range(len(alts))}
        spec2 = _draw_block(p2, layout, range(len(alts)), 0.2, 0.1, ints)
        lev2 = _level_effects(p2, spec2, base_dm.layout, levels)
        ex = {}
        for a, m in enumerate(alts):
            e = {}
            for mm in alts:
                if mm == NO_MASTER:
                    continue
                v = p2.normal(0, 0.3)
                if mm == m:
                    v -= lam_scale * p2.uniform(0.5, 1.0)
                e[f"cred_std_{mm}"] = float(v)
            e["log_distance"] = float(p2.normal(0, 0.4))
            ex[a] = e
        rows2 = _resolve_block(spec2, base_dm, lev2, ex)
        B2 = np.array([[rows2[a].get(c, 0.0) for c in cols2] for a in range(len(alts))])
        X2_ref = np.column_stack([np.ones(len(ref)), ref_dm.values, ref[cred_cols].to_numpy(),
                                  ref["log_distance"].to_numpy()])
        target = np.array([0.0 if m == NO_MASTER else (0.4 if m == j else -0.2) for m in alts])
        B2[:, 0] += target + p2.normal(0, 0.2, len(alts)) - X2_ref.mean(axis=0) @ B2.T
        B2 -= B2[0]
        k2 = lrng.uniform(0.5, 1.5, len(alts))
        k2[0] = 0.0
        kappa2[j] = k2
        stage2_truth[str(j)] = {"columns": cols2, "alternatives": alts, "baseline": 0, "coefficients": B2.tolist()}
        rows = np.where(bachelor == j)[0]
        if rows.size == 0:
            continue
        X2 = np.column_stack([np.ones(rows.size), base_dm.values[rows], df[cred_cols].to_numpy()[rows],
                              df["log_distance"].to_numpy()[rows]])
        U2 = X2 @ B2.T + s * np.outer(theta[rows], k2)
        draw = np.asarray(alts)[_softmax_draw(U2, rng)]
        if j in sc_fields:
            sc = rng.random(rows.size) < cfg.single_cycle_share
            draw[sc] = j
            single[rows[sc]] = 1
        master[rows] = draw
    df["bachelor"] = bachelor
    df["master"] = master
    df["single_cycle"] = single

    # outcomes
    careers = sorted(Career(j, m) for j in bachelors for m in feas[j])
    base_career = Career(cfg.baseline, NO_MASTER)
    orng = np.random.default_rng([cfg.param_seed, 5])
    alpha_w = {c.key(): (0.0 if c == base_career else float(orng.normal(0, cfg.alpha_wage_sd))) for c in careers}
    alpha_e = {c.key(): (0.0 if c == base_career or not cfg.employment_career_effects
                         else float(orng.normal(0, cfg.alpha_empl_sd))) for c in careers}
    for k, v in cfg.overrides.get("alpha_wage", {}).items():
        alpha_w[k] = float(v)
    for k, v in cfg.overrides.get("alpha_empl", {}).items():
        alpha_e[k] = float(v)
    out_cols = ["const"] + list(base_dm.columns)
    beta_w = np.concatenate([[6.6], orng.normal(0, 0.05, base_dm.shape[1])])
    beta_e = np.concatenate([[0.75], orng.normal(0, 0.02, base_dm.shape[1])])
    Xo = np.column_stack([np.ones(len(df)), base_dm.values])
    keys = [f"{b}-{m}" for b, m in zip(bachelor, master)]
    aw = np.array([alpha_w[k] for k in keys])
    ae = np.array([alpha_e[k] for k in keys])
    p_emp = np.clip(Xo @ beta_e + ae + s * cfg.empl_selection_loading * theta, 0.0, 1.0)
    employed = (rng.random(len(df)) < p_emp).astype(int)
    wage = Xo @ beta_w + aw + s * cfg.wage_selection_loading * theta + rng.normal(0, cfg.wage_noise_sd, len(df))
    df["employed"] = employed
    df["log_wage"] = np.where(employed == 1, wage, np.nan)

    cols = ["id", "hs_grade_raw", "hs_grade_std", "hs_type", "gender", "parent_graduate", "parent_highrank",
            "local_employment_rate", "university_quality_std", "cohort_year", "macro_region",
            "years_since_graduation", "province", "bachelor", "master", "single_cycle", "employed", "log_wage",
            "log_distance"]
    cols += [f"ee_{f}" for f in range(1, L + 1)] + [f"cred_{f}" for f in range(1, L + 1)]
    cols += [f"cred_std_{f}" for f in range(1, L + 1)]
    df = df[cols]

    truth = {
        "choiceset": cs.to_dict(),
        "baseline_bachelor": cfg.baseline,
        "baseline_career": base_career.key(),
        "selection_strength": s,
        "layout": base_dm.layout.to_list(),
        "stage1_extra": extra1.to_list(),
        "stage1": {"columns": cols1, "alternatives": bachelors, "baseline": b_idx, "coefficients": B1.tolist()},
        "stage2": stage2_truth,
        "careers": [c.key() for c in careers],
        "outcomes": {
            "log_wage": {"columns": out_cols, "beta": beta_w.tolist(), "alpha": alpha_w},
            "employment": {"columns": out_cols, "beta": beta_e.tolist(), "alpha": alpha_e},
        },
        "latent": {
            "stage1_loading": kappa1.tolist(),
            "stage2_loading": {str(j): v.tolist() for j, v in kappa2.items()},
            "wage_loading": cfg.wage_selection_loading,
            "empl_loading": cfg.empl_selection_loading,
        },
        "nuisance": ["outcome intercepts absorb the baseline career", "latent taste draws"],
        "config": cfg.to_dict(),
    }
    return df, truth


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def _oracle_softmax(utils: Sequence[float]) -> list[float]:
    top = max(utils)
    ex = [math.exp(u - top) for u in utils]
    tot = math.fsum(ex)
    return [e / tot for e in ex]


def _dot(coef: Sequence[float], x: Sequence[float]) -> float:
    return math.fsum(c * v for c, v in zip(coef, x))


def enumerate_probabilities(stage1_coef, x1, stage2: Mapping, bachelors: Sequence[int] | None = None,
                            single_cycle_field: int | None = None) -> dict:
    """Exact bachelor, conditional master and career probabilities for one row.

    ``stage1_coef`` is the full K x p matrix (baseline row included);
    ``stage2`` maps bachelor code -> (masters, full coefficient matrix, x2 row).
    For a single-cycle individual in ``single_cycle_field`` all of that
    bachelor's mass goes to the same-field career.
    """
    B1 = [list(map(float, r)) for r in stage1_coef]
    codes = list(bachelors) if bachelors is not None else list(range(1, len(B1) + 1))
    p1 = _oracle_softmax([_dot(r, x1) for r in B1])
    pb = dict(zip(codes, p1))
    pm, career = {}, {}
    for j in codes:
        if single_cycle_field is not None and j == single_cycle_field:
            pm[j] = {j: 1.0}
        elif j in stage2:
            masters, B2, x2 = stage2[j]
            pm[j] = dict(zip(masters, _oracle_softmax([_dot(list(map(float, r)), x2) for r in B2])))
        else:
            pm[j] = {}
        for m, v in pm[j].items():
            career[(j, m)] = pb[j] * v
    return {"bachelor": pb, "master": pm, "career": career}


def _batch_loglik(thetas: np.ndarray, X: np.ndarray, y: np.ndarray, K: int, baseline: int) -> np.ndarray:
    # thetas: M x (K-1)p ; own softmax implementation
    M = thetas.shape[0]
    p = X.shape[1]
    B = thetas.reshape(M, K - 1, p)
    V = np.einsum("mkp,np->mnk", B, X)
    U = np.insert(V, baseline, 0.0, axis=2)
    top = U.max(axis=2, keepdims=True)
    lse = top[..., 0] + np.log(np.exp(U - top).sum(axis=2))
    chosen = np.take_along_axis(U, np.broadcast_to(y[None, :, None], (M, len(y), 1)), axis=2)[..., 0]
    return (chosen - lse).sum(axis=1)


def _grid_argmax(center, half, h, X, y, K, baseline, chunk=200_000):
    axes = [np.round(np.arange(c - half, c + half + h / 2, h), 12) for c in center]
    best_val, best = -np.inf, None
    grid = itertools.product(*axes)
    while True:
        block = np.array(list(itertools.islice(grid, chunk)))
        if block.size == 0:
            break
        ll = _batch_loglik(block, X, y, K, baseline)
        i = int(np.argmax(ll))
        if ll[i] > best_val:
            best_val, best = ll[i], block[i]
    return best, axes


def grid_mle_oracle(X, choices, n_alternatives: int, baseline: int = 0, bounds=(-4.0, 4.0),
                    step: float = 0.01) -> np.ndarray:
    """Grid-search maximizer of the multinomial logit likelihood.

    The full lattice at ``step`` is searched coarse-to-fine (the
    log-likelihood is concave, so each zoom keeps the lattice maximizer
    inside its window), then refined once at ``step / 10``. At most four
    parameters and twenty observations.
    """
    X = np.asarray(X, float)
    y = np.asarray(choices, int)
    K = n_alternatives
    k = (K - 1) * X.shape[1]
    if k > 4 or len(y) > 20:
        raise ValueError("grid oracle limited to 4 parameters and 20 observations")
    lo, hi = bounds
    coarse = max(step, (hi - lo) / 16)
    center = np.full(k, (lo + hi) / 2)
    best, _ = _grid_argmax(center, (hi - lo) / 2, coarse, X, y, K, baseline)
    if np.any(np.isclose(best, lo)) or np.any(np.isclose(best, hi)):
        raise ValueError("grid argmax on boundary: widen bounds")
    h = coarse
    while h > step:
        nh = max(step, h / 5)
        for _ in range(20):
            cand, _ = _grid_argmax(best, 2 * h, nh, X, y, K, baseline)
            moved = np.max(np.abs(cand - best)) >= 2 * h - nh / 2
            best = cand
            if not moved:
                break
        h = nh
    fine = step / 10
    best, _ = _grid_argmax(best, step, fine, X, y, K, baseline)
    if np.any(best <= lo) or np.any(best >= hi):
        raise ValueError("grid argmax on boundary: widen bounds")
    return best
