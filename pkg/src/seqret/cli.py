"""``seqret`` command line: staged pipeline runs, synthetic data and validation.

Exit codes: 0 success, 1 stage failure, 2 input error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import pickle
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .bootstrap import attach_se, pairwise_bootstrap
from .core import ChoiceSet, Layout, load_individuals, write_individuals
from .curriculum import CATEGORIES, CurriculumMatrix, QuantGrouping, quartile_composition, returns_correlation, \
    shares_table, symmetric_contrast, top_careers
from .exceptions import InputError, SeqretError, StageError
from .mnl import marginal_effects_at_means
from .nested import PreparedSample, exclusion_tests, prepare_sample, stage1_design
from .pipeline import ModelRun, PipelineConfig, coefficient_frame, estimate, outcome_rows
from .policy import PolicyTransform, decompose_simulation, simulate_policy
from .returns import compare_report, first_stage_diagnostics
from .synthgen import DgpConfig, generate_population

log = logging.getLogger("seqret")

STAGES = ("ingest", "stage1", "stage2", "compose", "returns", "bootstrap", "simulate", "curriculum")
FLOAT_FORMAT = "%.10g"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


class ArtifactWriter:
    def __init__(self, out_dir: Path):
        self.out = out_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def csv(self, name: str, df: pd.DataFrame):
        df.to_csv(self.out / name, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self._add(name)

    def json(self, name: str, obj):
        text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True)
        (self.out / name).write_text(text + "\n")
        self._add(name)

    def _add(self, name):
        if name not in self.files:
            self.files.append(name)

    def manifest(self, config: PipelineConfig, stages, data_hash: str):
        files = {n: hashlib.sha256((self.out / n).read_bytes()).hexdigest() for n in sorted(self.files)}
        self.json("manifest.json", {
            "config_hash": config.hash(),
            "data_hash": data_hash,
            "seed": config.seed,
            "bootstrap_seed": config.bootstrap.get("seed", config.seed),
            "stages": list(stages),
            "files": files,
        })


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class StageCache:
    """Pickled intermediate results under ``<out>/.cache/<config hash>/``."""

    def __init__(self, out_dir: Path, key: str, enabled: bool = True):
        self.dir = out_dir / ".cache" / key
        self.enabled = enabled

    def get(self, name):
        p = self.dir / f"{name}.pkl"
        if self.enabled and p.exists():
            with open(p, "rb") as fh:
                return pickle.load(fh)
        return None

    def put(self, name, obj):
        if not self.enabled:
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(self.dir / f"{name}.pkl", "wb") as fh:
            pickle.dump(obj, fh)


# ---------------------------------------------------------------------------
# Stage artifacts
# ---------------------------------------------------------------------------


def _write_stage1(w: ArtifactWriter, run: ModelRun, sample: PreparedSample):
    s1 = run.nested.stage1
    w.json("stage1_model.json", {**s1.mnl.to_dict(), "z_block": list(s1.z_block),
                                  "dropped_columns": s1.dropped_columns})
    t = s1.mnl.coef_table()
    t["alternative"] = [sample.choiceset.label(a) for a in t["alternative"]]
    w.csv("stage1_coefficients.csv", t)
    dm = stage1_design(sample).select(s1.mnl.columns)
    me = marginal_effects_at_means(s1.mnl, dm, list(s1.z_block))
    me["outcome"] = [sample.choiceset.label(a) for a in me["outcome"]]
    w.csv("stage1_marginal_effects.csv", me)


def _write_stage2(w: ArtifactWriter, run: ModelRun, sample: PreparedSample):
    s2 = run.nested.stage2
    models = {}
    for j, m in sorted(s2.models.items()):
        models[str(j)] = {**m.mnl.to_dict(), "feasible_masters": m.feasible_masters,
                          "dropped_instruments": m.dropped_instruments, "dropped_columns": m.dropped_columns}
    w.json("stage2_models.json", {"models": models, "skipped": {str(k): v for k, v in sorted(s2.skipped.items())}})
    w.csv("exclusion_tests.csv", exclusion_tests(s2, sample.choiceset))


def _write_compose(w: ArtifactWriter, run: ModelRun):
    P = run.nested.probs
    w.csv("career_probs.csv", P.to_frame())
    w.csv("career_prob_summary.csv", run.summary)


def _write_returns(w: ArtifactWriter, run: ModelRun, sample: PreparedSample, tables: dict):
    cols = ["career", "label", "outcome", "alpha", "alpha_tilde", "se_boot", "se_boot_tilde", "gamma_ols",
            "max_p", "p95_p", "credibility"]
    df = pd.concat([t.reindex(columns=cols) for t in tables.values()], ignore_index=True)
    w.csv("returns.csv", df)
    report = compare_report(tables)
    report["credibility_counts"] = run.counts
    w.json("returns_compare.json", report)
    coefs = []
    for outcome, (rf, gamma) in run.fits.items():
        coefs.append(coefficient_frame(rf, outcome, "reduced_form"))
        coefs.append(coefficient_frame(gamma, outcome, "ols_treatments"))
    w.csv("regression_coefficients.csv", pd.concat(coefs, ignore_index=True))
    P = run.nested.probs
    rows, _ = outcome_rows(sample, P, "employment")
    w.csv("first_stage.csv", first_stage_diagnostics(P, sample.base, sample.base_columns, rows))


def _write_simulation(w: ArtifactWriter, run: ModelRun, records, sample, transforms, keys):
    tables, by_key = [], {}
    for text in transforms:
        tr = PolicyTransform.parse(text, sample.choiceset)
        rep = simulate_policy(run.nested.stage1, records, tr, sample.choiceset)
        rep = decompose_simulation(rep, records, keys)
        t = rep.table.copy()
        t.insert(0, "transform", rep.transform)
        t["out_of_support"] = t["field"].isin(rep.out_of_support)
        tables.append(t)
        for k, sub in rep.subgroups.items():
            sub = sub.copy()
            sub.insert(0, "transform", rep.transform)
            by_key.setdefault(k, []).append(sub)
    w.csv("simulation.csv", pd.concat(tables, ignore_index=True))
    for k, parts in by_key.items():
        w.csv(f"simulation_by_{k}.csv", pd.concat(parts, ignore_index=True))


def _write_curriculum(w: ArtifactWriter, cfg: PipelineConfig, tables: dict, sample: PreparedSample, careers):
    cs = sample.choiceset
    bach = (CurriculumMatrix.read_csv(cfg.curriculum_bachelor, "bachelor") if cfg.curriculum_bachelor
            else CurriculumMatrix.default("bachelor"))
    mast = (CurriculumMatrix.read_csv(cfg.curriculum_master, "master") if cfg.curriculum_master
            else CurriculumMatrix.default("master"))
    grouping = QuantGrouping(cfg.quant_grouping) if cfg.quant_grouping else QuantGrouping()
    shares = shares_table(bach, mast, careers, cs, grouping)
    w.csv("shares.csv", shares)
    sh = shares.set_index("career")
    out = []
    corr = {}
    wage = tables.get("log_wage")
    empl = tables.get("employment")
    if wage is not None:
        credible = wage[wage["credibility"] != "dropped"]
        ret = credible.set_index("career")["alpha_tilde"]
        if len(ret) >= 4:
            q = quartile_composition(ret, sh[list(CATEGORIES)]).reset_index()
            q.insert(0, "variant", "whole")
            by_level = [f"{k}_{c}" for k in ("B", "M") for c in CATEGORIES]
            q2 = quartile_composition(ret, sh[by_level]).reset_index()
            q2.insert(0, "variant", "by_level")
            out = [q, q2]
        sym, skipped = symmetric_contrast(pd.concat(list(tables.values())), sh, cs, bach, grouping)
        w.csv("symmetric.csv", sym)
        corr["symmetric_skipped"] = [list(p) for p in skipped]
    if out:
        w.csv("quartiles.csv", pd.concat(out, ignore_index=True))
    if wage is not None and empl is not None:
        m = wage.merge(empl, on="career", suffixes=("_w", "_e"))
        m = m[(m["credibility_w"] != "dropped") & (m["credibility_e"] != "dropped")]
        se_w = m.get("se_boot_w")
        se_e = m.get("se_boot_e")
        use_se = se_w is not None and se_e is not None and np.isfinite(se_w).all() and np.isfinite(se_e).all()
        try:
            corr.update(returns_correlation(m["alpha_tilde_w"], m["alpha_tilde_e"],
                                            se_w if use_se else None, se_e if use_se else None))
        except SeqretError as e:
            corr["error"] = str(e)
        corr["weighted"] = bool(use_se)
        corr["top_careers"] = top_careers(wage, empl)
    w.json("returns_corr.json", corr)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def run_pipeline(cfg: PipelineConfig, stages=None, use_cache: bool = True, transforms=None) -> dict:
    """Run the requested stages (all by default) and write their artifacts.

    Upstream results are recomputed or taken from the stage cache, but
    only the requested stages write files.
    """
    wanted = list(STAGES) if stages is None else list(stages)
    bad = [s for s in wanted if s not in STAGES]
    if bad:
        raise InputError(f"unknown stage(s) {bad}; choose from {list(STAGES)}")
    if not cfg.individuals:
        raise InputError("config does not name an individuals file")
    out = Path(cfg.out_dir)
    w = ArtifactWriter(out)
    cs = cfg.load_choiceset()
    data_hash = _file_hash(cfg.individuals) if Path(cfg.individuals).exists() else ""
    cache = StageCache(out, hashlib.sha256((cfg.hash() + data_hash).encode()).hexdigest()[:16], use_cache)

    try:
        records, report = load_individuals(cfg.individuals, cs)
    except InputError:
        raise
    except (ValueError, KeyError) as e:
        raise InputError(f"could not read {cfg.individuals}: {e}") from e
    if "ingest" in wanted:
        w.json("validation_report.json", report)
    last = max(STAGES.index(s) for s in wanted)
    if last == 0:
        w.manifest(cfg, wanted, data_hash)
        return {"files": w.files}

    sample = prepare_sample(records, cs, cfg.resolved_layout(), _extra_layout(cfg))
    run = cache.get("model_run")
    if run is None:
        log.info("estimating choice model and returns")
        run = estimate(sample, cfg)
        cache.put("model_run", run)
    if "stage1" in wanted:
        _write_stage1(w, run, sample)
    if "stage2" in wanted:
        _write_stage2(w, run, sample)
    if "compose" in wanted:
        _write_compose(w, run)

    tables = {k: v.assign(se_boot_tilde=np.nan) for k, v in run.tables.items()}
    boot_on = "bootstrap" in wanted and (stages is not None or cfg.bootstrap.get("enabled", True))
    if boot_on:
        boot = cache.get("bootstrap")
        if boot is None:
            log.info("bootstrap: %d replicates", cfg.bootstrap.get("n_iter", 104))
            boot = pairwise_bootstrap(sample, cfg, threads=cfg.threads, point=run)
            cache.put("bootstrap", boot)
        w.csv("bootstrap.csv", boot.table())
        tables = attach_se(tables, boot)
        if boot.failures:
            log.warning("%d bootstrap replicates failed", boot.failures)
    if "returns" in wanted or boot_on:
        _write_returns(w, run, sample, tables)
    if "simulate" in wanted:
        transforms = transforms or cfg.simulations
        if transforms:
            _write_simulation(w, run, records, sample, transforms, cfg.decompose_keys)
    if "curriculum" in wanted:
        _write_curriculum(w, cfg, tables, sample, run.nested.careers)
    w.manifest(cfg, wanted, data_hash)
    return {"files": w.files, "run": run}


def _extra_layout(cfg):
    return Layout.from_list(cfg.stage1_extra)


# ---------------------------------------------------------------------------
# argparse
# ---------------------------------------------------------------------------


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.bootstrap = {**cfg.bootstrap, "seed": args.seed}
    if getattr(args, "threads", None):
        cfg.threads = args.threads
    return cfg


def _common(p):
    p.add_argument("--config", required=True, help="pipeline config (JSON)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="bootstrap seed")
    p.add_argument("--threads", type=int, default=None, help="worker threads for the bootstrap")
    p.add_argument("--no-cache", action="store_true", help="ignore and do not write the stage cache")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seqret", description="Returns to sequential bachelor/master careers.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the pipeline (all stages or one)")
    _common(p)
    p.add_argument("--stage", choices=STAGES, action="append", help="only write this stage's artifacts")
    p.add_argument("--transform", action="append", help="policy transform: min | one | set:<field>=<v>")
    for name in STAGES[1:]:
        q = sub.add_parser(name, help=f"run up to {name} and write its artifacts")
        _common(q)
        if name == "simulate":
            q.add_argument("--transform", action="append", help="min | one | set:<field>=<v>")
    s = sub.add_parser("synth", help="synthetic populations")
    ssub = s.add_subparsers(dest="synth_command", required=True)
    g = ssub.add_parser("generate", help="draw a population from a DGP config")
    g.add_argument("--config", required=True, help="DGP config (JSON)")
    g.add_argument("--out", required=True, help="individuals CSV to write")
    g.add_argument("--truth", help="truth JSON to write")
    g.add_argument("--choiceset", help="choice set JSON to write")
    g.add_argument("--seed", type=int, help="data seed (overrides the config)")
    v = sub.add_parser("validate", help="validate an individuals file")
    v.add_argument("--config", help="pipeline config naming the individuals file")
    v.add_argument("--individuals", help="individuals CSV (overrides the config)")
    v.add_argument("--choiceset", help="choice set JSON")
    v.add_argument("--out", help="write the report here instead of stdout")
    return ap


def _synth(args) -> int:
    p = Path(args.config)
    if not p.exists():
        raise InputError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
        cfg = DgpConfig.from_dict(d)
    except (json.JSONDecodeError, TypeError) as e:
        raise InputError(f"bad DGP config {p}: {e}") from e
    if args.seed is not None:
        cfg.seed = args.seed
    df, truth = generate_population(cfg)
    cs = ChoiceSet.from_dict(truth["choiceset"])
    write_individuals(df, args.out, cs)
    if args.truth:
        Path(args.truth).write_text(json.dumps(truth, indent=2, sort_keys=True, default=_json_default) + "\n")
    if args.choiceset:
        Path(args.choiceset).write_text(json.dumps(cs.to_dict(), indent=2) + "\n")
    return 0


def _validate(args) -> int:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    path = args.individuals or cfg.individuals
    if not path:
        raise InputError("no individuals file given")
    cs = ChoiceSet.load(args.choiceset) if args.choiceset else cfg.load_choiceset()
    _, report = load_individuals(path, cs)
    text = json.dumps(report, indent=2, sort_keys=True, default=_json_default)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "synth":
            return _synth(args)
        if args.command == "validate":
            return _validate(args)
        cfg = _load_config(args)
        if args.command == "run":
            stages = args.stage
        else:
            stages = [args.command]
        run_pipeline(cfg, stages, use_cache=not args.no_cache, transforms=getattr(args, "transform", None))
        return 0
    except InputError as e:
        print(f"seqret: input error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"seqret: stage failure: {e}", file=sys.stderr)
        return 1
    except SeqretError as e:
        print(f"seqret: stage failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
