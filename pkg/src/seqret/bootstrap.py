"""Case-resampling bootstrap.

Replicate ``r`` draws its indices from a Philox generator keyed by
``(seed, r)``, so any replicate can be reproduced on its own and results do
not depend on execution order or thread count.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
import pandas as pd

from .exceptions import SeqretError

log = logging.getLogger(__name__)


def replicate_indices(n: int, seed: int, r: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, r], dtype=np.uint64)))
    return rng.integers(0, n, size=n)


@dataclass
class BootstrapResult:
    n_iter: int
    seed: int
    estimate: pd.Series
    replicates: pd.DataFrame  # successful replicates only, indexed by replicate number
    failures: int

    @property
    def sd(self) -> pd.Series:
        return self.replicates.std(ddof=1)

    def percentile(self, q: float) -> pd.Series:
        return self.replicates.quantile(q / 100.0)

    def table(self) -> pd.DataFrame:
        reps = self.replicates.reindex(columns=self.estimate.index)
        return pd.DataFrame({
            "parameter": self.estimate.index,
            "estimate": self.estimate.to_numpy(),
            "sd": reps.std(ddof=1).to_numpy(),
            "p2.5": reps.quantile(0.025).to_numpy(),
            "p97.5": reps.quantile(0.975).to_numpy(),
            "n_effective": reps.notna().sum().to_numpy(),
        })


def bootstrap(n: int, statistic: Callable[[np.ndarray], pd.Series | None], n_iter: int, seed: int,
              estimate: pd.Series | None = None, threads: int = 1, max_failure_share: float = 0.5) -> BootstrapResult:
    """Run ``statistic`` on ``n_iter`` resampled index vectors.

    ``statistic`` returns a named Series, or ``None`` / raises
    :class:`SeqretError` to mark a failed replicate. Missing parameters in a
    replicate are NaN and are excluded pairwise from the moments.
    """
    if n_iter < 2:
        raise SeqretError("n_iter must be at least 2")

    def one(r):
        try:
            return statistic(replicate_indices(n, seed, r))
        except SeqretError as e:
            log.debug("replicate %d failed: %s", r, e)
            return None

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, range(n_iter)))
    else:
        results = [one(r) for r in range(n_iter)]
    ok = {r: s for r, s in enumerate(results) if s is not None}
    failures = n_iter - len(ok)
    if failures > max_failure_share * n_iter:
        raise SeqretError(f"pipeline unstable under resampling ({failures}/{n_iter} replicates failed)")
    reps = pd.DataFrame.from_dict(ok, orient="index").sort_index()
    if estimate is None:
        estimate = reps.mean()
    return BootstrapResult(n_iter, seed, estimate, reps, failures)


def pairwise_bootstrap(sample, config, n_iter: int | None = None, seed: int | None = None,
                       threads: int = 1, point=None) -> BootstrapResult:
    """Whole-pipeline bootstrap: every replicate refits both choice stages,
    recomposes probabilities and reruns the returns regressions."""
    from .pipeline import estimate, run_statistic

    n_iter = config.bootstrap.get("n_iter", 104) if n_iter is None else n_iter
    seed = config.bootstrap.get("seed", 0) if seed is None else seed
    if point is None:
        point = estimate(sample, config)

    def stat(idx):
        run = estimate(sample.take(idx), config)
        if not run.nested.converged:
            return None
        return run_statistic(run)

    return bootstrap(len(sample), stat, n_iter, seed, estimate=run_statistic(point), threads=threads)


def attach_se(tables: dict, result: BootstrapResult) -> dict:
    """Copy bootstrap sds of alpha and alpha_tilde into the returns tables."""
    sd = result.sd
    out = {}
    for outcome, t in tables.items():
        t = t.copy()
        t["se_boot"] = [sd.get(f"{outcome}:alpha[{k}]", np.nan) for k in t["career"]]
        t["se_boot_tilde"] = [sd.get(f"{outcome}:alpha_tilde[{k}]", np.nan) for k in t["career"]]
        out[outcome] = t
    return out
