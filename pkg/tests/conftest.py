import math

import numpy as np
import pytest

from seqret.core import ChoiceSet, Layout
from seqret.nested import NestedConfig, fit_nested, prepare_sample
from seqret.synthgen import DgpConfig, generate_population

# Tiny MNL fixture: N=12, K=3, p=2 (intercept + one covariate), interior MLE.
TINY_X = np.column_stack([
    np.ones(12),
    [-0.007, 1.046, 0.742, 0.724, 1.619, -1.206, -0.627, -1.321, -0.108, 0.999, -0.022, 0.496],
])
TINY_Y = np.array([2, 2, 1, 1, 1, 0, 0, 2, 0, 2, 1, 0])

SMALL_LAYOUT = ["hs_grade_std", "gender", "parent_graduate", {"factor": "cohort_year"}]


@pytest.fixture
def tiny():
    return TINY_X.copy(), TINY_Y.copy()


def direct_loglik(B, X, y, baseline=0):
    """Row-by-row log-likelihood with plain Python sums."""
    K = B.shape[0] + 1
    total = []
    for i in range(len(y)):
        u = []
        r = 0
        for a in range(K):
            if a == baseline:
                u.append(0.0)
            else:
                u.append(math.fsum(B[r, c] * X[i, c] for c in range(X.shape[1])))
                r += 1
        m = max(u)
        total.append(u[y[i]] - m - math.log(math.fsum(math.exp(v - m) for v in u)))
    return math.fsum(total)


def small_world(seed=0, n=6000, n_fields=3, **kw):
    cfg = DgpConfig(n_individuals=n, n_fields=n_fields, seed=seed, layout=SMALL_LAYOUT, n_extra_masters=1, **kw)
    df, truth = generate_population(cfg)
    cs = ChoiceSet.from_dict(truth["choiceset"])
    return df, truth, cs


@pytest.fixture(scope="session")
def world3():
    """Three-field population with its fitted nested model."""
    df, truth, cs = small_world(seed=3, n=8000)
    s = prepare_sample(df, cs, Layout.from_list(SMALL_LAYOUT))
    cfg = NestedConfig(layout=s.layout, min_count=100, baseline_bachelor=1)
    return df, truth, cs, s, fit_nested(s, cfg)


# One PASS/FAIL line per acceptance criterion, repeated in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
