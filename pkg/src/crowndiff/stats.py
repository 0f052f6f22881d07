"""Reader-study analysis: paired scores, bootstrap CIs, non-inferiority,
and inter-rater agreement.

Ordinal quality ratings (1 = worst .. 3 = best) are keyed by
(case, reader, criterion, workflow).  The primary quantity is the per-case
paired difference of reader-averaged scores between two workflows; its 95%
case-level percentile-bootstrap confidence interval drives the
non-inferiority decision, with a parametric t-based interval reported as a
sensitivity analysis.  Agreement between the two readers is summarized with
Gwet's AC2 (quadratic ordinal weights), the Brennan-Prediger coefficient,
Kendall's W (mid-ranks with tie correction), and raw percent agreement.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

VALID_SCORES = (1, 2, 3)


# ---------------------------------------------------------------------------
# Score table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreTable:
    """Complete crossing of (case, reader, criterion, workflow) -> score."""

    scores: dict

    cases: tuple = field(init=False)
    readers: tuple = field(init=False)
    criteria: tuple = field(init=False)
    workflows: tuple = field(init=False)

    def __post_init__(self):
        if not self.scores:
            raise ValueError("empty score table")
        keys = list(self.scores)
        object.__setattr__(self, "cases", tuple(sorted({k[0] for k in keys})))
        object.__setattr__(self, "readers", tuple(sorted({k[1] for k in keys})))
        object.__setattr__(self, "criteria", tuple(sorted({k[2] for k in keys})))
        object.__setattr__(self, "workflows", tuple(sorted({k[3] for k in keys})))
        for key, score in self.scores.items():
            if score not in VALID_SCORES:
                raise ValueError(f"score {score!r} at {key} not in {VALID_SCORES}")
        for c in self.cases:
            for r in self.readers:
                for q in self.criteria:
                    for w in self.workflows:
                        if (c, r, q, w) not in self.scores:
                            raise ValueError(
                                f"incomplete crossing: missing (case={c}, reader={r}, "
                                f"criterion={q}, workflow={w})"
                            )

    def score(self, case, reader, criterion, workflow) -> int:
        return self.scores[(case, reader, criterion, workflow)]

    def reader_vector(self, reader, criteria=None, workflows=None) -> np.ndarray:
        """All of one reader's scores over (case x criterion x workflow)."""
        criteria = self.criteria if criteria is None else tuple(criteria)
        workflows = self.workflows if workflows is None else tuple(workflows)
        return np.array(
            [
                self.scores[(c, reader, q, w)]
                for c in self.cases
                for q in criteria
                for w in workflows
            ]
        )

    @classmethod
    def from_csv(cls, path) -> "ScoreTable":
        path = Path(path)
        scores = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            required = {"case", "reader", "criterion", "workflow", "score"}
            if reader.fieldnames is None or not required <= set(reader.fieldnames):
                raise ValueError(
                    f"{path}: header must contain {sorted(required)}"
                )
            for i, row in enumerate(reader, start=2):
                key = (row["case"], row["reader"], row["criterion"], row["workflow"])
                if key in scores:
                    raise ValueError(f"{path}:{i}: duplicate entry {key}")
                try:
                    scores[key] = int(row["score"])
                except ValueError:
                    raise ValueError(f"{path}:{i}: malformed score {row['score']!r}") from None
        return cls(scores=scores)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case", "reader", "criterion", "workflow", "score"])
            for key in sorted(self.scores):
                writer.writerow([*key, self.scores[key]])


def paired_differences(
    table: ScoreTable,
    criterion=None,
    workflows: tuple = None,
) -> np.ndarray:
    """Per-case paired differences of reader-averaged scores.

    For each case, scores are averaged over readers per criterion; the
    composite (criterion=None) is the mean over all criteria.  The
    difference is workflows[0] - workflows[1].
    """
    if workflows is None:
        if len(table.workflows) != 2:
            raise ValueError("specify workflows when the table has more than two")
        workflows = table.workflows
    treat, control = workflows
    for wf in (treat, control):
        if wf not in table.workflows:
            raise ValueError(f"workflow {wf!r} not present in table")
    criteria = table.criteria if criterion is None else (criterion,)
    for q in criteria:
        if q not in table.criteria:
            raise ValueError(f"criterion {q!r} not present in table")

    diffs = []
    for case in table.cases:
        per_wf = {}
        for wf in (treat, control):
            per_wf[wf] = np.mean(
                [
                    np.mean([table.score(case, r, q, wf) for r in table.readers])
                    for q in criteria
                ]
            )
        diffs.append(per_wf[treat] - per_wf[control])
    return np.asarray(diffs)


# ---------------------------------------------------------------------------
# Confidence intervals and tests
# ---------------------------------------------------------------------------

def bootstrap_ci(values, iters: int = 10000, level: float = 0.95, seed: int = 0):
    """Percentile bootstrap interval for the mean; deterministic given seed."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or len(values) < 2:
        raise ValueError("bootstrap_ci needs at least two values")
    if iters < 1000:
        raise ValueError("use at least 1000 bootstrap iterations")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(iters, len(values)))
    means = values[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    pvalue: float
    df: int
    degenerate: bool  # True when the differences have zero variance


def paired_t(values, alternative: str = "two_sided") -> TTestResult:
    """One-sample t-test of the mean difference against zero.

    Zero-variance input returns a flagged degenerate result instead of a
    silent p-value (reader scores are heavily tied).
    """
    if alternative not in ("two_sided", "greater", "less"):
        raise ValueError(f"unknown alternative: {alternative!r}")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or len(values) < 2:
        raise ValueError("paired_t needs at least two values")
    n = len(values)
    sd = values.std(ddof=1)
    if sd == 0.0:
        return TTestResult(float("nan"), float("nan"), n - 1, True)
    t = values.mean() / (sd / np.sqrt(n))
    df = n - 1
    if alternative == "two_sided":
        p = 2.0 * sps.t.sf(abs(t), df)
    elif alternative == "greater":
        p = sps.t.sf(t, df)
    else:
        p = sps.t.cdf(t, df)
    return TTestResult(float(t), float(p), df, False)


def t_interval(values, level: float = 0.95):
    """Parametric t-based CI for the mean (zero width at zero variance)."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < 2:
        raise ValueError("t_interval needs at least two values")
    mean = values.mean()
    sd = values.std(ddof=1)
    if sd == 0.0:
        return float(mean), float(mean)
    half = sps.t.ppf((1 + level) / 2.0, n - 1) * sd / np.sqrt(n)
    return float(mean - half), float(mean + half)


@dataclass(frozen=True)
class NiConfig:
    """Margin is the worst acceptable mean deficit on the 1-3 scale."""

    margin: float = -0.10
    level: float = 0.95
    bootstrap_iters: int = 10000

    def __post_init__(self):
        if not self.margin < 0:
            raise ValueError("non-inferiority margin must be negative")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must be in (0, 1)")


@dataclass(frozen=True)
class NiResult:
    decision: str            # "noninferior" | "inconclusive"
    mean: float
    bootstrap_interval: tuple
    t_interval: tuple        # sensitivity analysis
    margin: float


def ni_decision(values, config: NiConfig = NiConfig(), seed: int = 0) -> NiResult:
    """Non-inferiority decision from the case-level bootstrap interval.

    Non-inferior iff the bootstrap lower bound exceeds the margin; the
    t-based interval is reported alongside but does not drive the decision.
    """
    values = np.asarray(values, dtype=np.float64)
    boot = bootstrap_ci(values, config.bootstrap_iters, config.level, seed)
    tband = t_interval(values, config.level)
    decision = "noninferior" if boot[0] > config.margin else "inconclusive"
    return NiResult(
        decision=decision,
        mean=float(values.mean()),
        bootstrap_interval=boot,
        t_interval=tband,
        margin=config.margin,
    )


# ---------------------------------------------------------------------------
# Inter-rater agreement
# ---------------------------------------------------------------------------

def quadratic_weights(n_categories: int) -> np.ndarray:
    """Ordinal agreement weights: w_kl = 1 - (k-l)^2 / (q-1)^2."""
    if n_categories < 2:
        raise ValueError("need at least two categories")
    idx = np.arange(n_categories)
    return 1.0 - ((idx[:, None] - idx[None, :]) ** 2) / (n_categories - 1) ** 2


def identity_weights(n_categories: int) -> np.ndarray:
    return np.eye(n_categories)


def _categorize(r1, r2, categories):
    cats = list(categories)
    r1 = list(r1)
    r2 = list(r2)
    if len(r1) != len(r2):
        raise ValueError("rating vectors must have equal length")
    if not r1:
        raise ValueError("empty rating vectors")
    lookup = {c: i for i, c in enumerate(cats)}
    try:
        i1 = np.array([lookup[v] for v in r1])
        i2 = np.array([lookup[v] for v in r2])
    except KeyError as exc:
        raise ValueError(f"rating {exc.args[0]!r} not in categories {cats}") from None
    return i1, i2, len(cats)


def _weighted_observed(i1, i2, weights) -> float:
    return float(weights[i1, i2].mean())


def gwet_ac2(r1, r2, categories, weights: np.ndarray | None = None) -> float:
    """Gwet's chance-corrected agreement for two raters, ordinal weights.

    Chance agreement is T_w / (q(q-1)) * sum_k pi_k (1 - pi_k) with pi_k the
    average marginal proportion of category k and T_w the sum of all
    weights; identity weights reduce this to the unweighted AC1.
    """
    i1, i2, q = _categorize(r1, r2, categories)
    w = quadratic_weights(q) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (q, q):
        raise ValueError("weights must be (q, q)")
    p_a = _weighted_observed(i1, i2, w)
    n = len(i1)
    pi = (np.bincount(i1, minlength=q) + np.bincount(i2, minlength=q)) / (2.0 * n)
    p_e = w.sum() / (q * (q - 1.0)) * float((pi * (1.0 - pi)).sum())
    if p_e >= 1.0:
        return float("nan")
    return float((p_a - p_e) / (1.0 - p_e))


def brennan_prediger(r1, r2, categories, weights: np.ndarray | None = None) -> float:
    """Chance-corrected agreement assuming uniform category prevalence:
    p_e = sum(weights) / q^2."""
    i1, i2, q = _categorize(r1, r2, categories)
    w = quadratic_weights(q) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (q, q):
        raise ValueError("weights must be (q, q)")
    p_a = _weighted_observed(i1, i2, w)
    p_e = float(w.sum()) / (q * q)
    return float((p_a - p_e) / (1.0 - p_e))


def _midranks(values: np.ndarray) -> np.ndarray:
    return sps.rankdata(values, method="average")


def kendall_w(ratings) -> float:
    """Kendall's coefficient of concordance with tie correction.

    ``ratings`` is (raters, items).  Returns NaN when every rater ties all
    items (no variation to rank).
    """
    ratings = np.asarray(ratings, dtype=np.float64)
    if ratings.ndim != 2 or ratings.shape[0] < 2 or ratings.shape[1] < 2:
        raise ValueError("ratings must be (raters >= 2, items >= 2)")
    m, n = ratings.shape
    ranks = np.vstack([_midranks(row) for row in ratings])
    totals = ranks.sum(axis=0)
    numerator = 12.0 * float((totals**2).sum()) - 3.0 * m * m * n * (n + 1) ** 2
    tie_term = 0.0
    for row in ratings:
        _, counts = np.unique(row, return_counts=True)
        tie_term += float((counts**3 - counts).sum())
    denominator = m * m * n * (n * n - 1.0) - m * tie_term
    if denominator == 0.0:
        return float("nan")
    return float(numerator / denominator)


def contingency(r1, r2, categories) -> np.ndarray:
    """(q, q) cross-tabulation of two raters' categorical ratings."""
    i1, i2, q = _categorize(r1, r2, categories)
    table = np.zeros((q, q), dtype=int)
    np.add.at(table, (i1, i2), 1)
    return table


def opa(r1, r2) -> float:
    """Overall percent agreement: diagonal fraction of the cross-tab, x100."""
    r1 = list(r1)
    r2 = list(r2)
    if len(r1) != len(r2):
        raise ValueError("rating vectors must have equal length")
    if not r1:
        raise ValueError("empty rating vectors")
    agree = sum(a == b for a, b in zip(r1, r2))
    return 100.0 * agree / len(r1)


# ---------------------------------------------------------------------------
# Full reader-study summary
# ---------------------------------------------------------------------------

def _nan_to_none(x):
    if isinstance(x, float) and np.isnan(x):
        return None
    return x


def _agreement_block(table: ScoreTable, criteria, workflows) -> dict:
    if len(table.readers) != 2:
        raise ValueError("agreement block assumes exactly two readers")
    r1, r2 = table.readers
    v1 = table.reader_vector(r1, criteria=criteria, workflows=workflows)
    v2 = table.reader_vector(r2, criteria=criteria, workflows=workflows)
    cats = list(VALID_SCORES)
    return {
        "n": int(len(v1)),
        "gwet_ac2": _nan_to_none(gwet_ac2(v1, v2, cats)),
        "brennan_prediger": _nan_to_none(brennan_prediger(v1, v2, cats)),
        "kendall_w": _nan_to_none(kendall_w(np.vstack([v1, v2]))),
        "opa_percent": opa(v1, v2),
        "contingency": contingency(v1, v2, cats).tolist(),
    }


def summarize_reader_study(
    table: ScoreTable,
    workflows: tuple | None = None,
    config: NiConfig = NiConfig(),
    seed: int = 0,
) -> dict:
    """Endpoint statistics and agreement at every aggregation level."""
    if workflows is None:
        if len(table.workflows) != 2:
            raise ValueError("specify the (treatment, control) workflow pair")
        workflows = table.workflows

    def endpoint(criterion):
        diffs = paired_differences(table, criterion, workflows)
        ni = ni_decision(diffs, config, seed=seed)
        t_res = paired_t(diffs)
        return {
            "mean_difference": ni.mean,
            "bootstrap_ci": list(ni.bootstrap_interval),
            "t_ci": list(ni.t_interval),
            "ni_margin": ni.margin,
            "ni_decision": ni.decision,
            "paired_t": {
                "statistic": _nan_to_none(t_res.statistic),
                "pvalue": _nan_to_none(t_res.pvalue),
                "df": t_res.df,
                "degenerate": t_res.degenerate,
            },
        }

    out = {
        "workflows": {"treatment": workflows[0], "control": workflows[1]},
        "n_cases": len(table.cases),
        "criteria": {q: endpoint(q) for q in table.criteria},
        "composite": endpoint(None),
        "agreement": {
            "workflow_criterion": {
                f"{w}|{q}": _agreement_block(table, (q,), (w,))
                for w in table.workflows
                for q in table.criteria
            },
            "by_criterion": {
                q: _agreement_block(table, (q,), None) for q in table.criteria
            },
            "by_workflow": {
                w: _agreement_block(table, None, (w,)) for w in table.workflows
            },
            "overall": _agreement_block(table, None, None),
        },
    }
    return out
