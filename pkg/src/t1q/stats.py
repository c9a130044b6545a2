"""Sparse-label metrics and the configuration-comparison statistics.

TPR is counted only over labeled voxels, so a correct prediction on an
unlabeled voxel is never penalised. A nucleus without labeled voxels has an
undefined TPR (``nan``), which is distinct from a TPR of 0.
"""
import csv
import math
from dataclasses import dataclass

import numpy as np

from .volume import NUCLEI, UNLABELED, SparseLabelVolume


@dataclass
class TprResult:
    tp: np.ndarray  # per class, index 0 = background
    fn: np.ndarray

    @property
    def labeled(self):
        return self.tp + self.fn

    @property
    def tpr(self):
        """Per-class TPR, ``nan`` where the class has no labeled voxels."""
        n = self.labeled
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, self.tp / np.maximum(n, 1), np.nan)

    @property
    def defined(self):
        return self.labeled > 0


def tpr_per_class(pred, gt, num_classes=len(NUCLEI) + 1):
    pred = np.asarray(pred.labels if isinstance(pred, SparseLabelVolume) else pred)
    lab = np.asarray(gt.labels if isinstance(gt, SparseLabelVolume) else gt)
    if pred.shape != lab.shape:
        raise ValueError(f"dim mismatch: prediction {pred.shape} vs labels {lab.shape}")
    m = lab != UNLABELED
    g = lab[m].astype(np.int64)
    hit = pred[m] == lab[m]
    labeled = np.bincount(g, minlength=num_classes)[:num_classes]
    tp = np.bincount(g[hit], minlength=num_classes)[:num_classes]
    return TprResult(tp.astype(np.int64), (labeled - tp).astype(np.int64))


def volume_weighted_average(tprs, weights):
    """``sum w_c tpr_c / sum w_c`` over classes with a defined (non-nan) TPR."""
    tprs = np.asarray(tprs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if tprs.shape != weights.shape:
        raise ValueError("tprs and weights must have the same length")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    ok = ~np.isnan(tprs)
    total = weights[ok].sum()
    if total <= 0:
        raise ValueError("no defined class with positive weight")
    return float((weights[ok] * tprs[ok]).sum() / total)


def subject_vwa(result, volume_fractions=None):
    """VWA over the 13 nuclei (background excluded).

    Weights are the subject's labeled voxel counts, or fixed
    ``volume_fractions`` (one per nucleus) when given.
    """
    tprs = result.tpr[1:]
    weights = result.labeled[1:] if volume_fractions is None else np.asarray(volume_fractions, dtype=np.float64)
    return volume_weighted_average(tprs, weights)


# ---------------------------------------------------------------- Wilcoxon


@dataclass
class TestOutcome:
    statistic: float  # W+: sum of ranks of positive differences
    p_value: float  # two-sided
    method: str  # EXACT | NORMAL_APPROX
    n_effective: int


def _average_ranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def signed_rank_counts(n):
    """Number of sign patterns of ranks 1..n reaching each W+ value 0..n(n+1)/2."""
    top = n * (n + 1) // 2
    counts = [1] + [0] * top
    for r in range(1, n + 1):
        for s in range(top, r - 1, -1):
            counts[s] += counts[s - r]
    return counts


def exact_two_sided_p(w, n):
    counts = signed_rank_counts(n)
    w = int(round(w))
    lower = sum(counts[: w + 1])
    upper = sum(counts[w:])
    return min(1.0, 2 * min(lower, upper) / 2 ** n)


def wilcoxon_signed_rank(x, y, exact_max_n=25):
    """Paired two-sided Wilcoxon signed-rank test.

    Zero differences are dropped. Without ties and for ``n <= exact_max_n`` the
    p-value is exact (full null distribution by dynamic programming); otherwise
    the normal approximation with tie and continuity corrections is used.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 1:
        raise ValueError("x and y must be equal-length 1-D samples")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("no nonzero pairs")
    absd = np.abs(d)
    ranks = _average_ranks(absd)
    w = float(ranks[d > 0].sum())
    ties = len(np.unique(absd)) < n
    if not ties and n <= exact_max_n:
        return TestOutcome(w, exact_two_sided_p(w, n), "EXACT", n)
    mean = n * (n + 1) / 4.0
    _, tcounts = np.unique(absd, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tcounts ** 3 - tcounts).sum() / 48.0
    if var <= 0:
        return TestOutcome(w, 1.0, "NORMAL_APPROX", n)
    diff = abs(w - mean)
    z = max(0.0, diff - 0.5) / math.sqrt(var)
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return TestOutcome(w, p, "NORMAL_APPROX", n)


# ---------------------------------------------------------------- Holm


@dataclass
class HolmResult:
    reject: np.ndarray
    adjusted: np.ndarray


def holm_bonferroni(pvals, alpha=0.05):
    """Holm step-down: reject while ``p_(j) < alpha / (m - j + 1)``."""
    p = np.asarray(pvals, dtype=np.float64)
    if p.size == 0:
        raise ValueError("no p-values given")
    if np.any((p <= 0) | (p > 1)):
        raise ValueError("p-values must lie in (0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    reject = np.zeros(m, dtype=bool)
    for j, i in enumerate(order):
        if p[i] < alpha / (m - j):
            reject[i] = True
        else:
            break
    adj_sorted = np.minimum(1.0, np.maximum.accumulate((m - np.arange(m)) * p[order]))
    adjusted = np.empty(m)
    adjusted[order] = adj_sorted
    return HolmResult(reject, adjusted)


# ---------------------------------------------------------------- tables

COLUMNS = list(NUCLEI) + ["VWA"]


def mean_sd(values):
    v = np.asarray([x for x in values if not np.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), sd


def format_cell(values, scale=100.0):
    mu, sd = mean_sd(values)
    if math.isnan(mu):
        return "n/a"
    return f"{mu * scale:.2f} ± {sd * scale:.2f}"


def compare_configs(per_config, reference, alpha=0.05):
    """Wilcoxon of every configuration against ``reference`` with Holm correction.

    ``per_config`` maps configuration -> {column -> per-subject values (same
    subject order)}. Holm runs per column over the non-reference
    configurations. Returns rows of dicts.
    """
    if reference not in per_config:
        raise KeyError(f"reference configuration {reference!r} missing")
    others = [c for c in per_config if c != reference]
    rows = []
    for col in COLUMNS:
        tests = []
        for cfg in others:
            a = np.asarray(per_config[cfg][col], dtype=np.float64)
            b = np.asarray(per_config[reference][col], dtype=np.float64)
            ok = ~(np.isnan(a) | np.isnan(b))
            try:
                t = wilcoxon_signed_rank(a[ok], b[ok])
            except ValueError:
                t = TestOutcome(math.nan, 1.0, "NONE", 0)
            tests.append((cfg, t, float(np.median(a[ok] - b[ok])) if ok.any() else 0.0))
        if not tests:
            continue
        holm = holm_bonferroni([t.p_value for _, t, _ in tests], alpha)
        for (cfg, t, med), rej, adj in zip(tests, holm.reject, holm.adjusted):
            mark = ("up" if med > 0 else "down") if rej else "none"
            rows.append({"config": cfg, "column": col, "W": t.statistic, "p": t.p_value,
                         "p_holm": float(adj), "method": t.method, "n": t.n_effective,
                         "reject": bool(rej), "mark": mark})
    return rows


def write_table(per_config, path, marks_path=None, comparisons=None):
    """Results table CSV, one row per configuration (cells "mean ± sd" in percent) and an optional marks CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config"] + COLUMNS)
        for cfg, cols in per_config.items():
            w.writerow([cfg] + [format_cell(cols[c]) for c in COLUMNS])
    if marks_path is not None:
        marks = {(r["config"], r["column"]): r["mark"] for r in comparisons or []}
        with open(marks_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config"] + COLUMNS)
            for cfg in per_config:
                w.writerow([cfg] + [marks.get((cfg, c), "none") for c in COLUMNS])
