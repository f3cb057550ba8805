"""Accuracy and exposure-fairness metrics, plus the curve bucket evaluation.

All accuracy metrics follow the test-all protocol: each test request has
exactly one positive item ranked against the entire candidate pool.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sp_stats

from .corpus import ImpressionRecord, ItemCatalog
from .rerank import RankedList


class EvalError(ValueError):
    pass


@dataclass
class MetricsReport:
    per_k: dict[int, dict[str, float]]   # k -> {hr, ndcg, cov, n_cov}
    counts: dict[str, int]
    config_echo: dict

    def as_dict(self) -> dict:
        return {
            "per_k": {str(k): dict(v) for k, v in sorted(self.per_k.items())},
            "counts": dict(self.counts),
            "config": self.config_echo,
        }


def hr_ndcg(
    rankings: list[RankedList], truth: dict[str, str], ks: list[int]
) -> dict[int, tuple[float, float]]:
    """Hit rate and NDCG per cutoff; NDCG uses 1/log2(rank + 1) for the single positive."""
    if not rankings:
        raise EvalError("no rankings to evaluate")
    hits = {k: 0.0 for k in ks}
    gains = {k: 0.0 for k in ks}
    for rl in rankings:
        if rl.request_id not in truth:
            raise EvalError(f"request {rl.request_id!r} missing from truth")
        positive = truth[rl.request_id]
        try:
            rank = rl.items.index(positive) + 1
        except ValueError:
            rank = None
        for k in ks:
            if rank is not None and rank <= k:
                hits[k] += 1.0
                gains[k] += 1.0 / math.log2(rank + 1)
    n = len(rankings)
    return {k: (hits[k] / n, gains[k] / n) for k in ks}


def coverage(
    rankings: list[RankedList], catalog: ItemCatalog, ks: list[int]
) -> dict[int, tuple[float, float]]:
    """Cov@k and N_Cov@k: distinct (new) items appearing in any top-k list."""
    if not rankings:
        raise EvalError("no rankings to evaluate")
    n_items = len(catalog.entries)
    new_items = {i for i, is_new in catalog.new_item_flags.items() if is_new}
    out = {}
    for k in ks:
        exposed = {item for rl in rankings for item in rl.items[:k]}
        cov = len(exposed) / n_items if n_items else 0.0
        n_cov = len(exposed & new_items) / len(new_items) if new_items else 0.0
        out[k] = (cov, n_cov)
    return out


@dataclass
class GroupExposure:
    group: int
    n_items: int
    mean_exposure: float
    ctr: float | None
    y_exp: float | None
    y_ctr: float | None


def group_exposure_report(
    records: list[ImpressionRecord],
    catalog: ItemCatalog,
    n_groups: int,
    eval_window: tuple[float, float] | None = None,
) -> list[GroupExposure]:
    """Normalized exposure / CTR per equal-width upload-time group.

    Groups bin the provided catalog's upload range; y values divide each
    group's mean exposure (aggregate CTR) by the same quantity over all
    catalog items with impressions in the window. Zero-exposure items count
    toward exposure means; an empty group reports nulls.
    """
    if n_groups < 1:
        raise EvalError("n_groups must be >= 1")
    if not catalog.entries:
        raise EvalError("empty catalog")
    uploads = np.array([catalog.entries[i] for i in sorted(catalog.entries)])
    items = sorted(catalog.entries)
    lo, hi = float(uploads.min()), float(uploads.max())
    width = (hi - lo) / n_groups if hi > lo else 1.0
    group_of = np.minimum(((uploads - lo) / width).astype(int), n_groups - 1)

    exposures = dict.fromkeys(items, 0)
    clicks = dict.fromkeys(items, 0)
    for r in records:
        if r.item_id not in exposures:
            continue
        if eval_window is not None and not (eval_window[0] <= r.timestamp < eval_window[1]):
            continue
        exposures[r.item_id] += 1
        clicks[r.item_id] += r.click

    exp_arr = np.array([exposures[i] for i in items], dtype=float)
    clk_arr = np.array([clicks[i] for i in items], dtype=float)
    sys_mean_exp = float(exp_arr.mean())
    sys_ctr = float(clk_arr.sum() / exp_arr.sum()) if exp_arr.sum() > 0 else None

    report = []
    for g in range(n_groups):
        mask = group_of == g
        if not mask.any():
            report.append(GroupExposure(g, 0, 0.0, None, None, None))
            continue
        mean_exp = float(exp_arr[mask].mean())
        g_exp_total = exp_arr[mask].sum()
        ctr = float(clk_arr[mask].sum() / g_exp_total) if g_exp_total > 0 else None
        y_exp = mean_exp / sys_mean_exp if sys_mean_exp > 0 else None
        y_ctr = ctr / sys_ctr if (ctr is not None and sys_ctr) else None
        report.append(GroupExposure(g, int(mask.sum()), mean_exp, ctr, y_exp, y_ctr))
    return report


def write_group_report(path, report: list[GroupExposure]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["group", "n_items", "mean_exposure", "ctr", "y_exp", "y_ctr"])
        for g in report:
            w.writerow(
                [
                    g.group,
                    g.n_items,
                    repr(g.mean_exposure),
                    repr(g.ctr) if g.ctr is not None else "",
                    repr(g.y_exp) if g.y_exp is not None else "",
                    repr(g.y_ctr) if g.y_ctr is not None else "",
                ]
            )


@dataclass
class BucketEval:
    bucket_means: list[float]
    correlation: float
    n_items: int


def grv_bucket_eval(
    grv_at_age: dict[str, float],
    future_feedback: dict[str, float],
    n_buckets: int = 10,
) -> BucketEval:
    """Sort items into equal-size buckets by score and correlate bucket index
    with the bucket's mean future feedback (Spearman)."""
    items = sorted(set(grv_at_age) & set(future_feedback))
    if len(items) < n_buckets:
        raise EvalError(f"need at least {n_buckets} items with both values, got {len(items)}")
    order = sorted(items, key=lambda i: (grv_at_age[i], i))
    feedback = np.array([future_feedback[i] for i in order])
    means = [float(chunk.mean()) for chunk in np.array_split(feedback, n_buckets)]
    rho = sp_stats.spearmanr(np.arange(n_buckets), means).statistic
    if not np.isfinite(rho):
        rho = 0.0  # constant bucket means carry no ordering signal
    return BucketEval(means, float(rho), len(items))
