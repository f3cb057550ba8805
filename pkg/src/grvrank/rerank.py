"""Blend backbone relevance with item timeliness and emit top-k lists.

Backbone scores are min-max normalized per request (a strictly monotone map
on non-constant inputs, so gamma = 0 reproduces backbone order exactly),
then combined as (1 - gamma) * bbm + gamma * timeliness. Timeliness comes
from residual-value curves, from the normalized-upload-time baseline, or is
disabled.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .backbone import Request
from .corpus import ItemCatalog, TimeGrid, slice_index
from .grv_model import GrvCurve

GRV = "grv"
UPLOAD_TIME = "upload_time"
NONE = "none"
SOURCES = (GRV, UPLOAD_TIME, NONE)


@dataclass(frozen=True)
class AggregationConfig:
    gamma: float = 0.2
    timeliness_source: str = GRV
    k_list: tuple[int, ...] = (5, 10)
    normalization: str = "minmax_per_request"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.timeliness_source not in SOURCES:
            raise ValueError(f"timeliness_source must be one of {SOURCES}")
        if any(k < 1 for k in self.k_list):
            raise ValueError("k values must be positive")

    @property
    def max_k(self) -> int:
        return max(self.k_list)


@dataclass
class RankedList:
    """Top-k items for one request with their score components."""

    request_id: str
    items: list[str]
    final: list[float]
    bbm_raw: list[float] = field(default_factory=list)
    bbm_norm: list[float] = field(default_factory=list)
    timeliness: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class RerankStats:
    """Counters for timeliness fallbacks applied during reranking."""

    too_new: int = 0
    extrapolated: int = 0
    missing_curve: int = 0


def normalize_scores(scores: dict[str, float]) -> dict[str, float]:
    """Min-max normalize to [0, 1]; a constant input maps to all 0.5."""
    if not scores:
        raise ValueError("cannot normalize empty score map")
    vals = np.array(list(scores.values()), dtype=float)
    lo, hi = float(vals.min()), float(vals.max())
    if hi == lo:
        return dict.fromkeys(scores, 0.5)
    return {i: (s - lo) / (hi - lo) for i, s in scores.items()}


def upload_time_value(item_id: str, t: float, catalog: ItemCatalog, delta: float = 0.0) -> float:
    """Normalized-upload-time timeliness: newest item maps to 1, oldest toward 0.

    Defined as 0 when the denominator vanishes (request at the earliest
    upload time with delta = 0); clipped to [0, 1] for items uploaded after t.
    """
    min_upload = min(catalog.entries.values())
    denom = t - min_upload + delta
    if denom == 0:
        return 0.0
    value = (catalog.entries[item_id] - min_upload + delta) / denom
    return min(max(value, 0.0), 1.0)


def aggregate(bbm: dict[str, float], timeliness: dict[str, float], gamma: float) -> dict[str, float]:
    """final = (1 - gamma) * bbm + gamma * timeliness, over identical key sets."""
    if bbm.keys() != timeliness.keys():
        raise ValueError("bbm and timeliness key sets differ")
    return {i: (1.0 - gamma) * bbm[i] + gamma * timeliness[i] for i in bbm}


def topk(final: dict[str, float], k: int, request_id: str = "") -> RankedList:
    """k highest-scoring items, ties broken by ascending item_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    best = sorted(final.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return RankedList(request_id, [i for i, _ in best], [s for _, s in best])


def grv_timeliness(
    request_time: float,
    candidates: list[str],
    catalog: ItemCatalog,
    curves: dict[str, GrvCurve],
    grid: TimeGrid,
    t_obs: int,
    stats: RerankStats | None = None,
) -> dict[str, float]:
    """Per-candidate curve lookup at the item's age when the request arrives.

    Items still inside (or before) their observation window take the
    maximally-fresh prior 1.0; so do items with no curve. Ages past the
    prediction horizon use the last value (flat extrapolation). All
    fallbacks are counted in `stats`.
    """
    stats = stats if stats is not None else RerankStats()
    out = {}
    for item in candidates:
        age = slice_index(request_time, catalog.entries[item], grid)
        if age < t_obs:
            stats.too_new += 1
            out[item] = 1.0
            continue
        curve = curves.get(item)
        if curve is None:
            stats.missing_curve += 1
            out[item] = 1.0
            continue
        if age >= curve.t_obs + len(curve.values):
            stats.extrapolated += 1
        out[item] = curve.value_at(age)
    return out


def rank_request(
    request: Request,
    bbm_raw: dict[str, float],
    timeliness: dict[str, float],
    cfg: AggregationConfig,
) -> RankedList:
    """Full rerank of one request from raw backbone scores and timeliness."""
    bbm_norm = normalize_scores(bbm_raw)
    if cfg.timeliness_source == NONE:
        final = dict(bbm_norm)
        timeliness = dict.fromkeys(bbm_norm, 0.0)
    else:
        final = aggregate(bbm_norm, timeliness, cfg.gamma)
    ranked = topk(final, cfg.max_k, request.request_id)
    ranked.bbm_raw = [bbm_raw[i] for i in ranked.items]
    ranked.bbm_norm = [bbm_norm[i] for i in ranked.items]
    ranked.timeliness = [timeliness[i] for i in ranked.items]
    return ranked


class BatchRanker:
    """Vectorized reranking over a fixed candidate pool (test-all protocol).

    Matches `rank_request` exactly; candidates are kept in ascending id
    order so a stable sort on descending final score reproduces the
    ascending-id tie-break.
    """

    def __init__(
        self,
        candidates: list[str],
        catalog: ItemCatalog,
        grid: TimeGrid,
        t_obs: int,
        curves: dict[str, GrvCurve] | None = None,
    ):
        self.candidates = sorted(candidates)
        self.catalog = catalog
        self.grid = grid
        self.t_obs = t_obs
        self.upload_slices = np.array(
            [slice_index(catalog.entries[i], grid.origin, grid) for i in self.candidates]
        )
        self.upload_times = np.array([catalog.entries[i] for i in self.candidates])
        curves = curves or {}
        t_pred = max((len(c.values) for c in curves.values()), default=1)
        self.curve_values = np.ones((len(self.candidates), t_pred))
        self.has_curve = np.zeros(len(self.candidates), dtype=bool)
        self.curve_t_obs = t_obs
        for k, item in enumerate(self.candidates):
            c = curves.get(item)
            if c is not None:
                self.has_curve[k] = True
                self.curve_values[k, : len(c.values)] = c.values
                if len(c.values) < t_pred:
                    self.curve_values[k, len(c.values):] = c.values[-1]
                self.curve_t_obs = c.t_obs

    def timeliness_row(self, request_time: float, source: str, stats: RerankStats) -> np.ndarray:
        if source == NONE:
            return np.zeros(len(self.candidates))
        if source == UPLOAD_TIME:
            min_upload = float(self.upload_times.min())
            denom = request_time - min_upload
            if denom == 0:
                return np.zeros(len(self.candidates))
            return np.clip((self.upload_times - min_upload) / denom, 0.0, 1.0)
        req_slice = slice_index(request_time, self.grid.origin, self.grid)
        ages = req_slice - self.upload_slices
        too_new = ages < self.t_obs
        missing = ~too_new & ~self.has_curve
        past = ~too_new & self.has_curve & (ages >= self.curve_t_obs + self.curve_values.shape[1])
        stats.too_new += int(too_new.sum())
        stats.missing_curve += int(missing.sum())
        stats.extrapolated += int(past.sum())
        idx = np.clip(ages - self.curve_t_obs, 0, self.curve_values.shape[1] - 1)
        row = self.curve_values[np.arange(len(self.candidates)), idx]
        row[too_new | missing] = 1.0
        return row

    def rank(
        self,
        request: Request,
        bbm_row: np.ndarray,
        cfg: AggregationConfig,
        stats: RerankStats | None = None,
    ) -> RankedList:
        stats = stats if stats is not None else RerankStats()
        lo, hi = float(bbm_row.min()), float(bbm_row.max())
        bbm_norm = np.full_like(bbm_row, 0.5) if hi == lo else (bbm_row - lo) / (hi - lo)
        tim = self.timeliness_row(request.time, cfg.timeliness_source, stats)
        if cfg.timeliness_source == NONE:
            final = bbm_norm
        else:
            final = (1.0 - cfg.gamma) * bbm_norm + cfg.gamma * tim
        k = min(cfg.max_k, len(self.candidates))
        # stable sort keeps ascending candidate index (= ascending item id) on ties
        top = np.argsort(-final, kind="stable")[:k]
        return RankedList(
            request.request_id,
            [self.candidates[i] for i in top],
            [float(final[i]) for i in top],
            bbm_raw=[float(bbm_row[i]) for i in top],
            bbm_norm=[float(bbm_norm[i]) for i in top],
            timeliness=[float(tim[i]) for i in top],
        )


def save_rankings(path, rankings: list[RankedList]) -> None:
    """Write TSV request_id,rank,item_id,final,bbm_norm,timeliness."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["request_id", "rank", "item_id", "final", "bbm_norm", "timeliness"])
        for rl in rankings:
            for pos, item in enumerate(rl.items, start=1):
                w.writerow(
                    [
                        rl.request_id,
                        pos,
                        item,
                        repr(rl.final[pos - 1]),
                        repr(rl.bbm_norm[pos - 1]) if rl.bbm_norm else "",
                        repr(rl.timeliness[pos - 1]) if rl.timeliness else "",
                    ]
                )


def load_rankings(path) -> list[RankedList]:
    by_request: dict[str, RankedList] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            rl = by_request.setdefault(row["request_id"], RankedList(row["request_id"], [], []))
            rl.items.append(row["item_id"])
            rl.final.append(float(row["final"]))
            if row["bbm_norm"]:
                rl.bbm_norm.append(float(row["bbm_norm"]))
            if row["timeliness"]:
                rl.timeliness.append(float(row["timeliness"]))
    return list(by_request.values())
