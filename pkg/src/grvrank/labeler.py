"""Deactivation labels from per-slice vitality scores.

Each exposed slice scores an item by its feedback percentile rank among all
items exposed in the same absolute slice, minus a penalty; unexposed slices
take a flat penalty. The running sum dropping strictly below a negative
threshold triggers the (at most one) deactivation event; items that never
trigger are censored.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import CTR, ItemTimeline

log = logging.getLogger(__name__)

HIGH_CENSORING_RATE = 0.9


@dataclass(frozen=True)
class VitalityParams:
    beta_e: float = 0.5       # penalty offset on exposed slices
    beta_ne: float = 0.5      # flat penalty on unexposed slices
    beta_d: float = -3.0      # cumulative threshold, must be negative
    feedback_feature: str = CTR

    def __post_init__(self):
        if self.beta_d >= 0:
            raise ValueError("beta_d must be negative")
        if not 0.0 <= self.beta_e <= 1.0:
            raise ValueError("beta_e must be in [0, 1]")
        if self.beta_ne < 0:
            raise ValueError("beta_ne must be >= 0")


@dataclass
class LabelSet:
    """Event ages for deactivated items plus the censored remainder."""

    events: dict[str, int]
    censored: set[str]
    censoring_rate: float
    horizon_slices: int = 0

    def __post_init__(self):
        overlap = set(self.events) & self.censored
        if overlap:
            raise ValueError(f"items both event and censored: {sorted(overlap)[:5]}")

    def __len__(self) -> int:
        return len(self.events) + len(self.censored)


def percentile_rank(value: float, population: np.ndarray) -> float:
    """Mid-rank percentile of `value` within `population`, in (0, 1)."""
    pop = np.asarray(population, dtype=float)
    if pop.size == 0:
        raise ValueError("empty population")
    below = np.count_nonzero(pop < value)
    equal = np.count_nonzero(pop == value)
    return (below + 0.5 * equal) / pop.size


class SlicePopulations:
    """Sorted feedback values of exposed items, keyed by absolute slice.

    The absolute slice of (item, age) is item.upload_slice + age, so items
    uploaded at different times compete in the slice they were actually
    exposed in.
    """

    def __init__(self, timelines: dict[str, ItemTimeline], feature: str = CTR):
        buckets: dict[int, list[float]] = {}
        for tl in timelines.values():
            values = tl.feedback[feature]
            for age in np.nonzero(tl.exposures > 0)[0]:
                buckets.setdefault(tl.upload_slice + int(age), []).append(float(values[age]))
        self._sorted = {s: np.sort(np.array(vals)) for s, vals in buckets.items()}

    def rank(self, value: float, abs_slice: int) -> float:
        pop = self._sorted.get(abs_slice)
        if pop is None:
            raise ValueError(f"no exposed items at slice {abs_slice}")
        below = np.searchsorted(pop, value, side="left")
        upto = np.searchsorted(pop, value, side="right")
        return (below + 0.5 * (upto - below)) / pop.size


def vitality_series(
    timeline: ItemTimeline,
    populations: SlicePopulations,
    params: VitalityParams,
) -> np.ndarray:
    """Per-age vitality scores for one item."""
    if len(timeline) == 0:
        raise ValueError("empty timeline")
    values = timeline.feedback[params.feedback_feature]
    out = np.full(len(timeline), -params.beta_ne)
    for age in np.nonzero(timeline.exposures > 0)[0]:
        r = populations.rank(float(values[age]), timeline.upload_slice + int(age))
        out[age] = r - params.beta_e
    return out


def detect_deactivation(vitality: np.ndarray, beta_d: float) -> int | None:
    """First age where the running vitality sum drops strictly below beta_d."""
    if beta_d >= 0:
        raise ValueError("beta_d must be negative")
    crossed = np.nonzero(np.cumsum(vitality) < beta_d)[0]
    return int(crossed[0]) if crossed.size else None


def label_corpus(
    timelines: dict[str, ItemTimeline],
    params: VitalityParams | None = None,
    populations: SlicePopulations | None = None,
) -> LabelSet:
    """Label every item with a deactivation age or mark it censored.

    Populations default to system-wide ones built from `timelines`; pass
    them explicitly when labeling a subset of a larger corpus so ranks are
    still computed against full-system competition.
    """
    if not timelines:
        raise ValueError("no timelines to label")
    params = params or VitalityParams()
    populations = populations or SlicePopulations(timelines, params.feedback_feature)
    events: dict[str, int] = {}
    censored: set[str] = set()
    horizon = 0
    for item in sorted(timelines):
        tl = timelines[item]
        horizon = max(horizon, len(tl))
        age = detect_deactivation(vitality_series(tl, populations, params), params.beta_d)
        if age is None:
            censored.add(item)
        else:
            events[item] = age
    rate = len(censored) / (len(events) + len(censored))
    if rate > HIGH_CENSORING_RATE:
        log.warning("censoring rate %.3f exceeds %.1f; consider retuning vitality params",
                    rate, HIGH_CENSORING_RATE)
    return LabelSet(events, censored, rate, horizon)


def save_labels(path, labels: LabelSet) -> None:
    """Write labels as TSV item_id,event_age,censored(0/1); event_age empty when censored."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["item_id", "event_age", "censored"])
        for item in sorted(labels.events):
            w.writerow([item, labels.events[item], 0])
        for item in sorted(labels.censored):
            w.writerow([item, "", 1])


def load_labels(path, horizon_slices: int = 0) -> LabelSet:
    events: dict[str, int] = {}
    censored: set[str] = set()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            if row["censored"] == "1":
                censored.add(row["item_id"])
            else:
                events[row["item_id"]] = int(row["event_age"])
    total = len(events) + len(censored)
    rate = len(censored) / total if total else 0.0
    return LabelSet(events, censored, rate, horizon_slices)
