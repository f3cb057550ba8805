"""Impression-log ingestion and per-item feedback timelines.

Events are bucketed onto a discrete time grid (hourly by default) and
aggregated per item relative to its upload time, producing exposure/click
counts and per-slice feedback vectors. CTR at zero-exposure slices is kept
as NaN so downstream imputation stays an explicit decision.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SLICE_SECONDS = 3600

CTR = "ctr"


class SchemaError(ValueError):
    """A required column is missing from the input file."""


class CorpusError(ValueError):
    """Input data cannot produce a usable corpus."""


@dataclass(frozen=True)
class TimeGrid:
    """Discretization of absolute time: slice k covers [origin + k*s, origin + (k+1)*s)."""

    slice_seconds: int = DEFAULT_SLICE_SECONDS
    origin: float = 0.0

    def __post_init__(self):
        if self.slice_seconds <= 0:
            raise ValueError("slice_seconds must be positive")


def slice_index(timestamp: float, reference: float, grid: TimeGrid) -> int:
    """Grid index of `timestamp` relative to `reference`; may be negative."""
    return math.floor((timestamp - reference) / grid.slice_seconds)


@dataclass(frozen=True)
class ImpressionRecord:
    user_id: str
    item_id: str
    timestamp: float
    click: int
    extra_feedback: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class ColumnSchema:
    """Maps logical impression fields to CSV column names."""

    user_id: str = "user_id"
    item_id: str = "item_id"
    timestamp: str = "timestamp"
    click: str = "click"
    # logical feedback name -> column name
    extra_feedback: dict[str, str] = field(default_factory=dict)

    def required_columns(self) -> list[str]:
        return [self.user_id, self.item_id, self.timestamp, self.click]


@dataclass(frozen=True)
class Reject:
    line_no: int
    reason: str


@dataclass
class LoadResult:
    records: list[ImpressionRecord]
    rejects: list[Reject]
    n_rows: int


def write_rejects(path, rejects: list[Reject]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["line_no", "reason"])
        for r in rejects:
            w.writerow([r.line_no, r.reason])


def load_impressions(path, schema: ColumnSchema | None = None) -> LoadResult:
    """Load an impressions CSV into records, collecting malformed rows as rejects.

    Raises SchemaError if a required column is absent, CorpusError if more
    than half of the data rows are rejected.
    """
    schema = schema or ColumnSchema()
    records: list[ImpressionRecord] = []
    rejects: list[Reject] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in schema.required_columns() + list(schema.extra_feedback.values()):
            if col not in header:
                raise SchemaError(f"required column {col!r} not in header {header}")
        for line_no, row in enumerate(reader, start=2):
            try:
                records.append(_parse_row(row, schema))
            except (KeyError, TypeError, ValueError) as exc:
                rejects.append(Reject(line_no, str(exc)))
    n_rows = len(records) + len(rejects)
    if n_rows and len(rejects) > 0.5 * n_rows:
        raise CorpusError(f"{len(rejects)} of {n_rows} rows rejected; input looks malformed")
    return LoadResult(records, rejects, n_rows)


def _parse_row(row: dict, schema: ColumnSchema) -> ImpressionRecord:
    ts = float(row[schema.timestamp])
    if not math.isfinite(ts) or ts < 0:
        raise ValueError(f"bad timestamp {row[schema.timestamp]!r}")
    click = int(row[schema.click])
    if click not in (0, 1):
        raise ValueError(f"click must be 0/1, got {click}")
    extra = {}
    for name, col in schema.extra_feedback.items():
        val = float(row[col])
        if not math.isfinite(val):
            raise ValueError(f"non-finite feedback {col}={row[col]!r}")
        extra[name] = val
    return ImpressionRecord(row[schema.user_id], row[schema.item_id], ts, click, extra)


@dataclass
class ItemCatalog:
    """Item upload times plus new-item markers."""

    entries: dict[str, float]
    new_item_flags: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        for item, t in self.entries.items():
            if not math.isfinite(t):
                raise CorpusError(f"non-finite upload time for item {item!r}")
        unknown = set(self.new_item_flags) - set(self.entries)
        if unknown:
            raise CorpusError(f"new-item flags for unknown items: {sorted(unknown)[:5]}")

    @property
    def n_new(self) -> int:
        return sum(self.new_item_flags.values())


def load_items(path) -> ItemCatalog:
    """Read an items CSV with columns item_id,upload_time."""
    entries = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for col in ("item_id", "upload_time"):
            if col not in (reader.fieldnames or []):
                raise SchemaError(f"required column {col!r} not in items file")
        for row in reader:
            entries[row["item_id"]] = float(row["upload_time"])
    return ItemCatalog(entries)


def flag_new_items(catalog: ItemCatalog, window: tuple[float, float], quantile: float = 0.2) -> None:
    """Mark items uploaded in the latest `quantile` fraction of the window as new.

    Only items whose upload time falls inside `window` (the training window)
    participate; everything else is flagged False.
    """
    if not 0 < quantile <= 1:
        raise ValueError("quantile must be in (0, 1]")
    lo, hi = window
    in_window = {i: t for i, t in catalog.entries.items() if lo <= t < hi}
    flags = dict.fromkeys(catalog.entries, False)
    if in_window:
        threshold = float(np.quantile(np.array(list(in_window.values())), 1.0 - quantile))
        for item, t in in_window.items():
            if t >= threshold:
                flags[item] = True
    catalog.new_item_flags = flags


@dataclass
class ItemTimeline:
    """Per-item aggregates indexed by age slice (0 = upload slice).

    `feedback` always carries a "ctr" vector with NaN marking slices that
    received no exposure; extra feedback features are per-slice means.
    """

    item_id: str
    upload_slice: int
    exposures: np.ndarray
    clicks: np.ndarray
    feedback: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.exposures)


@dataclass
class TimelineBuild:
    timelines: dict[str, ItemTimeline]
    rejects: list[Reject]
    dropped_beyond_horizon: int
    n_accepted: int


def build_timelines(
    records: list[ImpressionRecord],
    catalog: ItemCatalog,
    grid: TimeGrid,
    horizon_slices: int,
) -> TimelineBuild:
    """Aggregate impressions into per-item age-slice timelines.

    Records before an item's upload time or for unknown items are rejected;
    records past the horizon are dropped silently (counted). Every catalog
    item gets a timeline, all-zero if it was never exposed.
    """
    if horizon_slices < 1:
        raise ValueError("horizon_slices must be >= 1")
    items = sorted(catalog.entries)
    index = {item: k for k, item in enumerate(items)}
    n = len(items)
    exposures = np.zeros((n, horizon_slices), dtype=np.int64)
    clicks = np.zeros((n, horizon_slices), dtype=np.int64)
    extra_names = sorted({name for rec in records for name in rec.extra_feedback})
    extra_sums = {name: np.zeros((n, horizon_slices)) for name in extra_names}

    rejects: list[Reject] = []
    dropped = 0
    accepted = 0
    for line_no, rec in enumerate(records, start=1):
        k = index.get(rec.item_id)
        if k is None:
            rejects.append(Reject(line_no, f"unknown item {rec.item_id!r}"))
            continue
        age = slice_index(rec.timestamp, catalog.entries[rec.item_id], grid)
        if age < 0:
            rejects.append(Reject(line_no, f"impression before upload of {rec.item_id!r}"))
            continue
        if age >= horizon_slices:
            dropped += 1
            continue
        exposures[k, age] += 1
        clicks[k, age] += rec.click
        for name, val in rec.extra_feedback.items():
            extra_sums[name][k, age] += val
        accepted += 1

    timelines = {}
    for item, k in index.items():
        exp = exposures[k]
        with np.errstate(invalid="ignore", divide="ignore"):
            ctr = np.where(exp > 0, clicks[k] / exp, np.nan)
        fb = {CTR: ctr}
        for name in extra_names:
            with np.errstate(invalid="ignore", divide="ignore"):
                fb[name] = np.where(exp > 0, extra_sums[name][k] / exp, np.nan)
        timelines[item] = ItemTimeline(
            item_id=item,
            upload_slice=slice_index(catalog.entries[item], grid.origin, grid),
            exposures=exp,
            clicks=clicks[k],
            feedback=fb,
        )
    return TimelineBuild(timelines, rejects, dropped, accepted)
