"""Synthetic feed corpora with controlled timeliness decay and snowball exposure.

Items carry a latent quality and an exponential timeliness decay (a fast
"headline" class vs a slow long-tail class); click probability is
quality * 2^(-age / half_life) while the item's content is still current,
modulated by a zero-mean per-user taste for one class or the other. Each
item is additionally superseded at a random exponential lifetime (scaled by
its half-life), after which clicks stop: item death is genuinely stochastic
rather than a deterministic function of the early trajectory. Each time
slice allocates its exposure slots by weighted sampling without replacement
with weights 1 + snowball_strength * accumulated_clicks, reproducing the
self-amplifying exposure dynamic while keeping one exposure per item per
slice. Output files are byte-identical for a fixed seed, and the
ground-truth table makes oracle assertions possible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

FAST = "fast"
SLOW = "slow"


@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 10_000
    n_users: int = 2_000
    horizon_slices: int = 216
    arrival_rate: float | None = None   # items per slice; None spreads over the horizon
    quality_a: float = 2.0
    quality_b: float = 5.0
    decay_mix: float = 0.5              # fraction of fast-decay (headline) items
    half_life_fast: float = 12.0
    half_life_slow: float = 96.0
    headline_lift: float = 2.0          # quality skew for the fast class (1 = none)
    lifetime_scale: float = 1.5         # mean supersession age = scale * half_life
    user_taste: float = 0.5             # zero-mean class-preference noise amplitude
    serving_half_life: float = 16.0     # recency bias of the serving policy, slices
    serving_age_cap: int | None = None  # optional hard age cutoff for serving
    warmup_slices: int = 48             # unlogged pre-history so slice 0 starts warm
    snowball_strength: float = 5.0
    requests_per_slice: int = 926
    slice_seconds: int = 3600
    seed: int = 0

    def __post_init__(self):
        if min(self.n_items, self.n_users, self.horizon_slices, self.requests_per_slice) < 1:
            raise ValueError("counts must be positive")
        if not 0.0 <= self.decay_mix <= 1.0:
            raise ValueError("decay_mix must be in [0, 1]")
        if self.snowball_strength < 0:
            raise ValueError("snowball_strength must be >= 0")
        if self.headline_lift < 1.0:
            raise ValueError("headline_lift must be >= 1")
        if self.lifetime_scale <= 0:
            raise ValueError("lifetime_scale must be positive")
        if self.serving_half_life <= 0:
            raise ValueError("serving_half_life must be positive")
        if not 0.0 <= self.user_taste < 1.0:
            raise ValueError("user_taste must be in [0, 1)")
        if self.warmup_slices < 0:
            raise ValueError("warmup_slices must be >= 0")


@dataclass
class SynthResult:
    item_ids: list[str]
    upload_slices: np.ndarray
    quality: np.ndarray
    half_life: np.ndarray
    decay_class: list[str]
    n_impressions: int


def generate(config: SynthConfig, impressions_path, items_path, ground_truth_path) -> SynthResult:
    """Write impressions.csv, items.csv and ground_truth.tsv for one corpus.

    A warm-up pre-history (hidden items uploaded before slice 0) keeps the
    serving pool in steady state from the first logged slice, so emitted
    items face statistically identical competition whenever they upload.
    Hidden items consume exposure slots but never appear in the output
    files, like traffic outside the collected cohort.
    """
    rng = np.random.default_rng(config.seed)
    n = config.n_items

    if config.arrival_rate:
        span = min(config.horizon_slices, max(1, int(np.ceil(n / config.arrival_rate))))
    else:
        span = config.horizon_slices
    rate = n / span
    n_hidden = int(round(rate * config.warmup_slices))
    hidden_uploads = np.sort(rng.integers(-config.warmup_slices, 0, size=n_hidden))
    emitted_uploads = np.sort(rng.integers(0, span, size=n))
    upload_slices = np.concatenate([hidden_uploads, emitted_uploads])
    n_total = n_hidden + n

    quality = rng.beta(config.quality_a, config.quality_b, size=n_total)
    fast = rng.random(n_total) < config.decay_mix
    # headline items: fast decay but skewed toward high quality
    quality = np.where(fast, quality ** (1.0 / config.headline_lift), quality)
    half_life = np.where(fast, config.half_life_fast, config.half_life_slow)
    lifetime = rng.exponential(config.lifetime_scale * half_life)
    class_sign = np.where(fast, 1.0, -1.0)
    taste = rng.uniform(-config.user_taste, config.user_taste, size=config.n_users)

    width = len(str(n - 1))
    item_ids = [f"i{k:0{width}d}" for k in range(n)]  # emitted items only
    user_width = len(str(config.n_users - 1))

    cum_clicks = np.zeros(n_total)
    rows = []
    for s in range(-config.warmup_slices, config.horizon_slices):
        first = 0
        if config.serving_age_cap is not None:
            first = int(np.searchsorted(upload_slices, s - config.serving_age_cap, side="right"))
        last = int(np.searchsorted(upload_slices, s, side="right"))
        if last <= first:
            continue
        pool = np.arange(first, last)
        m = min(config.requests_per_slice, len(pool))
        recency = np.exp2(-(s - upload_slices[pool]) / config.serving_half_life)
        weights = (1.0 + config.snowball_strength * cum_clicks[pool]) * recency
        # weighted sampling without replacement (exponential-keys method):
        # one exposure slot per item per slice
        keys = rng.random(len(pool)) ** (1.0 / weights)
        pick = np.argpartition(-keys, m - 1)[:m] if m < len(pool) else np.arange(len(pool))
        drawn = pool[np.sort(pick)]
        users = rng.integers(0, config.n_users, size=m)
        ages = s - upload_slices[drawn]
        base = quality[drawn] * np.exp2(-ages / half_life[drawn]) * (ages < lifetime[drawn])
        p_click = np.clip(base * (1.0 + taste[users] * class_sign[drawn]), 0.0, 1.0)
        clicked = rng.random(m) < p_click
        if s >= 0:
            emitted = drawn >= n_hidden
            ts = s * config.slice_seconds + rng.integers(0, config.slice_seconds, size=m)
            order = np.argsort(ts, kind="stable")
            for k in order:
                if emitted[k]:
                    rows.append((users[k], drawn[k] - n_hidden, int(ts[k]), int(clicked[k])))
        cum_clicks[drawn[clicked]] += 1.0

    with open(impressions_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "timestamp", "click"])
        for u, i, ts, c in rows:
            w.writerow([f"u{u:0{user_width}d}", item_ids[i], ts, c])

    with open(items_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "upload_time"])
        for k, item in enumerate(item_ids):
            w.writerow([item, int(emitted_uploads[k]) * config.slice_seconds])

    emitted_fast = fast[n_hidden:]
    decay_class = [FAST if f else SLOW for f in emitted_fast]
    with open(ground_truth_path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["item_id", "quality", "decay_class", "half_life", "lifetime"])
        for k, item in enumerate(item_ids):
            w.writerow([item, repr(float(quality[n_hidden + k])), decay_class[k],
                        repr(float(half_life[n_hidden + k])), repr(float(lifetime[n_hidden + k]))])

    return SynthResult(
        item_ids,
        emitted_uploads,
        quality[n_hidden:],
        half_life[n_hidden:],
        decay_class,
        len(rows),
    )
