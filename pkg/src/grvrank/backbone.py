"""Pluggable relevance scorers: popularity, pairwise-ranking MF, external import.

Any of these can feed the reranker; the external-score channel is the
fidelity path for plugging in scores produced by a real recommendation
model offline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .corpus import ImpressionRecord, ItemCatalog


class BackboneError(ValueError):
    pass


class ScoreLookupError(KeyError):
    pass


@dataclass(frozen=True)
class Request:
    request_id: str
    user_id: str
    time: float


def _in_window(records, window):
    if window is None:
        return list(records)
    lo, hi = window
    return [r for r in records if lo <= r.timestamp < hi]


@dataclass
class PopularityScorer:
    """User-invariant smoothed-CTR table; unseen items take the 1/2 prior."""

    table: dict[str, float]

    kind = "popularity"

    def score(self, request: Request, candidates: list[str]) -> dict[str, float]:
        return {i: self.table.get(i, 0.5) for i in candidates}

    def score_array(self, requests: list[Request], candidates: list[str]) -> np.ndarray:
        row = np.array([self.table.get(i, 0.5) for i in candidates])
        return np.tile(row, (len(requests), 1))


def fit_popularity(
    records: list[ImpressionRecord], window: tuple[float, float] | None = None
) -> PopularityScorer:
    """score(item) = (clicks + 1) / (exposures + 2) over the window."""
    exposures: dict[str, int] = {}
    clicks: dict[str, int] = {}
    for r in _in_window(records, window):
        exposures[r.item_id] = exposures.get(r.item_id, 0) + 1
        clicks[r.item_id] = clicks.get(r.item_id, 0) + r.click
    table = {i: (clicks[i] + 1) / (exposures[i] + 2) for i in exposures}
    return PopularityScorer(table)


@dataclass
class MFScorer:
    """Latent-factor scorer trained with a pairwise ranking objective."""

    user_index: dict[str, int]
    item_index: dict[str, int]
    user_vecs: np.ndarray
    item_vecs: np.ndarray
    item_bias: np.ndarray
    epoch_losses: list[float] = field(default_factory=list)

    kind = "matrix_factorization"

    def _user_vec(self, user_id: str) -> np.ndarray:
        u = self.user_index.get(user_id)
        if u is None:
            return np.zeros(self.user_vecs.shape[1])
        return self.user_vecs[u]

    def score(self, request: Request, candidates: list[str]) -> dict[str, float]:
        pu = self._user_vec(request.user_id)
        out = {}
        for item in candidates:
            k = self.item_index.get(item)
            if k is None:
                out[item] = 0.0
            else:
                out[item] = float(pu @ self.item_vecs[k] + self.item_bias[k])
        return out

    def score_array(self, requests: list[Request], candidates: list[str]) -> np.ndarray:
        users = np.stack([self._user_vec(r.user_id) for r in requests])
        idx = np.array([self.item_index.get(i, -1) for i in candidates])
        vecs = np.where(idx[:, None] >= 0, self.item_vecs[idx], 0.0)
        bias = np.where(idx >= 0, self.item_bias[idx], 0.0)
        return users @ vecs.T + bias


def fit_mf(
    records: list[ImpressionRecord],
    catalog: ItemCatalog | None = None,
    window: tuple[float, float] | None = None,
    dim: int = 32,
    lr: float = 0.01,
    epochs: int = 10,
    neg_per_pos: int = 4,
    l2_reg: float = 0.001,
    seed: int = 0,
) -> MFScorer:
    """Train MF by SGD on (clicked, unclicked) item pairs; seed-deterministic.

    Negatives are sampled uniformly over items the user did not click in the
    window. The per-epoch mean pairwise loss is kept in `epoch_losses`.
    """
    recs = _in_window(records, window)
    positives = [(r.user_id, r.item_id) for r in recs if r.click == 1]
    if not positives:
        raise BackboneError("no positive interactions; cannot train MF")

    users = sorted({u for u, _ in positives})
    item_universe = sorted(catalog.entries) if catalog else sorted({r.item_id for r in recs})
    user_index = {u: k for k, u in enumerate(users)}
    item_index = {i: k for k, i in enumerate(item_universe)}

    clicked_by_user: list[set[int]] = [set() for _ in users]
    pos_u = np.array([user_index[u] for u, _ in positives], dtype=np.int64)
    pos_i = np.array([item_index[i] for _, i in positives], dtype=np.int64)
    for u, i in zip(pos_u, pos_i):
        clicked_by_user[u].add(int(i))

    rng = np.random.default_rng(seed)
    n_items = len(item_universe)
    user_vecs = rng.normal(0.0, 0.01, size=(len(users), dim))
    item_vecs = rng.normal(0.0, 0.01, size=(n_items, dim))
    item_bias = np.zeros(n_items)

    base_u = np.repeat(pos_u, neg_per_pos)
    base_i = np.repeat(pos_i, neg_per_pos)
    losses = []
    for _ in range(epochs):
        perm = rng.permutation(len(base_u))
        u_ep = base_u[perm]
        i_ep = base_i[perm]
        j_ep = rng.integers(0, n_items, size=len(u_ep))
        # rejection-resample negatives that the user actually clicked
        bad = np.array([j in clicked_by_user[u] for u, j in zip(u_ep, j_ep)])
        while bad.any():
            j_ep[bad] = rng.integers(0, n_items, size=int(bad.sum()))
            bad_idx = np.nonzero(bad)[0]
            still = np.array([j_ep[k] in clicked_by_user[u_ep[k]] for k in bad_idx])
            bad = np.zeros(len(u_ep), dtype=bool)
            bad[bad_idx[still]] = True
        total = _kernels.mf_epoch(user_vecs, item_vecs, item_bias, u_ep, i_ep, j_ep, lr, l2_reg)
        losses.append(total / len(u_ep))

    return MFScorer(user_index, item_index, user_vecs, item_vecs, item_bias, losses)


@dataclass
class ExternalScorer:
    """Verbatim (request_id, item_id) -> score passthrough."""

    table: dict[tuple[str, str], float]

    kind = "external"

    def score(self, request: Request, candidates: list[str]) -> dict[str, float]:
        out = {}
        for item in candidates:
            key = (request.request_id, item)
            if key not in self.table:
                raise ScoreLookupError(
                    f"no external score for request {request.request_id!r}, item {item!r}"
                )
            out[item] = self.table[key]
        return out

    def score_array(self, requests: list[Request], candidates: list[str]) -> np.ndarray:
        return np.array([[self.score(r, candidates)[i] for i in candidates] for r in requests])


def load_external_scores(path) -> ExternalScorer:
    """Read a TSV request_id,item_id,score into an exact-lookup scorer."""
    table = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            table[(row["request_id"], row["item_id"])] = float(row["score"])
    return ExternalScorer(table)


def score(scorer, request: Request, candidates: list[str]) -> dict[str, float]:
    """Score candidates for one request with any scorer kind."""
    result = scorer.score(request, candidates)
    for item, s in result.items():
        if not np.isfinite(s):
            raise BackboneError(f"non-finite score for item {item!r}")
    return result
