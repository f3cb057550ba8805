"""Proportional-hazards fitting of item residual-value curves.

Covariates are each item's per-slice feedback over its observation window,
centered by per-slice training means. A Newton solver maximizes the Breslow
partial likelihood (with a small ridge term for degenerate designs); the
baseline cumulative hazard comes from the Breslow estimator. An item's
residual-value curve over the prediction window is then

    grv(t) = exp(-H0(t) * exp(alpha . (x - means)))

which lives in (0, 1], is non-increasing in t, and preserves cross-item
ordering at every age.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .corpus import CTR, ItemTimeline
from .labeler import LabelSet

log = logging.getLogger(__name__)


class FitError(ValueError):
    """Design cannot be fitted (no rows, no events, dimension mismatch)."""


@dataclass
class DesignMatrix:
    """Centered covariates with survival outcomes, one row per item."""

    X: np.ndarray              # (n, p) centered
    feature_means: np.ndarray  # (p,)
    item_ids: list[str]
    event_ages: np.ndarray     # (n,) observed age; censor age for censored rows
    events: np.ndarray         # (n,) bool
    t_obs: int
    horizon_slices: int
    feature_names: list[str] = field(default_factory=lambda: [CTR])

    @property
    def n_items(self) -> int:
        return self.X.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class CoxOptions:
    tol: float = 1e-8
    max_iter: int = 100
    ridge_lambda: float = 1e-6


@dataclass
class FitDiagnostics:
    iterations: int
    final_nll: float
    converged: bool


@dataclass
class CoxModel:
    alpha: np.ndarray
    feature_means: np.ndarray
    baseline_cum_hazard: np.ndarray  # indexed by age slice over [0, t_obs + t_pred)
    t_obs: int
    t_pred: int
    feature_names: list[str]
    diagnostics: FitDiagnostics

    @property
    def horizon_slices(self) -> int:
        return self.t_obs + self.t_pred


@dataclass
class GrvCurve:
    """Residual-value curve over ages [t_obs, t_obs + t_pred)."""

    item_id: str
    t_obs: int
    values: np.ndarray

    def value_at(self, age: int) -> float:
        """Curve value at an age slice, clamped to the prediction window."""
        idx = min(max(int(age) - self.t_obs, 0), len(self.values) - 1)
        return float(self.values[idx])


def covariate_row(timeline: ItemTimeline, t_obs: int, features: list[str]) -> np.ndarray:
    """Raw (uncentered) covariates: per-slice feedback over [0, t_obs), NaN imputed to 0."""
    if len(timeline) < t_obs:
        raise FitError(f"timeline of {timeline.item_id!r} shorter than observation window")
    parts = [np.nan_to_num(timeline.feedback[f][:t_obs], nan=0.0) for f in features]
    return np.concatenate(parts)


def build_design_matrix(
    timelines: dict[str, ItemTimeline],
    labels: LabelSet,
    t_obs: int,
    features: list[str] | None = None,
    drop_censored: bool = False,
) -> DesignMatrix:
    """Assemble the centered design from labeled timelines.

    Censored items enter as right-censored at the horizon unless
    `drop_censored` reproduces the stricter events-only training set. Items
    whose event falls inside the observation window keep their observed
    (zero-padded) covariates.
    """
    if t_obs < 1:
        raise FitError("t_obs must be >= 1")
    features = list(features) if features else [CTR]
    horizon = labels.horizon_slices
    item_ids = sorted(labels.events)
    if not drop_censored:
        item_ids += sorted(labels.censored)
    item_ids = [i for i in item_ids if i in timelines]
    if not item_ids:
        raise FitError("no usable items in design")

    rows = np.stack([covariate_row(timelines[i], t_obs, features) for i in item_ids])
    means = rows.mean(axis=0)
    ages = np.array(
        [labels.events.get(i, horizon) for i in item_ids], dtype=np.int64
    )
    events = np.array([i in labels.events for i in item_ids])
    names = [f"{f}@{t}" for f in features for t in range(t_obs)]
    return DesignMatrix(rows - means, means, item_ids, ages, events, t_obs, horizon, names)


def neg_log_partial_likelihood(
    alpha: np.ndarray, design: DesignMatrix, ridge_lambda: float = 0.0
):
    """Penalized Breslow negative log partial likelihood, gradient and Hessian.

    The per-item linear predictors are shifted by their max before
    exponentiation; the shift cancels exactly in the partial likelihood, so
    this only guards against overflow.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (design.n_covariates,):
        raise FitError(f"alpha has shape {alpha.shape}, expected ({design.n_covariates},)")
    order = np.argsort(-design.event_ages, kind="stable")
    X = np.ascontiguousarray(design.X[order])
    ages = design.event_ages[order]
    events = design.events[order].astype(np.uint8)
    lp = X @ alpha
    lps = lp - lp.max()
    w = np.exp(lps)
    nll, grad, hess = _kernels.cox_breslow_terms(X, ages, events, w, lps)
    if ridge_lambda:
        nll += 0.5 * ridge_lambda * float(alpha @ alpha)
        grad = grad + ridge_lambda * alpha
        hess = hess + ridge_lambda * np.eye(design.n_covariates)
    return nll, grad, hess


def _breslow_baseline(alpha: np.ndarray, design: DesignMatrix, horizon: int) -> np.ndarray:
    """Breslow cumulative baseline hazard on the age grid [0, horizon).

    Right-continuous step function: the value at age t includes events at t;
    it is held flat past the last event age.
    """
    order = np.argsort(-design.event_ages, kind="stable")
    ages = design.event_ages[order]
    events = design.events[order]
    lp = design.X[order] @ alpha
    shift = lp.max()
    w = np.exp(lp - shift)

    increments = np.zeros(horizon)
    s0 = 0.0
    i = 0
    n = len(ages)
    while i < n:
        a = ages[i]
        j = i
        while j < n and ages[j] == a:
            s0 += w[j]
            j += 1
        d = int(events[i:j].sum())
        if d and 0 <= a < horizon:
            increments[a] = d / (s0 * np.exp(shift))
        i = j
    return np.cumsum(increments)


def fit_cox(design: DesignMatrix, options: CoxOptions | None = None, t_pred: int | None = None) -> CoxModel:
    """Newton-Raphson fit from alpha = 0 with step-halving on objective increase."""
    opts = options or CoxOptions()
    if not design.events.any():
        raise FitError("no events in design; cannot fit")
    if t_pred is None:
        t_pred = design.horizon_slices - design.t_obs
    horizon = design.t_obs + t_pred

    alpha = np.zeros(design.n_covariates)
    value, grad, hess = neg_log_partial_likelihood(alpha, design, opts.ridge_lambda)
    converged = False
    iterations = 0
    for iterations in range(1, opts.max_iter + 1):
        try:
            delta = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            delta = np.linalg.solve(hess + 1e-8 * np.eye(len(grad)), grad)
        step = 1.0
        for _ in range(30):
            cand = alpha - step * delta
            cand_value, cand_grad, cand_hess = neg_log_partial_likelihood(
                cand, design, opts.ridge_lambda
            )
            if cand_value <= value:
                break
            step *= 0.5
        else:
            converged = True  # no descent direction left: at a minimum
            break
        decrease = (value - cand_value) / max(abs(value), 1.0)
        alpha, value, grad, hess = cand, cand_value, cand_grad, cand_hess
        if decrease < opts.tol:
            converged = True
            break
    if not converged:
        log.warning("Newton did not converge in %d iterations (nll=%.6g)", iterations, value)

    baseline = _breslow_baseline(alpha, design, horizon)
    return CoxModel(
        alpha=alpha,
        feature_means=design.feature_means.copy(),
        baseline_cum_hazard=baseline,
        t_obs=design.t_obs,
        t_pred=t_pred,
        feature_names=list(design.feature_names),
        diagnostics=FitDiagnostics(iterations, float(value), converged),
    )


def _linear_predictor(model: CoxModel, raw_covariates: np.ndarray) -> float:
    return float(model.alpha @ (raw_covariates - model.feature_means))


def _features_of(model: CoxModel) -> list[str]:
    seen: list[str] = []
    for name in model.feature_names:
        base = name.rsplit("@", 1)[0]
        if base not in seen:
            seen.append(base)
    return seen


def predict_grv(
    model: CoxModel,
    timeline: ItemTimeline,
    t_obs: int | None = None,
    t_pred: int | None = None,
) -> GrvCurve:
    """Unconditional survival curve over the prediction window for one item."""
    t_obs = model.t_obs if t_obs is None else t_obs
    t_pred = model.t_pred if t_pred is None else t_pred
    x = covariate_row(timeline, t_obs, _features_of(model))
    lp = _linear_predictor(model, x)
    h = model.baseline_cum_hazard[t_obs : t_obs + t_pred]
    return GrvCurve(timeline.item_id, t_obs, np.exp(-h * np.exp(lp)))


def predict_grv_batch(model: CoxModel, timelines: dict[str, ItemTimeline]) -> dict[str, GrvCurve]:
    """Vectorized `predict_grv` over many items (skips too-short timelines)."""
    features = _features_of(model)
    ids = [i for i in sorted(timelines) if len(timelines[i]) >= model.t_obs]
    if not ids:
        return {}
    rows = np.stack([covariate_row(timelines[i], model.t_obs, features) for i in ids])
    lps = (rows - model.feature_means) @ model.alpha
    h = model.baseline_cum_hazard[model.t_obs : model.t_obs + model.t_pred]
    curves = np.exp(-np.exp(lps)[:, None] * h[None, :])
    return {i: GrvCurve(i, model.t_obs, curves[k]) for k, i in enumerate(ids)}


def save_model(path, model: CoxModel) -> None:
    payload = {
        "alpha": model.alpha.tolist(),
        "feature_means": model.feature_means.tolist(),
        "baseline_cum_hazard": model.baseline_cum_hazard.tolist(),
        "t_obs": model.t_obs,
        "t_pred": model.t_pred,
        "feature_names": model.feature_names,
        "diagnostics": {
            "iterations": model.diagnostics.iterations,
            "final_nll": model.diagnostics.final_nll,
            "converged": model.diagnostics.converged,
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def load_model(path) -> CoxModel:
    with open(path) as fh:
        payload = json.load(fh)
    diag = payload["diagnostics"]
    return CoxModel(
        alpha=np.array(payload["alpha"]),
        feature_means=np.array(payload["feature_means"]),
        baseline_cum_hazard=np.array(payload["baseline_cum_hazard"]),
        t_obs=payload["t_obs"],
        t_pred=payload["t_pred"],
        feature_names=payload["feature_names"],
        diagnostics=FitDiagnostics(diag["iterations"], diag["final_nll"], diag["converged"]),
    )


def save_grv(path, curves: dict[str, GrvCurve]) -> None:
    """Write curves as TSV item_id,age_slice,grv (one row per predicted age)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["item_id", "age_slice", "grv"])
        for item in sorted(curves):
            c = curves[item]
            for k, v in enumerate(c.values):
                w.writerow([item, c.t_obs + k, repr(float(v))])


def load_grv(path) -> dict[str, GrvCurve]:
    by_item: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            by_item.setdefault(row["item_id"], []).append(
                (int(row["age_slice"]), float(row["grv"]))
            )
    curves = {}
    for item, pairs in by_item.items():
        pairs.sort()
        ages = [a for a, _ in pairs]
        curves[item] = GrvCurve(item, ages[0], np.array([v for _, v in pairs]))
    return curves
