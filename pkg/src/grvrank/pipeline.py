"""Stage orchestration: artifacts, manifests, and the end-to-end chain.

Each stage reads only declared input files, writes its artifacts plus a
manifest (config hash, seed, input hashes), and refuses to overwrite
results produced under a different config unless forced. Reruns with the
same config and seed are bit-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import corpus, evaluate, grv_model, labeler, rerank, synthgen
from .config import PipelineConfig, config_hash

GAMMA_GRID = [round(0.1 * g, 1) for g in range(6)]  # 0.0 .. 0.5


class PipelineError(RuntimeError):
    pass


# config sections each stage's outputs depend on
_STAGE_KEYS = {
    "synth": ["synth", "seed", "outdir"],
    "label": ["impressions", "items", "slice_seconds", "origin", "t_obs", "t_pred",
              "vitality", "min_label_exposures", "outdir"],
    "fit": ["impressions", "items", "slice_seconds", "origin", "t_obs", "t_pred",
            "vitality", "cox", "drop_censored", "outdir"],
    "predict": ["impressions", "items", "slice_seconds", "origin", "t_obs", "t_pred", "outdir"],
    "rerank": ["impressions", "items", "slice_seconds", "origin", "t_obs", "t_pred",
               "backbone", "rerank", "split", "seed", "outdir"],
    "eval": ["impressions", "items", "slice_seconds", "origin", "t_obs", "t_pred",
             "rerank", "split", "seed", "new_item_quantile", "fairness", "bucket", "outdir"],
    "grid-search": ["impressions", "items", "slice_seconds", "origin", "t_obs", "t_pred",
                    "backbone", "rerank", "split", "seed", "new_item_quantile", "outdir"],
}


def _paths(cfg: PipelineConfig) -> dict[str, Path]:
    out = Path(cfg.outdir)
    return {
        "outdir": out,
        "impressions": Path(cfg.impressions) if cfg.impressions else out / "impressions.csv",
        "items": Path(cfg.items) if cfg.items else out / "items.csv",
        "ground_truth": out / "ground_truth.tsv",
        "rejects": out / "rejects.csv",
        "labels": out / "labels.tsv",
        "model": out / "model.json",
        "grv": out / "grv.tsv",
        "rankings": out / "rankings.tsv",
        "rerank_stats": out / "rerank_stats.json",
        "metrics": out / "metrics.json",
        "group_exposure": out / "group_exposure.tsv",
        "grv_buckets": out / "grv_buckets.tsv",
        "gamma_grid": out / "gamma_grid.tsv",
        "grid_selection": out / "grid_selection.json",
    }


def _file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _require(stage: str, needed: dict[str, Path], produced_by: str) -> None:
    missing = [str(p) for p in needed.values() if not p.exists()]
    if missing:
        raise PipelineError(
            f"stage {stage!r} is missing inputs {missing}; run {produced_by!r} first"
        )


def _guard_manifest(cfg: PipelineConfig, stage: str, force: bool) -> str:
    chash = config_hash(cfg, _STAGE_KEYS[stage])
    manifest = Path(cfg.outdir) / f"manifest_{stage.replace('-', '_')}.json"
    if manifest.exists() and not force:
        with open(manifest) as fh:
            prior = json.load(fh)
        if prior.get("config_hash") != chash:
            raise PipelineError(
                f"config for stage {stage!r} changed since last run; rerun with --force"
            )
    return chash


def _write_manifest(cfg, stage: str, chash: str, inputs: dict[str, Path], outputs: list[Path]):
    payload = {
        "stage": stage,
        "config_hash": chash,
        "seed": cfg.seed,
        "inputs": {str(p): _file_hash(p) for p in inputs.values()},
        "outputs": [str(p) for p in outputs],
        "created": datetime.now(timezone.utc).isoformat(),
    }
    path = Path(cfg.outdir) / f"manifest_{stage.replace('-', '_')}.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def stage_synth(cfg: PipelineConfig, force: bool = False) -> dict:
    chash = _guard_manifest(cfg, "synth", force)
    p = _paths(cfg)
    p["outdir"].mkdir(parents=True, exist_ok=True)
    result = synthgen.generate(cfg.synth, p["impressions"], p["items"], p["ground_truth"])
    _write_manifest(cfg, "synth", chash, {}, [p["impressions"], p["items"], p["ground_truth"]])
    return {"n_items": len(result.item_ids), "n_impressions": result.n_impressions}


def _load_corpus(cfg: PipelineConfig):
    p = _paths(cfg)
    grid = corpus.TimeGrid(cfg.slice_seconds, cfg.origin)
    loaded = corpus.load_impressions(p["impressions"])
    catalog = corpus.load_items(p["items"])
    return loaded, catalog, grid


def _log_end_slice(records, grid) -> int:
    last = max(r.timestamp for r in records)
    return corpus.slice_index(last, grid.origin, grid) + 1


def stage_label(cfg: PipelineConfig, force: bool = False) -> dict:
    p = _paths(cfg)
    _require("label", {"impressions": p["impressions"], "items": p["items"]}, "synth")
    chash = _guard_manifest(cfg, "label", force)
    loaded, catalog, grid = _load_corpus(cfg)
    build = corpus.build_timelines(loaded.records, catalog, grid, cfg.horizon_slices)
    corpus.write_rejects(p["rejects"], loaded.rejects + build.rejects)

    # labelable: full label window inside the log, and enough traffic that the
    # vitality labels track content decay rather than pure starvation
    log_end = _log_end_slice(loaded.records, grid)
    eligible = {
        i: tl
        for i, tl in build.timelines.items()
        if tl.upload_slice + cfg.horizon_slices <= log_end
        and int(tl.exposures.sum()) >= cfg.min_label_exposures
    }
    if not eligible:
        raise PipelineError(
            "no item has a complete, sufficiently-exposed label window inside the log; "
            "shorten t_obs/t_pred, lower min_label_exposures, or extend the log"
        )
    populations = labeler.SlicePopulations(build.timelines, cfg.vitality.feedback_feature)
    labels = labeler.label_corpus(eligible, cfg.vitality, populations)
    labeler.save_labels(p["labels"], labels)
    _write_manifest(cfg, "label", chash,
                    {"impressions": p["impressions"], "items": p["items"]},
                    [p["labels"], p["rejects"]])
    return {
        "n_labeled": len(labels),
        "n_events": len(labels.events),
        "censoring_rate": labels.censoring_rate,
    }


def stage_fit(cfg: PipelineConfig, force: bool = False) -> dict:
    p = _paths(cfg)
    _require("fit", {"impressions": p["impressions"], "items": p["items"],
                     "labels": p["labels"]}, "label")
    chash = _guard_manifest(cfg, "fit", force)
    loaded, catalog, grid = _load_corpus(cfg)
    build = corpus.build_timelines(loaded.records, catalog, grid, cfg.horizon_slices)
    labels = labeler.load_labels(p["labels"], cfg.horizon_slices)
    design = grv_model.build_design_matrix(
        build.timelines, labels, cfg.t_obs, drop_censored=cfg.drop_censored
    )
    model = grv_model.fit_cox(design, cfg.cox, t_pred=cfg.t_pred)
    grv_model.save_model(p["model"], model)
    _write_manifest(cfg, "fit", chash,
                    {"impressions": p["impressions"], "items": p["items"], "labels": p["labels"]},
                    [p["model"]])
    return {
        "n_rows": design.n_items,
        "iterations": model.diagnostics.iterations,
        "converged": model.diagnostics.converged,
        "final_nll": model.diagnostics.final_nll,
    }


def stage_predict(cfg: PipelineConfig, force: bool = False) -> dict:
    p = _paths(cfg)
    _require("predict", {"impressions": p["impressions"], "items": p["items"],
                         "model": p["model"]}, "fit")
    chash = _guard_manifest(cfg, "predict", force)
    loaded, catalog, grid = _load_corpus(cfg)
    build = corpus.build_timelines(loaded.records, catalog, grid, cfg.horizon_slices)
    model = grv_model.load_model(p["model"])

    # curves only for items whose observation window is fully observed
    log_end = _log_end_slice(loaded.records, grid)
    observed = {
        i: tl for i, tl in build.timelines.items() if tl.upload_slice + model.t_obs <= log_end
    }
    curves = grv_model.predict_grv_batch(model, observed)
    grv_model.save_grv(p["grv"], curves)
    _write_manifest(cfg, "predict", chash,
                    {"impressions": p["impressions"], "items": p["items"], "model": p["model"]},
                    [p["grv"]])
    return {"n_curves": len(curves)}


def _train_window(cfg: PipelineConfig) -> tuple[float, float]:
    d0, d1 = cfg.split.train_days
    return (cfg.origin + d0 * cfg.day_seconds, cfg.origin + d1 * cfg.day_seconds)


def _eval_window(cfg: PipelineConfig) -> tuple[float, float]:
    d0, d1 = cfg.split.eval_days
    return (cfg.origin + d0 * cfg.day_seconds, cfg.origin + d1 * cfg.day_seconds)


def rec_pool(cfg: PipelineConfig, catalog) -> list[str]:
    """Recommendation candidate pool: items uploaded inside the training window.

    Mirrors the cohort-based protocol (recommendations are made over the
    items the backbone could have seen); later uploads are out of pool.
    """
    lo, hi = _train_window(cfg)
    return sorted(i for i, t in catalog.entries.items() if lo <= t < hi)


def build_requests(cfg: PipelineConfig, records, pool: list[str] | None = None):
    """Clicked eval-window impressions become requests; deterministic val/test split.

    Returns (val_requests, test_requests, truth) where truth maps request_id
    to its single positive item (test-all protocol). When a candidate pool is
    given, only clicks on pool items become requests.
    """
    lo, hi = _eval_window(cfg)
    keep = None if pool is None else set(pool)
    positives = [
        (f"r{idx:07d}", r)
        for idx, r in enumerate(records)
        if r.click == 1 and lo <= r.timestamp < hi and (keep is None or r.item_id in keep)
    ]
    rng = np.random.default_rng([cfg.seed, 104729])
    to_val = rng.random(len(positives)) < cfg.split.val_fraction
    val, test, truth = [], [], {}
    for (rid, r), v in zip(positives, to_val):
        req = bb.Request(rid, r.user_id, r.timestamp)
        (val if v else test).append(req)
        truth[rid] = r.item_id
    return val, test, truth


def _fit_backbone(cfg: PipelineConfig, records, catalog):
    window = _train_window(cfg)
    kind = cfg.backbone.kind
    if kind == "popularity":
        return bb.fit_popularity(records, window)
    if kind == "mf":
        return bb.fit_mf(
            records,
            catalog,
            window=window,
            dim=cfg.backbone.dim,
            lr=cfg.backbone.lr,
            epochs=cfg.backbone.epochs,
            neg_per_pos=cfg.backbone.neg_per_pos,
            l2_reg=cfg.backbone.l2_reg,
            seed=cfg.seed,
        )
    if not cfg.backbone.external_path:
        raise PipelineError("external backbone requires backbone.external_path")
    return bb.load_external_scores(cfg.backbone.external_path)


def _load_curves(cfg: PipelineConfig, p) -> dict:
    if cfg.rerank.timeliness_source != rerank.GRV:
        return {}
    _require("rerank", {"grv": p["grv"]}, "predict")
    return grv_model.load_grv(p["grv"])


def stage_rerank(cfg: PipelineConfig, force: bool = False) -> dict:
    p = _paths(cfg)
    _require("rerank", {"impressions": p["impressions"], "items": p["items"]}, "synth")
    chash = _guard_manifest(cfg, "rerank", force)
    loaded, catalog, grid = _load_corpus(cfg)
    curves = _load_curves(cfg, p)
    pool = rec_pool(cfg, catalog)
    _, test, _ = build_requests(cfg, loaded.records, pool)
    if not test:
        raise PipelineError("no test requests in the eval window")

    scorer = _fit_backbone(cfg, loaded.records, catalog)
    ranker = rerank.BatchRanker(pool, catalog, grid, cfg.t_obs, curves)
    bbm = scorer.score_array(test, ranker.candidates)
    stats = rerank.RerankStats()
    rankings = [ranker.rank(req, bbm[i], cfg.rerank, stats) for i, req in enumerate(test)]
    rerank.save_rankings(p["rankings"], rankings)
    with open(p["rerank_stats"], "w") as fh:
        json.dump(dataclasses.asdict(stats) | {"n_requests": len(test)}, fh, indent=1,
                  sort_keys=True)
    inputs = {"impressions": p["impressions"], "items": p["items"]}
    if curves:
        inputs["grv"] = p["grv"]
    _write_manifest(cfg, "rerank", chash, inputs, [p["rankings"], p["rerank_stats"]])
    return {"n_requests": len(test), **dataclasses.asdict(stats)}


def _future_ctr(timelines, from_age: int, min_exposures: int) -> dict[str, float]:
    out = {}
    for item, tl in timelines.items():
        exp = int(tl.exposures[from_age:].sum())
        if exp >= max(min_exposures, 1):
            out[item] = float(tl.clicks[from_age:].sum() / exp)
    return out


def _historical_ctr(timelines, t_obs: int) -> dict[str, float]:
    out = {}
    for item, tl in timelines.items():
        exp = int(tl.exposures[:t_obs].sum())
        if exp > 0:
            out[item] = float(tl.clicks[:t_obs].sum() / exp)
    return out


def _metrics_for(rankings, truth, catalog, ks):
    accuracy = evaluate.hr_ndcg(rankings, truth, ks)
    cover = evaluate.coverage(rankings, catalog, ks)
    return {
        k: {
            "hr": accuracy[k][0],
            "ndcg": accuracy[k][1],
            "cov": cover[k][0],
            "n_cov": cover[k][1],
        }
        for k in ks
    }


def stage_eval(cfg: PipelineConfig, force: bool = False) -> dict:
    p = _paths(cfg)
    _require("eval", {"impressions": p["impressions"], "items": p["items"],
                      "rankings": p["rankings"]}, "rerank")
    chash = _guard_manifest(cfg, "eval", force)
    loaded, catalog, grid = _load_corpus(cfg)
    corpus.flag_new_items(catalog, _train_window(cfg), cfg.new_item_quantile)
    pool = rec_pool(cfg, catalog)
    pool_catalog = corpus.ItemCatalog(
        {i: catalog.entries[i] for i in pool},
        {i: catalog.new_item_flags[i] for i in pool},
    )
    _, _, truth = build_requests(cfg, loaded.records, pool)
    rankings = rerank.load_rankings(p["rankings"])

    ks = list(cfg.rerank.k_list)
    per_k = _metrics_for(rankings, truth, pool_catalog, ks)

    # upload-group exposure report (earliest-uploads protocol)
    f = cfg.fairness
    sub_items = {
        i: t
        for i, t in catalog.entries.items()
        if t < cfg.origin + f.upload_max_slice * cfg.slice_seconds
    }
    report = []
    if sub_items:
        sub_catalog = corpus.ItemCatalog(dict(sub_items))
        window = (cfg.origin + f.window_start_slice * cfg.slice_seconds, float("inf"))
        report = evaluate.group_exposure_report(loaded.records, sub_catalog, f.n_groups, window)
        evaluate.write_group_report(p["group_exposure"], report)

    # curve bucket evaluation vs the historical-CTR baseline
    bucket_block = {}
    if p["grv"].exists():
        build = corpus.build_timelines(loaded.records, catalog, grid, cfg.horizon_slices)
        curves = grv_model.load_grv(p["grv"])
        future = _future_ctr(build.timelines, cfg.bucket.age_slice, cfg.bucket.min_future_exposures)
        grv_at = {i: c.value_at(cfg.bucket.age_slice) for i, c in curves.items()}
        hist = _historical_ctr(build.timelines, cfg.t_obs)
        try:
            grv_be = evaluate.grv_bucket_eval(grv_at, future, cfg.bucket.n_buckets)
            hist_be = evaluate.grv_bucket_eval(
                {i: hist[i] for i in hist if i in grv_at}, future, cfg.bucket.n_buckets
            )
            bucket_block = {
                "grv_correlation": grv_be.correlation,
                "historical_ctr_correlation": hist_be.correlation,
                "n_items": grv_be.n_items,
            }
            with open(p["grv_buckets"], "w") as fh:
                fh.write("method\tbucket\tmean_future_feedback\n")
                for b, m in enumerate(grv_be.bucket_means):
                    fh.write(f"grv\t{b}\t{m!r}\n")
                for b, m in enumerate(hist_be.bucket_means):
                    fh.write(f"historical_ctr\t{b}\t{m!r}\n")
        except evaluate.EvalError:
            bucket_block = {}

    metrics = {
        "per_k": {str(k): per_k[k] for k in ks},
        "counts": {
            "requests": len(rankings),
            "items": len(catalog.entries),
            "pool_items": len(pool),
            "new_items": pool_catalog.n_new,
        },
        "group_exposure": [
            {
                "group": g.group,
                "n_items": g.n_items,
                "y_exp": g.y_exp,
                "y_ctr": g.y_ctr,
            }
            for g in report
        ],
        "bucket_eval": bucket_block,
        "config": {
            "gamma": cfg.rerank.gamma,
            "timeliness_source": cfg.rerank.timeliness_source,
            "backbone": cfg.backbone.kind,
            "seed": cfg.seed,
            "k_list": ks,
        },
    }
    with open(p["metrics"], "w") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
    _write_manifest(cfg, "eval", chash,
                    {"impressions": p["impressions"], "items": p["items"],
                     "rankings": p["rankings"]},
                    [p["metrics"], p["group_exposure"], p["grv_buckets"]])
    return metrics


def run_all(cfg: PipelineConfig, force: bool = False) -> dict:
    """synth (when no external logs are configured) -> label -> fit -> predict -> rerank -> eval."""
    if cfg.impressions is None:
        stage_synth(cfg, force)
    stage_label(cfg, force)
    stage_fit(cfg, force)
    stage_predict(cfg, force)
    stage_rerank(cfg, force)
    return stage_eval(cfg, force)


def grid_search(cfg: PipelineConfig, force: bool = False) -> dict:
    """Sweep gamma over the grid on the validation split and pick the best.

    Selection: maximize NDCG@10 subject to N_Cov@10 >= the backbone-only
    (gamma = 0) row; smaller gamma wins ties. Test metrics are reported at
    the selected gamma and at gamma = 0.
    """
    p = _paths(cfg)
    _require("grid-search", {"impressions": p["impressions"], "items": p["items"]}, "synth")
    chash = _guard_manifest(cfg, "grid-search", force)
    loaded, catalog, grid = _load_corpus(cfg)
    corpus.flag_new_items(catalog, _train_window(cfg), cfg.new_item_quantile)
    curves = _load_curves(cfg, p)
    pool = rec_pool(cfg, catalog)
    pool_catalog = corpus.ItemCatalog(
        {i: catalog.entries[i] for i in pool},
        {i: catalog.new_item_flags[i] for i in pool},
    )
    val, test, truth = build_requests(cfg, loaded.records, pool)
    if not val or not test:
        raise PipelineError("empty validation or test split")

    scorer = _fit_backbone(cfg, loaded.records, catalog)
    ranker = rerank.BatchRanker(pool, catalog, grid, cfg.t_obs, curves)
    bbm_val = scorer.score_array(val, ranker.candidates)
    bbm_test = scorer.score_array(test, ranker.candidates)

    ks = list(cfg.rerank.k_list)
    select_k = 10 if 10 in ks else max(ks)

    def sweep(requests, bbm, gamma):
        agg = dataclasses.replace(cfg.rerank, gamma=gamma)
        stats = rerank.RerankStats()
        return [ranker.rank(req, bbm[i], agg, stats) for i, req in enumerate(requests)]

    rows = []
    for gamma in GAMMA_GRID:
        per_k = _metrics_for(sweep(val, bbm_val, gamma), truth, pool_catalog, ks)
        rows.append({"gamma": gamma, **{f"{m}@{k}": per_k[k][m] for k in ks for m in per_k[k]}})

    baseline_ncov = rows[0][f"n_cov@{select_k}"]
    best = max(
        (r for r in rows if r[f"n_cov@{select_k}"] >= baseline_ncov),
        key=lambda r: (r[f"ndcg@{select_k}"], -r["gamma"]),
    )

    test_selected = _metrics_for(sweep(test, bbm_test, best["gamma"]), truth, pool_catalog, ks)
    test_backbone = _metrics_for(sweep(test, bbm_test, 0.0), truth, pool_catalog, ks)

    with open(p["gamma_grid"], "w") as fh:
        cols = list(rows[0])
        fh.write("\t".join(cols) + "\n")
        for r in rows:
            fh.write("\t".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")

    result = {
        "selected_gamma": best["gamma"],
        "validation": rows,
        "test": {
            "selected": {str(k): test_selected[k] for k in ks},
            "backbone": {str(k): test_backbone[k] for k in ks},
        },
    }
    with open(p["grid_selection"], "w") as fh:
        json.dump(result, fh, indent=1, sort_keys=True)
    _write_manifest(cfg, "grid-search", chash,
                    {"impressions": p["impressions"], "items": p["items"]},
                    [p["gamma_grid"], p["grid_selection"]])
    return result
