"""LOOCV evaluation harness: fold orchestration, metrics, and report emission.

Per held-out subject, landmarks and every trained artifact (atlas
selection models, feature scalers, tuned C, SVM weights) derive from the
training fold only.  Predicted follow-up features for training subjects
come from an inner leave-one-out inside the fold: the selection model is
fit once on the fold and each training subject is ranked against an
atlas pool that excludes itself.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .classify import (DISEASE_LABEL, NC_LABEL, classify_subject,
                       train_landmark_classifier, tune_C_nested_cv)
from .config import PipelineConfig, RoiConfig
from .errors import ConfigError, DataError, InvalidInputError, NumericalError
from .mkml import MkmlParams, optimize_similarity, rank_atlases_mkml
from .sas import (AtlasRanking, PairErrorDataset, build_pair_error_arrays,
                  sas_scores, train_error_regressors)
from .seeding import stream_seed
from .similarity import build_kernel_bank, sigma_grid
from .synth import Cohort, load_cohort
from .trajectory import PredictionConfig, mae, pearson_flagged
from .volumes import (Volume, auto_threshold, edge_density_map, extract_patch,
                      select_landmarks, sobel_edge_map)

logger = logging.getLogger("patchtraj")

ALL_ARMS = ("baseline", "sas", "mkml")
REPORT_VERSION = 1


@dataclass
class FoldArtifacts:
    """Training-fold-only artifacts, exposed so leakage tests can compare them."""

    threshold: float
    landmark_coords: list
    per_arm: dict  # arm -> {"C": [..], "weights": [..], "biases": [..], ...}


@dataclass
class FoldResult:
    test_index: int
    subject_id: int
    true_label: int
    arm_labels: dict
    arm_scores: dict  # arm -> {"nc": float, "disease": float}
    arm_mae: dict  # arm -> list of per-landmark MAE (prediction arms only)
    arm_pearson: dict
    artifacts: FoldArtifacts
    skipped_landmarks: list = field(default_factory=list)


@dataclass
class EvaluationReport:
    version: int
    config: dict
    rois: dict
    subjects: list
    timings: dict = field(default_factory=dict)  # wall clock; kept out of canonical output

    def to_canonical_dict(self) -> dict:
        return {
            "version": self.version,
            "config": self.config,
            "rois": self.rois,
            "subjects": self.subjects,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_canonical_dict(), sort_keys=True, indent=2) + "\n"


def prepare_roi_edges(cohort: Cohort, roi: RoiConfig, mode: str) -> list:
    """Per-subject binary boundary maps for one ROI (fold-independent)."""
    return [sobel_edge_map(rec.label_map, roi.label, mode) for rec in cohort.subjects]


def _fold_landmarks(edges, test_index: int, roi: RoiConfig):
    train_edges = [e for i, e in enumerate(edges) if i != test_index]
    density = edge_density_map(train_edges)
    threshold = roi.edge_threshold
    if threshold is None:
        threshold = auto_threshold(density)
    margin = roi.patch_side // 2
    lms = select_landmarks(density, threshold, margin, roi.name)
    if not lms:
        raise ConfigError(f"ROI {roi.name!r}: no landmark passes threshold {threshold:.4f}")
    if roi.max_landmarks is not None and len(lms) > roi.max_landmarks:
        pick = np.floor(np.arange(roi.max_landmarks) * len(lms) / roi.max_landmarks)
        lms = [replace(lms[int(i)], index=j) for j, i in enumerate(pick)]
    return lms, float(threshold)


def _rank_subset_sas(pair, P1_pool: np.ndarray, pool_ids: np.ndarray,
                     target_vec: np.ndarray) -> AtlasRanking:
    scores = sas_scores(pair, P1_pool, target_vec)
    order = np.lexsort((pool_ids, scores))
    return AtlasRanking(
        entries=[(int(pool_ids[i]), float(scores[i])) for i in order], strategy="sas"
    )


def _predict_from(ranking: AtlasRanking, P1, P2, target_vec, pred_cfg, cfg):
    from .trajectory import predict_followup_vec

    return predict_followup_vec(
        ranking, P1, P2, target_vec, pred_cfg,
        alpha_cap=cfg.alpha_cap, alpha_floor=cfg.alpha_floor,
        intensity_max=cfg.intensity_max,
    )


def _sas_landmark_predictions(P1_tr, P2_tr, test_vec, roi: RoiConfig, cfg: PipelineConfig,
                              landmark_id: int, want_train: bool = True):
    n_tr = P1_tr.shape[0]
    if roi.sas_K > n_tr - 1:
        raise ConfigError(f"sas_K={roi.sas_K} exceeds inner atlas pool of {n_tr - 1}")
    src, tgt, d_plus, d_minus, errors = build_pair_error_arrays(
        P1_tr, P2_tr, cfg.alpha_cap, cfg.alpha_floor
    )
    ds = PairErrorDataset(landmark_id, src, tgt, d_plus, d_minus, errors)
    pair = train_error_regressors(ds, cfg.svr.C, cfg.svr.epsilon,
                                  tol=cfg.svr.tol, max_sweeps=cfg.svr.max_sweeps)
    pred_cfg = PredictionConfig("sas", roi.sas_K, roi.sas_transfer, "uniform")
    all_ids = np.arange(n_tr)
    train_pred = None
    if want_train:
        train_pred = np.empty_like(P1_tr)
        for s in range(n_tr):
            pool = all_ids[all_ids != s]
            ranking = _rank_subset_sas(pair, P1_tr[pool], pool, P1_tr[s])
            train_pred[s] = _predict_from(ranking, P1_tr, P2_tr, P1_tr[s], pred_cfg, cfg)
    test_ranking = _rank_subset_sas(pair, P1_tr, all_ids, test_vec)
    test_pred = _predict_from(test_ranking, P1_tr, P2_tr, test_vec, pred_cfg, cfg)
    return train_pred, test_pred


def _mkml_landmark_predictions(P1_tr, P2_tr, test_vec, roi: RoiConfig, cfg: PipelineConfig,
                               want_train: bool = True):
    n_tr = P1_tr.shape[0]
    if roi.mkml_K > n_tr - 1:
        raise ConfigError(f"mkml_K={roi.mkml_K} exceeds inner atlas pool of {n_tr - 1}")
    mk = cfg.mkml
    params = MkmlParams(c=roi.mkml_c, beta=mk.beta, gamma=mk.gamma, rho=mk.rho,
                        max_iters=mk.max_iters, tol=mk.tol)
    sigmas = sigma_grid(roi.mkml_m, mk.sigma_lo, mk.sigma_hi)
    pred_cfg = PredictionConfig("mkml", roi.mkml_K, roi.mkml_transfer, "similarity")

    train_pred = None
    if want_train:
        bank_tr = build_kernel_bank(P1_tr, sigmas, mk.knn_k, mk.normalize_kernels)
        model_tr = optimize_similarity(bank_tr, params)
        train_pred = np.empty_like(P1_tr)
        for s in range(n_tr):
            ranking = rank_atlases_mkml(model_tr, s)
            train_pred[s] = _predict_from(ranking, P1_tr, P2_tr, P1_tr[s], pred_cfg, cfg)

    bank_full = build_kernel_bank(np.vstack([P1_tr, test_vec[None, :]]), sigmas,
                                  mk.knn_k, mk.normalize_kernels)
    model_full = optimize_similarity(bank_full, params)
    ranking = rank_atlases_mkml(model_full, n_tr)
    test_pred = _predict_from(ranking, P1_tr, P2_tr, test_vec, pred_cfg, cfg)
    return train_pred, test_pred


def run_fold(cohort: Cohort, roi: RoiConfig, cfg: PipelineConfig, test_index: int,
             arms=None, edges=None, classify: bool = True) -> FoldResult:
    """Evaluate one held-out subject on one ROI across the requested arms.

    With ``classify=False`` only the follow-up predictions and their
    quality metrics are computed (no inner-LOO features, no SVM work).
    """
    arms = list(cfg.arms() if arms is None else arms)
    n = cohort.n
    if not 0 <= test_index < n:
        raise InvalidInputError(f"test index {test_index} out of range")
    labels = np.array([rec.label for rec in cohort.subjects], dtype=np.float64)
    train_mask = np.arange(n) != test_index
    y_tr = labels[train_mask]
    if np.unique(y_tr).size < 2:
        raise ConfigError(f"fold {test_index}: training data contains a single class")
    if edges is None:
        edges = prepare_roi_edges(cohort, roi, cfg.sobel_mode)
    lms, threshold = _fold_landmarks(edges, test_index, roi)

    test_rec = cohort.subjects[test_index]
    train_recs = [rec for i, rec in enumerate(cohort.subjects) if i != test_index]

    # per-landmark feature matrices and per-arm test features
    arm_train_feats = {arm: [] for arm in arms}
    arm_test_feats = {arm: {} for arm in arms}
    arm_mae = {arm: [] for arm in arms if arm in ("sas", "mkml")}
    arm_pearson = {arm: [] for arm in arms if arm in ("sas", "mkml")}
    kept_lms = []
    skipped = []
    for lm in lms:
        try:
            P1_tr = np.stack([
                extract_patch(rec.t1, lm, roi.patch_side, rec.subject_id, "t1").values
                for rec in train_recs
            ])
            P2_tr = np.stack([
                extract_patch(rec.t2, lm, roi.patch_side, rec.subject_id, "t2").values
                for rec in train_recs
            ])
            test_vec = extract_patch(test_rec.t1, lm, roi.patch_side,
                                     test_rec.subject_id, "t1").values
            test_true_t2 = extract_patch(test_rec.t2, lm, roi.patch_side,
                                         test_rec.subject_id, "t2").values
            feats = {}
            if "baseline" in arms:
                feats["baseline"] = (P1_tr, test_vec, None)
            if "sas" in arms:
                tr_pred, te_pred = _sas_landmark_predictions(
                    P1_tr, P2_tr, test_vec, roi, cfg, lm.index, want_train=classify)
                feats["sas"] = (
                    _followup_features(P1_tr, tr_pred, P2_tr, cfg) if classify else None,
                    np.concatenate([test_vec, te_pred]), te_pred)
            if "mkml" in arms:
                tr_pred, te_pred = _mkml_landmark_predictions(
                    P1_tr, P2_tr, test_vec, roi, cfg, want_train=classify)
                feats["mkml"] = (
                    _followup_features(P1_tr, tr_pred, P2_tr, cfg) if classify else None,
                    np.concatenate([test_vec, te_pred]), te_pred)
        except (InvalidInputError, NumericalError) as exc:
            logger.warning("fold %d roi %s: skipping landmark %d at %s: %s",
                           test_index, roi.name, lm.index, lm.coord, exc)
            skipped.append(lm.index)
            continue
        kept_lms.append(lm)
        for arm, (X_tr, x_te, te_pred) in feats.items():
            if X_tr is not None:
                arm_train_feats[arm].append((lm.index, X_tr))
            arm_test_feats[arm][lm.index] = x_te
            if te_pred is not None:
                arm_mae[arm].append(mae(test_true_t2, te_pred))
                r, _ = pearson_flagged(test_true_t2, te_pred)
                arm_pearson[arm].append(r)
    if not kept_lms:
        raise ConfigError(f"fold {test_index}: every landmark failed")

    arm_labels = {}
    arm_scores = {}
    artifacts = {}
    if classify:
        for arm in arms:
            classifiers, arm_art = _train_arm_classifiers(
                arm_train_feats[arm], y_tr, roi, cfg, test_index, arm)
            vote = classify_subject(classifiers, arm_test_feats[arm])
            arm_labels[arm] = int(vote.label)
            arm_scores[arm] = {"nc": vote.scores[NC_LABEL],
                               "disease": vote.scores[DISEASE_LABEL]}
            artifacts[arm] = arm_art

    return FoldResult(
        test_index=test_index,
        subject_id=test_rec.subject_id,
        true_label=int(test_rec.label),
        arm_labels=arm_labels,
        arm_scores=arm_scores,
        arm_mae={k: list(v) for k, v in arm_mae.items()},
        arm_pearson={k: list(v) for k, v in arm_pearson.items()},
        artifacts=FoldArtifacts(
            threshold=threshold,
            landmark_coords=[lm.coord for lm in kept_lms],
            per_arm=artifacts,
        ),
        skipped_landmarks=skipped,
    )


def _followup_features(P1_tr, train_pred, P2_tr, cfg: PipelineConfig):
    t2_part = P2_tr if cfg.followup_features == "ground_truth" else train_pred
    return np.hstack([P1_tr, t2_part])


def _train_arm_classifiers(feats_by_lm, y_tr, roi: RoiConfig, cfg: PipelineConfig,
                           test_index: int, arm: str):
    grid = cfg.svm.grid()
    shared_C = None
    if cfg.svm.tuning == "shared" and len(feats_by_lm) > 0:
        from .classify import FeatureScaler

        stacked = np.vstack([
            (FeatureScaler.fit(X) if cfg.svm.standardize
             else FeatureScaler.identity(X.shape[1])).transform(X)
            for _, X in feats_by_lm
        ])
        ys = np.tile(y_tr, len(feats_by_lm))
        shared_C = tune_C_nested_cv(
            stacked, ys, grid=grid, folds=cfg.svm.folds,
            seed=stream_seed(cfg.seed, "fold", test_index, roi.name, arm, "shared"),
        )
    classifiers = []
    art = {"C": [], "weights": [], "biases": [], "scaler_mean": [], "scaler_std": [],
           "platt": [], "landmark_ids": []}
    for lm_id, X_tr in feats_by_lm:
        clf = train_landmark_classifier(
            X_tr, y_tr,
            landmark_id=lm_id,
            seed=stream_seed(cfg.seed, "fold", test_index, roi.name, arm, lm_id),
            grid=grid,
            folds=cfg.svm.folds,
            standardize=cfg.svm.standardize,
            C=shared_C,
        )
        classifiers.append(clf)
        art["C"].append(clf.C)
        art["weights"].append(clf.w.copy())
        art["biases"].append(clf.b)
        art["scaler_mean"].append(clf.scaler.mean.copy())
        art["scaler_std"].append(clf.scaler.std.copy())
        art["platt"].append((clf.platt.A, clf.platt.B))
        art["landmark_ids"].append(lm_id)
    return classifiers, art


def _aggregate_arm(results, arm: str) -> dict:
    true = np.array([r.true_label for r in results])
    pred = np.array([r.arm_labels[arm] for r in results])
    tp = int(np.sum((true == DISEASE_LABEL) & (pred == DISEASE_LABEL)))
    tn = int(np.sum((true == NC_LABEL) & (pred == NC_LABEL)))
    fp = int(np.sum((true == NC_LABEL) & (pred == DISEASE_LABEL)))
    fn = int(np.sum((true == DISEASE_LABEL) & (pred == NC_LABEL)))
    n = true.size
    out = {
        "accuracy": (tp + tn) / n,
        "sensitivity": tp / (tp + fn) if (tp + fn) else None,
        "specificity": tn / (tn + fp) if (tn + fp) else None,
        "confusion": {"tp": tp, "tn": tn, "fp": fp, "fn": fn},
        "mae": None,
        "pearson": None,
    }
    if arm in ("sas", "mkml"):
        maes = [v for r in results for v in r.arm_mae.get(arm, [])]
        pearsons = [v for r in results for v in r.arm_pearson.get(arm, [])]
        out["mae"] = float(np.mean(maes)) if maes else None
        out["pearson"] = float(np.mean(pearsons)) if pearsons else None
    return out


def run_loocv(cfg: PipelineConfig, cohort: Cohort = None) -> EvaluationReport:
    """Leave-one-out evaluation of every configured ROI and arm."""
    if cohort is None:
        cohort = load_cohort(cfg.manifest)
    n = cohort.n
    if n < 4:
        raise ConfigError(f"LOOCV needs at least 4 subjects, got {n}")
    arms = cfg.arms()
    rois_out = {}
    subject_rows = {rec.subject_id: {"id": rec.subject_id, "true": int(rec.label),
                                     "pred": {}, "scores": {}}
                    for rec in cohort.subjects}
    timings = {}
    for roi in cfg.rois:
        t0 = time.perf_counter()
        edges = prepare_roi_edges(cohort, roi, cfg.sobel_mode)

        def _one_fold(i, _roi=roi, _edges=edges):
            return run_fold(cohort, _roi, cfg, i, arms, edges=_edges)

        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
                results = list(ex.map(_one_fold, range(n)))
        else:
            results = [_one_fold(i) for i in range(n)]
        roi_entry = {"arms": {}, "diagnostics": {
            "mean_landmarks": float(np.mean([len(r.artifacts.landmark_coords)
                                             for r in results])),
            "skipped_landmarks": int(sum(len(r.skipped_landmarks) for r in results)),
        }}
        for arm in arms:
            roi_entry["arms"][arm] = _aggregate_arm(results, arm)
        rois_out[roi.name] = roi_entry
        for r in results:
            row = subject_rows[r.subject_id]
            row["pred"].setdefault(roi.name, {})
            row["scores"].setdefault(roi.name, {})
            for arm in arms:
                row["pred"][roi.name][arm] = r.arm_labels[arm]
                row["scores"][roi.name][arm] = r.arm_scores[arm]
        timings[roi.name] = time.perf_counter() - t0
    return EvaluationReport(
        version=REPORT_VERSION,
        config=cfg.to_dict(),
        rois=rois_out,
        subjects=[subject_rows[k] for k in sorted(subject_rows)],
        timings=timings,
    )


def recompute_metrics(report: EvaluationReport) -> dict:
    """Re-derive accuracy per (roi, arm) from the per-subject rows."""
    out = {}
    for roi_name in report.rois:
        out[roi_name] = {}
        arms = report.rois[roi_name]["arms"].keys()
        for arm in arms:
            pairs = [(row["true"], row["pred"][roi_name][arm]) for row in report.subjects
                     if roi_name in row["pred"]]
            agree = sum(1 for t, p in pairs if t == p)
            out[roi_name][arm] = agree / len(pairs) if pairs else None
    return out


_METRIC_COLUMNS = ("roi", "strategy", "accuracy", "sensitivity", "specificity",
                   "mae", "pearson")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(report: EvaluationReport, outdir) -> dict:
    """Write report JSON, the metrics CSV, plot-data CSVs, and timings."""
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        report_path = outdir / "report.json"
        report_path.write_text(report.to_json())

        metrics_path = outdir / "metrics.csv"
        with metrics_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_METRIC_COLUMNS)
            for roi_name in sorted(report.rois):
                for arm in sorted(report.rois[roi_name]["arms"]):
                    m = report.rois[roi_name]["arms"][arm]
                    writer.writerow([
                        roi_name, arm, _fmt(m["accuracy"]), _fmt(m["sensitivity"]),
                        _fmt(m["specificity"]), _fmt(m["mae"]), _fmt(m["pearson"]),
                    ])

        acc_path = outdir / "accuracy_by_strategy.csv"
        with acc_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["roi", "strategy", "accuracy"])
            for roi_name in sorted(report.rois):
                for arm in sorted(report.rois[roi_name]["arms"]):
                    m = report.rois[roi_name]["arms"][arm]
                    writer.writerow([roi_name, arm, _fmt(m["accuracy"])])

        mae_path = outdir / "mae_by_strategy.csv"
        with mae_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["roi", "strategy", "mae"])
            for roi_name in sorted(report.rois):
                for arm in sorted(report.rois[roi_name]["arms"]):
                    m = report.rois[roi_name]["arms"][arm]
                    if m["mae"] is not None:
                        writer.writerow([roi_name, arm, _fmt(m["mae"])])

        timings_path = outdir / "timings.json"
        timings_path.write_text(
            json.dumps({"timings_seconds": report.timings}, sort_keys=True, indent=2) + "\n"
        )
    except OSError as exc:
        raise DataError(f"cannot write report under {outdir}: {exc}") from exc
    return {
        "report": report_path,
        "metrics": metrics_path,
        "accuracy": acc_path,
        "mae": mae_path,
        "timings": timings_path,
    }


def load_report(path) -> EvaluationReport:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc
    return EvaluationReport(
        version=data.get("version", REPORT_VERSION),
        config=data.get("config", {}),
        rois=data.get("rois", {}),
        subjects=data.get("subjects", []),
    )


def compute_landmarks(cfg: PipelineConfig, cohort: Cohort = None) -> dict:
    """Landmarks per ROI from every subject's label map (non-LOOCV use)."""
    if cohort is None:
        cohort = load_cohort(cfg.manifest)
    out = {}
    for roi in cfg.rois:
        edges = prepare_roi_edges(cohort, roi, cfg.sobel_mode)
        density = edge_density_map(edges)
        threshold = roi.edge_threshold
        if threshold is None:
            threshold = auto_threshold(density)
        margin = roi.patch_side // 2
        lms = select_landmarks(density, threshold, margin, roi.name)
        out[roi.name] = {
            "threshold": float(threshold),
            "landmarks": [
                {"index": lm.index, "coord": list(lm.coord), "density": lm.density}
                for lm in lms
            ],
        }
    return out


def predict_subject(cfg: PipelineConfig, subject_id: int, cohort: Cohort = None) -> dict:
    """Hold out one subject and predict its follow-up patches at every landmark.

    MAE/Pearson against the manifest's ground-truth follow-up are included
    per ROI and strategy arm.
    """
    if cohort is None:
        cohort = load_cohort(cfg.manifest)
    index = next((i for i, rec in enumerate(cohort.subjects)
                  if rec.subject_id == subject_id), None)
    if index is None:
        raise DataError(f"subject {subject_id} not in manifest")
    arms = [a for a in cfg.arms() if a in ("sas", "mkml")]
    if not arms:
        raise ConfigError("predict needs strategy sas, mkml, or all")
    out = {"subject_id": subject_id, "rois": {}}
    for roi in cfg.rois:
        fold = run_fold(cohort, roi, cfg, index, arms, classify=False)
        roi_out = {}
        for arm in arms:
            roi_out[arm] = {
                "mae": float(np.mean(fold.arm_mae[arm])) if fold.arm_mae.get(arm) else None,
                "pearson": (float(np.mean(fold.arm_pearson[arm]))
                            if fold.arm_pearson.get(arm) else None),
            }
        out["rois"][roi.name] = roi_out
    return out


def run_prediction_metrics(cfg: PipelineConfig, cohort: Cohort = None,
                           arms=("sas", "mkml")) -> dict:
    """LOOCV prediction-quality metrics only (no classification work)."""
    if cohort is None:
        cohort = load_cohort(cfg.manifest)
    arms = [a for a in arms if a in ("sas", "mkml")]
    out = {}
    for roi in cfg.rois:
        edges = prepare_roi_edges(cohort, roi, cfg.sobel_mode)

        def _one_fold(i, _roi=roi, _edges=edges):
            return run_fold(cohort, _roi, cfg, i, arms, edges=_edges, classify=False)

        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
                results = list(ex.map(_one_fold, range(cohort.n)))
        else:
            results = [_one_fold(i) for i in range(cohort.n)]
        out[roi.name] = {}
        for arm in arms:
            maes = [v for r in results for v in r.arm_mae.get(arm, [])]
            pearsons = [v for r in results for v in r.arm_pearson.get(arm, [])]
            out[roi.name][arm] = {
                "mae": float(np.mean(maes)) if maes else None,
                "pearson": float(np.mean(pearsons)) if pearsons else None,
            }
    return out
