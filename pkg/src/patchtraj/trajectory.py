"""Follow-up patch prediction from selected atlases, and prediction metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .sas import AtlasRanking, prediction_error, quotient_transfer
from .similarity import ALPHA_CAP, ALPHA_FLOOR, _pair, patch_matrix
from .volumes import Patch

STRATEGIES = ("sas", "mkml")
TRANSFERS = ("plain_average", "quotient_mapped")
WEIGHTINGS = ("uniform", "similarity")


@dataclass
class PredictionConfig:
    strategy: str
    K: int
    transfer: str = "plain_average"
    weighting: str = "uniform"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidInputError(f"unknown strategy {self.strategy!r}")
        if self.transfer not in TRANSFERS:
            raise InvalidInputError(f"unknown transfer mode {self.transfer!r}")
        if self.weighting not in WEIGHTINGS:
            raise InvalidInputError(f"unknown weighting {self.weighting!r}")
        if self.K < 1:
            raise InvalidInputError("K must be at least 1")
        if self.strategy == "sas" and self.weighting == "similarity":
            raise InvalidInputError("sas rankings carry errors, not similarity weights")


def default_prediction_config(strategy: str, K: int) -> PredictionConfig:
    """Paper-mode defaults: quotient transfer for sas, weighted average for mkml."""
    if strategy == "sas":
        return PredictionConfig(strategy="sas", K=K, transfer="quotient_mapped",
                                weighting="uniform")
    return PredictionConfig(strategy="mkml", K=K, transfer="plain_average",
                            weighting="similarity")


def predict_followup_vec(ranking: AtlasRanking, P1: np.ndarray, P2: np.ndarray,
                         test_vec: np.ndarray, cfg: PredictionConfig,
                         alpha_cap: float = ALPHA_CAP, alpha_floor: float = ALPHA_FLOOR,
                         intensity_max: float = 1.0) -> np.ndarray:
    """Array-level core of :func:`predict_followup`.

    Subject ids in the ranking index the rows of P1/P2.  Contributions
    are clamped to [0, intensity_max] before the convex combination, so
    the output stays inside their hull and inside the intensity range.
    """
    if not ranking.entries:
        raise InvalidInputError("empty atlas ranking")
    top = ranking.top(cfg.K)
    idx = np.array([sid for sid, _ in top])
    scores = np.array([s for _, s in top])
    if cfg.transfer == "quotient_mapped":
        contrib = quotient_transfer(P1[idx], np.broadcast_to(test_vec, P1[idx].shape),
                                    P2[idx], alpha_cap, alpha_floor)
    else:
        contrib = P2[idx].astype(np.float64, copy=True)
    contrib = np.clip(contrib, 0.0, intensity_max)
    if cfg.weighting == "similarity":
        total = scores.sum()
        weights = scores / total if total > 0 else np.full(len(top), 1.0 / len(top))
    else:
        weights = np.full(len(top), 1.0 / len(top))
    return weights @ contrib


def predict_followup(ranking: AtlasRanking, patches_t1, patches_t2, test_patch_t1,
                     cfg: PredictionConfig, alpha_cap: float = ALPHA_CAP,
                     alpha_floor: float = ALPHA_FLOOR,
                     intensity_max: float = 1.0) -> Patch:
    """Predicted follow-up patch from the top-K ranked atlases."""
    P1 = patch_matrix(patches_t1)
    P2 = patch_matrix(patches_t2)
    if P1.shape != P2.shape:
        raise InvalidInputError("t1 and t2 patch lists must be aligned")
    test_vec = np.asarray(test_patch_t1, dtype=np.float64)
    values = predict_followup_vec(ranking, P1, P2, test_vec, cfg,
                                  alpha_cap, alpha_floor, intensity_max)
    lm = getattr(test_patch_t1, "landmark_id", -1)
    return Patch(landmark_id=lm, subject_id=-1, timepoint="t2", values=values)


def mae(p, q) -> float:
    """Mean absolute error between two patches (shared with prediction_error)."""
    return prediction_error(p, q)


def pearson_flagged(p, q):
    """Sample Pearson correlation plus a flag for zero-variance degeneracy."""
    a, b = _pair(p, q)
    if a.size < 2:
        raise InvalidInputError("pearson needs vectors of length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    va = float(da @ da)
    vb = float(db @ db)
    if va == 0.0 or vb == 0.0:
        return 0.0, True
    r = float(da @ db) / float(np.sqrt(va) * np.sqrt(vb))
    return min(1.0, max(-1.0, r)), False


def pearson(p, q) -> float:
    """Sample Pearson correlation; zero-variance inputs give 0 by convention."""
    return pearson_flagged(p, q)[0]
