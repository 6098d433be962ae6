"""Supervised atlas selection.

Builds ordered-pair disparity/error training sets, trains the paired
error regressors (one on positive, one on negative directional
disparities), and ranks atlas patches for a test patch by their
predicted prediction-error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .optim import LinearModel, train_linear_svr
from .similarity import ALPHA_CAP, ALPHA_FLOOR, _pair, patch_matrix

DEFAULT_C_SVR = 1.0
DEFAULT_EPS_SVR = 0.001


@dataclass
class PairErrorDataset:
    """All ordered-pair rows (source -> target) at one landmark."""

    landmark_id: int
    sources: np.ndarray  # (R,) source subject index per row
    targets: np.ndarray  # (R,) target subject index per row
    d_plus: np.ndarray  # (R, d)
    d_minus: np.ndarray  # (R, d)
    errors: np.ndarray  # (R,)

    @property
    def n_rows(self) -> int:
        return self.errors.size


@dataclass
class ErrorRegressorPair:
    """Trained positive/negative disparity-to-error regressors."""

    f_plus: LinearModel
    f_minus: LinearModel
    C_svr: float
    eps_svr: float
    landmark_id: int = -1
    diagnostics: dict = field(default_factory=dict)


@dataclass
class AtlasRanking:
    """Atlas subject ids with scores, sorted best-first for the strategy."""

    entries: list  # [(subject_id, score)]
    strategy: str  # "sas" (ascending predicted error) or "mkml" (descending similarity)

    @property
    def subject_ids(self) -> list:
        return [sid for sid, _ in self.entries]

    @property
    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.entries])

    def top(self, k: int) -> list:
        if k < 1 or k > len(self.entries):
            raise InvalidInputError(
                f"K={k} outside [1, {len(self.entries)}] available atlases"
            )
        return self.entries[:k]


def prediction_error(p_true_t2, p_pred_t2) -> float:
    """Mean element-wise absolute difference (the MAE metric)."""
    a, b = _pair(p_true_t2, p_pred_t2)
    return float(np.mean(np.abs(a - b)))


def quotient_transfer(P1_source: np.ndarray, P1_target: np.ndarray, P2_source: np.ndarray,
                      cap: float = ALPHA_CAP, floor: float = ALPHA_FLOOR) -> np.ndarray:
    """Row-wise quotient-mapped follow-up transfer: alpha (*) source t2.

    alpha is the clamped element-wise ratio target_t1 / source_t1.  Works
    on matrices of stacked rows; broadcasting handles single vectors.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(P1_source == 0.0, cap, P1_target / P1_source)
    alpha = np.clip(ratio, floor, cap)
    return alpha * P2_source


def build_pair_error_arrays(P1: np.ndarray, P2: np.ndarray, cap: float = ALPHA_CAP,
                            floor: float = ALPHA_FLOOR):
    """Vectorized core of :func:`build_pair_error_dataset` on stacked rows."""
    n = P1.shape[0]
    if P2.shape != P1.shape:
        raise InvalidInputError("t1 and t2 patch matrices must be aligned")
    if n < 3:
        raise InvalidInputError(f"need at least 3 subjects, got {n}")
    off = ~np.eye(n, dtype=bool)
    src, tgt = np.nonzero(off)  # row-major over ordered pairs
    pred = quotient_transfer(P1[src], P1[tgt], P2[src], cap, floor)
    errors = np.mean(np.abs(P2[tgt] - pred), axis=1)
    diff = P1[tgt] - P1[src]
    d_plus = np.maximum(0.0, diff)
    d_minus = np.maximum(0.0, -diff)
    return src, tgt, d_plus, d_minus, errors


def build_pair_error_dataset(patches_t1, patches_t2, cap: float = ALPHA_CAP,
                             floor: float = ALPHA_FLOOR,
                             landmark_id: int = -1) -> PairErrorDataset:
    """Ordered-pair disparity rows with quotient-transfer prediction errors.

    For each ordered pair (s, s'), the source's follow-up patch is mapped
    through the t1 quotient onto the target and the mean absolute error
    against the target's true follow-up becomes the row target.
    """
    P1 = patch_matrix(patches_t1)
    P2 = patch_matrix(patches_t2)
    src, tgt, d_plus, d_minus, errors = build_pair_error_arrays(P1, P2, cap, floor)
    return PairErrorDataset(
        landmark_id=landmark_id,
        sources=src,
        targets=tgt,
        d_plus=d_plus,
        d_minus=d_minus,
        errors=errors,
    )


def train_error_regressors(ds: PairErrorDataset, C_svr: float = DEFAULT_C_SVR,
                           eps_svr: float = DEFAULT_EPS_SVR, tol: float = 1e-6,
                           max_sweeps: int = 4000) -> ErrorRegressorPair:
    """Fit the f+/f- regressor pair on the same row set.

    Both regressors target the same per-row error: f+ sees the positive
    disparity, f- the negative one, so each map stays single-valued.
    The achieved KKT violations are recorded in the diagnostics.
    """
    if ds.n_rows == 0:
        raise InvalidInputError("empty pair-error dataset")
    f_plus, info_p = train_linear_svr(ds.d_plus, ds.errors, C_svr, eps_svr,
                                      tol=tol, max_sweeps=max_sweeps)
    f_minus, info_m = train_linear_svr(ds.d_minus, ds.errors, C_svr, eps_svr,
                                       tol=tol, max_sweeps=max_sweeps)
    diagnostics = {
        "kkt_violation_plus": info_p["kkt_violation"],
        "kkt_violation_minus": info_m["kkt_violation"],
    }
    spread_p = float(np.ptp(ds.d_plus, axis=0).max()) if ds.n_rows > 1 else 0.0
    spread_m = float(np.ptp(ds.d_minus, axis=0).max()) if ds.n_rows > 1 else 0.0
    if max(spread_p, spread_m) < 1e-12 and float(np.ptp(ds.errors)) > eps_svr:
        diagnostics["degenerate"] = True
    return ErrorRegressorPair(
        f_plus=f_plus,
        f_minus=f_minus,
        C_svr=float(C_svr),
        eps_svr=float(eps_svr),
        landmark_id=ds.landmark_id,
        diagnostics=diagnostics,
    )


def sas_scores(pair: ErrorRegressorPair, P1: np.ndarray, test_vec: np.ndarray) -> np.ndarray:
    """Predicted prediction-error of each atlas row for the test patch."""
    diff = test_vec[None, :] - P1
    d_plus = np.maximum(0.0, diff)
    d_minus = np.maximum(0.0, -diff)
    return (pair.f_plus.decision(d_plus) + pair.f_minus.decision(d_minus)) / 2.0


def rank_atlases_sas(pair: ErrorRegressorPair, patches_t1, test_patch,
                     subject_ids=None) -> AtlasRanking:
    """Atlases ordered by ascending predicted error, ties to lower id.

    The test patch plays the target role: d+ = max(0, test - atlas),
    d- = max(0, atlas - test), and the two regressor outputs are averaged.
    """
    P1 = patch_matrix(patches_t1)
    test_vec = np.asarray(test_patch, dtype=np.float64)
    if test_vec.size != P1.shape[1]:
        raise InvalidInputError("test patch dimension mismatch")
    scores = sas_scores(pair, P1, test_vec)
    ids = np.arange(P1.shape[0]) if subject_ids is None else np.asarray(subject_ids)
    order = np.lexsort((ids, scores))
    return AtlasRanking(
        entries=[(int(ids[i]), float(scores[i])) for i in order],
        strategy="sas",
    )


MODEL_FORMAT_VERSION = 1


def save_regressor_pair(pair: ErrorRegressorPair, base) -> tuple:
    """Persist a regressor pair: JSON header plus raw float64 weights."""
    base = Path(base)
    dim = pair.f_plus.w.size
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "landmark_id": pair.landmark_id,
        "strategy": "sas",
        "dims": dim,
        "hyperparams": {"C_svr": pair.C_svr, "eps_svr": pair.eps_svr},
    }
    json_path = base.with_suffix(".json")
    raw_path = base.with_suffix(".weights")
    blob = np.concatenate(
        [pair.f_plus.w, [pair.f_plus.b], pair.f_minus.w, [pair.f_minus.b]]
    ).astype("<f8")
    json_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    raw_path.write_bytes(blob.tobytes())
    return json_path, raw_path


def load_regressor_pair(json_path) -> ErrorRegressorPair:
    json_path = Path(json_path)
    header = json.loads(json_path.read_text())
    dim = int(header["dims"])
    blob = np.frombuffer(json_path.with_suffix(".weights").read_bytes(), dtype="<f8")
    if blob.size != 2 * (dim + 1):
        raise InvalidInputError("regressor weight file has unexpected size")
    return ErrorRegressorPair(
        f_plus=LinearModel(w=blob[:dim].copy(), b=float(blob[dim])),
        f_minus=LinearModel(w=blob[dim + 1 : 2 * dim + 1].copy(), b=float(blob[2 * dim + 1])),
        C_svr=float(header["hyperparams"]["C_svr"]),
        eps_svr=float(header["hyperparams"]["eps_svr"]),
        landmark_id=int(header["landmark_id"]),
    )
