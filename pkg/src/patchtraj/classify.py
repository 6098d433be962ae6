"""Per-landmark linear SVM ensemble with Platt calibration and weighted voting."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .optim import train_linear_svc
from .seeding import substream

NC_LABEL = -1
DISEASE_LABEL = 1
STD_FLOOR = 1e-8
PLATT_FOLDS = 3


def default_C_grid() -> np.ndarray:
    """Powers of two from 2^-6 to 2^15 inclusive (22 values)."""
    return 2.0 ** np.arange(-6, 16)


@dataclass
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "FeatureScaler":
        X = np.asarray(X, dtype=np.float64)
        return cls(mean=X.mean(axis=0), std=np.maximum(X.std(axis=0), STD_FLOOR))

    @classmethod
    def identity(cls, dim: int) -> "FeatureScaler":
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


@dataclass
class PlattResult:
    A: float
    B: float
    converged: bool


@dataclass
class LandmarkClassifier:
    """Linear SVM with Platt calibration operating on raw feature vectors."""

    landmark_id: int
    w: np.ndarray
    b: float
    C: float
    platt: PlattResult
    scaler: FeatureScaler

    def decision(self, x: np.ndarray) -> float:
        return float(self.scaler.transform(np.atleast_2d(x))[0] @ self.w + self.b)

    def probability_plus(self, x: np.ndarray) -> float:
        return float(platt_probability(self.decision(x), self.platt.A, self.platt.B))


@dataclass
class VoteResult:
    per_landmark: list  # [(landmark_id, label, posterior)]
    scores: dict  # class -> aggregate posterior mass
    label: int
    abstained: list = field(default_factory=list)


def train_linear_svm(features, labels, C: float):
    """Soft-margin linear SVM; returns (weights, bias)."""
    model, _ = train_linear_svc(features, labels, C)
    return model.w, model.b


def _check_labels(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    classes = set(np.unique(y))
    if not classes <= {-1.0, 1.0} or len(classes) < 2:
        raise InvalidInputError("need +1/-1 labels with both classes present")
    return y


def stratified_folds(labels: np.ndarray, folds: int, rng: np.random.Generator) -> list:
    """Seeded stratified split: class-wise shuffle, then round-robin assignment."""
    y = np.asarray(labels)
    assignments = np.empty(y.size, dtype=np.int64)
    for cls in np.unique(y):
        idx = np.nonzero(y == cls)[0]
        perm = rng.permutation(idx.size)
        assignments[idx[perm]] = np.arange(idx.size) % folds
    return [np.nonzero(assignments == f)[0] for f in range(folds)]


def _effective_folds(labels: np.ndarray, folds: int, context: str) -> int:
    counts = [int(np.sum(labels == cls)) for cls in (-1.0, 1.0)]
    smallest = min(counts)
    if smallest < folds:
        warnings.warn(
            f"{context}: class count {smallest} < {folds} folds, reducing to {smallest}",
            stacklevel=3,
        )
        return max(2, smallest)
    return folds


def tune_C_nested_cv(features, labels, grid=None, folds: int = 5, seed: int = 0) -> float:
    """Stratified seeded k-fold accuracy over the C grid; ties go to smaller C."""
    X = np.asarray(features, dtype=np.float64)
    y = _check_labels(labels)
    grid = default_C_grid() if grid is None else np.sort(np.asarray(grid, dtype=np.float64))
    if grid.size == 0:
        raise InvalidInputError("empty C grid")
    if grid.size == 1:
        return float(grid[0])
    if folds < 2:
        raise InvalidInputError("need at least 2 folds")
    folds = _effective_folds(y, folds, "tune_C_nested_cv")
    rng = substream(seed, "cv-folds")
    parts = stratified_folds(y, folds, rng)
    accuracy = np.zeros(grid.size)
    for f, held in enumerate(parts):
        train = np.setdiff1d(np.arange(y.size), held, assume_unique=False)
        if np.unique(y[train]).size < 2 or held.size == 0:
            continue
        alpha = None  # warm-start the dual along the ascending C path
        for gi, C in enumerate(grid):
            model, info = train_linear_svc(X[train], y[train], float(C), alpha0=alpha)
            alpha = info["alpha"]
            pred = np.where(model.decision(X[held]) >= 0.0, 1.0, -1.0)
            accuracy[gi] += float(np.mean(pred == y[held]))
    return float(grid[int(np.argmax(accuracy))])  # first max = smallest C on ties


def out_of_fold_decisions(features, labels, C: float, folds: int = PLATT_FOLDS,
                          seed: int = 0) -> np.ndarray:
    """Decision values for every sample from models trained without its fold."""
    X = np.asarray(features, dtype=np.float64)
    y = _check_labels(labels)
    folds = _effective_folds(y, folds, "out_of_fold_decisions")
    rng = substream(seed, "platt-folds")
    parts = stratified_folds(y, folds, rng)
    decisions = np.zeros(y.size)
    full_model = None
    for held in parts:
        train = np.setdiff1d(np.arange(y.size), held)
        if held.size == 0:
            continue
        if np.unique(y[train]).size < 2:
            if full_model is None:
                full_model, _ = train_linear_svc(X, y, C)
            decisions[held] = full_model.decision(X[held])
            continue
        model, _ = train_linear_svc(X[train], y[train], C)
        decisions[held] = model.decision(X[held])
    return decisions


def platt_probability(f, A: float, B: float):
    """P(+1 | f) = 1 / (1 + exp(A f + B)), computed on the stable branch."""
    z = A * np.asarray(f, dtype=np.float64) + B
    out = np.where(z >= 0.0, np.exp(-np.clip(z, 0, None)) / (1.0 + np.exp(-np.clip(z, 0, None))),
                   1.0 / (1.0 + np.exp(np.clip(z, None, 0))))
    return out


def platt_calibrate(decision_values, labels, max_iters: int = 100,
                    tol: float = 1e-10) -> PlattResult:
    """Regularized sigmoid fit by damped Newton iterations.

    Targets are smoothed to (N+ + 1)/(N+ + 2) and 1/(N- + 2); on
    non-convergence the conventional fallback (A=-1, B=0) is returned
    with the flag cleared.
    """
    f = np.asarray(decision_values, dtype=np.float64)
    y = _check_labels(labels)
    n_pos = float(np.sum(y > 0))
    n_neg = float(np.sum(y < 0))
    hi = (n_pos + 1.0) / (n_pos + 2.0)
    lo = 1.0 / (n_neg + 2.0)
    t = np.where(y > 0, hi, lo)

    def nll(A, B):
        z = A * f + B
        # t*z + log(1+exp(-z)) evaluated stably on both branches
        return float(np.sum(np.where(z >= 0, t * z + np.log1p(np.exp(-np.clip(z, 0, None))),
                                     (t - 1.0) * z + np.log1p(np.exp(np.clip(z, None, 0))))))

    A, B = 0.0, float(np.log((n_neg + 1.0) / (n_pos + 1.0)))
    fval = nll(A, B)
    sigma = 1e-12
    converged = False
    for _ in range(max_iters):
        p = platt_probability(f, A, B)
        d1 = t - p
        d2 = p * (1.0 - p)
        g1 = float(np.sum(f * d1))
        g2 = float(np.sum(d1))
        if max(abs(g1), abs(g2)) < tol:
            converged = True
            break
        h11 = float(np.sum(f * f * d2)) + sigma
        h22 = float(np.sum(d2)) + sigma
        h21 = float(np.sum(f * d2))
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        step = 1.0
        while step >= 1e-10:
            newA, newB = A + step * dA, B + step * dB
            newf = nll(newA, newB)
            if newf < fval + 1e-4 * step * gd:
                A, B, fval = newA, newB, newf
                break
            step /= 2.0
        else:
            break
    if not converged:
        return PlattResult(A=-1.0, B=0.0, converged=False)
    return PlattResult(A=float(A), B=float(B), converged=True)


def train_landmark_classifier(features, labels, landmark_id: int, seed: int = 0,
                              grid=None, folds: int = 5, standardize: bool = True,
                              C: float = None) -> LandmarkClassifier:
    """Scale, tune C by nested CV (unless fixed), train, and Platt-calibrate."""
    X = np.asarray(features, dtype=np.float64)
    y = _check_labels(labels)
    scaler = FeatureScaler.fit(X) if standardize else FeatureScaler.identity(X.shape[1])
    Xs = scaler.transform(X)
    if C is None:
        C = tune_C_nested_cv(Xs, y, grid=grid, folds=folds, seed=seed)
    model, _ = train_linear_svc(Xs, y, float(C))
    oof = out_of_fold_decisions(Xs, y, float(C), seed=seed)
    platt = platt_calibrate(oof, y)
    return LandmarkClassifier(
        landmark_id=landmark_id,
        w=model.w,
        b=model.b,
        C=float(C),
        platt=platt,
        scaler=scaler,
    )


def weighted_vote(results) -> VoteResult:
    """Posterior-weighted majority vote; ties resolve to the NC label."""
    results = list(results)
    if not results:
        raise InvalidInputError("weighted_vote needs at least one vote")
    scores = {NC_LABEL: 0.0, DISEASE_LABEL: 0.0}
    per_landmark = []
    for entry in results:
        if len(entry) == 3:
            lm, label, posterior = entry
        else:
            label, posterior = entry
            lm = -1
        label = int(label)
        if label not in scores:
            raise InvalidInputError(f"vote label must be +1/-1, got {label}")
        if not 0.0 <= posterior <= 1.0:
            raise InvalidInputError(f"posterior {posterior} outside [0, 1]")
        scores[label] += float(posterior)
        per_landmark.append((lm, label, float(posterior)))
    if scores[DISEASE_LABEL] > scores[NC_LABEL]:
        final = DISEASE_LABEL
    else:
        final = NC_LABEL
    return VoteResult(per_landmark=per_landmark, scores=scores, label=final)


def classify_subject(classifiers, features_by_landmark: dict) -> VoteResult:
    """Vote each landmark's calibrated SVM; missing features abstain."""
    votes = []
    abstained = []
    for clf in classifiers:
        x = features_by_landmark.get(clf.landmark_id)
        if x is None:
            abstained.append(clf.landmark_id)
            continue
        p_plus = clf.probability_plus(np.asarray(x, dtype=np.float64))
        if p_plus > 0.5:
            label, posterior = DISEASE_LABEL, p_plus
        else:
            label, posterior = NC_LABEL, 1.0 - p_plus
        votes.append((clf.landmark_id, label, posterior))
    if not votes:
        raise InvalidInputError("all landmarks abstained")
    result = weighted_vote(votes)
    result.abstained = abstained
    return result


BUNDLE_FORMAT_VERSION = 1


def save_classifier_bundle(classifiers, base) -> tuple:
    """Persist an ROI's classifier ensemble: JSON header + raw weights."""
    base = Path(base)
    dim = classifiers[0].w.size
    header = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "dims": dim,
        "landmarks": [
            {
                "landmark_id": c.landmark_id,
                "C": c.C,
                "platt": {"A": c.platt.A, "B": c.platt.B, "converged": c.platt.converged},
            }
            for c in classifiers
        ],
    }
    blob = np.concatenate(
        [np.concatenate([c.w, [c.b], c.scaler.mean, c.scaler.std]) for c in classifiers]
    ).astype("<f8")
    json_path = base.with_suffix(".json")
    raw_path = base.with_suffix(".weights")
    json_path.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    raw_path.write_bytes(blob.tobytes())
    return json_path, raw_path


def load_classifier_bundle(json_path) -> list:
    json_path = Path(json_path)
    header = json.loads(json_path.read_text())
    dim = int(header["dims"])
    blob = np.frombuffer(json_path.with_suffix(".weights").read_bytes(), dtype="<f8")
    stride = 3 * dim + 1
    out = []
    for i, meta in enumerate(header["landmarks"]):
        chunk = blob[i * stride : (i + 1) * stride]
        out.append(
            LandmarkClassifier(
                landmark_id=int(meta["landmark_id"]),
                w=chunk[:dim].copy(),
                b=float(chunk[dim]),
                C=float(meta["C"]),
                platt=PlattResult(
                    A=float(meta["platt"]["A"]),
                    B=float(meta["platt"]["B"]),
                    converged=bool(meta["platt"]["converged"]),
                ),
                scaler=FeatureScaler(
                    mean=chunk[dim + 1 : 2 * dim + 1].copy(),
                    std=chunk[2 * dim + 1 :].copy(),
                ),
            )
        )
    return out
