"""Unsupervised atlas selection by multi-kernel manifold learning.

Learns a row-stochastic patch similarity matrix S, an orthonormal latent
matrix L, and kernel weights w by alternating exact block minimization of

    -sum_ij (sum_l w_l K_l)(i,j) S(i,j) + beta ||S||_F^2
        + gamma tr(L^T (I - S) L) + rho sum_l w_l log w_l

subject to row-simplex S, simplex w, and L^T L = I_c.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, NumericalError
from .optim import jacobi_eigh, project_rows_simplex
from .sas import AtlasRanking
from .similarity import KernelBank

EIGENGAP_TOL = 1e-12


@dataclass
class MkmlParams:
    c: int  # latent clusters
    beta: float = 1.0  # ridge weight on ||S||_F^2
    gamma: float = 1.0  # spectral weight
    rho: float = 0.1  # kernel-weight entropy
    max_iters: int = 30
    tol: float = 1e-5  # relative objective-change stopping threshold

    def __post_init__(self):
        if self.c < 1:
            raise InvalidInputError("c must be at least 1")
        if min(self.beta, self.gamma, self.rho) <= 0:
            raise InvalidInputError("beta, gamma, rho must be positive")
        if self.tol <= 0:
            raise InvalidInputError("tol must be positive")


@dataclass
class SimilarityModel:
    S: np.ndarray  # (n, n) row-stochastic
    L: np.ndarray  # (n, c) orthonormal columns
    w: np.ndarray  # (m,) simplex weights
    objective_trace: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.S.shape[0]


def _mixed_kernel(bank: KernelBank, w: np.ndarray) -> np.ndarray:
    return np.einsum("l,lij->ij", w, bank.kernels)


def mkml_objective(S: np.ndarray, L: np.ndarray, w: np.ndarray, bank: KernelBank,
                   p: MkmlParams) -> float:
    """Four-term objective value; 0 log 0 reads as 0 in the entropy term."""
    n = bank.n
    if S.shape != (n, n) or L.shape[0] != n or w.size != bank.m:
        raise InvalidInputError("shape mismatch between S, L, w, and kernel bank")
    M = _mixed_kernel(bank, w)
    fit = -float(np.sum(M * S))
    ridge = p.beta * float(np.sum(S * S))
    spectral = p.gamma * (float(np.sum(L * L)) - float(np.trace(L.T @ S @ L)))
    wl = np.where(w > 0.0, w * np.log(np.where(w > 0.0, w, 1.0)), 0.0)
    entropy = p.rho * float(wl.sum())
    return fit + ridge + spectral + entropy


def update_w(S: np.ndarray, bank: KernelBank, rho: float) -> np.ndarray:
    """Closed-form entropic minimizer: w_l proportional to exp(<K_l, S>/rho)."""
    a = np.einsum("lij,ij->l", bank.kernels, S)
    z = a / rho
    z -= z.max()
    w = np.exp(z)
    return w / w.sum()


def _latent_update(S: np.ndarray, c: int):
    n = S.shape[0]
    if not 1 <= c < n:
        raise InvalidInputError(f"c={c} must satisfy 1 <= c < n={n}")
    sym = (S + S.T) / 2.0
    evals, vecs = jacobi_eigh(np.eye(n) - sym)
    gap = float(evals[c] - evals[c - 1])
    return vecs[:, :c], gap


def update_L(S: np.ndarray, c: int) -> np.ndarray:
    """Orthonormal basis of the c smallest-eigenvalue directions of I - sym(S)."""
    L, _ = _latent_update(S, c)
    return L


def update_S(L: np.ndarray, bank: KernelBank, w: np.ndarray, beta: float,
              gamma: float) -> np.ndarray:
    """Row-wise simplex-projected minimizer given fixed L and w.

    Expanding the trace term leaves each row i with the strongly convex
    objective sum_j [-(M(i,j) + gamma <L_i, L_j>) S(i,j) + beta S(i,j)^2],
    whose minimizer is the Euclidean projection of (M + gamma L L^T)/(2 beta).
    """
    M = _mixed_kernel(bank, w)
    G = L @ L.T
    return project_rows_simplex((M + gamma * G) / (2.0 * beta))


def optimize_similarity(bank: KernelBank, p: MkmlParams) -> SimilarityModel:
    """Alternating exact minimization until the objective change falls under tol.

    Starts from uniform kernel weights and the row-normalized average
    kernel; each outer iteration applies update_S, update_L, update_w in
    that order, so the objective trace is non-increasing.
    """
    n = bank.n
    if n < p.c + 1:
        raise InvalidInputError(f"need n >= c+1, got n={n}, c={p.c}")
    w = np.full(bank.m, 1.0 / bank.m)
    avg = bank.kernels.mean(axis=0)
    S = avg / avg.sum(axis=1, keepdims=True)
    L, gap = _latent_update(S, p.c)
    degenerate_gaps = [gap] if abs(gap) < EIGENGAP_TOL else []
    trace = [mkml_objective(S, L, w, bank, p)]
    iters = 0
    for it in range(p.max_iters):
        iters = it + 1
        S = update_S(L, bank, w, p.beta, p.gamma)
        L, gap = _latent_update(S, p.c)
        if abs(gap) < EIGENGAP_TOL:
            degenerate_gaps.append(gap)
        w = update_w(S, bank, p.rho)
        obj = mkml_objective(S, L, w, bank, p)
        if not np.isfinite(obj):
            raise NumericalError(f"non-finite objective at iteration {iters}")
        prev = trace[-1]
        trace.append(obj)
        if abs(prev - obj) / max(1.0, abs(prev)) < p.tol:
            break
    diagnostics = {"iterations": iters}
    if degenerate_gaps:
        diagnostics["degenerate_eigengap"] = True
    return SimilarityModel(
        S=S, L=L, w=w, objective_trace=np.array(trace), diagnostics=diagnostics
    )


def rank_atlases_mkml(model: SimilarityModel, test_index: int,
                      subject_ids=None) -> AtlasRanking:
    """Training rows ordered by descending symmetrized similarity to the test row."""
    n = model.n
    if not 0 <= test_index < n:
        raise InvalidInputError(f"test_index {test_index} out of range [0, {n})")
    sym = (model.S[test_index, :] + model.S[:, test_index]) / 2.0
    others = np.array([j for j in range(n) if j != test_index])
    ids = others if subject_ids is None else np.asarray(subject_ids)[others]
    scores = sym[others]
    order = np.lexsort((ids, -scores))
    return AtlasRanking(
        entries=[(int(ids[i]), float(scores[i])) for i in order],
        strategy="mkml",
    )


def dump_similarity_model(model: SimilarityModel, base) -> tuple:
    """Write S as a text matrix plus JSON metadata (w, objective trace)."""
    base = Path(base)
    mat_path = base.with_suffix(".similarity.txt")
    meta_path = base.with_suffix(".similarity.json")
    np.savetxt(mat_path, model.S)
    meta = {
        "w": model.w.tolist(),
        "objective_trace": model.objective_trace.tolist(),
        "diagnostics": {k: bool(v) if isinstance(v, bool) else v
                        for k, v in model.diagnostics.items()},
        "format_version": 1,
    }
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return mat_path, meta_path
