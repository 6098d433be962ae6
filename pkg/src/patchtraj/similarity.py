"""Patch-to-patch disparities, quotient mappings, and the Gaussian kernel bank."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

ALPHA_CAP = 10.0
ALPHA_FLOOR = 1e-3
BANDWIDTH_FLOOR_SCALE = 1e-6
SQRT_2PI = float(np.sqrt(2.0 * np.pi))


def _vec(p) -> np.ndarray:
    v = np.asarray(p, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidInputError("expected a flat patch vector")
    return v


def _pair(p, q):
    a, b = _vec(p), _vec(q)
    if a.size != b.size:
        raise InvalidInputError(f"patch length mismatch: {a.size} vs {b.size}")
    return a, b


@dataclass
class DisparityPair:
    """Directional disparity vectors for an ordered subject pair (s, s')."""

    source: int
    target: int
    d_plus: np.ndarray  # max(0, p_s' - p_s)
    d_minus: np.ndarray  # max(0, p_s - p_s')


@dataclass
class QuotientMap:
    """Element-wise intensity ratio mapping a source patch onto a target patch."""

    alpha: np.ndarray
    cap: float


@dataclass
class KernelBank:
    """Stack of Gaussian similarity matrices over one patch cohort."""

    kernels: np.ndarray  # (m, n, n)
    sigmas: np.ndarray  # (m,)
    knn_k: int
    mu: np.ndarray = field(default=None, repr=False)  # kNN bandwidths, kept for inspection

    @property
    def n(self) -> int:
        return self.kernels.shape[1]

    @property
    def m(self) -> int:
        return self.kernels.shape[0]


def abs_disparity(p, q) -> np.ndarray:
    """Element-wise absolute difference |p - q|."""
    a, b = _pair(p, q)
    return np.abs(a - b)


def directional_disparities(p_s, p_s_prime, source: int = -1, target: int = -1) -> DisparityPair:
    """Split the signed difference into its positive and negative parts.

    d_plus + d_minus reconstructs |p_s - p_s'| exactly, and swapping the
    operands swaps the two vectors.
    """
    a, b = _pair(p_s, p_s_prime)
    if source < 0 and hasattr(p_s, "subject_id"):
        source = p_s.subject_id
    if target < 0 and hasattr(p_s_prime, "subject_id"):
        target = p_s_prime.subject_id
    diff = b - a
    return DisparityPair(
        source=source,
        target=target,
        d_plus=np.maximum(0.0, diff),
        d_minus=np.maximum(0.0, -diff),
    )


def quotient_map(p_target, p_source, cap: float = ALPHA_CAP,
                 floor: float = ALPHA_FLOOR) -> QuotientMap:
    """Element-wise p_target / p_source with zero denominators sent to ``cap``.

    Results are clamped to (0, cap]: zero denominators give cap, and a
    zero numerator over a nonzero denominator gives ``floor`` so the map
    stays strictly positive.
    """
    a, b = _pair(p_target, p_source)
    if cap <= 0:
        raise InvalidInputError("cap must be positive")
    if not 0 < floor <= cap:
        raise InvalidInputError("floor must lie in (0, cap]")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(b == 0.0, cap, a / b)
    return QuotientMap(alpha=np.clip(ratio, floor, cap), cap=float(cap))


def patch_matrix(patches) -> np.ndarray:
    """Stack a patch list into an (n, d) float matrix."""
    rows = [_vec(p) for p in patches]
    if not rows:
        raise InvalidInputError("empty patch list")
    d = rows[0].size
    for r in rows:
        if r.size != d:
            raise InvalidInputError("patches have differing lengths")
    return np.vstack(rows)


def pairwise_distances(P: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between the rows of P."""
    diff = P[:, None, :] - P[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def default_knn_k(n: int) -> int:
    """Neighborhood size for bandwidths: ~10% of the cohort, at least 2."""
    return min(max(2, int(np.ceil((n - 1) / 10))), n - 1)


def knn_bandwidth(patches, k: int) -> np.ndarray:
    """Mean Euclidean distance from each patch to its k nearest neighbors.

    Self-distances are excluded; ties break toward the lower subject
    index (stable sort on the distance row).
    """
    P = patch_matrix(patches)
    n = P.shape[0]
    if not 1 <= k < n:
        raise InvalidInputError(f"k={k} must satisfy 1 <= k < n={n}")
    D = pairwise_distances(P)
    mu = np.empty(n)
    for s in range(n):
        row = D[s].copy()
        row[s] = np.inf
        order = np.argsort(row, kind="stable")
        mu[s] = D[s, order[:k]].mean()
    return mu


def bandwidth_floor(D: np.ndarray) -> float:
    """Lower bound on pairwise bandwidths so identical patches stay usable."""
    nonzero = D[D > 0.0]
    scale = float(nonzero.mean()) if nonzero.size else 1.0
    return BANDWIDTH_FLOOR_SCALE * scale


def sigma_grid(m: int, lo: float = 1.0, hi: float = 2.0) -> np.ndarray:
    """m kernel scales evenly spaced in [lo, hi]."""
    if m < 1:
        raise InvalidInputError("need at least one kernel scale")
    return np.linspace(lo, hi, m)


def build_kernel_bank(patches, sigmas, k: int = None, normalize: bool = True) -> KernelBank:
    """Gaussian kernel matrices at several scales over one patch cohort.

    Entry (i, j) of kernel l is exp(-d_ij^2 / (2 e_ij^2)) / (e_ij sqrt(2 pi))
    with e_ij = sigma_l (mu_i + mu_j) / 2 floored away from zero.  Each
    matrix is symmetrized and, unless ``normalize`` is off, scaled so its
    largest entry is 1 to put all scales on a comparable footing.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.size == 0 or np.any(sigmas <= 0):
        raise InvalidInputError("sigmas must be nonempty and positive")
    P = patch_matrix(patches)
    n = P.shape[0]
    if n < 2:
        raise InvalidInputError("kernel bank needs at least two patches")
    if k is None:
        k = default_knn_k(n)
    mu = knn_bandwidth(P, k)
    D = pairwise_distances(P)
    floor = bandwidth_floor(D)
    half_sum = (mu[:, None] + mu[None, :]) / 2.0
    kernels = np.empty((sigmas.size, n, n))
    for l, sigma in enumerate(sigmas):
        E = np.maximum(sigma * half_sum, floor)
        K = np.exp(-(D * D) / (2.0 * E * E)) / (E * SQRT_2PI)
        K = (K + K.T) / 2.0
        if normalize:
            K = K / K.max()
        kernels[l] = K
    return KernelBank(kernels=kernels, sigmas=sigmas, knn_k=int(k), mu=mu)
