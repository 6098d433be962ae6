"""Shared numerical kernels.

Dual coordinate descent for the linear soft-margin SVM and the linear
epsilon-insensitive SVR (both with a regularized bias via an appended
constant feature), a cyclic Jacobi eigensolver for symmetric matrices,
and exact Euclidean projection onto the probability simplex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InvalidInputError, NumericalError

KKT_TOL = 1e-6
JACOBI_TOL = 1e-10


@njit(inline="always")
def _xorshift(state):  # pragma: no cover - exercised via solvers
    state ^= state << np.uint64(13)
    state ^= state >> np.uint64(7)
    state ^= state << np.uint64(17)
    return state


@njit(cache=True, nogil=True)
def _svc_cd(X, y, C, tol, max_sweeps, alpha0):  # pragma: no cover - exercised via wrapper
    # dual coordinate ascent with per-sweep random permutation and
    # liblinear-style active-set shrinking; a full unshrunk sweep must
    # pass the KKT tolerance before returning
    n, d = X.shape
    alpha = alpha0.copy()
    w = np.zeros(d)
    for i in range(n):
        if alpha[i] != 0.0:
            for j in range(d):
                w[j] += alpha[i] * y[i] * X[i, j]
    qii = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += X[i, j] * X[i, j]
        qii[i] = s
    idx = np.arange(n)
    active = n
    mbig = 1e30
    gmax_bar = mbig
    gmin_bar = -mbig
    rstate = np.uint64(88172645463325252)
    viol = np.inf
    for _ in range(max_sweeps):
        for i in range(active - 1, 0, -1):
            rstate = _xorshift(rstate)
            j = int(rstate % np.uint64(i + 1))
            tmp = idx[i]
            idx[i] = idx[j]
            idx[j] = tmp
        pgmax = -mbig
        pgmin = mbig
        max_step = 0.0
        k = 0
        while k < active:
            i = idx[k]
            xw = 0.0
            for j in range(d):
                xw += X[i, j] * w[j]
            g = y[i] * xw - 1.0
            a = alpha[i]
            if a <= 0.0:
                if g > gmax_bar:
                    active -= 1
                    idx[k] = idx[active]
                    idx[active] = i
                    continue
                pg = g if g < 0.0 else 0.0
            elif a >= C:
                if g < gmin_bar:
                    active -= 1
                    idx[k] = idx[active]
                    idx[active] = i
                    continue
                pg = g if g > 0.0 else 0.0
            else:
                pg = g
            if pg > pgmax:
                pgmax = pg
            if pg < pgmin:
                pgmin = pg
            if pg != 0.0 and qii[i] > 0.0:
                anew = a - g / qii[i]
                if anew < 0.0:
                    anew = 0.0
                elif anew > C:
                    anew = C
                if anew != a:
                    alpha[i] = anew
                    delta = (anew - a) * y[i]
                    if abs(delta) > max_step:
                        max_step = abs(delta)
                    for j in range(d):
                        w[j] += delta * X[i, j]
            k += 1
        viol = max(abs(pgmax), abs(pgmin))
        if pgmax <= -mbig and pgmin >= mbig:  # active set emptied
            viol = 0.0
        if viol < tol or max_step < 1e-14:
            if active == n:
                break  # converged, or stalled at the violation floor
            active = n
            gmax_bar = mbig
            gmin_bar = -mbig
        else:
            gmax_bar = pgmax if pgmax > 0.0 else mbig
            gmin_bar = pgmin if pgmin < 0.0 else -mbig
    return w, alpha, viol


@njit(cache=True, nogil=True)
def _svr_cd(X, y, C, eps, tol, max_sweeps):  # pragma: no cover - exercised via wrapper
    # condensed-variable SVR dual (beta in [-C, C]) with the same
    # permutation + shrinking scheme as the classifier solver
    n, d = X.shape
    beta = np.zeros(n)
    w = np.zeros(d)
    qii = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += X[i, j] * X[i, j]
        qii[i] = s
    idx = np.arange(n)
    active = n
    mbig = 1e30
    vbar = mbig  # shrink margin from the previous sweep's max violation
    rstate = np.uint64(1181783497276652981)
    viol = np.inf
    for _ in range(max_sweeps):
        for i in range(active - 1, 0, -1):
            rstate = _xorshift(rstate)
            j = int(rstate % np.uint64(i + 1))
            tmp = idx[i]
            idx[i] = idx[j]
            idx[j] = tmp
        sweep_viol = 0.0
        max_step = 0.0
        k = 0
        while k < active:
            i = idx[k]
            xw = 0.0
            for j in range(d):
                xw += X[i, j] * w[j]
            g = xw - y[i]
            b = beta[i]
            # KKT violation of min 0.5*q*b^2 + g0*b + eps|b| on [-C, C],
            # and shrink coordinates locked at a bound or inside the tube
            if b == 0.0:
                v = abs(g) - eps
                if v < 0.0:
                    if -v > vbar:
                        active -= 1
                        idx[k] = idx[active]
                        idx[active] = i
                        continue
                    v = 0.0
            elif b >= C:
                v = g + eps
                if v < 0.0:
                    if -v > vbar:
                        active -= 1
                        idx[k] = idx[active]
                        idx[active] = i
                        continue
                    v = 0.0
            elif b <= -C:
                v = eps - g
                if v < 0.0:
                    if -v > vbar:
                        active -= 1
                        idx[k] = idx[active]
                        idx[active] = i
                        continue
                    v = 0.0
            elif b > 0.0:
                v = abs(g + eps)
            else:
                v = abs(g - eps)
            if v > sweep_viol:
                sweep_viol = v
            q = qii[i]
            if q > 0.0:
                clin = g - q * b
                if -clin - eps > 0.0:
                    bnew = (-clin - eps) / q
                    if bnew > C:
                        bnew = C
                elif -clin + eps < 0.0:
                    bnew = (-clin + eps) / q
                    if bnew < -C:
                        bnew = -C
                else:
                    bnew = 0.0
                if bnew != b:
                    beta[i] = bnew
                    delta = bnew - b
                    if abs(delta) > max_step:
                        max_step = abs(delta)
                    for j in range(d):
                        w[j] += delta * X[i, j]
            k += 1
        viol = sweep_viol
        if viol < tol or max_step < 1e-14:
            if active == n:
                break  # converged, or stalled at the violation floor
            active = n
            vbar = mbig
        else:
            vbar = viol
    return w, beta, viol


@njit(cache=True, nogil=True)
def _jacobi_sweeps(a, v, tol_off, max_sweeps):  # pragma: no cover - exercised via wrapper
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += 2.0 * a[p, q] * a[p, q]
        if np.sqrt(off) <= tol_off:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                a[p, p] -= t * apq
                a[q, q] += t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    if k != p and k != q:
                        akp = a[k, p]
                        akq = a[k, q]
                        a[k, p] = c * akp - s * akq
                        a[p, k] = a[k, p]
                        a[k, q] = s * akp + c * akq
                        a[q, k] = a[k, q]
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq


@dataclass
class LinearModel:
    """Linear decision function f(x) = w . x + b."""

    w: np.ndarray
    b: float

    def decision(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w + self.b


def _augment(X: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidInputError("feature matrix must be 2-D")
    return np.hstack([X, np.ones((X.shape[0], 1))])


def train_linear_svc(X, y, C: float, tol: float = KKT_TOL, max_sweeps: int = 4000,
                     alpha0=None):
    """Soft-margin linear SVM via dual coordinate ascent.

    Bias is regularized through an appended constant feature.  Returns
    (model, info) where info carries the dual variables and the final
    KKT violation.  ``alpha0`` warm-starts the dual (must be feasible).
    """
    y = np.ascontiguousarray(y, dtype=np.float64)
    if set(np.unique(y)) - {-1.0, 1.0}:
        raise InvalidInputError("labels must be in {-1, +1}")
    if C <= 0:
        raise InvalidInputError("C must be positive")
    Xa = _augment(X)
    if Xa.shape[0] != y.size:
        raise InvalidInputError("feature/label count mismatch")
    if np.unique(y).size < 2:
        raise InvalidInputError("need at least one sample of each class")
    if alpha0 is None:
        alpha0 = np.zeros(y.size)
    else:
        alpha0 = np.clip(np.ascontiguousarray(alpha0, dtype=np.float64), 0.0, C)
    w, alpha, viol = _svc_cd(Xa, y, float(C), float(tol), int(max_sweeps), alpha0)
    if not np.all(np.isfinite(w)):
        raise NumericalError("SVM training produced non-finite weights")
    model = LinearModel(w=w[:-1].copy(), b=float(w[-1]))
    info = {"alpha": alpha, "kkt_violation": float(viol),
            "dual_objective": float(alpha.sum() - 0.5 * w @ w)}
    return model, info


def train_linear_svr(X, y, C: float, eps: float, tol: float = KKT_TOL,
                     max_sweeps: int = 4000):
    """Linear epsilon-insensitive SVR via dual coordinate descent.

    Solves min_beta 0.5 ||w||^2 + eps ||beta||_1 - y . beta with
    w = X~^T beta and beta in [-C, C]^n (the condensed form of the usual
    (alpha, alpha*) dual with regularized bias).
    """
    y = np.ascontiguousarray(y, dtype=np.float64)
    if C <= 0:
        raise InvalidInputError("C must be positive")
    if eps < 0:
        raise InvalidInputError("epsilon must be non-negative")
    Xa = _augment(X)
    if Xa.shape[0] != y.size:
        raise InvalidInputError("feature/target count mismatch")
    if y.size == 0:
        raise InvalidInputError("empty training set")
    w, beta, viol = _svr_cd(Xa, y, float(C), float(eps), float(tol), int(max_sweeps))
    if not np.all(np.isfinite(w)):
        raise NumericalError("SVR training produced non-finite weights")
    model = LinearModel(w=w[:-1].copy(), b=float(w[-1]))
    info = {
        "beta": beta,
        "kkt_violation": float(viol),
        "dual_objective": float(0.5 * w @ w + eps * np.abs(beta).sum() - y @ beta),
    }
    return model, info


def jacobi_eigh(A: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = 60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) sorted ascending, ties broken by
    original index; each eigenvector's largest-magnitude component is
    made positive so the output is deterministic.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidInputError("jacobi_eigh expects a square matrix")
    if not np.allclose(A, A.T, atol=1e-10):
        raise InvalidInputError("jacobi_eigh expects a symmetric matrix")
    n = A.shape[0]
    a = np.ascontiguousarray((A + A.T) / 2.0)
    v = np.eye(n)
    tol_off = tol * max(1.0, float(np.linalg.norm(a)))
    _jacobi_sweeps(a, v, tol_off, int(max_sweeps))
    evals = np.diag(a).copy()
    order = np.lexsort((np.arange(n), evals))
    evals = evals[order]
    vecs = v[:, order]
    for j in range(n):
        k = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[k, j] < 0:
            vecs[:, j] = -vecs[:, j]
    return evals, vecs


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of a vector onto the probability simplex."""
    return project_rows_simplex(np.asarray(v, dtype=np.float64)[None, :])[0]


def project_rows_simplex(M: np.ndarray) -> np.ndarray:
    """Row-wise simplex projection by the sort-and-threshold rule."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[1] < 1:
        raise InvalidInputError("expected a 2-D matrix with at least one column")
    n = M.shape[1]
    u = np.sort(M, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1) - 1.0
    cond = u - css / np.arange(1, n + 1) > 0.0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)  # index of last True (first is always True)
    tau = css[np.arange(M.shape[0]), rho] / (rho + 1.0)
    return np.maximum(M - tau[:, None], 0.0)
