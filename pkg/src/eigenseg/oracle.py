"""Exact references: dense Jacobi eigensolver, K-means, spectral clustering, ARI."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigError, DataError, NumericError
from .graph_kernel import SparseSymMatrix
from .tensor_core import make_rng

MAX_SWEEPS = 100


@dataclass
class EigenDecomposition:
    eigenvalues: np.ndarray  # (n,), descending
    eigenvectors: np.ndarray  # (n, n), column j pairs with eigenvalues[j]
    sweeps: int = 0

    def top(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.eigenvalues[:k], self.eigenvectors[:, :k]


@numba.njit(cache=True)
def _jacobi_sweeps(a, vt, tol, max_sweeps):
    # a is symmetric and updated row-wise (rows are contiguous), then
    # mirrored into the columns; vt holds eigenvectors as rows.
    n = a.shape[0]
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += a[p, q] * a[p, q]
        if math.sqrt(2.0 * off) <= tol:
            return sweep
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    sgn = 1.0 if theta >= 0.0 else -1.0
                    t = sgn / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    if k != p and k != q:
                        a[k, p] = a[p, k]
                        a[k, q] = a[q, k]
                for k in range(n):
                    vp = vt[p, k]
                    vq = vt[q, k]
                    vt[p, k] = c * vp - s * vq
                    vt[q, k] = s * vp + c * vq
    return -1


def eigh(A, tol: float = 1e-10) -> EigenDecomposition:
    """Cyclic Jacobi eigendecomposition of a dense symmetric matrix.

    Sweeps until the off-diagonal Frobenius norm drops below
    ``tol * ||A||_F``.  Eigenpairs come back in descending order; each
    eigenvector's largest-magnitude entry is made positive.
    """
    if isinstance(A, SparseSymMatrix):
        A = A.todense()
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DataError(f"eigh needs a square matrix, got shape {A.shape}")
    asym = np.abs(A - A.T).max() if A.size else 0.0
    if asym > 1e-8:
        raise DataError(f"eigh input is not symmetric (max |A - A^T| = {asym:.3e})")
    n = A.shape[0]
    a = np.ascontiguousarray(0.5 * (A + A.T))
    vt = np.eye(n)
    sweeps = _jacobi_sweeps(a, vt, tol * np.linalg.norm(A), MAX_SWEEPS)
    if sweeps < 0:
        raise NumericError(f"Jacobi did not converge in {MAX_SWEEPS} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    Q = vt[order].T.copy()
    lead = np.abs(Q).argmax(axis=0)
    signs = np.where(Q[lead, np.arange(n)] < 0, -1.0, 1.0)
    return EigenDecomposition(w[order], Q * signs, sweeps)


# -- K-means --------------------------------------------------------------------

@dataclass
class KMeansModel:
    centers: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)


def _sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    closest = _sq_distances(X, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a center; fall back to unused indices
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        closest = np.minimum(closest, _sq_distances(X, X[idx][None])[:, 0])
    return np.array(centers)


def kmeans_fit(X, K: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6,
               n_init: int = 1) -> KMeansModel:
    """k-means++ seeding followed by Lloyd iterations.

    With ``n_init > 1`` the restarts share one RNG stream and the run with the
    lowest final inertia wins (earliest on ties).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if K < 1 or n < K:
        raise ConfigError(f"kmeans needs 1 <= K <= n (K={K}, n={n})")
    if n_init < 1:
        raise ConfigError(f"n_init must be >= 1, got {n_init}")
    rng = make_rng(seed)
    best = None
    for _ in range(n_init):
        model = _lloyd(X, _kmeans_pp(X, K, rng), max_iter, tol)
        if best is None or model.inertia < best.inertia:
            best = model
    return best


def _lloyd(X: np.ndarray, C: np.ndarray, max_iter: int, tol: float) -> KMeansModel:
    n, K = len(X), len(C)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_distances(X, C)
        labels = d.argmin(axis=1)
        cost = d[np.arange(n), labels]
        history.append(float(cost.sum()))
        newC = C.copy()
        counts = np.bincount(labels, minlength=K)
        for j in range(K):
            if counts[j]:
                newC[j] = X[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            far = int(cost.argmax())
            newC[j] = X[far]
            cost[far] = 0.0
        shift = np.sqrt(((newC - C) ** 2).sum(axis=1)).max()
        C = newC
        if shift < tol:
            break
    d = _sq_distances(X, C)
    inertia = float(d.min(axis=1).sum())
    history.append(inertia)
    return KMeansModel(C, inertia, it, history)


def kmeans_predict(model: KMeansModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return _sq_distances(X, model.centers).argmin(axis=1)


# -- spectral clustering ----------------------------------------------------------

def spectral_embedding(kappa, K: int, normalize_rows: bool = True,
                       decomposition: EigenDecomposition | None = None) -> np.ndarray:
    """Rows of the top-K eigenvectors of the kernel (largest eigenvalues first)."""
    dec = decomposition if decomposition is not None else eigh(kappa)
    _, V = dec.top(K)
    if normalize_rows:
        norms = np.linalg.norm(V, axis=1, keepdims=True)
        V = V / np.where(norms > 0, norms, 1.0)
    return V


def spectral_cluster(kappa, K: int, n_clusters: int, seed: int = 0, normalize_rows: bool = True,
                     n_init: int = 8, decomposition: EigenDecomposition | None = None) -> np.ndarray:
    """Classical normalized spectral clustering on the kernel's top-K eigenvectors.

    Pass a precomputed ``decomposition`` of ``kappa`` to skip the eigensolve.
    """
    if n_clusters == 1:
        n = kappa.n if isinstance(kappa, SparseSymMatrix) else len(kappa)
        return np.zeros(n, dtype=np.int64)
    emb = spectral_embedding(kappa, K, normalize_rows, decomposition)
    return kmeans_predict(kmeans_fit(emb, n_clusters, seed, n_init=n_init), emb)


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def adjusted_rand_index(a, b) -> float:
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise DataError(f"label length mismatch: {a.size} vs {b.size}")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    index = _comb2(table).sum()
    sa = _comb2(table.sum(1)).sum()
    sb = _comb2(table.sum(0)).sum()
    expected = sa * sb / _comb2(n) if n > 1 else 0.0
    max_index = 0.5 * (sa + sb)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))
