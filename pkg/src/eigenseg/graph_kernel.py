"""k-NN affinity graphs over patch features and down-sampled pixels.

The kernel fed to the trainer is

    kappa = D^-1/2 A D^-1/2 + alpha * Dp^-1/2 Ap Dp^-1/2

with ``A`` a cosine k-NN graph over features (negative cosines clamped to 0)
and ``Ap`` a binary k-NN graph over (row, col, r, g, b) pixel vectors that
never links two different images.  Both graphs exclude self loops, break
distance ties toward the lower index, and are symmetrized with an
elementwise max.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError, IsolatedVertexError


@dataclass
class PatchSet:
    """Patches of one or more images, flattened to rows.

    features: (n, c); pixels: (n, 5) with normalized (row, col, r, g, b);
    image_id: (n,) image index of every patch.
    """

    features: np.ndarray
    pixels: np.ndarray | None
    image_id: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.image_id = np.asarray(self.image_id, dtype=np.int64)
        if self.pixels is not None:
            self.pixels = np.asarray(self.pixels, dtype=np.float64)
            if self.pixels.shape != (len(self.features), 5):
                raise DataError(f"pixel vectors must be (n, 5), got {self.pixels.shape}")
        if self.image_id.shape != (len(self.features),):
            raise DataError("image_id length differs from the number of patches")

    def __len__(self):
        return len(self.features)


@dataclass(frozen=True)
class KernelConfig:
    k: int = 256
    k_pixel: int = 8
    alpha: float = 0.3

    def __post_init__(self):
        if self.k < 1 or self.k_pixel < 1:
            raise ConfigError(f"neighbor counts must be >= 1 (k={self.k}, k_pixel={self.k_pixel})")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")


class SparseSymMatrix:
    """Symmetric CSR matrix without explicit zeros."""

    def __init__(self, csr: sp.csr_matrix):
        csr = sp.csr_matrix(csr)
        csr.eliminate_zeros()
        csr.sort_indices()
        if csr.shape[0] != csr.shape[1]:
            raise DataError(f"matrix must be square, got {csr.shape}")
        self.csr = csr

    @property
    def n(self) -> int:
        return self.csr.shape[0]

    @property
    def indptr(self):
        return self.csr.indptr

    @property
    def indices(self):
        return self.csr.indices

    @property
    def values(self):
        return self.csr.data

    @property
    def nnz(self) -> int:
        return self.csr.nnz

    def degrees(self) -> np.ndarray:
        return np.asarray(self.csr.sum(axis=1)).ravel()

    def todense(self) -> np.ndarray:
        return self.csr.toarray()

    def is_symmetric(self) -> bool:
        diff = self.csr - self.csr.T
        return diff.nnz == 0 or not np.any(diff.data)

    def __repr__(self):
        return f"SparseSymMatrix(n={self.n}, nnz={self.nnz})"


def _symmetric_max(rows: np.ndarray, cols: np.ndarray, vals: np.ndarray, n: int) -> SparseSymMatrix:
    directed = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return SparseSymMatrix(directed.maximum(directed.T))


def cosine_similarity(F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    norms = np.linalg.norm(F, axis=1)
    if np.any(norms == 0):
        raise DataError(f"zero-norm feature row {int(np.flatnonzero(norms == 0)[0])}")
    U = F / norms[:, None]
    S = U @ U.T
    # exact symmetry lets max(A, A^T) keep the same float on both sides
    return 0.5 * (S + S.T)


def feature_knn_indices(F: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Neighbor indices (n, k) and cosine values (n, k) per row, self excluded."""
    n = len(F)
    if k >= n:
        raise ConfigError(f"k={k} must be smaller than the number of patches n={n}")
    S = cosine_similarity(F)
    keyed = -S
    np.fill_diagonal(keyed, np.inf)
    order = np.argsort(keyed, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(S, order, axis=1)


def build_feature_knn(F: np.ndarray, k: int, symmetric: bool = True) -> SparseSymMatrix | sp.csr_matrix:
    """Cosine k-NN affinity, weight max(0, cos).

    With ``symmetric=False`` the directed (row -> its k neighbors) matrix is
    returned instead, as a plain CSR matrix.
    """
    n = len(F)
    idx, cos = feature_knn_indices(F, k)
    rows = np.repeat(np.arange(n), k)
    vals = np.maximum(cos.ravel(), 0.0)
    if not symmetric:
        m = sp.csr_matrix((vals, (rows, idx.ravel())), shape=(n, n))
        m.eliminate_zeros()
        return m
    return _symmetric_max(rows, idx.ravel(), vals, n)


def pixel_knn_indices(X: np.ndarray, image_id: np.ndarray, k: int) -> np.ndarray:
    """Global indices (n, k) of each point's L2 nearest neighbors in its own image."""
    X = np.asarray(X, dtype=np.float64)
    image_id = np.asarray(image_id)
    out = np.empty((len(X), k), dtype=np.int64)
    for img in np.unique(image_id):
        members = np.flatnonzero(image_id == img)
        if len(members) <= k:
            raise ConfigError(f"image {img} has {len(members)} patches, needs more than k_pixel={k}")
        P = X[members]
        diff = P[:, None, :] - P[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        np.fill_diagonal(d2, np.inf)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        out[members] = members[order]
    return out


def build_pixel_knn(X: np.ndarray, image_id: np.ndarray, k: int, symmetric: bool = True):
    """Binary same-image k-NN graph over (row, col, r, g, b) vectors."""
    n = len(X)
    idx = pixel_knn_indices(X, image_id, k)
    rows = np.repeat(np.arange(n), k)
    vals = np.ones(n * k)
    if not symmetric:
        return sp.csr_matrix((vals, (rows, idx.ravel())), shape=(n, n))
    return _symmetric_max(rows, idx.ravel(), vals, n)


def normalize_adjacency(A: SparseSymMatrix) -> SparseSymMatrix:
    """D^-1/2 A D^-1/2; raises on any zero-degree row."""
    deg = A.degrees()
    bad = np.flatnonzero(deg <= 0)
    if len(bad):
        raise IsolatedVertexError(int(bad[0]))
    csr = A.csr.tocoo()
    vals = csr.data / np.sqrt(deg[csr.row] * deg[csr.col])
    return SparseSymMatrix(sp.csr_matrix((vals, (csr.row, csr.col)), shape=csr.shape))


def combine_kernel(A_norm: SparseSymMatrix, P_norm: SparseSymMatrix, alpha: float) -> SparseSymMatrix:
    if A_norm.n != P_norm.n:
        raise ConfigError(f"kernel dimension mismatch: {A_norm.n} vs {P_norm.n}")
    if alpha == 0:
        return SparseSymMatrix(A_norm.csr.copy())
    return SparseSymMatrix(A_norm.csr + alpha * P_norm.csr)


def pixel_vectors(pixel_planes: np.ndarray) -> np.ndarray:
    """Fuse (n_img, h, w, 3) colors in [0, 1] with normalized positions -> (n_img*h*w, 5)."""
    n_img, h, w, _ = pixel_planes.shape
    rows = np.arange(h) / (h - 1) if h > 1 else np.zeros(1)
    cols = np.arange(w) / (w - 1) if w > 1 else np.zeros(1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    pos = np.broadcast_to(np.stack([rr, cc], axis=-1), (n_img, h, w, 2))
    return np.concatenate([pos, pixel_planes], axis=-1).reshape(-1, 5).astype(np.float64)


def patch_set(features: np.ndarray, pixel_planes: np.ndarray | None, image_ids=None) -> PatchSet:
    """Flatten (n_img, h, w, c) features (+ optional pixel planes) into a PatchSet."""
    n_img, h, w, c = features.shape
    ids = np.arange(n_img) if image_ids is None else np.asarray(image_ids)
    return PatchSet(
        features=features.reshape(-1, c),
        pixels=None if pixel_planes is None else pixel_vectors(pixel_planes),
        image_id=np.repeat(ids, h * w),
    )


def global_kernel(patches: PatchSet, cfg: KernelConfig, k_cap: bool = True) -> SparseSymMatrix:
    """Combined kernel over every patch in ``patches``.

    With ``k_cap`` the feature neighbor count is clipped to n - 1.
    """
    n = len(patches)
    k = min(cfg.k, n - 1) if k_cap else cfg.k
    A = normalize_adjacency(build_feature_knn(patches.features, k))
    if cfg.alpha == 0:
        return A
    if patches.pixels is None:
        raise DataError("pixel planes are required when alpha > 0")
    P = normalize_adjacency(build_pixel_knn(patches.pixels, patches.image_id, cfg.k_pixel))
    return combine_kernel(A, P, cfg.alpha)


def batch_kernel(batch: PatchSet, cfg: KernelConfig) -> np.ndarray:
    """Dense kernel restricted to a mini-batch of whole images."""
    return global_kernel(batch, cfg, k_cap=True).todense()
