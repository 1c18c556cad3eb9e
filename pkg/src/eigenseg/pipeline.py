"""Workflows shared by the command line and the end-to-end checks.

Label maps come in two resolutions: the patch grid ``(n_img, h, w)``, where
every method natively assigns one cluster per patch, and pixel masks at the
image size, rendered through the same bilinear-upsample + argmax path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import FeatureContainer
from .eigenmodel import EigenModel
from .errors import ConfigError, DataError
from .graph_kernel import global_kernel, patch_set
from .neuralef import TrainConfig
from .oracle import EigenDecomposition, eigh, kmeans_fit, kmeans_predict, spectral_cluster
from .segmentation import argmax_assign, labels_to_logits, predict_masks, upsample_bilinear


@dataclass
class OracleResult:
    labels: np.ndarray  # (n_img, h, w) cluster ids
    decomposition: EigenDecomposition
    n_clusters: int


def image_size(fc: FeatureContainer) -> tuple[int, int]:
    h, w = fc.grid
    return h * fc.patch_size, w * fc.patch_size


def render_masks(labels: np.ndarray, n_clusters: int, size: tuple[int, int]) -> list[np.ndarray]:
    """Pixel masks from patch-grid labels via one-hot bilinear upsampling."""
    H, W = size
    return [argmax_assign(upsample_bilinear(labels_to_logits(lab, n_clusters), H, W)) for lab in labels]


def oracle_labels(fc: FeatureContainer, cfg: TrainConfig, n_eigvecs: int, n_clusters: int,
                  seed: int = 0) -> OracleResult:
    """Exact spectral clustering of the global kernel over all patches."""
    n = int(np.prod(fc.features.shape[:3]))
    if not 1 <= n_eigvecs <= n or not 1 <= n_clusters <= n:
        raise ConfigError(f"need 1 <= eigvecs, n_clusters <= {n} patches")
    kappa = global_kernel(patch_set(fc.features, fc.pixel_planes), cfg.kernel_config())
    dec = eigh(kappa)
    lab = spectral_cluster(kappa, n_eigvecs, n_clusters, seed=seed, decomposition=dec)
    return OracleResult(lab.reshape(fc.features.shape[:3]), dec, n_clusters)


def kmeans_labels(features: np.ndarray, K: int, seed: int = 0,
                  predict_features: np.ndarray | None = None) -> np.ndarray:
    """K-means on (n_img, h, w, c) features; labels for ``predict_features`` (default: same)."""
    X = np.asarray(features, dtype=np.float64)
    model = kmeans_fit(X.reshape(-1, X.shape[-1]), K, seed)
    Y = X if predict_features is None else np.asarray(predict_features, dtype=np.float64)
    if Y.shape[-1] != X.shape[-1]:
        raise DataError(f"prediction features have {Y.shape[-1]} channels, model expects {X.shape[-1]}")
    return kmeans_predict(model, Y.reshape(-1, Y.shape[-1])).reshape(Y.shape[:3])


def model_patch_labels(model: EigenModel, features: np.ndarray) -> np.ndarray:
    return model.forward_infer(features).argmax(axis=-1)


def model_masks(model: EigenModel, fc: FeatureContainer, protocol: str = "crop",
                window: tuple[int, int] | None = None, stride: tuple[int, int] | None = None) -> list[np.ndarray]:
    if model.c != fc.channels:
        raise DataError(f"model expects {model.c} feature channels, container has {fc.channels}")
    return predict_masks(model.forward_infer, fc.features, image_size(fc), protocol, window, stride)
