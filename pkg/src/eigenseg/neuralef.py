"""NeuralEF objective and training loop.

For a batch of B patches with outputs Psi (B, K) and kernel kappa (B, B)::

    R     = Psi^T kappa Psi / B^2
    R_hat = stop_gradient(Psi)^T kappa Psi / B^2
    loss  = -sum_j R_jj + beta * sum_{i<j} R_hat_ij^2

The penalty only pushes later outputs away from earlier ones, which orders
the learned eigenfunctions.  Eigenvalue estimates use the matrix convention
``mu_j = n * R_jj`` (unit mean-square Psi over n points).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .eigenmodel import EigenModel, TemperatureSchedule, temperature_at
from .errors import ConfigError, DataError, NumericError
from .graph_kernel import KernelConfig, batch_kernel, global_kernel, patch_set
from .tensor_core import Tensor

log = logging.getLogger(__name__)

BETA_REF = 0.08
K_REF = 256
DEAD_RMS = 1e-3
EIGENVALUE_CONVENTION = "matrix (mu_j = n * R_jj, n = number of patches)"


def default_beta(K: int) -> float:
    """beta scaled inversely with K around (K=256, beta=0.08): K=512 -> 0.04."""
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    return BETA_REF * K_REF / K


@dataclass
class TrainConfig:
    K: int = 256
    beta: float | None = None
    alpha: float = 0.3
    k: int = 256
    k_pixel: int = 8
    batch_images: int = 16
    epochs: int = 40
    lr: float = 1e-3
    tau_start: float = 1.0
    tau_end: float = 0.3
    seed: int = 0
    width: int = 0
    n_blocks: int = 2
    hard_gumbel: bool = False

    def __post_init__(self):
        if self.beta is None:
            self.beta = default_beta(self.K)
        self.validate()

    def validate(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_images < 1 or self.epochs < 1:
            raise ConfigError("batch_images and epochs must be >= 1")
        if self.width and self.width < self.K:
            raise ConfigError(f"width={self.width} must be >= K={self.K}")
        if self.n_blocks < 0:
            raise ConfigError("n_blocks must be >= 0")
        TemperatureSchedule(self.tau_start, self.tau_end)
        self.kernel_config()

    @property
    def model_width(self) -> int:
        return self.width or max(64, self.K)

    def kernel_config(self) -> KernelConfig:
        return KernelConfig(k=self.k, k_pixel=self.k_pixel, alpha=self.alpha)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TrainReport:
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    rjj: list = field(default_factory=list)
    constraint_dev: list = field(default_factory=list)
    degenerate: list = field(default_factory=list)
    eigenvalues: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return len(self.loss)

    def record(self, loss: float, lr: float, tau: float, R: np.ndarray, Psi: np.ndarray,
               pre: np.ndarray | None = None):
        self.loss.append(float(loss))
        self.lr.append(float(lr))
        self.tau.append(float(tau))
        self.rjj.append(np.diag(0.5 * (R + R.T)).astype(np.float64).copy())
        # the unit mean-square constraint is only meaningful for columns whose
        # pre-normalization RMS is at least DEAD_RMS; dead ones are counted instead
        ms = (Psi.astype(np.float64) ** 2).mean(axis=0)
        if pre is None:
            live = np.ones(ms.shape, bool)
        else:
            live = np.sqrt((pre.astype(np.float64) ** 2).mean(axis=0)) >= DEAD_RMS
        self.degenerate.append(int((~live).sum()))
        self.constraint_dev.append(float(np.abs(ms[live] - 1).max(initial=0.0)))

    def lines(self, head: int = 8) -> list[str]:
        out = [f"# eigenvalue convention: {EIGENVALUE_CONVENTION}",
               "# step loss lr tau rjj[:head]"]
        for t in range(self.steps):
            rj = ",".join(f"{v:.6g}" for v in self.rjj[t][:head])
            out.append(f"step={t} loss={self.loss[t]:.8g} lr={self.lr[t]:.6g} "
                       f"tau={self.tau[t]:.6g} rjj={rj}")
        if self.eigenvalues is not None:
            out.append("eigenvalues=" + ",".join(f"{v:.6g}" for v in self.eigenvalues))
        return out

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


def compute_R(Psi: Tensor, kappa: np.ndarray) -> tuple[Tensor, Tensor]:
    """Monte Carlo estimates of R and R_hat from a batch (Psi is (B, K))."""
    kappa = np.asarray(kappa)
    B = Psi.shape[0]
    if kappa.shape != (B, B):
        raise DataError(f"kernel shape {kappa.shape} does not match batch size {B}")
    if np.abs(kappa - kappa.T).max() > 1e-8:
        raise DataError("batch kernel is not symmetric")
    KP = Tensor(kappa.astype(Psi.dtype, copy=False)) @ Psi
    inv = 1.0 / (B * B)
    R = tc.scale(tc.transpose(Psi) @ KP, inv)
    R_hat = tc.scale(tc.transpose(tc.stop_gradient(Psi)) @ KP, inv)
    return R, R_hat


def neuralef_loss(R: Tensor, R_hat: Tensor, beta: float) -> Tensor:
    K = R.shape[0]
    if R.shape != (K, K) or R_hat.shape != (K, K):
        raise DataError(f"R and R_hat must be square and equal, got {R.shape}, {R_hat.shape}")
    eye = np.eye(K, dtype=R.dtype)
    trace = (R * eye).sum()
    if K == 1:
        return -trace
    upper = R_hat * np.triu(np.ones((K, K), dtype=R.dtype), k=1)
    return tc.scale(trace, -1.0) + tc.scale(tc.square(upper).sum(), beta)


def cosine_lr(lr0: float, t: int, total: int) -> float:
    """Cosine decay reaching exactly zero at the last step ``total - 1``."""
    if total <= 1:
        return lr0
    return lr0 * (1 + math.cos(math.pi * t / (total - 1))) / 2


# -- fixed-kernel training (linear psi) -------------------------------------------

class LinearEigenfunction:
    """psi(x) = l2_batchnorm(x W); a full-batch reference model."""

    def __init__(self, c: int, K: int, seed: int = 0, dtype=np.float32):
        rng = tc.make_rng(seed)
        self.W = Tensor(rng.standard_normal((c, K)).astype(dtype) / np.sqrt(c), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.W]

    def __call__(self, X) -> Tensor:
        return tc.l2_batchnorm(Tensor(np.asarray(X, dtype=self.W.dtype)) @ self.W)


def fit_fixed_kernel(psi, X, kappa, beta: float, steps: int, lr: float = 1e-3,
                     callback: Callable | None = None) -> TrainReport:
    """Full-batch NeuralEF on one fixed kernel; ``psi(X)`` returns Psi (n, K)."""
    opt = tc.Adam(psi.parameters(), lr=lr)
    report = TrainReport()
    for t in range(steps):
        Psi = psi(X)
        R, R_hat = compute_R(Psi, kappa)
        loss = neuralef_loss(R, R_hat, beta)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at step {t}")
        opt.zero_grad()
        loss.backward()
        step_lr = cosine_lr(lr, t, steps)
        opt.step(step_lr)
        report.record(loss.data, step_lr, 0.0, R.data, Psi.data)
        if callback is not None:
            callback(t, psi, Psi)
    report.eigenvalues = eigenvalue_estimates(psi(X).data, kappa)
    return report


def eigenvalue_estimates(Psi: np.ndarray, kappa) -> np.ndarray:
    """n * diag(Psi^T kappa Psi) / n^2, in output order."""
    Psi = np.asarray(Psi, dtype=np.float64)
    kappa = kappa.todense() if hasattr(kappa, "todense") else np.asarray(kappa)
    n = len(Psi)
    R = Psi.T @ (kappa @ Psi) / (n * n)
    return n * np.diag(0.5 * (R + R.T))


# -- full pipeline --------------------------------------------------------------

def _epoch_batches(n_images: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n_images)
    return [np.sort(perm[i:i + batch]) for i in range(0, n_images, batch)]


def train(features: np.ndarray, pixel_planes: np.ndarray | None, cfg: TrainConfig,
          callback: Callable | None = None) -> tuple[EigenModel, TrainReport]:
    """Train psi on (n_img, h, w, c) features with mini-batch kernels."""
    features = np.asarray(features)
    if features.ndim != 4 or len(features) == 0:
        raise DataError(f"expected a non-empty (n_img, h, w, c) feature array, got {features.shape}")
    n_img, h, w, c = features.shape
    rng = tc.make_rng(cfg.seed)
    model = EigenModel(c, cfg.model_width, cfg.K, cfg.n_blocks, seed=rng)
    opt = tc.Adam(model.parameters(), lr=cfg.lr)
    kcfg = cfg.kernel_config()
    per_epoch = math.ceil(n_img / cfg.batch_images)
    total = per_epoch * cfg.epochs
    sched = TemperatureSchedule(cfg.tau_start, cfg.tau_end, max(total - 1, 1))
    report = TrainReport()
    t = 0
    for epoch in range(cfg.epochs):
        for idx in _epoch_batches(n_img, cfg.batch_images, rng):
            pix = None if pixel_planes is None else pixel_planes[idx]
            kappa = batch_kernel(patch_set(features[idx], pix, idx), kcfg)
            tau = temperature_at(sched, min(t, sched.total_steps))
            y, Psi = model.forward_train_parts(features[idx], tau, rng, hard=cfg.hard_gumbel)
            R, R_hat = compute_R(Psi, kappa)
            loss = neuralef_loss(R, R_hat, cfg.beta)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at step {t}")
            opt.zero_grad()
            loss.backward()
            step_lr = cosine_lr(cfg.lr, t, total)
            opt.step(step_lr)
            model.orthogonalize_head()
            report.record(loss.data, step_lr, tau, R.data, Psi.data, y.data)
            if callback is not None:
                callback(t, model)
            t += 1
        log.debug("epoch %d loss %.6g", epoch, report.loss[-1])
    return model, report


def estimate_eigenvalues(model: EigenModel, features: np.ndarray, pixel_planes: np.ndarray | None,
                         cfg: TrainConfig, kappa=None) -> np.ndarray:
    """Full-dataset eigenvalue estimates from noise-free soft assignments."""
    if kappa is None:
        kappa = global_kernel(patch_set(features, pixel_planes), cfg.kernel_config())
    Psi = model.soft_assignments(features, cfg.tau_end).data
    return eigenvalue_estimates(Psi, kappa)
