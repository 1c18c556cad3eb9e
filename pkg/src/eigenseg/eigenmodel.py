"""Neural eigenfunction psi: dense patch features -> K cluster logits.

Architecture (per image, patches are tokens)::

    x = features @ W_in + b_in
    repeat n_blocks:
        x = x + LinearAttention(LayerNorm(x))
        x = x + FFN(LayerNorm(x))           # d -> 4d -> d, ReLU
    logits = x @ W_head                     # W_head (d, K), orthonormal columns

Training mode adds Gumbel-Softmax sampling and an L2 batch normalization
over all patches of the batch; inference returns the raw logits.

NEFM file layout (little endian)::

    b"NEFM" | u32 version=1 | u32 n_blocks | u32 d | u32 K | u32 c
    float32 parameters, each flattened row-major, in ``param_names()`` order:
    W_in (c,d), b_in (d,), then per block i
    ln1_{i} (d,), Wq_{i}, Wk_{i}, Wv_{i}, Wo_{i} (d,d), ln2_{i} (d,),
    W1_{i} (d,4d), b1_{i} (4d,), W2_{i} (4d,d), b2_{i} (d,), finally W_head (d,K).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, DataError, FormatError, NumericError
from .tensor_core import Tensor

MAGIC = b"NEFM"
VERSION = 1
FFN_RATIO = 4
GUMBEL_CLAMP = 1e-12


@dataclass(frozen=True)
class TemperatureSchedule:
    tau_start: float = 1.0
    tau_end: float = 0.3
    total_steps: int = 1

    def __post_init__(self):
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ConfigError("temperatures must be positive")
        if self.tau_end > self.tau_start:
            raise ConfigError("temperature schedule must be non-increasing")


def temperature_at(sched: TemperatureSchedule, t: int) -> float:
    """Cosine anneal from ``tau_start`` (t=0) to ``tau_end`` (t=total_steps)."""
    T = sched.total_steps
    if not 0 <= t <= T:
        raise ConfigError(f"step {t} outside schedule [0, {T}]")
    frac = t / T if T > 0 else 1.0
    return sched.tau_end + (sched.tau_start - sched.tau_end) * (1 + math.cos(math.pi * frac)) / 2


def linear_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Non-causal linear attention over axis -2 with phi = elu + 1."""
    fq = tc.elu_plus_one(q)
    fk = tc.elu_plus_one(k)
    kv = tc.transpose(fk, (0, 2, 1)) @ v            # (n, d, d)
    z = fk.sum(axis=1, keepdims=True)               # (n, 1, d)
    num = fq @ kv                                   # (n, T, d)
    den = (fq * z).sum(axis=-1, keepdims=True)      # (n, T, 1)
    return num / den


def orthonormal_columns(W: np.ndarray) -> np.ndarray:
    """QR-based column orthonormalization with non-negative R diagonal."""
    W64 = np.asarray(W, dtype=np.float64)
    d, K = W64.shape
    if d < K:
        raise ConfigError(f"head needs d >= K (d={d}, K={K})")
    Q, R = np.linalg.qr(W64, mode="reduced")
    diag = np.diag(R)
    scale_ = np.abs(diag).max() if K else 0.0
    if K and (scale_ == 0 or np.abs(diag).min() <= 1e-10 * scale_):
        raise NumericError("rank-deficient head: cannot orthogonalize")
    return Q * np.where(diag < 0, -1.0, 1.0)


class EigenModel:
    def __init__(self, c: int, d: int = 64, K: int = 256, n_blocks: int = 2,
                 seed: int | np.random.Generator = 0, dtype=np.float32):
        if min(c, d, K) < 1 or n_blocks < 0:
            raise ConfigError(f"invalid model shape c={c} d={d} K={K} n_blocks={n_blocks}")
        if d < K:
            raise ConfigError(f"model width d={d} must be >= K={K}")
        self.c, self.d, self.K, self.n_blocks = c, d, K, n_blocks
        self.dtype = np.dtype(dtype)
        rng = seed if isinstance(seed, np.random.Generator) else tc.make_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in self.param_shapes():
            self.params[name] = Tensor(self._init(name, shape, rng), requires_grad=True)

    # -- parameters ---------------------------------------------------------

    def param_shapes(self) -> list[tuple[str, tuple]]:
        d, h = self.d, FFN_RATIO * self.d
        shapes = [("W_in", (self.c, d)), ("b_in", (d,))]
        for i in range(self.n_blocks):
            shapes += [
                (f"ln1_{i}", (d,)), (f"Wq_{i}", (d, d)), (f"Wk_{i}", (d, d)),
                (f"Wv_{i}", (d, d)), (f"Wo_{i}", (d, d)), (f"ln2_{i}", (d,)),
                (f"W1_{i}", (d, h)), (f"b1_{i}", (h,)), (f"W2_{i}", (h, d)), (f"b2_{i}", (d,)),
            ]
        shapes.append(("W_head", (d, self.K)))
        return shapes

    def param_names(self) -> list[str]:
        return [n for n, _ in self.param_shapes()]

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self.param_names()]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _init(self, name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
        if name == "W_head":
            return orthonormal_columns(rng.standard_normal(shape)).astype(self.dtype)
        if name.startswith(("ln1", "ln2")):
            return np.ones(shape, dtype=self.dtype)
        if len(shape) == 1:
            return np.zeros(shape, dtype=self.dtype)
        bound = 1.0 / math.sqrt(shape[0])
        return rng.uniform(-bound, bound, size=shape).astype(self.dtype)

    def orthogonalize_head(self) -> "EigenModel":
        W = self.params["W_head"]
        W.data[...] = orthonormal_columns(W.data).astype(self.dtype)
        return self

    # -- forward passes -----------------------------------------------------

    def _tokens(self, features) -> tuple[Tensor, tuple]:
        f = np.asarray(features)
        if f.ndim != 4 or f.shape[-1] != self.c:
            raise DataError(f"expected features (n_img, h, w, {self.c}), got {f.shape}")
        n, h, w, c = f.shape
        return Tensor(f.reshape(n, h * w, c).astype(self.dtype, copy=False)), (n, h, w)

    def _prehead(self, x: Tensor) -> Tensor:
        p = self.params
        x = x @ p["W_in"] + p["b_in"]
        for i in range(self.n_blocks):
            y = tc.layer_norm(x, p[f"ln1_{i}"])
            att = linear_attention(y @ p[f"Wq_{i}"], y @ p[f"Wk_{i}"], y @ p[f"Wv_{i}"])
            x = x + att @ p[f"Wo_{i}"]
            y = tc.layer_norm(x, p[f"ln2_{i}"])
            x = x + tc.relu(y @ p[f"W1_{i}"] + p[f"b1_{i}"]) @ p[f"W2_{i}"] + p[f"b2_{i}"]
        return x

    def logits(self, features) -> Tensor:
        """Head outputs as a differentiable (n_img*h*w, K) tensor."""
        x, (n, h, w) = self._tokens(features)
        out = self._prehead(x) @ self.params["W_head"]
        return out.reshape(n * h * w, self.K)

    def forward_train(self, features, tau: float, rng: np.random.Generator, hard: bool = False) -> Tensor:
        """Psi for a training batch: Gumbel-Softmax samples, then L2 batch norm."""
        return self.forward_train_parts(features, tau, rng, hard)[1]

    def forward_train_parts(self, features, tau: float, rng: np.random.Generator,
                            hard: bool = False) -> tuple[Tensor, Tensor]:
        """(Gumbel-Softmax samples, Psi); the samples are the pre-normalization values."""
        y = gumbel_softmax(self.logits(features), tau, rng, hard=hard)
        return y, tc.l2_batchnorm(y)

    def forward_infer(self, features) -> np.ndarray:
        x, (n, h, w) = self._tokens(features)
        out = self._prehead(x) @ self.params["W_head"]
        return out.data.reshape(n, h, w, self.K)

    def forward_prehead(self, features) -> np.ndarray:
        x, (n, h, w) = self._tokens(features)
        return self._prehead(x).data.reshape(n, h, w, self.d)

    def soft_assignments(self, features, tau: float) -> Tensor:
        """Noise-free counterpart of forward_train (used for eigenvalue estimates)."""
        return tc.l2_batchnorm(tc.softmax(self.logits(features), temperature=tau))

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<5I", VERSION, self.n_blocks, self.d, self.K, self.c)]
        for p in self.parameters():
            parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EigenModel":
        if len(blob) < 24 or blob[:4] != MAGIC:
            raise FormatError("not an NEFM model file (bad magic)")
        version, n_blocks, d, K, c = struct.unpack("<5I", blob[4:24])
        if version != VERSION:
            raise FormatError(f"unsupported NEFM version {version}")
        model = cls.__new__(cls)
        model.c, model.d, model.K, model.n_blocks = c, d, K, n_blocks
        model.dtype = np.dtype(np.float32)
        expected = 24 + 4 * sum(math.prod(s) for _, s in model.param_shapes())
        if len(blob) != expected:
            raise FormatError(f"NEFM size mismatch: expected {expected} bytes, got {len(blob)}")
        model.params = {}
        offset = 24
        for name, shape in model.param_shapes():
            count = math.prod(shape)
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
            if not np.isfinite(arr).all():
                raise FormatError(f"non-finite values in parameter {name}")
            model.params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
            offset += 4 * count
        return model

    @classmethod
    def load(cls, path) -> "EigenModel":
        return cls.from_bytes(Path(path).read_bytes())

    def astype(self, dtype) -> "EigenModel":
        """Copy of the model with parameters cast to ``dtype``."""
        clone = EigenModel.__new__(EigenModel)
        clone.c, clone.d, clone.K, clone.n_blocks = self.c, self.d, self.K, self.n_blocks
        clone.dtype = np.dtype(dtype)
        clone.params = {n: Tensor(p.data.astype(dtype), requires_grad=True) for n, p in self.params.items()}
        return clone


def gumbel_softmax(logits: Tensor, tau: float, rng: np.random.Generator, hard: bool = False) -> Tensor:
    """softmax((logits + g) / tau) with g = -log(-log u), u ~ U(0, 1) clamped.

    ``hard`` switches to a straight-through one-hot (experimental).
    """
    if tau <= 0:
        raise ConfigError(f"Gumbel-Softmax temperature must be positive, got {tau}")
    u = rng.random(logits.shape)
    u = np.clip(u, GUMBEL_CLAMP, 1 - GUMBEL_CLAMP)
    g = (-np.log(-np.log(u))).astype(logits.dtype)
    y = tc.softmax(logits + Tensor(g), axis=-1, temperature=tau)
    if not hard:
        return y
    onehot = np.zeros_like(y.data)
    np.put_along_axis(onehot, y.data.argmax(axis=-1)[..., None], 1, axis=-1)
    return y + Tensor(onehot - y.data)
