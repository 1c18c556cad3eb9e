"""A small define-by-run autodiff engine over numpy arrays.

Every op builds a fresh node that records its parents and a closure mapping
the output gradient to parent gradients.  ``Tensor.backward`` walks the tape
in reverse topological order, so each node is visited exactly once.  Dtype
follows the inputs: float32 for training, float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError

BN_EPS = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """The one source of randomness: a seeded counter-based (Philox) generator."""
    return np.random.Generator(np.random.Philox(int(seed)))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values produced by '{op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op
        # only leaves accumulate; interior gradients live on the tape
        self.grad = np.zeros_like(arr) if (self.requires_grad and not _parents) else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ConfigError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.grad is not None:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward, op) -> Tensor:
    parents = tuple(parents)
    need = any(p.requires_grad for p in parents)
    if not need:
        return Tensor(data, op=op)
    return Tensor(data, True, parents, backward, op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), back, "div")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(x.data * x.dtype.type(s), (x,), lambda g: (g * g.dtype.type(s),), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def elu_plus_one(x: Tensor) -> Tensor:
    """phi(x) = elu(x) + 1, the positive feature map used by linear attention."""
    pos = x.data > 0
    neg_exp = np.exp(np.minimum(x.data, 0))
    out = np.where(pos, x.data + 1, neg_exp).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * np.where(pos, 1, neg_exp).astype(x.dtype),), "elu_plus_one")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


# -- linear algebra and shape ---------------------------------------------------

def matmul(a, b) -> Tensor:
    """(…, m, k) @ (…, k, n); leading batch axes broadcast like numpy."""
    a, b = _pair(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), back, "matmul")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.data.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis, keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ConfigError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / x.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / x.dtype.type(temperature),)

    return _make(out, (x,), back, "softmax")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, back, "concat")


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)

    def back(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(x.data, idx, axis=axis), (x,), back, "gather")


def slice_(x: Tensor, index) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), back, "slice")


class _StopGradientReplay:
    """Freezes stop_gradient outputs at recorded values (used by grad_check).

    In "record" mode each stop_gradient call stores its value; in "replay"
    mode the i-th call returns the i-th stored value instead of its input,
    so finite differences see the stopped branch as a constant.
    """

    mode: str | None = None
    values: list = []
    cursor: int = 0


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity that cuts the tape: nothing flows back to ``x``."""
    rep = _StopGradientReplay
    if rep.mode == "record":
        rep.values.append(x.data.copy())
    elif rep.mode == "replay":
        frozen = rep.values[rep.cursor]
        rep.cursor += 1
        return Tensor(frozen, op="stop_gradient")
    return Tensor(x.data, op="stop_gradient")


# -- normalization --------------------------------------------------------------

def l2_batchnorm(x: Tensor, eps: float = BN_EPS) -> Tensor:
    """Divide every column of a (B, K) batch by its root mean square.

    After the layer each column has mean square 1 (up to ``eps``), which is
    exactly the unit second-moment constraint on the eigenfunctions.
    """
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise ConfigError(f"l2_batchnorm expects a non-empty (B, K) input, got {x.shape}")
    B = x.shape[0]
    ms = (x.data * x.data).mean(axis=0, keepdims=True)
    if eps <= 0 and np.any(ms == 0):
        col = int(np.flatnonzero(ms[0] == 0)[0])
        raise NumericError(f"degenerate normalization: column {col} is identically zero")
    denom = np.sqrt(ms + x.dtype.type(eps))
    out = x.data / denom

    def back(g):
        # d out_bj / d x_aj = delta_ab / s_j - x_bj x_aj / (B s_j^3)
        proj = (g * x.data).sum(axis=0, keepdims=True)
        return ((g - x.data * proj / (B * denom * denom)) / denom,)

    return _make(out, (x,), back, "l2_batchnorm")


def layer_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale by ``gain``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    d = x.shape[-1]

    def back(g):
        gg = _unbroadcast(g * xhat, gain.shape)
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gg

    return _make(xhat * gain.data, (x, gain), back, "layer_norm")


# -- optimization ---------------------------------------------------------------

@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if len(params) != len(grads):
        raise ConfigError("params and grads differ in length")
    for i, g in enumerate(grads):
        if not np.isfinite(g).all():
            raise NumericError(f"optimizer received a non-finite gradient for parameter {i}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ConfigError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if not g.any() and not m.any():
            continue
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= step.astype(p.dtype)
    return state


class Adam:
    """Adam over a list of leaf tensors; reads and clears their ``grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None):
        adam_step([p.data for p in self.params], [p.grad for p in self.params],
                  self.state, self.lr if lr is None else lr)


# -- validation -----------------------------------------------------------------

class GradCheckError(NumericError):
    pass


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``f`` must rebuild its graph on every call from the current contents of
    ``params``.  The step for entry x is ``h * max(1, |x|)``.  Values passing
    through ``stop_gradient`` are frozen at the unperturbed point, so the
    finite differences measure the same (partial) gradient that reverse mode
    propagates.  Returns the largest per-parameter relative error
    ``|g_ad - g_fd| / (|g_ad| + |g_fd|)`` (2-norms); identical zero gradients
    count as error 0.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ConfigError("grad_check requires float64 parameters")
        p.zero_grad()
    rep = _StopGradientReplay
    rep.mode, rep.values = "record", []
    try:
        try:
            out = f()
        except NumericError as exc:
            raise GradCheckError(f"non-finite value at the unperturbed point: {exc}") from exc
        out.backward()
        rep.mode = "replay"
        return _finite_difference_errors(f, params, h)
    finally:
        rep.mode, rep.values, rep.cursor = None, [], 0


def _finite_difference_errors(f, params, h) -> float:
    rep = _StopGradientReplay
    worst = 0.0
    for pi, p in enumerate(params):
        analytic = p.grad.copy()
        numeric = np.zeros_like(analytic)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            try:
                flat[i] = orig + step
                rep.cursor = 0
                fp = float(f().data)
                flat[i] = orig - step
                rep.cursor = 0
                fm = float(f().data)
            except NumericError as exc:
                raise GradCheckError(f"non-finite value at parameter {pi}, entry {i}: {exc}") from exc
            finally:
                flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
        denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
        if denom > 0:
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
