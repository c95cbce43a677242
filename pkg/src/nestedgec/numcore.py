"""Dense float32 tensors with reverse-mode differentiation.

Only the primitives the sequence models need are provided. Every op works
on plain numpy arrays underneath; a ``Tensor`` remembers the tensors it was
built from and a closure that pushes its gradient back to them.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> loss = (w * w).sum()
    >>> loss.backward()
    >>> w.grad.tolist()
    [2.0, 4.0]
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float32

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no backward graph inside the block (inference, beam search)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "id", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.array(data, dtype=dtype or DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.id = next(_ids)
        out.name = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._prev = tuple(parents)
            out._backward = backward
        else:
            out._prev = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward ---------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        The graph is released afterwards; calling backward twice on the same
        result is an error.
        """
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node._prev:
                if p.id not in seen and p.requires_grad:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {self.id: np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(node.id, None)
            if node._backward is None:
                # leaf
                if g is not None:
                    node._accum(g)
                continue
            if g is None:
                continue
            for parent, pg in zip(node._prev, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
            node._prev = ()
            node._backward = None

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self):
        return total(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return (0.5 * (np.tanh(0.5 * a) + 1.0)).astype(a.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._make(np.where(pos, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.log(xd), (x,), lambda g: (g / xd,))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b`` (mask is constant)."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, a.data, b.data)
    sa, sb = a.shape, b.shape
    return Tensor._make(out, (a, b), lambda g: (_unbroadcast(np.where(m, g, 0), sa),
                                                _unbroadcast(np.where(m, 0, g), sb)))


# -- shape ops --------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                        lambda g: (np.broadcast_to(g, shape).astype(x.data.dtype),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._make(np.concatenate([x.data for x in xs], axis=axis), xs, back)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([x.data for x in xs], axis=axis), xs, back)


def take(x: Tensor, index) -> Tensor:
    """Basic or fancy indexing; gradients scatter-add back."""
    shape, dtype = x.shape, x.data.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(x.data[index], (x,), back)


def index_put(base: Tensor, index, values: Tensor) -> Tensor:
    """Copy of ``base`` with ``base[index] = values``; differentiable in both."""
    out = base.data.copy()
    out[index] = values.data

    def back(g):
        gb = g.copy()
        gb[index] = 0
        return gb, g[index]

    return Tensor._make(out, (base, values), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    shape, dtype = table.shape, table.data.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return Tensor._make(table.data[ids], (table,), back)


# -- linear algebra ---------------------------------------------------------


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` with ``x`` of shape (..., k) and ``w`` of shape (k, n)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data

    def back(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return Tensor._make(xd @ wd, (x, w), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def batched_dot(q: Tensor, keys: Tensor) -> Tensor:
    """Scores ``out[b, t] = q[b] . keys[b, t]``; q (B, A), keys (B, T, A)."""
    qd, kd = q.data, keys.data

    def back(g):
        return np.einsum("bt,bta->ba", g, kd), g[:, :, None] * qd[:, None, :]

    return Tensor._make(np.einsum("ba,bta->bt", qd, kd), (q, keys), back)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """``out[b] = sum_t weights[b, t] * values[b, t]``; values (B, T, D)."""
    wd, vd = weights.data, values.data

    def back(g):
        return np.einsum("bd,btd->bt", g, vd), wd[:, :, None] * g[:, None, :]

    return Tensor._make(np.einsum("bt,btd->bd", wd, vd), (weights, values), back)


# -- normalisation ----------------------------------------------------------


def _check_finite_nonempty(a: np.ndarray) -> None:
    if a.size == 0 or a.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    if np.isnan(a).any():
        raise FloatingPointError("softmax input contains NaN")


def softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; positions with ``mask == False`` get 0."""
    x = as_tensor(x)
    _check_finite_nonempty(x.data)
    a = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row with every position masked")
        a = np.where(mask, a, -np.inf)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(x.data.dtype)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    _check_finite_nonempty(x.data)
    a = x.data
    z = a - a.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(y, (x,), back)


def nll(logp: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under ``logp`` (..., V)."""
    targets = np.asarray(targets, dtype=np.int64)
    flat = logp.data.reshape(-1, logp.shape[-1])
    t = targets.reshape(-1)
    w = np.ones(t.shape, dtype=logp.data.dtype) if mask is None else np.asarray(mask, dtype=logp.data.dtype).reshape(-1)
    rows = np.arange(t.size)
    val = -(flat[rows, t] * w).sum(dtype=np.float64)
    shape, dtype = logp.shape, logp.data.dtype

    def back(g):
        full = np.zeros((t.size, shape[-1]), dtype=dtype)
        full[rows, t] = -w * g
        return (full.reshape(shape),)

    return Tensor._make(np.asarray(val, dtype=dtype), (logp,), back)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    return nll(log_softmax(logits), targets, mask)


# -- dropout / randomness ---------------------------------------------------


class Rng:
    """Seeded generator; the same seed always yields the same draw stream."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(DTYPE)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(size=shape, dtype=np.float32)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def dropout(x: Tensor, rate: float, rng: Rng | None, train: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/keep at train time, identity otherwise."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an Rng")
    keep = 1.0 - rate
    m = (rng.random(x.shape) < keep).astype(x.data.dtype) / np.asarray(keep, dtype=x.data.dtype)
    return Tensor._make(x.data * m, (x,), lambda g: (g * m,))


# -- GRU ----------------------------------------------------------------------


def gru_params(prefix: str, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    return params[prefix + "/W"], params[prefix + "/U"], params[prefix + "/Uh"], params[prefix + "/b"]


def gru_cell(params: Mapping[str, Tensor] | tuple, h_prev: Tensor, x: Tensor, prefix: str = "") -> Tensor:
    """One GRU step.

    Weights: ``W`` (E, 3H) maps the input to update/reset/candidate
    pre-activations, ``U`` (H, 2H) maps the previous state to update/reset,
    ``Uh`` (H, H) maps the reset-gated state to the candidate, ``b`` (3H) is
    one bias per gate::

        z  = sigmoid(x Wz + h Uz + bz)
        r  = sigmoid(x Wr + h Ur + br)
        h~ = tanh(x Wh + (r * h) Uh + bh)
        h' = (1 - z) * h + z * h~

    ``params`` is either a mapping holding ``prefix/W`` etc. or the 4-tuple
    itself. Works on a single vector or a (B, ·) batch.
    """
    W, U, Uh, b = gru_params(prefix, params) if prefix else params
    H = Uh.shape[0]
    if W.shape != (x.shape[-1], 3 * H) or U.shape != (H, 2 * H) or b.shape != (3 * H,):
        raise ValueError(f"GRU weights {W.shape}/{U.shape}/{Uh.shape}/{b.shape} "
                         f"do not fit input {x.shape[-1]} and state {H}")
    if h_prev.shape[-1] != H:
        raise ValueError(f"GRU state has size {h_prev.shape[-1]}, expected {H}")
    xd, hd = x.data, h_prev.data
    Wd, Ud, Uhd, bd = W.data, U.data, Uh.data, b.data
    xw = xd @ Wd + bd
    hu = hd @ Ud
    z = _sigmoid(xw[..., :H] + hu[..., :H])
    r = _sigmoid(xw[..., H:2 * H] + hu[..., H:])
    rh = r * hd
    c = np.tanh(xw[..., 2 * H:] + rh @ Uhd)
    out = (1.0 - z) * hd + z * c

    def back(g):
        gz = g * (c - hd)
        gc = g * z
        gh = g * (1.0 - z)
        ac = gc * (1.0 - c * c)          # candidate pre-activation
        grh = ac @ Uhd.T
        gUh = _outer(rh, ac)
        gr = grh * hd
        gh = gh + grh * r
        az = gz * z * (1.0 - z)
        ar = gr * r * (1.0 - r)
        a_zr = np.concatenate([az, ar], axis=-1)
        gh = gh + a_zr @ Ud.T
        gU = _outer(hd, a_zr)
        a_all = np.concatenate([az, ar, ac], axis=-1)
        gx = a_all @ Wd.T
        gW = _outer(xd, a_all)
        gb = a_all.reshape(-1, 3 * H).sum(axis=0)
        return gh, gx, gW, gU, gUh, gb

    out = out.astype(np.result_type(hd, xd, Wd, Ud, Uhd, bd), copy=False)
    return Tensor._make(out, (h_prev, x, W, U, Uh, b), back)


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


# -- gradient utilities -------------------------------------------------------


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_gradients(grads: Mapping[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    """Rescale all gradients together when their global L2 norm exceeds ``threshold``."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm <= threshold or norm == 0.0:
        return dict(grads)
    scale = threshold / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}


def check_gradients(f: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-4,
                    samples_per_param: int = 8, rng: np.random.Generator | None = None,
                    names: Iterable[str] | None = None, oracle_dtype=np.float64) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` recomputes a scalar loss from the current parameter values and
    must be deterministic. Backprop runs at the parameters' own precision;
    the finite differences are evaluated with the parameters cast to
    ``oracle_dtype`` (pass None to difference in the native precision).
    Up to ``samples_per_param`` coordinates per tensor are probed; the error
    is ``|analytic - numeric| / max(1, |numeric|)``. Keep ``eps`` small when
    the loss contains ReLUs: a step across a kink shows up as a large error.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in gradient check")
    loss.backward()
    analytic = {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for n, p in params.items()}
    native = {n: p.data for n, p in params.items()}
    if oracle_dtype is not None:
        for p in params.values():
            p.data = p.data.astype(oracle_dtype)
    worst = 0.0
    try:
        for name in (names if names is not None else params.keys()):
            p = params[name]
            n = p.data.size
            picks = np.arange(n) if n <= samples_per_param else rng.choice(n, samples_per_param, replace=False)
            flat = p.data.reshape(-1)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + eps
                up = float(f().data)
                flat[i] = orig - eps
                down = float(f().data)
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise FloatingPointError("non-finite loss in gradient check")
                numeric = (up - down) / (2 * eps)
                err = abs(float(analytic[name].reshape(-1)[i]) - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    finally:
        for n, p in params.items():
            p.data = native[n]
            p.zero_grad()
    return worst
