"""Deterministic differentiable ops for the GPT stack.

Each op is a small class: ``forward(...)`` caches whatever the backward pass
needs and returns a plain numpy array, ``backward(d_out)`` applies the
closed-form gradient rules and returns gradients for every input, in input
order. Ops preserve the input dtype, so the same code path runs in float32
for training and float64 for gradient checking. Outputs are checked for
NaN/Inf and raise instead of silently propagating.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError, NonFiniteError, ShapeError

# tanh-approximation constants for gelu
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


class Param:
    """A trainable tensor with an additively accumulated gradient.

    ``grad`` always has the same shape/dtype as ``value`` and starts at zero;
    ``decay`` marks whether decoupled weight decay applies (matrices yes,
    biases and layernorm parameters no).
    """

    __slots__ = ("name", "value", "grad", "decay")

    def __init__(self, name: str, value: np.ndarray, decay: bool = True):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.decay = decay

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.grad.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != param shape {self.grad.shape} for {self.name}"
            )
        self.grad += g

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape}, decay={self.decay})"


class Matmul:
    """c = a @ b with explicit backward: dA = dC @ B^T, dB = A^T @ dC.

    Supports plain 2-D matmul, stacked (batched) operands with identical
    leading dims, and the common (..., k) @ (k, n) weight application.
    """

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"leading dims differ: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return check_finite(a @ b, "matmul output")

    def backward(self, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.a, self.b
        if b.ndim == 2:
            da = d_out @ b.T
            db = a.reshape(-1, a.shape[-1]).T @ d_out.reshape(-1, d_out.shape[-1])
        else:
            da = d_out @ np.swapaxes(b, -1, -2)
            db = np.swapaxes(a, -1, -2) @ d_out
        return da, db


class LayerNorm:
    """Per-row normalization to zero mean / unit variance, then affine.

    y = (x - mean) / sqrt(var + eps) * gain + bias, statistics over the last
    axis. Backward for x uses the standard three-term rule:
    dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
    """

    def forward(
        self, x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5
    ) -> np.ndarray:
        if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
            raise ShapeError(f"gain/bias {gain.shape}/{bias.shape} vs features {x.shape[-1:]}")
        if eps <= 0:
            raise ValueError("eps must be positive")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv_std
        self.gain = gain
        return check_finite(self.xhat * gain + bias, "layernorm output")

    def backward(self, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d2 = d_out.reshape(-1, d_out.shape[-1])
        xhat2 = self.xhat.reshape(-1, d_out.shape[-1])
        dgain = (d2 * xhat2).sum(axis=0)
        dbias = d2.sum(axis=0)
        dxhat = d_out * self.gain
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * self.xhat).mean(axis=-1, keepdims=True)
        dx = self.inv_std * (dxhat - m1 - self.xhat * m2)
        return dx, dgain, dbias


class Gelu:
    """Gaussian error linear unit, tanh approximation (GPT-2 convention)."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        self.t = np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))
        return check_finite(0.5 * x * (1.0 + self.t), "gelu output")

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        x, t = self.x, self.t
        dt_dx = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return d_out * (0.5 * (1.0 + t) + 0.5 * x * dt_dx)


class Softmax:
    """Numerically stable softmax along one axis; rows sum to 1."""

    def __init__(self, axis: int = -1):
        self.axis = axis

    def forward(self, x: np.ndarray) -> np.ndarray:
        z = x - x.max(axis=self.axis, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=self.axis, keepdims=True)
        return check_finite(self.out, "softmax output")

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        s = self.out
        inner = (d_out * s).sum(axis=self.axis, keepdims=True)
        return s * (d_out - inner)


class EmbeddingLookup:
    """Row gather out = table[ids]; backward scatter-adds into the table."""

    def forward(self, table: np.ndarray, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            bad = ids[(ids < 0) | (ids >= table.shape[0])].ravel()[0]
            raise InputError(f"token id {int(bad)} outside [0, {table.shape[0]})")
        self.table_shape = table.shape
        self.table_dtype = table.dtype
        self.ids = ids
        return table[ids]

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        d_table = np.zeros(self.table_shape, dtype=self.table_dtype)
        np.add.at(d_table, self.ids, d_out)
        return d_table


class CrossEntropy:
    """Mean next-token NLL over positions whose target != ignore_index.

    Forward computes a stable log-softmax; backward returns
    (softmax - onehot) / n_kept on kept rows and exact zeros elsewhere.
    """

    def __init__(self, ignore_index: int = -1):
        self.ignore_index = ignore_index

    def forward(self, logits: np.ndarray, targets: np.ndarray) -> float:
        v = logits.shape[-1]
        flat = logits.reshape(-1, v)
        t = np.asarray(targets).reshape(-1)
        if t.shape[0] != flat.shape[0]:
            raise ShapeError(f"targets {t.shape} vs logits rows {flat.shape[0]}")
        keep = t != self.ignore_index
        if not keep.any():
            raise InputError("cross_entropy: every position is ignored")
        tk = t[keep]
        if tk.min() < 0 or tk.max() >= v:
            raise InputError(f"target id outside [0, {v})")
        z = flat - flat.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = z - lse
        self.probs = np.exp(logp)
        self.keep = keep
        self.targets_kept = tk
        self.n_kept = int(keep.sum())
        self.logits_shape = logits.shape
        loss = float(-logp[keep, tk].sum() / self.n_kept)
        if not np.isfinite(loss):
            raise NonFiniteError("non-finite cross_entropy loss")
        return loss

    def backward(self, d_loss: float = 1.0) -> np.ndarray:
        d = np.zeros_like(self.probs)
        d[self.keep] = self.probs[self.keep]
        rows = np.nonzero(self.keep)[0]
        d[rows, self.targets_kept] -= 1.0
        d *= d_loss / self.n_kept
        return d.reshape(self.logits_shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return Matmul().forward(a, b)


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    return LayerNorm().forward(x, gain, bias, eps)


def gelu(x: np.ndarray) -> np.ndarray:
    return Gelu().forward(x)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return Softmax(axis).forward(x)


def embedding_lookup(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return EmbeddingLookup().forward(table, ids)


def cross_entropy(logits: np.ndarray, targets: np.ndarray, ignore_index: int = -1) -> float:
    return CrossEntropy(ignore_index).forward(logits, targets)
