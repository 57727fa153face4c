"""Dense-network numerics: forward ops, hand-written backward ops, SGD, and a
finite-difference oracle.

Matrices are 2-D ``float64`` numpy arrays. Row vectors (biases) are ``1 x n``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from mlb_lab.errors import ContractError, DimensionError, InputError, OracleError

FUSION_TAG = "fusion"


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def dense_forward(W: np.ndarray, b: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Affine map applied row-wise: ``X @ W.T + b``.

    Args:
        W: weights, ``out x in``.
        b: bias, ``1 x out``.
        X: batch, ``batch x in``.
    """
    if W.ndim != 2 or X.ndim != 2 or X.shape[1] != W.shape[1]:
        raise DimensionError(
            f"dense: weight shape {W.shape} incompatible with input shape {X.shape}"
        )
    if b.shape != (1, W.shape[0]):
        raise DimensionError(f"dense: bias shape {b.shape} does not match weight shape {W.shape}")
    return X @ W.T + b


def dense_backward(W: np.ndarray, X: np.ndarray, dY: np.ndarray):
    """Gradients of a dense layer given the upstream gradient ``dY``.

    Returns ``(dX, dW, db)``.
    """
    dW = dY.T @ X
    db = dY.sum(axis=0, keepdims=True)
    dX = dY @ W
    return dX, dW, db


def relu(X: np.ndarray) -> np.ndarray:
    return np.maximum(X, 0.0)


def relu_mask(X: np.ndarray) -> np.ndarray:
    # strict inequality: the derivative at exactly 0 is 0
    return (X > 0.0).astype(np.float64)


def sigmoid(X: np.ndarray) -> np.ndarray:
    out = np.empty_like(X, dtype=np.float64)
    pos = X >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-X[pos]))
    ex = np.exp(X[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def check_labels(labels, n_classes: int, n_rows: int | None = None) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise InputError(f"labels must be 1-D, got shape {y.shape}")
    if n_rows is not None and y.shape[0] != n_rows:
        raise InputError(f"{y.shape[0]} labels for {n_rows} rows")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes}), got range [{y.min()}, {y.max()}]")
    return y.astype(np.int64)


def softmax_ce(logits: np.ndarray, labels):
    """Mean softmax cross-entropy.

    Returns:
        ``(loss, dlogits, probs)`` where ``dlogits = (probs - onehot) / batch``.
    """
    n, c = logits.shape
    y = check_labels(labels, c, n)
    if n == 0:
        raise InputError("softmax_ce on an empty batch")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    rows = np.arange(n)
    loss = float(-log_probs[rows, y].mean())
    dlogits = probs.copy()
    dlogits[rows, y] -= 1.0
    dlogits /= n
    return loss, dlogits, probs


def one_hot(labels, n_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    out = np.zeros((y.shape[0], n_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


@dataclass
class ParamGroup:
    """A named set of parameter tensors updated with one balancing coefficient.

    ``modality_tag`` is ``"encoder:<i>"``, ``"head:<i>"`` or ``"fusion"``; only
    encoder groups are scaled by a modality coefficient.
    """

    name: str
    tensors: list
    grads: list
    modality_tag: str
    momentum: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.tensors) != len(self.grads):
            raise ContractError(f"group {self.name}: {len(self.tensors)} tensors, {len(self.grads)} grads")
        for t, g in zip(self.tensors, self.grads):
            if t.shape != g.shape:
                raise ContractError(f"group {self.name}: grad shape {g.shape} != tensor shape {t.shape}")

    @property
    def role(self) -> str:
        return self.modality_tag.split(":")[0]

    @property
    def modality(self) -> int | None:
        parts = self.modality_tag.split(":")
        return int(parts[1]) if len(parts) == 2 else None

    def zero_grad(self):
        for g in self.grads:
            g.fill(0.0)


def sgd_step(group: ParamGroup, lr_base: float, k: float = 1.0, momentum: float = 0.0):
    """In-place ``t <- t - lr_base * k * grad`` followed by zeroing the grads.

    With ``momentum > 0`` the coefficient scales the raw gradient before it
    enters the velocity buffer, so ``momentum=0`` is exactly plain SGD.
    """
    if not k > 0:
        raise ContractError(f"balancing coefficient must be positive, got {k!r}")
    step = lr_base * k
    if momentum:
        if not group.momentum:
            group.momentum = [np.zeros_like(t) for t in group.tensors]
        for t, g, v in zip(group.tensors, group.grads, group.momentum):
            v *= momentum
            v += k * g
            t -= lr_base * v
    else:
        for t, g in zip(group.tensors, group.grads):
            t -= step * g
    group.zero_grad()


def fd_gradient(loss_fn: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if not eps > 0:
        raise ContractError("eps must be positive")
    theta = np.array(theta, dtype=np.float64).ravel()
    grad = np.zeros_like(theta)
    for j in range(theta.size):
        orig = theta[j]
        theta[j] = orig + eps
        up = loss_fn(theta)
        theta[j] = orig - eps
        down = loss_fn(theta)
        theta[j] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise OracleError(f"non-finite loss while perturbing coordinate {j}")
        grad[j] = (up - down) / (2.0 * eps)
    return grad


def max_relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n))))


class RngStream:
    """Seeded source of independent named substreams.

    Each consumer (``"init"``, ``"data"``, ``"shuffle"``...) gets its own
    generator derived from ``(seed, name)``, so adding a consumer never moves
    the draws of another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    @staticmethod
    def _name_key(name: str) -> int:
        return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")

    def substream(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            ss = np.random.SeedSequence([self.seed & (2**64 - 1), self._name_key(name)])
            self._streams[name] = np.random.Generator(np.random.PCG64(ss))
        return self._streams[name]

    @property
    def counter(self) -> int:
        return len(self._streams)


def he_uniform(fan_out: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def linear_uniform(fan_out: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))
