"""Float64 numeric kernels with hand-written reverse-mode gradients.

Each differentiable op comes as a forward function returning the output plus
whatever the backward pass needs, and a ``*_backward`` that maps the upstream
gradient to input/parameter gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from herbgen.errors import NumericError

_GELU_C = math.sqrt(2.0 / math.pi)


def check_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {name}")
    return x


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax of ``scores + mask`` over the last axis.

    ``mask`` holds 0 (visible) or -inf (hidden); hidden entries come out as
    exact zeros.
    """
    z = scores + mask
    top = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise NumericError("attention row with no visible column")
    e = np.exp(z - top)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    top = logits.max(axis=-1, keepdims=True)
    shifted = logits - top
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def attention_head(H, Wq, Wk, Wv, mask):
    """Single masked attention head: ``softmax(Q K^T / sqrt(d_k) + M) V``."""
    H = np.atleast_2d(H)
    if Wq.shape != Wk.shape or Wq.shape[0] != H.shape[1] or Wv.shape[0] != H.shape[1]:
        raise ValueError("projection shapes do not conform to H")
    n = H.shape[0]
    if mask.shape != (n, n):
        raise ValueError(f"mask shape {mask.shape} != {(n, n)}")
    d_k = Wq.shape[1]
    if d_k <= 0:
        raise ValueError("d_k must be positive")
    q, k, v = H @ Wq, H @ Wk, H @ Wv
    return masked_softmax(q @ k.T / math.sqrt(d_k), mask) @ v


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


def layer_norm_backward(dy: np.ndarray, cache, gamma: np.ndarray):
    xhat, rstd = cache
    red = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=red)
    dbeta = dy.sum(axis=red)
    dxhat = dy * gamma
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def cross_entropy(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray | None = None):
    """Weighted mean negative log-likelihood and its gradient w.r.t. ``logits``.

    ``logits`` is (M, V). Without weights every row counts 1/M.
    """
    logits = np.atleast_2d(logits)
    targets = np.asarray(targets, dtype=np.int64)
    m, v = logits.shape
    if m == 0:
        raise ValueError("cross_entropy needs at least one scored position")
    if targets.shape != (m,):
        raise ValueError("one target per logit row required")
    if np.any(targets < 0) or np.any(targets >= v):
        raise ValueError(f"target id outside vocabulary of size {v}")
    w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=np.float64)
    logp = log_softmax(logits)
    nll = -logp[np.arange(m), targets]
    loss = float(w @ nll)
    grad = np.exp(logp)
    grad[np.arange(m), targets] -= 1.0
    grad *= w[:, None]
    return loss, grad


@dataclass
class Adam:
    """Adam over a name -> array mapping, updated in place.

    Iteration follows the parameter order given at construction.
    """

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        scale = 1.0
        if self.max_grad_norm is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if scale != 1.0:
                g = g * scale
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}
