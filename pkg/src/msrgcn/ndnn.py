"""Dense kernels with hand-written reverse-mode gradients.

Arrays are float64 and row-oriented: a batch of vectors is an ``(n, dim)``
array, a weight matrix is ``(out_dim, in_dim)``. Forward functions that need
intermediate values for their gradient return them as a cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

LN_EPS = 1e-5


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def linear(x, W, b=None):
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} does not match weight {W.shape}")
    y = x @ W.T
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (W.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match weight {W.shape}")
        y = y + b
    return y


def linear_grad(dy, x, W):
    """Gradients ``(dx, dW, db)`` of ``y = x W^T + b``."""
    dy = np.asarray(dy, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return dy @ W, np.outer(dy, x), dy.copy()
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def layer_norm(x, gain=None, offset=None, eps=LN_EPS):
    """Normalize over the last axis with population variance.

    Returns ``(y, cache)``.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    y = xhat
    if gain is not None:
        y = y * gain
    if offset is not None:
        y = y + offset
    return y, (xhat, inv_std, gain)


def layer_norm_grad(dy, cache):
    """Gradients ``(dx, dgain, doffset)``."""
    xhat, inv_std, gain = cache
    dy = np.asarray(dy, dtype=np.float64)
    lead = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=lead)
    doffset = dy.sum(axis=lead)
    dxhat = dy * gain if gain is not None else dy
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, doffset


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(dy, x):
    return dy * (np.asarray(x) > 0)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_grad(dy, s, axis=-1):
    """Gradient through ``s = softmax(x)`` given upstream ``dy``."""
    return s * (dy - (dy * s).sum(axis=axis, keepdims=True))


def log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def weighted_cross_entropy(logits, labels, class_weights):
    """Class-weighted cross entropy and its gradient w.r.t. ``logits``.

    A single sample (1-D logits, scalar label) gives ``-w_y log p_y``. A batch
    is reduced by dividing the weighted sum by the sum of the sample weights.
    """
    logits = np.asarray(logits, dtype=np.float64)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    labels = np.atleast_1d(np.asarray(labels))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if class_weights.shape != (k,):
        raise ValueError(f"expected {k} class weights, got shape {class_weights.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be integers in [0, {k})")
    logp = log_softmax(logits)
    w = class_weights[labels]
    nll = -logp[np.arange(n), labels]
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad *= w[:, None]
    if single:
        return float(w[0] * nll[0]), grad[0]
    norm = w.sum()
    return float((w * nll).sum() / norm), grad / norm


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        m_new[name], v_new[name] = m, v
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_params, AdamState(m_new, v_new, t)


@dataclass
class GradReport:
    errors: dict[str, float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def relative_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(
    loss_fn: Callable[[dict], float],
    params: dict,
    analytic: dict,
    step: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    With ``max_coords`` set, each tensor is probed at that many random
    coordinates (at least 64); otherwise every coordinate is checked.
    """
    if max_coords is not None:
        max_coords = max(64, max_coords)
        rng = rng if rng is not None else np.random.default_rng(0)
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    errors = {}
    for name, p in work.items():
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(len(coords))
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(work)
            flat[i] = orig - step
            down = loss_fn(work)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite loss while probing {name}[{i}]")
            numeric[n] = (up - down) / (2.0 * step)
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[coords]
        errors[name] = float(relative_error(a, numeric).max()) if len(coords) else 0.0
    return GradReport(errors, tol)
