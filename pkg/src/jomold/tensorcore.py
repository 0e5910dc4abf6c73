"""Dense float64 numerics: activations, BCE, parameter-free attention and a
finite-difference gradient checker.

Arrays are plain ``numpy.ndarray`` objects.  Functions accept stacked inputs
(leading batch axes) wherever the math allows, which is how the model uses
them.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError, NumericError

PROB_EPS = 1e-7
FD_STEP = 1e-4
RNG_ALGORITHM = "numpy.Philox4x64-10/SeedSequence"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` independent generators derived from one seed (seed splitting)."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.Philox(s)) for s in children]


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_rows(m: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``m / scale`` with max subtraction."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    m = np.asarray(m, dtype=np.float64)
    _check_finite(m, "softmax input")
    return softmax(m / scale, axis=-1)


def softmax_backward(w: np.ndarray, grad_w: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient w.r.t. the logits given softmax output ``w`` and dL/dw."""
    return w * (grad_w - np.sum(grad_w * w, axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function.

    No clamping happens here: below about -745 the result underflows to 0.
    Callers that take logs go through :func:`bce_elementwise`, which clamps.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, "sigmoid input")
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clamp_prob(p: np.ndarray, eps: float = PROB_EPS) -> np.ndarray:
    return np.clip(p, eps, 1.0 - eps)


def bce_elementwise(
    p: np.ndarray, y: np.ndarray, positive_only: bool = False, eps: float = PROB_EPS
) -> np.ndarray:
    """``-(y log p + (1-y) log(1-p))`` with ``p`` clamped to ``[eps, 1-eps]``.

    ``positive_only`` drops the negative term.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"prediction shape {p.shape} != label shape {y.shape}")
    _check_finite(p, "BCE predictions")
    pc = clamp_prob(p, eps)
    loss = -y * np.log(pc)
    if not positive_only:
        loss -= (1.0 - y) * np.log1p(-pc)
    return loss


def bce_grad(
    p: np.ndarray, y: np.ndarray, positive_only: bool = False, eps: float = PROB_EPS
) -> np.ndarray:
    """dBCE/dp; zero where the clamp is active."""
    pc = clamp_prob(p, eps)
    g = -y / pc
    if not positive_only:
        g = g + (1.0 - y) / (1.0 - pc)
    return np.where((p > eps) & (p < 1.0 - eps), g, 0.0)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float):
    """``softmax(q k^T / scale) v`` over the last two axes.

    Returns the output and the attention weights (kept for the backward pass).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"attention shapes q{q.shape} k{k.shape} v{v.shape} do not line up"
        )
    scores = q @ np.swapaxes(k, -1, -2) / scale
    w = softmax(scores, axis=-1)
    return w @ v, w


def attention_backward(q, k, v, w, scale: float, grad_out):
    """Gradients of :func:`attention` w.r.t. ``q``, ``k`` and ``v``."""
    grad_v = np.swapaxes(w, -1, -2) @ grad_out
    grad_w = grad_out @ np.swapaxes(v, -1, -2)
    grad_s = softmax_backward(w, grad_w, axis=-1) / scale
    grad_q = grad_s @ k
    grad_k = np.swapaxes(grad_s, -1, -2) @ q
    return grad_q, grad_k, grad_v


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    h: float = FD_STEP,
) -> float:
    """Max over coordinates of ``|g_fd - g_an| / max(1, |g_fd|, |g_an|)``.

    ``g_fd`` is the central difference ``(f(x+h e_i) - f(x-h e_i)) / 2h``.
    """
    x = np.array(x, dtype=np.float64).ravel()
    g_an = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if g_an.shape != x.shape:
        raise DimensionError(f"gradient shape {g_an.shape} != point shape {x.shape}")
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        fp, fm = float(f(xp)), float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"objective is non-finite near coordinate {i}")
        g_fd = (fp - fm) / (2.0 * h)
        err = abs(g_fd - g_an[i]) / max(1.0, abs(g_fd), abs(g_an[i]))
        worst = max(worst, err)
    return worst
