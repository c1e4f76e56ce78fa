"""Independent reference implementations and a finite-difference harness.

Everything here is deliberately written the slow, obvious way (python
loops, direct formula transcription) and never imports model code, so a
bug in the package cannot hide in its own test oracle.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def finite_difference_gradients(
    f: Callable[[], float], arrays: Sequence[np.ndarray], h: float = 1e-5
) -> list[np.ndarray]:
    """Central-difference gradient of f with respect to each array.

    Perturbs entries in place and restores them; f must recompute its
    output from the current array contents on every call.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f()
            flat[i] = keep - h
            down = f()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


# ---------------------------------------------------------------------------
# tensor-op references
# ---------------------------------------------------------------------------


def conv2d_reference(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0
) -> np.ndarray:
    n, c, h, wid = x.shape
    f, _, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        h += 2 * padding
        wid += 2 * padding
    ho = (h - kh) // stride + 1
    wo = (wid - kw) // stride + 1
    out = np.zeros((n, f, ho, wo), dtype=np.float64)
    for ni in range(n):
        for fi in range(f):
            for oy in range(ho):
                for ox in range(wo):
                    patch = x[ni, :, oy * stride : oy * stride + kh, ox * stride : ox * stride + kw]
                    out[ni, fi, oy, ox] = float((patch * w[fi]).sum()) + float(b[fi])
    return out


def avg_pool_reference(x: np.ndarray, pool: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho = (h - pool) // stride + 1
    wo = (w - pool) // stride + 1
    out = np.zeros((n, c, ho, wo), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    window = x[ni, ci, oy * stride : oy * stride + pool, ox * stride : ox * stride + pool]
                    out[ni, ci, oy, ox] = window.mean()
    return out


def batch_norm_reference(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = ((x - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)  # biased
    xn = (x - mu) / np.sqrt(var + eps)
    return gamma[None, :, None, None] * xn + beta[None, :, None, None]


def softmax_reference(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# capsule references
# ---------------------------------------------------------------------------


def squash_reference(s: np.ndarray, axis: int = -1) -> np.ndarray:
    norm = np.linalg.norm(s, axis=axis, keepdims=True)
    scale = norm**2 / (1.0 + norm**2) / np.where(norm > 0, norm, 1.0)
    return s * scale


def route_reference(votes: np.ndarray, iters: int) -> tuple[np.ndarray, np.ndarray]:
    """Plain-loop agreement routing; votes (num_in, num_out, dim).

    Returns (output capsules (num_out, dim), final couplings
    (num_in, num_out)).
    """
    num_in, num_out, dim = votes.shape
    b = np.zeros((num_in, num_out), dtype=np.float64)
    for _ in range(iters):
        c = np.zeros_like(b)
        for i in range(num_in):
            e = np.exp(b[i] - b[i].max())
            c[i] = e / e.sum()
        s = np.zeros((num_out, dim), dtype=np.float64)
        for j in range(num_out):
            for i in range(num_in):
                s[j] += c[i, j] * votes[i, j]
        v = np.array([squash_reference(s[j], axis=0) for j in range(num_out)])
        for i in range(num_in):
            for j in range(num_out):
                b[i, j] += float(np.dot(v[j], votes[i, j]))
    return v, c


# ---------------------------------------------------------------------------
# objective references
# ---------------------------------------------------------------------------


def margin_loss_reference(
    lengths: np.ndarray,
    one_hot: np.ndarray,
    m_plus: float = 0.9,
    m_minus: float = 0.1,
    lam: float = 0.5,
) -> float:
    total = 0.0
    for k in range(len(lengths)):
        if one_hot[k]:
            total += max(0.0, m_plus - lengths[k]) ** 2
        else:
            total += lam * max(0.0, lengths[k] - m_minus) ** 2
    return total


def weighted_loss_reference(loss_pos: float, loss_neg: float, n_pos: int, n_neg: int) -> float:
    total = n_pos + n_neg
    return (n_pos / total) * loss_neg + (n_neg / total) * loss_pos


def batch_objective_reference(
    lengths: np.ndarray,
    targets: np.ndarray,
    n_pos: int,
    n_neg: int,
    positive_index: int = 1,
    m_plus: float = 0.9,
    m_minus: float = 0.1,
    lam: float = 0.5,
) -> float:
    per_sample = []
    for row, t in zip(lengths, targets):
        one_hot = np.zeros(len(row))
        one_hot[t] = 1.0
        per_sample.append(margin_loss_reference(row, one_hot, m_plus, m_minus, lam))
    pos = [l for l, t in zip(per_sample, targets) if t == positive_index]
    neg = [l for l, t in zip(per_sample, targets) if t != positive_index]
    total = n_pos + n_neg
    loss_pos = sum(pos) / len(pos) if pos else 0.0
    loss_neg = sum(neg) / len(neg) if neg else 0.0
    return (n_neg / total) * loss_pos + (n_pos / total) * loss_neg


# ---------------------------------------------------------------------------
# metric references
# ---------------------------------------------------------------------------


def auc_bruteforce(scores: np.ndarray, is_positive: np.ndarray) -> float:
    """All-pairs Mann-Whitney statistic with 0.5 credit for ties."""
    pos = scores[is_positive]
    neg = scores[~is_positive]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def adam_reference(
    param: np.ndarray,
    grads: Sequence[np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """Apply a fixed gradient sequence to a copy of param, the slow way."""
    p = param.astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p
