"""Capsule operations: vote prediction, squashing and routing by agreement.

A capsule is a small vector whose length encodes the probability that the
entity it represents is present and whose orientation encodes the entity's
instantiation parameters. A capsule layer maps input capsules to output
capsules in three steps: each input capsule casts a vote for every output
capsule through a learned linear map, the votes are combined with coupling
coefficients that a short agreement iteration sharpens, and the combined
vector is squashed so its length lands in [0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor, einsum, softmax

__all__ = [
    "squash",
    "predict_votes",
    "route",
    "RoutingState",
    "capsule_lengths",
    "capsule_probabilities",
]

# keeps the norm gradient finite at the origin without visibly biasing lengths
_NORM_EPS = 1e-12


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Shrink vectors along ``axis`` to length ||s||^2 / (1 + ||s||^2).

    Direction is preserved; a zero vector maps to a zero vector.
    """
    nsq = (s * s).sum(axis=axis, keepdims=True)
    scale = nsq / (1.0 + nsq)
    return s * (scale / (nsq + _NORM_EPS).sqrt())


def predict_votes(u: Tensor, weights: Tensor) -> Tensor:
    """Votes u_hat[j|i] = W[i, j] @ u[i] for every input/output capsule pair.

    ``u`` is (batch, num_in, in_dim) and ``weights`` is
    (num_in, num_out, out_dim, in_dim); the result is
    (batch, num_in, num_out, out_dim).
    """
    if weights.ndim != 4:
        raise DimensionError(f"weights must be 4-D (in, out, out_dim, in_dim), got {weights.shape}")
    if u.ndim == 2:
        u = u.reshape(1, *u.shape)
    if u.ndim != 3:
        raise DimensionError(f"input capsules must be (batch, num_in, in_dim), got {u.shape}")
    num_in, _, _, in_dim = weights.shape
    if u.shape[1] != num_in or u.shape[2] != in_dim:
        raise DimensionError(
            f"input capsules {u.shape[1:]} do not match weights expecting ({num_in}, {in_dim})"
        )
    return einsum("ijdk,bik->bijd", weights, u)


@dataclass
class RoutingState:
    """Final agreement state: logits ``b``, couplings ``c``, agreements ``a``.

    All three are (batch, num_in, num_out) numpy arrays; ``c`` rows sum to 1
    over the output axis.
    """

    b: np.ndarray
    c: np.ndarray
    a: np.ndarray


def route(
    votes: Tensor, iters: int = 3, trace: Optional[list[RoutingState]] = None
) -> tuple[Tensor, RoutingState]:
    """Routing by agreement over votes shaped (batch, num_in, num_out, out_dim).

    Each iteration turns the logits into couplings with a softmax over
    output capsules, forms each output as the coupling-weighted sum of
    votes, squashes it, and reinforces the logits of votes that agree
    (dot product) with the squashed output. Returns the final output
    capsules (batch, num_out, out_dim) and the last iteration's state;
    pass a list as ``trace`` to also collect the state of every iteration.
    """
    if iters < 1:
        raise ParameterError(f"routing needs at least one iteration, got {iters}")
    if votes.ndim == 3:
        votes = votes.reshape(1, *votes.shape)
    if votes.ndim != 4:
        raise DimensionError(f"votes must be (batch, num_in, num_out, out_dim), got {votes.shape}")

    batch, num_in, num_out, _ = votes.shape
    b = Tensor(np.zeros((batch, num_in, num_out), dtype=votes.data.dtype))
    v = c = a = None
    for _ in range(iters):
        c = softmax(b, axis=-1)
        s = einsum("bij,bijd->bjd", c, votes)
        v = squash(s, axis=-1)
        a = einsum("bjd,bijd->bij", v, votes)
        b = b + a
        if trace is not None:
            trace.append(RoutingState(b=b.data.copy(), c=c.data.copy(), a=a.data.copy()))

    state = RoutingState(b=b.data.copy(), c=c.data.copy(), a=a.data.copy())
    return v, state


def capsule_lengths(v: Tensor, axis: int = -1) -> Tensor:
    """Differentiable Euclidean norms of capsule vectors along ``axis``."""
    nsq = (v * v).sum(axis=axis)
    return (nsq + _NORM_EPS).sqrt()


def capsule_probabilities(v: Tensor, axis: int = -1) -> np.ndarray:
    """Exact capsule norms as plain numbers, outside the autodiff graph.

    Use for prediction and metrics; a zero capsule yields exactly 0.
    """
    return np.linalg.norm(v.data, axis=axis)
