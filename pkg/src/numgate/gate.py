"""Numerical token detector and numerical gate.

Both are two-layer MLPs (ReLU hidden layer) over a query token embedding.
The detector emits ``P_num = sigmoid(mlp(q))``; the gate emits
``g = |Q| * sigmoid(mlp(q))``. A token is scaled by its gate value only
when ``P_num > tau``; the comparison is a hard routing decision.
"""

from dataclasses import dataclass

import numpy as np


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class MlpParams:
    """``out = W2 relu(W1 x + b1) + b2``; views into a flat parameter vector."""

    W1: np.ndarray  # (h, d)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (k, h)
    b2: np.ndarray  # (k,)

    @property
    def hidden(self):
        return self.W1.shape[0]

    @classmethod
    def zeros(cls, d, h=32, k=1):
        return cls(np.zeros((h, d)), np.zeros(h), np.zeros((k, h)), np.zeros(k))

    @classmethod
    def random(cls, d, h=32, k=1, rng=None, scale=1.0):
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(
            rng.standard_normal((h, d)) * scale / np.sqrt(d),
            np.zeros(h),
            rng.standard_normal((k, h)) * scale / np.sqrt(h),
            np.zeros(k),
        )


def mlp_forward(p, X):
    """Logits ``(N, k)`` and the cache needed by :func:`mlp_backward`."""
    A = X @ p.W1.T + p.b1
    H = np.maximum(A, 0.0)
    Z = H @ p.W2.T + p.b2
    return Z, (X, A, H)


def mlp_backward(p, cache, dZ):
    """Gradients ``(dW1, db1, dW2, db2, dX)`` for upstream ``dZ`` of shape (N, k)."""
    X, A, H = cache
    dW2 = dZ.T @ H
    db2 = dZ.sum(axis=0)
    dH = dZ @ p.W2
    dA = dH * (A > 0)
    dW1 = dA.T @ X
    db1 = dA.sum(axis=0)
    dX = dA @ p.W1
    return dW1, db1, dW2, db2, dX


@dataclass(frozen=True)
class GateConfig:
    tau: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")


def detect(q, det):
    """Detector probabilities for one embedding ``(d,)`` or rows ``(N, d)``."""
    q = np.asarray(q, dtype=float)
    z, _ = mlp_forward(det, np.atleast_2d(q))
    p = sigmoid(z[:, 0])
    return p[0] if q.ndim == 1 else p


def gate_value(q, q_len, gate):
    """``q_len * sigmoid(mlp(q))``; lies in (0, q_len) for finite logits."""
    if q_len < 1:
        raise ValueError("q_len must be >= 1")
    q = np.asarray(q, dtype=float)
    z, _ = mlp_forward(gate, np.atleast_2d(q))
    g = q_len * sigmoid(z[:, 0])
    return g[0] if q.ndim == 1 else g


@dataclass
class GateCache:
    E: np.ndarray
    route: np.ndarray
    gates: np.ndarray
    sig: np.ndarray
    mlp_cache: tuple


def apply_gate(E, det, gate, cfg=GateConfig(), route=None, enabled=True):
    """Scale the rows routed to the gate.

    ``route`` overrides the detector decision (teacher forcing with
    ground-truth numeric labels). Returns ``(gated, num_probs, gates, cache)``;
    ``gated`` is ``E`` itself (same values) wherever a row is not routed.
    """
    E = np.asarray(E, dtype=float)
    m = E.shape[0]
    num_probs = detect(E, det) if m else np.zeros(0)
    z, mlp_cache = mlp_forward(gate, E)
    sig = sigmoid(z[:, 0])
    gates = m * sig
    if route is None:
        route = num_probs > cfg.tau
    route = np.asarray(route, dtype=bool) & enabled
    gated = E.copy()
    gated[route] = gates[route, None] * E[route]
    return gated, num_probs, gates, GateCache(E, route, gates, sig, mlp_cache)


def gate_backward(gate, cache, d_gated):
    """Backprop through the gated rows.

    Returns gate-MLP gradients ``(dW1, db1, dW2, db2)`` and the gradient
    w.r.t. the ungated rows. The detector receives nothing here.
    """
    E, route = cache.E, cache.route
    m = E.shape[0]
    scale = np.where(route, cache.gates, 1.0)
    dE = scale[:, None] * d_gated
    dg = np.where(route, np.einsum("ij,ij->i", E, d_gated), 0.0)
    dz = (dg * m * cache.sig * (1.0 - cache.sig))[:, None]
    dW1, db1, dW2, db2, dX = mlp_backward(gate, cache.mlp_cache, dz)
    return (dW1, db1, dW2, db2), dE + dX
