"""Adjacency construction and graph-convolution primitives.

All node-mixing ops act on tensors shaped ``(..., N, F)``: the adjacency is a
constant left factor and weight matrices multiply the feature axis on the
right.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .hierarchy import Hierarchy
from .tensor import Tensor

__all__ = [
    "AdjacencyMatrix",
    "NormalizedAdjacency",
    "MixHopParams",
    "DiffusionParams",
    "GegenbauerParams",
    "hierarchy_adjacency",
    "normalize",
    "row_sum_rescale",
    "mix_hop",
    "diffusion_conv",
    "diffusion_features",
    "stationary_diffusion",
    "gegenbauer_poly",
    "gegenbauer_conv",
    "gcn_layer",
    "spatial_ode_step",
]

GRAPH_MODES = ("bottom_only", "full_hierarchy")
SCHEMES = ("row_selfloop", "sym_selfloop", "random_walk")


@dataclass(frozen=True, eq=False)
class AdjacencyMatrix:
    entries: np.ndarray
    mode: str = "full_hierarchy"

    def __post_init__(self):
        A = np.asarray(self.entries, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"adjacency must be square, got {A.shape}")
        A.setflags(write=False)
        object.__setattr__(self, "entries", A)

    @property
    def n_nodes(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    entries: np.ndarray
    scheme: str

    @property
    def n_nodes(self) -> int:
        return self.entries.shape[0]


@dataclass
class MixHopParams:
    beta: float
    W: Sequence[Tensor]

    @property
    def K(self) -> int:
        return len(self.W) - 1


@dataclass
class DiffusionParams:
    theta: Tensor  # (K, 2)
    alpha: float = 0.5

    @property
    def K(self) -> int:
        return self.theta.shape[0]


@dataclass
class GegenbauerParams:
    theta: Tensor  # (K + 1,)
    alpha: float = 1.0

    @property
    def K(self) -> int:
        return self.theta.shape[0] - 1


def _dense(A) -> np.ndarray:
    if isinstance(A, (AdjacencyMatrix, NormalizedAdjacency)):
        return A.entries
    return np.asarray(A, dtype=np.float64)


def hierarchy_adjacency(h: Hierarchy, mode: str = "full_hierarchy") -> AdjacencyMatrix:
    """Parent-child graph over all m nodes, or the sibling graph over the n leaves."""
    if mode == "full_hierarchy":
        A = np.zeros((h.m, h.m))
        idx = h.index_of
        for child, parent in h.edges:
            i, j = idx[child], idx[parent]
            A[i, j] = A[j, i] = 1.0
    elif mode == "bottom_only":
        A = np.zeros((h.n, h.n))
        parents = [h.parent_of.get(b) for b in h.bottom_ids]
        for i in range(h.n):
            for j in range(i + 1, h.n):
                if parents[i] is not None and parents[i] == parents[j]:
                    A[i, j] = A[j, i] = 1.0
    else:
        raise ValueError(f"unknown graph mode {mode!r}")
    return AdjacencyMatrix(A, mode)


def normalize(A, scheme: str = "row_selfloop") -> NormalizedAdjacency:
    W = _dense(A)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"adjacency must be square, got {W.shape}")
    if np.any(W < 0):
        raise ValueError("adjacency has negative entries")
    n = W.shape[0]
    if scheme == "row_selfloop":
        deg = 1.0 + W.sum(axis=1)
        out = (W + np.eye(n)) / deg[:, None]
    elif scheme == "sym_selfloop":
        At = W + np.eye(n)
        d = 1.0 / np.sqrt(At.sum(axis=1))
        out = d[:, None] * At * d[None, :]
    elif scheme == "random_walk":
        deg = W.sum(axis=1)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        out = W * inv[:, None]
    else:
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    out.setflags(write=False)
    return NormalizedAdjacency(out, scheme)


def row_sum_rescale(A_norm) -> NormalizedAdjacency:
    """Divide by the largest absolute row sum when it exceeds 1.

    The max row sum bounds the spectral radius, so the result has all
    eigenvalues in [-1, 1], the domain of the Gegenbauer basis.
    """
    M = _dense(A_norm)
    bound = float(np.abs(M).sum(axis=1).max(initial=0.0))
    out = M / bound if bound > 1.0 else M.copy()
    out.setflags(write=False)
    return NormalizedAdjacency(out, getattr(A_norm, "scheme", "sym_selfloop"))


def mix_hop(H_in: Tensor, A_norm, p: MixHopParams) -> Tensor:
    """Mix-hop propagation followed by per-hop feature selection.

    ``H(0) = H_in``, ``H(k) = beta * H_in + (1 - beta) * A @ H(k-1)`` and the
    output is ``sum_k H(k) @ W[k]``.
    """
    if not 0.0 <= p.beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {p.beta}")
    if isinstance(A_norm, NormalizedAdjacency) and A_norm.scheme != "row_selfloop":
        raise ValueError("mix_hop expects a row_selfloop-normalized adjacency")
    A = Tensor(_dense(A_norm))
    if H_in.shape[-2] != A.shape[0]:
        raise ValueError(f"H_in has {H_in.shape[-2]} nodes, adjacency has {A.shape[0]}")
    shapes = {tuple(w.shape) for w in p.W}
    if len(shapes) != 1:
        raise ValueError(f"mix-hop weights must share a shape, got {shapes}")
    root = p.beta * H_in
    h = H_in
    out = h @ p.W[0]
    for k in range(1, len(p.W)):
        h = root + (1.0 - p.beta) * (A @ h)
        out = out + h @ p.W[k]
    return out


def _walk_powers(P: Tensor, X: Tensor, K: int) -> list[Tensor]:
    outs = [X]
    for _ in range(1, K):
        outs.append(P @ outs[-1])
    return outs


def diffusion_conv(X: Tensor, A, p: DiffusionParams) -> Tensor:
    """``sum_k theta[k,0] (D^-1 W)^k X + theta[k,1] (D^-1 W^T)^k X``."""
    W = _dense(A)
    if X.shape[-2] != W.shape[0]:
        raise ValueError(f"X has {X.shape[-2]} nodes, adjacency has {W.shape[0]}")
    fwd = Tensor(normalize(W, "random_walk").entries)
    bwd = Tensor(normalize(W.T, "random_walk").entries)
    out = None
    for k, (xf, xb) in enumerate(zip(_walk_powers(fwd, X, p.K), _walk_powers(bwd, X, p.K))):
        term = p.theta[k, 0] * xf + p.theta[k, 1] * xb
        out = term if out is None else out + term
    return out


def diffusion_features(X: Tensor, A, K: int) -> Tensor:
    """Stack ``X`` with its forward and backward diffusion powers 1..K-1 on the feature axis.

    This is the multi-channel form used inside the diffusion GRU, where a
    dense weight over the stacked features generalises the scalar filter of
    :func:`diffusion_conv`.
    """
    W = _dense(A)
    fwd = Tensor(normalize(W, "random_walk").entries)
    bwd = Tensor(normalize(W.T, "random_walk").entries)
    feats = _walk_powers(fwd, X, K) + _walk_powers(bwd, X, K)[1:]
    return T.concat(feats, axis=-1)


def stationary_diffusion(A, alpha: float, K_trunc: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Truncated random-walk-with-restart proximity matrix.

    Returns ``(P, residual)`` with ``P = sum_{k<K} alpha (1-alpha)^k (D^-1 W)^k``
    and ``residual = 1 - P.sum(axis=1)``, the probability mass the truncation
    leaves out of each row (``(1-alpha)^K`` on rows with out-edges).
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if K_trunc < 1:
        raise ValueError("K_trunc must be >= 1")
    Pw = normalize(A, "random_walk").entries
    n = Pw.shape[0]
    power = np.eye(n)
    P = np.zeros((n, n))
    for k in range(K_trunc):
        P += alpha * (1.0 - alpha) ** k * power
        power = power @ Pw
    return P, 1.0 - P.sum(axis=1)


def gegenbauer_poly(k: int, alpha: float, x: float) -> float:
    if k < 0:
        raise ValueError("k must be >= 0")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    prev, cur = 1.0, 2.0 * alpha * x
    if k == 0:
        return prev
    for j in range(2, k + 1):
        prev, cur = cur, (2.0 * x * (j + alpha - 1.0) * cur - (j + 2.0 * alpha - 2.0) * prev) / j
    return cur


def gegenbauer_conv(X: Tensor, A_hat, p: GegenbauerParams) -> Tensor:
    """``sum_k theta_k P_k(A_hat) X`` using the three-term recursion on matrices."""
    if p.alpha <= 0:
        raise ValueError("alpha must be > 0")
    A = Tensor(_dense(A_hat))
    if X.shape[-2] != A.shape[0]:
        raise ValueError(f"X has {X.shape[-2]} nodes, adjacency has {A.shape[0]}")
    a = p.alpha
    prev = X
    out = p.theta[0] * prev
    if p.K == 0:
        return out
    cur = (2.0 * a) * (A @ X)
    out = out + p.theta[1] * cur
    for k in range(2, p.K + 1):
        nxt = (2.0 * (k + a - 1.0) / k) * (A @ cur) - ((k + 2.0 * a - 2.0) / k) * prev
        prev, cur = cur, nxt
        out = out + p.theta[k] * cur
    return out


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "identity": lambda x: x,
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
    "relu": T.relu,
}


def gcn_layer(H: Tensor, A_sym, Theta: Tensor, activation="identity") -> Tensor:
    if isinstance(A_sym, NormalizedAdjacency) and A_sym.scheme != "sym_selfloop":
        raise ValueError("gcn_layer expects a sym_selfloop-normalized adjacency")
    act = _ACTIVATIONS[activation] if isinstance(activation, str) else activation
    A = Tensor(_dense(A_sym))
    if H.shape[-2] != A.shape[0]:
        raise ValueError(f"H has {H.shape[-2]} nodes, adjacency has {A.shape[0]}")
    return act((A @ H) @ Theta)


def spatial_ode_step(H0: Tensor, A_hat, t_end: float, steps: int) -> Tensor:
    """Explicit Euler integration of ``dH/dt = (A_hat - I) H`` from 0 to ``t_end``."""
    if steps < 1 or t_end <= 0:
        raise ValueError("need steps >= 1 and t_end > 0")
    dt = t_end / steps
    A = _dense(A_hat)
    # H + dt (A - I) H == M H with a constant propagator
    M = Tensor((1.0 - dt) * np.eye(A.shape[0]) + dt * A)
    H = H0
    for _ in range(steps):
        H = M @ H
    return H
