"""Temporal building blocks: dilated inception, GRU cell, attention, frequency filters."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "INCEPTION_KERNELS",
    "dilation_schedule",
    "receptive_field",
    "dilated_inception",
    "merge_kernels",
    "GruParams",
    "gru_step",
    "AttentionParams",
    "temporal_attention",
    "FrequencyMask",
    "low_pass_mask",
    "coarse_frequency_filter",
    "trend_detail_split",
]

INCEPTION_KERNELS = (2, 3, 6, 7)


def dilation_schedule(q: int, layers: int) -> list[int]:
    """Exponential dilations ``1, q, q**2, ...`` for ``layers`` layers."""
    if q < 1:
        raise ValueError("dilation exponent q must be >= 1")
    return [q**i for i in range(layers)]


def receptive_field(q: int, layers: int, kernel: int = max(INCEPTION_KERNELS)) -> int:
    return 1 + sum((kernel - 1) * d for d in dilation_schedule(q, layers))


def dilated_inception(
    X: Tensor,
    dilation: int,
    kernels: Sequence[Tensor],
    biases: Sequence[Tensor] | None = None,
) -> Tensor:
    """Four parallel causal dilated convolutions concatenated on the channel axis.

    ``X`` is ``(..., C_in, T)`` and ``kernels[i]`` is ``(C_out, C_in, k_i)``
    with ``k_i`` in (2, 3, 6, 7). Causal left padding keeps every branch at
    length T, so no truncation is needed before concatenation.
    """
    if len(kernels) != len(INCEPTION_KERNELS):
        raise ValueError(f"expected {len(INCEPTION_KERNELS)} kernel banks, got {len(kernels)}")
    for i, w in enumerate(kernels):
        if w.shape[1] != X.shape[-2]:
            raise ValueError(f"kernel bank {i} expects {w.shape[1]} channels, input has {X.shape[-2]}")
    y = T.conv1d_dilated(X, merge_kernels(kernels), dilation)
    if biases is not None:
        y = y + T.reshape(T.concat(list(biases), axis=0), (-1, 1))
    return y


def merge_kernels(kernels: Sequence[Tensor]) -> Tensor:
    """Stack banks of different widths into one kernel, zero-padding the oldest taps.

    A single convolution with the merged kernel equals the concatenation of the
    per-bank convolutions, but reads the input once.
    """
    kmax = max(w.shape[2] for w in kernels)
    padded = []
    for w in kernels:
        short = kmax - w.shape[2]
        padded.append(T.concat([Tensor(np.zeros(w.shape[:2] + (short,))), w], axis=-1) if short else w)
    return T.concat(padded, axis=0)


@dataclass
class GruParams:
    """Gate weights act on ``[x_t, h_prev]`` from the right: ``(in + hidden, hidden)``."""

    W_u: Tensor
    W_r: Tensor
    W_c: Tensor
    b_u: Tensor
    b_r: Tensor
    b_c: Tensor

    @property
    def hidden(self) -> int:
        return self.W_u.shape[1]


def gru_step(x_t: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    if h_prev.shape[-1] != p.hidden or x_t.shape[-1] + p.hidden != p.W_u.shape[0]:
        raise ValueError(f"gru_step: x {x_t.shape}, h {h_prev.shape} vs W {p.W_u.shape}")
    xh = T.concat([x_t, h_prev], axis=-1)
    u = T.sigmoid(xh @ p.W_u + p.b_u)
    r = T.sigmoid(xh @ p.W_r + p.b_r)
    c = T.tanh(T.concat([x_t, r * h_prev], axis=-1) @ p.W_c + p.b_c)
    return u * h_prev + (1.0 - u) * c


@dataclass
class AttentionParams:
    W1: Tensor  # (hidden, att)
    b1: Tensor  # (att,)
    W2: Tensor  # (att, 1)
    b2: Tensor  # (1,)


def temporal_attention(H: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Score each step of ``H`` ``(..., time, hidden)``; return (context, weights)."""
    scores = (H @ p.W1 + p.b1) @ p.W2 + p.b2
    weights = T.softmax(T.reshape(scores, scores.shape[:-1]), axis=-1)
    ctx = T.reshape(weights, weights.shape[:-1] + (1, weights.shape[-1])) @ H
    return T.reshape(ctx, ctx.shape[:-2] + (ctx.shape[-1],)), weights


@dataclass
class FrequencyMask:
    """Per-bin gate over ``T // 2 + 1`` real-DFT bins.

    With ``learnable=True`` the stored values are logits squashed by a
    sigmoid; otherwise they are used as-is.
    """

    values: Tensor
    learnable: bool = True

    @property
    def n_bins(self) -> int:
        return self.values.shape[-1]

    def gate(self) -> Tensor:
        return T.sigmoid(self.values) if self.learnable else self.values


def low_pass_mask(length: int, keep_bins: int) -> FrequencyMask:
    keep = np.zeros(length // 2 + 1)
    keep[:keep_bins] = 1.0
    return FrequencyMask(Tensor(keep), learnable=False)


def coarse_frequency_filter(X: Tensor, mask) -> Tensor:
    """DFT along time, scale each bin by the mask, inverse DFT."""
    n = X.shape[-1]
    gate = mask.gate() if isinstance(mask, FrequencyMask) else T._as_tensor(mask)
    if gate.shape[-1] != n // 2 + 1:
        raise ValueError(f"mask has {gate.shape[-1]} bins, series of length {n} has {n // 2 + 1}")
    return T.idft_real(T.dft_real(X) * gate, n)


@lru_cache(maxsize=64)
def _moving_average_matrix(length: int, window: int) -> np.ndarray:
    half = window // 2
    M = np.zeros((length, length))
    for t in range(length):
        for j in range(-half, half + 1):
            M[min(max(t + j, 0), length - 1), t] += 1.0 / window
    M.setflags(write=False)
    return M


def trend_detail_split(X: Tensor, window: int = 5) -> tuple[Tensor, Tensor]:
    """Centered moving-average trend (edges replicated) and the remaining detail."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be an odd integer >= 1")
    n = X.shape[-1]
    if window > n:
        raise ValueError(f"window {window} exceeds series length {n}")
    M = Tensor(_moving_average_matrix(n, window))
    trend = T.reshape(T.reshape(X, (1, n)) @ M, (n,)) if X.ndim == 1 else X @ M
    return trend, X - trend
