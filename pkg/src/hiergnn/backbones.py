"""Multivariate graph model (MGM) backbones producing bottom-level forecasts.

Every backbone maps a window ``(B, N, C, W)`` (or unbatched ``(N, C, W)``)
over the graph nodes to forecasts ``(B, N, H)`` and then keeps the bottom
rows. In ``full_hierarchy`` graph mode the nodes are all m series in
hierarchy order, so the bottom rows are the last n.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .graph_ops import (
    GRAPH_MODES,
    GegenbauerParams,
    MixHopParams,
    diffusion_features,
    gcn_layer,
    gegenbauer_conv,
    mix_hop,
    normalize,
    row_sum_rescale,
    spatial_ode_step,
)
from .temporal_ops import (
    INCEPTION_KERNELS,
    AttentionParams,
    FrequencyMask,
    GruParams,
    coarse_frequency_filter,
    merge_kernels,
    dilation_schedule,
    gru_step,
    receptive_field,
    temporal_attention,
    trend_detail_split,
)
from .tensor import Tensor

__all__ = [
    "BACKBONE_KINDS",
    "MANDATORY_KINDS",
    "ConfigError",
    "MGMConfig",
    "BackboneParams",
    "param_shapes",
    "init_backbone",
    "mgm_forward",
    "mixhop_tcn_hidden",
    "count_params",
]

BACKBONE_KINDS = ("diffusion_rnn", "mixhop_tcn", "gegenbauer_tgc", "gcn_gru_attn", "spatial_ode")
MANDATORY_KINDS = BACKBONE_KINDS[:4]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MGMConfig:
    kind: str = "mixhop_tcn"
    input_window: int = 24
    horizon: int = 7
    hidden: int = 16
    layers: int = 2
    K: int = 2
    beta: float = 0.05
    alpha_geg: float = 1.0
    dilation_q: int = 2
    graph_mode: str = "full_hierarchy"
    in_channels: int = 1
    trend_window: int = 5
    ode_time: float = 1.0
    ode_steps: int = 4

    def validate(self) -> "MGMConfig":
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(f"unknown backbone kind {self.kind!r}; choose from {BACKBONE_KINDS}")
        if self.graph_mode not in GRAPH_MODES:
            raise ConfigError(f"unknown graph mode {self.graph_mode!r}")
        for name in ("input_window", "horizon", "hidden", "layers", "in_channels", "dilation_q", "ode_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.K < (1 if self.kind == "diffusion_rnn" else 0):
            raise ConfigError("K is too small for this backbone")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.alpha_geg <= 0:
            raise ConfigError("alpha_geg must be > 0")
        if self.kind in ("mixhop_tcn", "spatial_ode") and self.hidden % len(INCEPTION_KERNELS):
            raise ConfigError("hidden must be divisible by 4 for the inception layer")
        if self.kind == "gegenbauer_tgc" and (self.trend_window % 2 == 0 or self.trend_window > self.input_window):
            raise ConfigError("trend_window must be odd and no longer than input_window")
        if self.input_window < self.receptive_field:
            raise ConfigError(
                f"input_window {self.input_window} is shorter than the receptive field {self.receptive_field}"
            )
        return self

    @property
    def receptive_field(self) -> int:
        if self.kind in ("mixhop_tcn", "spatial_ode"):
            return receptive_field(self.dilation_q, self.layers)
        return 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MGMConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def with_(self, **kw) -> "MGMConfig":
        return replace(self, **kw)


class BackboneParams:
    """Ordered learnable tensors plus non-learnable buffers (e.g. scalers)."""

    def __init__(self, tensors: "OrderedDict[str, Tensor] | None" = None, buffers: dict | None = None):
        self.tensors: OrderedDict[str, Tensor] = OrderedDict(tensors or {})
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict(buffers or {})

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def __contains__(self, key: str) -> bool:
        return key in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def keys(self):
        return self.tensors.keys()

    def values(self):
        return self.tensors.values()

    def items(self):
        return self.tensors.items()

    def copy(self) -> "BackboneParams":
        return BackboneParams(
            OrderedDict((k, Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)) for k, v in self.items()),
            OrderedDict((k, v.copy()) for k, v in self.buffers.items()),
        )

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.items():
            v.data[...] = snap[k]

    def equals(self, other: "BackboneParams") -> bool:
        if list(self.keys()) != list(other.keys()) or list(self.buffers) != list(other.buffers):
            return False
        same = all(np.array_equal(self[k].data, other[k].data) for k in self.keys())
        return same and all(np.array_equal(self.buffers[k], other.buffers[k]) for k in self.buffers)


def param_shapes(cfg: MGMConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """``(key, shape, fan_in)`` for every learnable tensor, in key order."""
    cfg.validate()
    C, Hd, W, H = cfg.in_channels, cfg.hidden, cfg.input_window, cfg.horizon
    out: list[tuple[str, tuple[int, ...], int]] = []

    def lin(key, n_in, n_out, bias=True):
        out.append((f"{key}.W", (n_in, n_out), n_in))
        if bias:
            out.append((f"{key}.b", (n_out,), n_in))

    if cfg.kind in ("mixhop_tcn", "spatial_ode"):
        out.append(("start.W", (Hd, C), C))
        out.append(("start.b", (Hd, 1), C))
        lin("skip0", C * W, Hd)
        bank = Hd // len(INCEPTION_KERNELS)
        for l in range(cfg.layers):
            for gate in ("filter", "gate"):
                for k in INCEPTION_KERNELS:
                    out.append((f"layer{l}.{gate}.k{k}", (bank, Hd, k), Hd * k))
                    out.append((f"layer{l}.{gate}.k{k}.b", (bank,), Hd * k))
            lin(f"layer{l}.skip", Hd * W, Hd)
            if cfg.kind == "mixhop_tcn":
                for direction in ("in", "out"):
                    for k in range(cfg.K + 1):
                        out.append((f"layer{l}.mixhop_{direction}.W{k}", (Hd, Hd), Hd))
            else:
                out.append((f"layer{l}.ode.W", (Hd, Hd), Hd))
        lin("skip_end", Hd * W, Hd)
        lin("end1", Hd, Hd)
        lin("end2", Hd, H)
    elif cfg.kind == "diffusion_rnn":
        hops = 2 * cfg.K - 1
        for part, d_in in (("enc", C), ("dec", 1)):
            for l in range(cfg.layers):
                n_in = ((d_in if l == 0 else Hd) + Hd) * hops
                for gate in ("u", "r", "c"):
                    lin(f"{part}{l}.{gate}", n_in, Hd)
        lin("proj", Hd, 1)
    elif cfg.kind == "gegenbauer_tgc":
        out.append(("start.W", (Hd, C), C))
        out.append(("start.b", (Hd, 1), C))
        F = W // 2 + 1
        for l in range(cfg.layers):
            out.append((f"block{l}.theta", (cfg.K + 1,), cfg.K + 1))
            out.append((f"block{l}.mix", (Hd, Hd), Hd))
            out.append((f"block{l}.mask", (F,), F))
            out.append((f"block{l}.trend", (Hd, Hd), Hd))
            out.append((f"block{l}.detail", (Hd, Hd), Hd))
            out.append((f"block{l}.b", (Hd, 1), Hd))
        lin("head", Hd * W, H)
    elif cfg.kind == "gcn_gru_attn":
        out.append(("gcn.Theta", (C, Hd), C))
        for gate in ("u", "r", "c"):
            lin(f"gru.{gate}", 2 * Hd, Hd)
        # scorer biases only shift every step's score, which softmax cancels
        lin("att1", Hd, Hd, bias=False)
        lin("att2", Hd, 1, bias=False)
        lin("head", Hd, H)
    return out


def init_backbone(cfg: MGMConfig, seed: int = 0) -> BackboneParams:
    """Uniform(-s, s) init with ``s = sqrt(1 / fan_in)`` per tensor; reproducible per seed."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for key, shape, fan_in in param_shapes(cfg):
        s = math.sqrt(1.0 / fan_in)
        tensors[key] = Tensor(rng.uniform(-s, s, size=shape), requires_grad=True, name=key)
    return BackboneParams(tensors)


def count_params(params) -> int:
    if isinstance(params, BackboneParams):
        params = params.tensors
    return int(sum(t.size for t in params.values()))


# --------------------------------------------------------------------------
# forward passes


def _flatten_time(h: Tensor) -> Tensor:
    B, N, Cc, W = h.shape
    return T.reshape(h, (B, N, Cc * W))


def _linear(params: BackboneParams, key: str, x: Tensor) -> Tensor:
    return x @ params[f"{key}.W"] + params[f"{key}.b"]


def _tcn_stack(params, x, A, cfg, return_hidden=False):
    Hd = cfg.hidden
    a_in = normalize(A, "row_selfloop")
    a_out = normalize(np.asarray(A).T, "row_selfloop")
    h = params["start.W"] @ x + params["start.b"]
    skip = _linear(params, "skip0", _flatten_time(x))
    hidden = []
    for l, d in enumerate(dilation_schedule(cfg.dilation_q, cfg.layers)):
        residual = h
        banks = [params[f"layer{l}.{gate}.k{k}"] for gate in ("filter", "gate") for k in INCEPTION_KERNELS]
        biases = [params[f"layer{l}.{gate}.k{k}.b"] for gate in ("filter", "gate") for k in INCEPTION_KERNELS]
        # filter and gate banks share one convolution
        both = T.conv1d_dilated(h, merge_kernels(banks), d) + T.reshape(T.concat(biases, axis=0), (-1, 1))
        filt = T.tanh(both[..., :Hd, :])
        gate = T.sigmoid(both[..., Hd:, :])
        h = filt * gate
        skip = skip + _linear(params, f"layer{l}.skip", _flatten_time(h))
        # graph mixing acts per time step on (B, W, N, hidden)
        ht = T.transpose(h, (0, 3, 1, 2))
        if cfg.kind == "mixhop_tcn":
            w_in = [params[f"layer{l}.mixhop_in.W{k}"] for k in range(cfg.K + 1)]
            w_out = [params[f"layer{l}.mixhop_out.W{k}"] for k in range(cfg.K + 1)]
            g = mix_hop(ht, a_in, MixHopParams(cfg.beta, w_in)) + mix_hop(ht, a_out, MixHopParams(cfg.beta, w_out))
        else:
            g = spatial_ode_step(ht, a_in.entries, cfg.ode_time, cfg.ode_steps) @ params[f"layer{l}.ode.W"]
        h = T.transpose(g, (0, 2, 3, 1)) + residual
        hidden.append(h)
    if return_hidden:
        return hidden
    skip = skip + _linear(params, "skip_end", _flatten_time(h))
    z = T.tanh(_linear(params, "end1", T.tanh(skip)))
    return _linear(params, "end2", z)


def _dcgru(params, prefix, x, h, A, K):
    xh = T.concat([x, h], axis=-1)
    feats = diffusion_features(xh, A, K)
    u = T.sigmoid(_linear(params, f"{prefix}.u", feats))
    r = T.sigmoid(_linear(params, f"{prefix}.r", feats))
    cand = diffusion_features(T.concat([x, r * h], axis=-1), A, K)
    c = T.tanh(_linear(params, f"{prefix}.c", cand))
    return u * h + (1.0 - u) * c


def _diffusion_rnn(params, x, A, cfg, targets):
    B, N, C, W = x.shape
    states = [Tensor(np.zeros((B, N, cfg.hidden))) for _ in range(cfg.layers)]
    for t in range(W):
        inp = x[:, :, :, t]
        for l in range(cfg.layers):
            states[l] = _dcgru(params, f"enc{l}", inp, states[l], A, cfg.K)
            inp = states[l]
    inp = x[:, :, 0:1, W - 1]
    outs = []
    for s in range(cfg.horizon):
        h_in = inp
        for l in range(cfg.layers):
            states[l] = _dcgru(params, f"dec{l}", h_in, states[l], A, cfg.K)
            h_in = states[l]
        y = _linear(params, "proj", h_in)
        outs.append(y)
        inp = targets[:, :, s : s + 1] if targets is not None else y
    return T.concat(outs, axis=-1)


def _gegenbauer_tgc(params, x, A, cfg):
    B, N, C, W = x.shape
    Hd = cfg.hidden
    a_hat = row_sum_rescale(normalize(A, "sym_selfloop"))
    z = params["start.W"] @ x + params["start.b"]
    for l in range(cfg.layers):
        flat = T.reshape(z, (B, N, Hd * W))
        g = gegenbauer_conv(flat, a_hat, GegenbauerParams(params[f"block{l}.theta"], cfg.alpha_geg))
        g = params[f"block{l}.mix"] @ T.reshape(g, (B, N, Hd, W))
        c = coarse_frequency_filter(g, FrequencyMask(params[f"block{l}.mask"], learnable=True))
        trend, detail = trend_detail_split(c, cfg.trend_window)
        f = params[f"block{l}.trend"] @ trend + params[f"block{l}.detail"] @ detail + params[f"block{l}.b"]
        z = z + f
    return _linear(params, "head", _flatten_time(z))


def _gcn_gru_attn(params, x, A, cfg):
    B, N, C, W = x.shape
    a_sym = normalize(A, "sym_selfloop")
    g = gcn_layer(T.transpose(x, (0, 3, 1, 2)), a_sym, params["gcn.Theta"], "tanh")
    gru = GruParams(
        params["gru.u.W"], params["gru.r.W"], params["gru.c.W"],
        params["gru.u.b"], params["gru.r.b"], params["gru.c.b"],
    )
    h = Tensor(np.zeros((B, N, cfg.hidden)))
    seq = []
    for t in range(W):
        h = gru_step(g[:, t], h, gru)
        seq.append(h)
    H_seq = T.stack(seq, axis=2)
    att = AttentionParams(params["att1.W"], Tensor(np.zeros(cfg.hidden)), params["att2.W"], Tensor(np.zeros(1)))
    ctx, _ = temporal_attention(H_seq, att)
    return _linear(params, "head", ctx)


def _prepare(window, A, cfg):
    x = window if isinstance(window, Tensor) else Tensor(window)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("window contains NaN or Inf")
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ValueError(f"window must be (N, C, W) or (B, N, C, W), got {x.shape}")
    A = np.asarray(getattr(A, "entries", A), dtype=np.float64)
    if A.shape != (x.shape[1], x.shape[1]):
        raise ValueError(f"window has {x.shape[1]} nodes but adjacency is {A.shape}")
    if x.shape[2] != cfg.in_channels:
        raise ValueError(f"window has {x.shape[2]} channels, config expects {cfg.in_channels}")
    if x.shape[3] < cfg.receptive_field:
        raise ValueError(f"window length {x.shape[3]} is shorter than the receptive field {cfg.receptive_field}")
    if x.shape[3] != cfg.input_window:
        raise ValueError(f"window length {x.shape[3]} != configured input_window {cfg.input_window}")
    return x, A, squeeze


def mgm_forward(params: BackboneParams, window, A, cfg: MGMConfig, *, n_bottom: int | None = None,
                targets: Tensor | None = None) -> Tensor:
    """Forecast ``(B, n, H)`` (or ``(n, H)`` for an unbatched window).

    ``n_bottom`` selects the last n graph nodes as the bottom series (all
    nodes when None). ``targets`` ``(B, N, H)`` enables teacher forcing for
    the recurrent decoder and is ignored by the other kinds.
    """
    x, A, squeeze = _prepare(window, A, cfg)
    if cfg.kind in ("mixhop_tcn", "spatial_ode"):
        out = _tcn_stack(params, x, A, cfg)
    elif cfg.kind == "diffusion_rnn":
        tgt = None
        if targets is not None:
            tgt = targets if isinstance(targets, Tensor) else Tensor(targets)
            if tgt.ndim == 2:
                tgt = T.reshape(tgt, (1,) + tgt.shape)
        out = _diffusion_rnn(params, x, A, cfg, tgt)
    elif cfg.kind == "gegenbauer_tgc":
        out = _gegenbauer_tgc(params, x, A, cfg)
    elif cfg.kind == "gcn_gru_attn":
        out = _gcn_gru_attn(params, x, A, cfg)
    else:
        raise ConfigError(f"unknown backbone kind {cfg.kind!r}")
    N = out.shape[1]
    if n_bottom is not None and n_bottom != N:
        if not 0 < n_bottom <= N:
            raise ValueError(f"n_bottom={n_bottom} is incompatible with {N} graph nodes")
        out = out[:, N - n_bottom :, :]
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out


def mixhop_tcn_hidden(params: BackboneParams, window, A, cfg: MGMConfig) -> list[Tensor]:
    """Per-layer hidden sequences ``(B, N, hidden, W)`` of the TCN stack."""
    x, A, _ = _prepare(window, A, cfg)
    return _tcn_stack(params, x, A, cfg, return_hidden=True)
