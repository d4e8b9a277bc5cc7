"""End-to-end training on the hierarchical loss and coherent forecasting."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .backbones import BackboneParams, ConfigError, MGMConfig, init_backbone, mgm_forward
from .data import DataError, SplitSpec, TimeSeriesPanel, split_points
from .graph_ops import hierarchy_adjacency
from .hierarchy import ForecastSet, Hierarchy, aggregate
from .metrics import MetricError, wape
from .tensor import Tensor

__all__ = [
    "DivergenceError",
    "TrainConfig",
    "TrainReport",
    "Adam",
    "hierarchical_loss",
    "prepare_config",
    "model_inputs",
    "train",
    "forecast",
]

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 4
    batch: int = 32
    curriculum: bool = False
    curriculum_step: int = 1
    loss_kind: str = "mse"
    seed: int = 0
    scaling: str = "per_node_zscore"
    train_frac: float = 0.8

    def validate(self) -> "TrainConfig":
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1 or self.batch < 1 or self.curriculum_step < 1:
            raise ConfigError("max_epochs, batch and curriculum_step must be >= 1")
        if self.loss_kind not in ("mse", "mae"):
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")
        if self.scaling not in ("per_node_zscore", "none"):
            raise ConfigError(f"unknown scaling {self.scaling!r}")
        if not 0 < self.train_frac < 1:
            raise ConfigError("train_frac must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    level_names: list[str] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    best_val_loss: float = math.inf

    @property
    def train_loss(self) -> list[float]:
        return [r["train_loss"] for r in self.rows]

    @property
    def val_loss(self) -> list[float]:
        return [r["val_loss"] for r in self.rows]

    def val_wape(self, level: int, epoch: int | None = None) -> float:
        e = self.best_epoch if epoch is None else epoch
        return self.rows[e - 1]["val_wape"][level]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", *(f"val_wape_level{n}" for n in self.level_names)])
        for r in self.rows:
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), *(repr(v) for v in r["val_wape"])])
        return buf.getvalue()


class Adam:
    def __init__(self, params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: T.Gradients, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.for_(p)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _elementwise(kind: str, true, pred) -> Tensor:
    diff = T.sub(pred, true)
    if kind == "mse":
        return T.mean(diff * diff)
    if kind == "mae":
        return T.mean(T.abs_(diff))
    raise ConfigError(f"unknown loss kind {kind!r}")


def hierarchical_loss(b_true, b_pred, h_true, h_pred, lam: float = 0.5, loss_kind: str = "mse") -> Tensor:
    """Bottom loss plus ``lam`` times the loss on the aggregate rows, each averaged per element."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    b_pred = b_pred if isinstance(b_pred, Tensor) else Tensor(b_pred)
    if tuple(np.shape(getattr(b_true, "data", b_true))) != b_pred.shape:
        raise ValueError(f"bottom shapes differ: {np.shape(b_true)} vs {b_pred.shape}")
    loss = _elementwise(loss_kind, b_true, b_pred)
    if h_pred is None or np.size(getattr(h_pred, "data", h_pred)) == 0:
        return loss
    h_pred = h_pred if isinstance(h_pred, Tensor) else Tensor(h_pred)
    if tuple(np.shape(getattr(h_true, "data", h_true))) != h_pred.shape:
        raise ValueError(f"aggregate shapes differ: {np.shape(h_true)} vs {h_pred.shape}")
    if lam == 0:
        return loss
    return loss + lam * _elementwise(loss_kind, h_true, h_pred)


# --------------------------------------------------------------------------
# inputs


def _graph_rows(h: Hierarchy, mode: str) -> np.ndarray:
    return np.arange(h.m) if mode == "full_hierarchy" else np.arange(h.a, h.m)


def _n_channels(h: Hierarchy, mode: str, n_cov: int) -> int:
    extra = h.n_levels - 1 if mode == "bottom_only" else 0
    return 1 + extra + n_cov


def prepare_config(cfg: MGMConfig, h: Hierarchy, panel: TimeSeriesPanel) -> MGMConfig:
    """Fill in the input channel count implied by the graph mode and covariates."""
    return cfg.with_(in_channels=_n_channels(h, cfg.graph_mode, panel.n_covariates)).validate()


def model_inputs(scaled: np.ndarray, h: Hierarchy, mode: str, covariates=None) -> np.ndarray:
    """Per-graph-node input channels ``(N, C, T)``.

    In bottom_only mode each leaf also sees the series of its ancestor at
    every aggregate level (zeros where the leaf has no ancestor there).
    """
    rows = _graph_rows(h, mode)
    chans = [scaled[rows][:, None, :]]
    if mode == "bottom_only":
        anc = np.zeros((h.n, h.n_levels - 1, scaled.shape[1]))
        idx = h.index_of
        for j, leaf in enumerate(h.bottom_ids):
            for a in h.ancestors(leaf):
                anc[j, h.level_of[a]] = scaled[idx[a]]
        chans.append(anc)
    if covariates is not None:
        chans.append(np.asarray(covariates)[rows])
    return np.concatenate(chans, axis=1)


def _fit_scaler(values: np.ndarray, kind: str) -> tuple[np.ndarray, np.ndarray]:
    if kind == "none":
        return np.zeros(values.shape[0]), np.ones(values.shape[0])
    mean = values.mean(axis=1)
    std = values.std(axis=1)
    # constant series keep unit scale
    std = np.where(std > 1e-8 * np.maximum(1.0, np.abs(mean)), std, 1.0)
    return mean, std


def _window_starts(lo: int, hi: int, W: int, H: int) -> np.ndarray:
    """Forecast origins s with inputs [s-W, s) and targets [s, s+H) inside [lo, hi)."""
    first = max(lo, W)
    return np.arange(first, hi - H + 1)


def _gather(inputs: np.ndarray, targets: np.ndarray, starts: np.ndarray, W: int, H: int):
    x = np.stack([inputs[:, :, s - W : s] for s in starts])
    y = np.stack([targets[:, s : s + H] for s in starts])
    return x, y


class _Batcher:
    """Everything needed to turn forecast origins into loss tensors."""

    def __init__(self, params, h: Hierarchy, cfg: MGMConfig, tcfg: TrainConfig, mean, std, inputs, scaled):
        self.params = params
        self.h, self.cfg, self.tcfg = h, cfg, tcfg
        self.mean, self.std = mean, std
        self.inputs, self.scaled = inputs, scaled
        self.A = hierarchy_adjacency(h, cfg.graph_mode)
        self.rows = _graph_rows(h, cfg.graph_mode)
        self.S_agg = Tensor(h.S.aggregate_block)
        self.b_mean = mean[h.a :, None]
        self.b_std = std[h.a :, None]
        self.a_mean = mean[: h.a, None]
        self.a_inv_std = 1.0 / std[: h.a, None]

    def predict(self, x, targets=None) -> Tensor:
        tf = None if targets is None else Tensor(targets[:, self.rows, :])
        return mgm_forward(self.params, x, self.A, self.cfg, n_bottom=self.h.n, targets=tf)

    def loss(self, starts, horizon: int, teacher: bool) -> Tensor:
        cfg = self.cfg
        x, y = _gather(self.inputs, self.scaled, starts, cfg.input_window, cfg.horizon)
        pred = self.predict(x, y if teacher else None)
        if horizon < cfg.horizon:
            pred = pred[:, :, :horizon]
            y = y[:, :, :horizon]
        h = self.h
        b_true = y[:, h.a :, :]
        if self.tcfg.lam == 0 or h.a == 0:
            return hierarchical_loss(b_true, pred, None, None, 0.0, self.tcfg.loss_kind)
        # aggregate in original units, then rescale with the aggregate nodes' scalers
        b_orig = pred * self.b_std + self.b_mean
        h_pred = (self.S_agg @ b_orig - self.a_mean) * self.a_inv_std
        return hierarchical_loss(b_true, pred, y[:, : h.a, :], h_pred, self.tcfg.lam, self.tcfg.loss_kind)

    def predict_original(self, starts) -> tuple[np.ndarray, np.ndarray]:
        """Full (B, m, H) predictions and actuals in original units."""
        cfg = self.cfg
        x, y = _gather(self.inputs, self.scaled, starts, cfg.input_window, cfg.horizon)
        with T.no_grad():
            pred = self.predict(x).data
        bottom = pred * self.b_std + self.b_mean
        full = self.h.S.entries @ bottom
        actual = y * self.std[:, None] + self.mean[:, None]
        return full, actual


def _batches(starts: np.ndarray, size: int):
    for i in range(0, len(starts), size):
        yield starts[i : i + size]


def train(
    cfg: TrainConfig,
    mgm_cfg: MGMConfig,
    panel: TimeSeriesPanel,
    hierarchy: Hierarchy,
    *,
    test_horizon: int | None = None,
    lr_schedule: Callable[[int], float] | None = None,
    init_params: BackboneParams | None = None,
) -> tuple[BackboneParams, TrainReport]:
    """Fit a backbone with Adam on the hierarchical loss.

    The last ``test_horizon`` steps (default: the forecast horizon) are held
    out; the rest is split in time order into train and validation segments.
    Scalers are fit on the train segment only. Training stops once the
    validation loss has not improved for ``patience`` epochs, and the
    best-epoch parameters are returned with the scaler stored as buffers.
    """
    cfg.validate()
    mgm_cfg = prepare_config(mgm_cfg, hierarchy, panel)
    if panel.node_ids != hierarchy.node_ids:
        raise DataError("panel rows are not aligned to the hierarchy")
    W, H = mgm_cfg.input_window, mgm_cfg.horizon
    spec = SplitSpec(cfg.train_frac, 1.0 - cfg.train_frac, test_horizon or H, min_window=W + H)
    train_end, val_end = split_points(panel.T, spec)
    train_starts = _window_starts(0, train_end, W, H)
    val_starts = _window_starts(train_end, val_end, W, H)
    if len(train_starts) == 0 or len(val_starts) == 0:
        raise DataError(
            f"insufficient data: {len(train_starts)} training and {len(val_starts)} validation windows "
            f"for input_window={W}, horizon={H} on {panel.T} steps"
        )

    mean, std = _fit_scaler(panel.values[:, :train_end], cfg.scaling)
    scaled = (panel.values - mean[:, None]) / std[:, None]
    inputs = model_inputs(scaled, hierarchy, mgm_cfg.graph_mode, panel.covariates)

    params = init_params.copy() if init_params is not None else init_backbone(mgm_cfg, cfg.seed)
    params.buffers["scaler.mean"] = mean
    params.buffers["scaler.std"] = std
    batcher = _Batcher(params, hierarchy, mgm_cfg, cfg, mean, std, inputs, scaled)
    opt = Adam(list(params.values()), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    teacher = mgm_cfg.kind == "diffusion_rnn"
    levels = hierarchy.levels()
    report = TrainReport(level_names=[str(l) for l in range(hierarchy.n_levels)])
    best = params.snapshot()

    for epoch in range(1, cfg.max_epochs + 1):
        lr = cfg.lr if lr_schedule is None else lr_schedule(epoch)
        horizon = H
        if cfg.curriculum and mgm_cfg.kind == "mixhop_tcn":
            horizon = min(H, 1 + (epoch - 1) // cfg.curriculum_step)
        order = rng.permutation(train_starts)
        total = 0.0
        for chunk in _batches(order, cfg.batch):
            try:
                loss = batcher.loss(chunk, horizon, teacher)
            except T.NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch}: non-finite value during training ({exc})") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"epoch {epoch}: training loss is {value}")
            opt.step(T.backward(loss), lr=lr)
            total += value * len(chunk)
        train_loss = total / len(train_starts)

        val_total = 0.0
        fulls, actuals = [], []
        try:
            with T.no_grad():
                for chunk in _batches(val_starts, cfg.batch):
                    val_total += batcher.loss(chunk, H, False).item() * len(chunk)
            for chunk in _batches(val_starts, cfg.batch):
                f, a = batcher.predict_original(chunk)
                fulls.append(f)
                actuals.append(a)
        except T.NonFiniteError as exc:
            raise DivergenceError(f"epoch {epoch}: non-finite validation forecast ({exc})") from exc
        val_loss = val_total / len(val_starts)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"epoch {epoch}: validation loss is {val_loss}")
        full, actual = np.concatenate(fulls), np.concatenate(actuals)
        level_wape = []
        for l in range(hierarchy.n_levels):
            rows = levels == l
            try:
                level_wape.append(wape(actual[:, rows], full[:, rows]))
            except MetricError:
                level_wape.append(float("nan"))
        report.rows.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_wape": level_wape, "lr": lr}
        )
        log.info("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best = params.snapshot()
        report.stopped_epoch = epoch
        if epoch - report.best_epoch >= cfg.patience:
            break

    params.restore(best)
    return params, report


def forecast(
    params: BackboneParams,
    mgm_cfg: MGMConfig,
    panel: TimeSeriesPanel,
    hierarchy: Hierarchy,
    H: int | None = None,
) -> ForecastSet:
    """Forecast the H steps after the end of ``panel``; aggregates come from the summing matrix."""
    mgm_cfg = prepare_config(mgm_cfg, hierarchy, panel)
    H = mgm_cfg.horizon if H is None else H
    if not 1 <= H <= mgm_cfg.horizon:
        raise ValueError(f"H must lie in [1, {mgm_cfg.horizon}], got {H}")
    W = mgm_cfg.input_window
    if panel.T < W:
        raise DataError(f"panel has {panel.T} steps, the model needs a window of {W}")
    mean = params.buffers.get("scaler.mean", np.zeros(hierarchy.m))
    std = params.buffers.get("scaler.std", np.ones(hierarchy.m))
    scaled = (panel.values - mean[:, None]) / std[:, None]
    inputs = model_inputs(scaled, hierarchy, mgm_cfg.graph_mode, panel.covariates)
    with T.no_grad():
        out = mgm_forward(params, inputs[:, :, -W:], hierarchy_adjacency(hierarchy, mgm_cfg.graph_mode),
                          mgm_cfg, n_bottom=hierarchy.n).data
    bottom = out[:, :H] * std[hierarchy.a :, None] + mean[hierarchy.a :, None]
    return aggregate(hierarchy.S, bottom)
