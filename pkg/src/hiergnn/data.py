"""Panel files, chronological splits, and a seeded synthetic hierarchy generator."""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .hierarchy import Hierarchy, build_hierarchy, check_coherence

__all__ = [
    "DataError",
    "TimeSeriesPanel",
    "SplitSpec",
    "SynthConfig",
    "load_panel",
    "read_forecasts",
    "panel_to_csv",
    "save_panel",
    "panel_from_bottom",
    "split_points",
    "chrono_split",
    "synth_generate",
    "atomic_write_text",
    "atomic_write_bytes",
]


class DataError(ValueError):
    pass


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@dataclass(frozen=True, eq=False)
class TimeSeriesPanel:
    """Values for every hierarchy node, rows in hierarchy order.

    ``covariates`` is an optional ``(m, C, T)`` block of extra input channels.
    """

    node_ids: tuple[str, ...]
    values: np.ndarray
    time_index: np.ndarray = field(default=None)
    covariates: np.ndarray | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[0] != len(self.node_ids):
            raise DataError(f"values must be ({len(self.node_ids)}, T), got {vals.shape}")
        if vals.shape[1] < 2:
            raise DataError("a panel needs at least 2 time steps")
        if not np.all(np.isfinite(vals)):
            raise DataError("panel contains NaN or Inf")
        object.__setattr__(self, "values", vals)
        if self.time_index is None:
            object.__setattr__(self, "time_index", np.arange(vals.shape[1]))
        if self.covariates is not None:
            cov = np.asarray(self.covariates, dtype=np.float64)
            if cov.ndim != 3 or cov.shape[0] != vals.shape[0] or cov.shape[2] != vals.shape[1]:
                raise DataError(f"covariates must be (m, C, {vals.shape[1]}), got {cov.shape}")
            object.__setattr__(self, "covariates", cov)

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def n_covariates(self) -> int:
        return 0 if self.covariates is None else self.covariates.shape[1]

    def window(self, start: int, stop: int) -> "TimeSeriesPanel":
        cov = None if self.covariates is None else self.covariates[:, :, start:stop]
        return TimeSeriesPanel(self.node_ids, self.values[:, start:stop], self.time_index[start:stop], cov)

    def bottom(self, h: Hierarchy) -> np.ndarray:
        return self.values[h.a :]


def panel_from_bottom(h: Hierarchy, bottom: np.ndarray, covariates=None) -> TimeSeriesPanel:
    bottom = np.asarray(bottom, dtype=np.float64)
    return TimeSeriesPanel(h.node_ids, h.S.entries @ bottom, covariates=covariates)


def _parse_float(cell: str, where: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"{where}: non-numeric cell {cell!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{where}: missing or non-finite value {cell!r}")
    return v


def load_panel(path, hierarchy: Hierarchy, rtol: float = 1e-6) -> TimeSeriesPanel:
    """Read a wide panel (``node_id,t0,t1,...``) aligned to ``hierarchy``.

    Bottom rows are mandatory. Missing aggregate rows are filled through the
    summing matrix; provided ones must match it within ``rtol`` (relative).
    """
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    return parse_panel(text, hierarchy, rtol=rtol, source=str(path))


def parse_panel(text: str, hierarchy: Hierarchy, rtol: float = 1e-6, source: str = "<panel>") -> TimeSeriesPanel:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or rows[0][0].strip() != "node_id":
        raise DataError(f"{source}: expected header starting with 'node_id'")
    n_t = len(rows[0]) - 1
    if n_t < 1:
        raise DataError(f"{source}: no time columns")
    known = hierarchy.index_of
    found: dict[str, np.ndarray] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        node = row[0].strip()
        if node not in known:
            raise DataError(f"{source}: line {lineno}: unknown node id {node!r}")
        if node in found:
            raise DataError(f"{source}: line {lineno}: duplicate row for {node!r}")
        if len(row) - 1 != n_t:
            raise DataError(f"{source}: line {lineno}: expected {n_t} values, got {len(row) - 1}")
        found[node] = np.array([_parse_float(c, f"{source}: line {lineno}") for c in row[1:]])
    missing = [b for b in hierarchy.bottom_ids if b not in found]
    if missing:
        raise DataError(f"{source}: missing bottom rows {missing[:5]}")
    bottom = np.stack([found[b] for b in hierarchy.bottom_ids])
    full = hierarchy.S.entries @ bottom
    for node, row in found.items():
        i = known[node]
        if i >= hierarchy.a:
            continue
        gap = np.abs(row - full[i])
        if np.any(gap > rtol * np.maximum(1.0, np.abs(full[i]))):
            raise DataError(
                f"{source}: incoherent aggregate {node!r}: max gap {gap.max():.6g} from the sum of its leaves"
            )
        full[i] = row
    return TimeSeriesPanel(hierarchy.node_ids, full)


def read_forecasts(path, hierarchy: Hierarchy) -> tuple[np.ndarray, list[str]]:
    """Read a wide forecast file as given, without coherence repair.

    Returns ``(values, labels)`` where ``values`` is ``(m, H)`` in hierarchy
    order and rows absent from the file are NaN.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or rows[0][0].strip() != "node_id" or len(rows[0]) < 2:
        raise DataError(f"{path}: expected header 'node_id,<step>,...'")
    labels = [c.strip() for c in rows[0][1:]]
    out = np.full((hierarchy.m, len(labels)), np.nan)
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        node = row[0].strip()
        if node not in hierarchy.index_of:
            raise DataError(f"{path}: line {lineno}: unknown node id {node!r}")
        if node in seen:
            raise DataError(f"{path}: line {lineno}: duplicate row for {node!r}")
        if len(row) - 1 != len(labels):
            raise DataError(f"{path}: line {lineno}: expected {len(labels)} values, got {len(row) - 1}")
        seen.add(node)
        out[hierarchy.index_of[node]] = [_parse_float(c, f"{path}: line {lineno}") for c in row[1:]]
    return out, labels


def panel_to_csv(node_ids, values: np.ndarray, labels=None) -> str:
    values = np.asarray(values, dtype=np.float64)
    labels = labels if labels is not None else [f"t{i}" for i in range(values.shape[1])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["node_id", *labels])
    for nid, row in zip(node_ids, values):
        w.writerow([nid, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def save_panel(panel: TimeSeriesPanel, path) -> None:
    atomic_write_text(path, panel_to_csv(panel.node_ids, panel.values, [f"t{int(t)}" for t in panel.time_index]))


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.2
    test_horizon: int = 7
    min_window: int = 1

    def validate(self) -> "SplitSpec":
        for name in ("train_frac", "val_frac"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise DataError(f"{name} must lie in (0, 1), got {v}")
        if abs(self.train_frac + self.val_frac - 1.0) > 1e-9:
            raise DataError("train_frac and val_frac must add up to 1")
        if self.test_horizon < 1:
            raise DataError("test_horizon must be >= 1")
        return self


def split_points(T: int, spec: SplitSpec) -> tuple[int, int]:
    """``(train_end, val_end)``: train is ``[0, train_end)``, val ``[train_end, val_end)``,
    test ``[val_end, T)``."""
    spec.validate()
    val_end = T - spec.test_horizon
    if val_end < spec.min_window + 1 or val_end < 2:
        raise DataError(
            f"series of length {T} is too short for a test window of {spec.test_horizon} "
            f"plus a minimum training window of {spec.min_window}"
        )
    train_end = int(round(spec.train_frac * val_end))
    train_end = min(max(train_end, 1), val_end - 1)
    return train_end, val_end


def chrono_split(panel: TimeSeriesPanel, spec: SplitSpec) -> tuple[TimeSeriesPanel, TimeSeriesPanel, TimeSeriesPanel]:
    train_end, val_end = split_points(panel.T, spec)
    return panel.window(0, train_end), panel.window(train_end, val_end), panel.window(val_end, panel.T)


@dataclass(frozen=True)
class SynthConfig:
    n_bottom: int = 16
    depth: int = 3
    T: int = 400
    k: int = 2
    noise_sigma: float = 0.3
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.n_bottom < 2 or self.depth < 2 or self.k < 1 or self.T < 2:
            raise DataError("synthetic config needs n_bottom >= 2, depth >= 2, k >= 1, T >= 2")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        return self


def _balanced_edges(n_bottom: int, depth: int) -> list[tuple[str, str]]:
    sizes = [1]
    for level in range(1, depth):
        target = int(round(n_bottom ** (level / (depth - 1))))
        sizes.append(min(n_bottom, max(sizes[-1], target)))
    sizes[-1] = n_bottom

    def name(level: int, i: int) -> str:
        if level == 0:
            return "T"
        if level == depth - 1:
            return f"B{i:0{len(str(n_bottom))}d}"
        return f"L{level}_{i:0{len(str(sizes[level]))}d}"

    edges = []
    for level in range(1, depth):
        for i in range(sizes[level]):
            parent = (i * sizes[level - 1]) // sizes[level]
            edges.append((name(level, i), name(level - 1, parent)))
    return edges


def synth_generate(cfg: SynthConfig) -> tuple[Hierarchy, TimeSeriesPanel]:
    """Balanced tree whose leaves mix k shared latent factors plus Gaussian noise.

    Even-numbered factors are sinusoids, odd-numbered ones AR(1) processes;
    both are positive around a level of 1. Leaves load on every factor with
    weights in [0.5, 1.5]. Noise is drawn last so that runs differing only in
    ``noise_sigma`` share the same clean signal.
    """
    cfg.validate()
    h = build_hierarchy(_balanced_edges(cfg.n_bottom, cfg.depth))
    rng = np.random.default_rng(cfg.seed)
    t = np.arange(cfg.T)
    factors = np.empty((cfg.k, cfg.T))
    for j in range(cfg.k):
        if j % 2 == 0:
            period = rng.choice([7.0, 12.0, 24.0, 30.0])
            phase = rng.uniform(0, 2 * np.pi)
            factors[j] = 1.0 + 0.5 * np.sin(2 * np.pi * t / period + phase)
        else:
            phi = 0.9
            eps = rng.normal(0.0, math.sqrt(1 - phi**2), size=cfg.T)
            ar = np.empty(cfg.T)
            ar[0] = eps[0]
            for i in range(1, cfg.T):
                ar[i] = phi * ar[i - 1] + eps[i]
            factors[j] = 1.0 + 0.3 * ar
    loadings = rng.uniform(0.5, 1.5, size=(cfg.n_bottom, cfg.k))
    noise = rng.normal(0.0, 1.0, size=(cfg.n_bottom, cfg.T))
    bottom = np.clip(loadings @ factors + cfg.noise_sigma * noise, 0.0, None)
    return h, panel_from_bottom(h, bottom)
