"""WAPE / MASE, pooled per-level evaluation tables, and mean ranks."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.stats import rankdata

from .hierarchy import ForecastSet, Hierarchy

__all__ = ["MetricError", "wape", "mase", "EvalRow", "EvalTable", "evaluate", "mean_rank"]


class MetricError(ValueError):
    pass


def wape(actual, pred, variant: str = "standard") -> float:
    """Weighted absolute percentage error.

    ``standard`` is ``sum|y - yhat| / sum|y|``. ``as_printed`` additionally
    weights each absolute error by ``|y|`` in the numerator.
    """
    y = np.asarray(actual, dtype=np.float64)
    yhat = np.asarray(pred, dtype=np.float64)
    if y.shape != yhat.shape:
        raise MetricError(f"shape mismatch {y.shape} vs {yhat.shape}")
    denom = np.abs(y).sum()
    if denom == 0:
        raise MetricError("WAPE is undefined when all actuals are zero")
    err = np.abs(y - yhat)
    if variant == "standard":
        return float(err.sum() / denom)
    if variant == "as_printed":
        return float((err * np.abs(y)).sum() / denom)
    raise MetricError(f"unknown WAPE variant {variant!r}")


def mase(actual_test, pred_test, actual_train, m: int = 1) -> float:
    """Mean absolute test error over the mean absolute in-sample lag-``m`` naive error.

    2-D inputs are ``(series, time)`` and are pooled over all series.
    """
    y = np.atleast_2d(np.asarray(actual_test, dtype=np.float64))
    yhat = np.atleast_2d(np.asarray(pred_test, dtype=np.float64))
    hist = np.atleast_2d(np.asarray(actual_train, dtype=np.float64))
    if y.shape != yhat.shape:
        raise MetricError(f"shape mismatch {y.shape} vs {yhat.shape}")
    if hist.shape[1] <= m:
        raise MetricError(f"training series of length {hist.shape[1]} is too short for lag {m}")
    scale = np.abs(hist[:, m:] - hist[:, :-m]).mean()
    if scale == 0:
        raise MetricError("MASE scale is zero: the training series is constant")
    return float(np.abs(y - yhat).mean() / scale)


@dataclass(frozen=True)
class EvalRow:
    scope: str  # "overall", "level" or "node"
    name: str
    wape: float
    mase: float
    n_series: int


@dataclass
class EvalTable:
    rows: list[EvalRow] = field(default_factory=list)
    variant: str = "standard"

    def overall(self) -> EvalRow:
        return next(r for r in self.rows if r.scope == "overall")

    def level(self, lvl: int) -> EvalRow:
        return next(r for r in self.rows if r.scope == "level" and r.name == str(lvl))

    def node(self, nid: str) -> EvalRow:
        return next(r for r in self.rows if r.scope == "node" and r.name == nid)

    def to_csv(self, include_nodes: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "name", "n_series", f"wape_{self.variant}", "mase"])
        for r in self.rows:
            if r.scope == "node" and not include_nodes:
                continue
            w.writerow([r.scope, r.name, r.n_series, repr(r.wape), repr(r.mase)])
        return buf.getvalue()

    def to_text(self, include_nodes: bool = False) -> str:
        rows = [r for r in self.rows if include_nodes or r.scope != "node"]
        head = ("scope", "name", "series", "WAPE", "MASE")
        body = [(r.scope, r.name, str(r.n_series), _fmt(r.wape), _fmt(r.mase)) for r in rows]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        lines = ["  ".join(c.rjust(wd) if i > 1 else c.ljust(wd) for i, (c, wd) in enumerate(zip(row, widths)))
                 for row in (head, *body)]
        lines.insert(1, "  ".join("-" * wd for wd in widths))
        return "\n".join(lines)


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.4f}"


def _safe(fn, *args, **kw) -> float:
    # undefined cells (zero actuals, constant history) become NaN in tables
    try:
        return fn(*args, **kw)
    except MetricError:
        return float("nan")


def evaluate(
    forecasts,
    actuals_full,
    hierarchy: Hierarchy,
    history=None,
    variant: str = "standard",
    naive_lag: int = 1,
) -> EvalTable:
    """Pool WAPE and MASE over all nodes, each level, and each node.

    ``forecasts`` is a ForecastSet or an ``(m, H)`` array. ``history`` is the
    ``(m, T_train)`` in-sample block used for the MASE scale; without it the
    MASE column is NaN.
    """
    pred = forecasts.full if isinstance(forecasts, ForecastSet) else forecasts
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    y = np.asarray(actuals_full, dtype=np.float64)
    if pred.shape != y.shape or y.shape[0] != hierarchy.m:
        raise MetricError(f"forecast {pred.shape} and actuals {y.shape} must both be ({hierarchy.m}, H)")
    hist = None if history is None else np.asarray(history, dtype=np.float64)

    def row(scope, name, idx):
        w = _safe(wape, y[idx], pred[idx], variant)
        m = float("nan") if hist is None else _safe(mase, y[idx], pred[idx], hist[idx], naive_lag)
        return EvalRow(scope, name, w, m, len(idx))

    levels = hierarchy.levels()
    table = EvalTable(variant=variant)
    table.rows.append(row("overall", "all", np.arange(hierarchy.m)))
    for lvl in sorted(set(levels.tolist())):
        table.rows.append(row("level", str(lvl), np.flatnonzero(levels == lvl)))
    for i, nid in enumerate(hierarchy.node_ids):
        table.rows.append(row("node", nid, np.array([i])))
    return table


def mean_rank(scores: Mapping[str, Mapping[str, float]]) -> dict[str, float]:
    """Average rank per model across datasets (1 = lowest metric, ties share the mean rank).

    ``scores`` maps dataset -> model -> metric.
    """
    if not scores:
        raise MetricError("no datasets to rank")
    models = sorted({m for per in scores.values() for m in per})
    if len(models) < 2:
        raise MetricError("ranking needs at least two models")
    totals = dict.fromkeys(models, 0.0)
    for ds, per in scores.items():
        missing = [m for m in models if m not in per]
        if missing:
            raise MetricError(f"dataset {ds!r} has no score for {missing}")
        ranks = rankdata([per[m] for m in models], method="average")
        for m, r in zip(models, ranks):
            totals[m] += float(r)
    return {m: totals[m] / len(scores) for m in models}
