"""Finite-difference gradient suite over every primitive op and every backbone kind.

Each case is scalarised as ``sum(out * R)`` with a fixed random ``R`` so that
no gradient is identically zero by symmetry (a plain sum of a softmax is).
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backbones import BACKBONE_KINDS, MGMConfig, init_backbone, mgm_forward
from .graph_ops import hierarchy_adjacency
from .hierarchy import build_hierarchy
from .tensor import Tensor

__all__ = ["GradResult", "op_cases", "backbone_case", "run_suite", "TINY_EDGES"]

# root with two children, each holding two leaves: n = 4, m = 7
TINY_EDGES = [("A", "R"), ("B", "R"), ("a1", "A"), ("a2", "A"), ("b1", "B"), ("b2", "B")]


@dataclass(frozen=True)
class GradResult:
    group: str  # "op" or "backbone"
    name: str
    seed: int
    max_rel_error: float
    seconds: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def _weighted(fn: Callable[..., Tensor], rng) -> Callable[..., Tensor]:
    cache: dict = {}

    def f(*xs):
        out = fn(*xs)
        if "R" not in cache:
            cache["R"] = Tensor(rng.normal(size=out.shape))
        return T.sum_(out * cache["R"])

    return f


def _away_from_zero(rng, shape, gap=0.2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def op_cases(seed: int) -> list[tuple[str, Callable[..., Tensor], list[Tensor]]]:
    """(op_kind, scalar function, points) for every dispatchable op kind."""
    rng = np.random.default_rng(seed)

    def t(*shape, data=None):
        return Tensor(rng.normal(size=shape) if data is None else data, requires_grad=True)

    specs = [
        ("matmul", lambda a, b: T.apply("matmul", a, b), [t(2, 3, 4), t(4, 5)]),
        ("add", lambda a, b: T.apply("add", a, b), [t(3, 4), t(4)]),
        ("mul", lambda a, b: T.apply("mul", a, b), [t(3, 4), t(3, 1)]),
        ("sigmoid", lambda a: T.apply("sigmoid", a), [t(3, 4)]),
        ("tanh", lambda a: T.apply("tanh", a), [t(3, 4)]),
        ("relu", lambda a: T.apply("relu", a), [t(3, 4, data=_away_from_zero(rng, (3, 4)))]),
        ("softmax_lastdim", lambda a: T.apply("softmax_lastdim", a), [t(3, 5)]),
        ("concat", lambda a, b: T.apply("concat", a, b, axis=1), [t(2, 3), t(2, 2)]),
        ("slice", lambda a: T.apply("slice", a, (slice(None), slice(1, 4))), [t(3, 5)]),
        ("transpose", lambda a: T.apply("transpose", a, (2, 0, 1)), [t(2, 3, 4)]),
        ("sum", lambda a: T.apply("sum", a, axis=1), [t(3, 4)]),
        ("mean", lambda a: T.apply("mean", a, axis=0), [t(3, 4)]),
        ("conv1d_dilated", lambda x, w: T.apply("conv1d_dilated", x, w, dilation=2), [t(2, 3, 9), t(4, 3, 3)]),
        ("dft_real", lambda x: T.apply("dft_real", x), [t(3, 8)]),
        ("idft_real", lambda s: T.apply("idft_real", s, n=8), [t(3, 2, 5)]),
    ]
    return [(name, _weighted(fn, rng), pts) for name, fn, pts in specs]


def tiny_config(kind: str) -> MGMConfig:
    window = 12 if kind in ("mixhop_tcn", "spatial_ode") else 6
    return MGMConfig(kind=kind, input_window=window, horizon=2, hidden=4, layers=1, K=2,
                     dilation_q=1, trend_window=3, ode_steps=2)


def backbone_case(kind: str, seed: int) -> tuple[Callable[..., Tensor], list[Tensor]]:
    """Scalarised mgm_forward on the 4-leaf tree; points are every parameter tensor."""
    h = build_hierarchy(TINY_EDGES)
    cfg = tiny_config(kind).validate()
    params = init_backbone(cfg, seed)
    rng = np.random.default_rng(10_000 + seed)
    window = rng.normal(size=(2, h.m, cfg.in_channels, cfg.input_window))
    A = hierarchy_adjacency(h, cfg.graph_mode)
    R = Tensor(rng.normal(size=(2, h.n, cfg.horizon)))
    keys = list(params.keys())

    def f(*tensors):
        for k, v in zip(keys, tensors):
            params.tensors[k] = v
        return T.sum_(mgm_forward(params, window, A, cfg, n_bottom=h.n) * R)

    return f, [params[k] for k in keys]


def run_suite(seeds=range(5), kinds=BACKBONE_KINDS, epsilon: float = 1e-5,
              progress: Callable[[GradResult], None] | None = None) -> list[GradResult]:
    results = []
    for seed in seeds:
        cases = [("op", name, f, pts) for name, f, pts in op_cases(seed)]
        cases += [("backbone", kind, *backbone_case(kind, seed)) for kind in kinds]
        for group, name, f, pts in cases:
            t0 = time.perf_counter()
            err = T.grad_check(f, pts, epsilon=epsilon)
            res = GradResult(group, name, seed, float(err), time.perf_counter() - t0)
            results.append(res)
            if progress is not None:
                progress(res)
    return results
