"""Command-line entry point: synth, train, forecast, evaluate, reconcile, gradcheck.

Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
3 data / shape / coherence error, 4 training diverged.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from .backbones import BACKBONE_KINDS, ConfigError, MGMConfig
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DataError,
    SynthConfig,
    TimeSeriesPanel,
    atomic_write_text,
    load_panel,
    panel_to_csv,
    read_forecasts,
    save_panel,
    synth_generate,
)
from .graph_ops import GRAPH_MODES
from .hierarchy import (
    HierarchyError,
    check_coherence,
    historical_proportions,
    read_hierarchy,
    reconcile_bottom_up,
    reconcile_top_down,
    write_hierarchy,
)
from .metrics import MetricError, evaluate
from .training import DivergenceError, TrainConfig, forecast, prepare_config, train

log = logging.getLogger("hiergnn")

EXIT_OK, EXIT_GRAD, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4

# flag dest -> (dataclass, field). Only these keys may appear in a --config file
# alongside the path keys below.
_MGM_KEYS = {
    "backbone": "kind", "horizon": "horizon", "input_window": "input_window", "hidden": "hidden",
    "layers": "layers", "K": "K", "beta": "beta", "alpha_geg": "alpha_geg", "dilation_q": "dilation_q",
    "graph_mode": "graph_mode", "trend_window": "trend_window", "ode_time": "ode_time", "ode_steps": "ode_steps",
}
_TRAIN_KEYS = {
    "lam": "lam", "lr": "lr", "max_epochs": "max_epochs", "patience": "patience", "batch": "batch",
    "curriculum": "curriculum", "curriculum_step": "curriculum_step", "loss": "loss_kind", "seed": "seed",
    "scaling": "scaling", "train_frac": "train_frac",
}
_PATH_KEYS = ("hierarchy", "panel", "checkpoint", "out", "report", "plot_dir", "forecasts")
_ALIASES = {"lambda": "lam", "kind": "backbone", "loss_kind": "loss"}


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys accept dashes or underscores."""
    out: dict[str, str] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        key = _ALIASES.get(key, key)
        if key not in _MGM_KEYS and key not in _TRAIN_KEYS and key not in _PATH_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _field_types(cls) -> dict[str, type]:
    return {f.name: {"int": int, "float": float, "bool": bool, "str": str}[str(f.type)] for f in fields(cls)}


def _coerce(value, typ, key):
    if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    try:
        if typ is bool:
            return _bool(value)
        return typ(value)
    except (TypeError, ValueError, argparse.ArgumentTypeError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {typ.__name__}") from None


def resolve(args: argparse.Namespace) -> dict:
    """Merge the optional config file with flags (flags win)."""
    merged = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key, value in vars(args).items():
        if value is not None and key not in ("cmd", "func", "config"):
            merged[key] = value
    return merged


def build_configs(opts: dict) -> tuple[MGMConfig, TrainConfig]:
    mtypes, ttypes = _field_types(MGMConfig), _field_types(TrainConfig)
    mkw = {f: _coerce(opts[k], mtypes[f], k) for k, f in _MGM_KEYS.items() if k in opts}
    tkw = {f: _coerce(opts[k], ttypes[f], k) for k, f in _TRAIN_KEYS.items() if k in opts}
    mgm = MGMConfig(**mkw)
    tc = TrainConfig(**tkw).validate()
    return mgm, tc


def _need(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if not opts.get(k)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _load_inputs(opts: dict):
    h = read_hierarchy(opts["hierarchy"])
    return h, load_panel(opts["panel"], h)


def _emit(text: str, out_path=None) -> None:
    if out_path:
        atomic_write_text(out_path, text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# commands


def cmd_synth(opts: dict) -> int:
    _need(opts, "out_dir")
    cfg = SynthConfig(
        n_bottom=_coerce(opts.get("n_bottom", 16), int, "n_bottom"),
        depth=_coerce(opts.get("depth", 3), int, "depth"),
        T=_coerce(opts.get("length", 400), int, "length"),
        k=_coerce(opts.get("factors", 2), int, "factors"),
        noise_sigma=_coerce(opts.get("sigma", 0.3), float, "sigma"),
        seed=_coerce(opts.get("seed", 0), int, "seed"),
    )
    try:
        cfg.validate()
    except DataError as exc:
        raise ConfigError(str(exc)) from None
    h, panel = synth_generate(cfg)
    hp = os.path.join(opts["out_dir"], "hierarchy.csv")
    pp = os.path.join(opts["out_dir"], "panel.csv")
    write_hierarchy(h, hp)
    save_panel(panel, pp)
    print("file,nodes,steps")
    print(f"{hp},{h.m},")
    print(f"{pp},{h.m},{panel.T}")
    return EXIT_OK


def cmd_train(opts: dict) -> int:
    _need(opts, "hierarchy", "panel")
    mgm, tc = build_configs(opts)
    mgm.validate()
    out = opts.get("out") or "model.ckpt"
    report_path = opts.get("report") or os.path.splitext(out)[0] + ".report.csv"
    h, panel = _load_inputs(opts)
    params, report = train(tc, mgm, panel, h)
    final_cfg = prepare_config(mgm, h, panel)
    save_checkpoint(out, params, final_cfg, {"train": tc.to_dict(), "node_ids": list(h.node_ids)})
    atomic_write_text(report_path, report.to_csv())
    if opts.get("plot_dir"):
        from .plots import plot_training

        plot_training(report, os.path.join(opts["plot_dir"], "training.png"))
    print("key,value")
    print(f"checkpoint,{out}")
    print(f"report,{report_path}")
    print(f"best_epoch,{report.best_epoch}")
    print(f"stopped_epoch,{report.stopped_epoch}")
    print(f"best_val_loss,{report.best_val_loss!r}")
    for j, name in enumerate(report.level_names):
        print(f"best_val_wape_level{name},{report.val_wape(j)!r}")
    return EXIT_OK


def _model_forecast(opts: dict, h, panel: TimeSeriesPanel, holdout: bool):
    params, cfg, meta = load_checkpoint(opts["checkpoint"])
    if meta.get("node_ids") and tuple(meta["node_ids"]) != h.node_ids:
        raise DataError("checkpoint was trained on a different hierarchy")
    H = _coerce(opts.get("horizon", cfg.horizon), int, "horizon")
    if not 1 <= H <= cfg.horizon:
        raise ConfigError(f"horizon must lie in [1, {cfg.horizon}] for this checkpoint")
    context = panel.window(0, panel.T - H) if holdout else panel
    return forecast(params, cfg, context, h, H).full, context


def cmd_forecast(opts: dict) -> int:
    _need(opts, "checkpoint", "hierarchy", "panel")
    h, panel = _load_inputs(opts)
    full, _ = _model_forecast(opts, h, panel, holdout=False)
    start = int(panel.time_index[-1]) + 1
    _emit(panel_to_csv(h.node_ids, full, [f"t{start + i}" for i in range(full.shape[1])]), opts.get("out"))
    return EXIT_OK


def _shares(h, panel: TimeSeriesPanel, upto: int) -> np.ndarray:
    return historical_proportions(panel.values[h.a :, :upto])


def _reconcile(method: str, base: np.ndarray, h, panel: TimeSeriesPanel | None, upto: int | None) -> np.ndarray:
    if method == "bu":
        if np.isnan(base[h.a :]).any():
            raise DataError("bottom-up reconciliation needs every bottom row")
        return reconcile_bottom_up(np.nan_to_num(base), h).full
    if panel is None:
        raise UsageError("top-down reconciliation needs --panel for historical shares")
    top = base[h.index_of[h.top]]
    if np.isnan(top).any():
        raise DataError(f"top-down reconciliation needs the top row {h.top!r}")
    return reconcile_top_down(top, _shares(h, panel, upto or panel.T), h).full


def cmd_evaluate(opts: dict) -> int:
    _need(opts, "hierarchy", "panel")
    if bool(opts.get("checkpoint")) == bool(opts.get("forecasts")):
        raise UsageError("give exactly one of --checkpoint or --forecasts")
    h, panel = _load_inputs(opts)
    variant = opts.get("metric_variant") or "standard"
    if opts.get("checkpoint"):
        full, context = _model_forecast(opts, h, panel, holdout=True)
    else:
        base, _ = read_forecasts(opts["forecasts"], h)
        H = base.shape[1]
        if H >= panel.T:
            raise DataError(f"forecast horizon {H} leaves no history in a panel of {panel.T} steps")
        context = panel.window(0, panel.T - H)
        if opts.get("reconcile"):
            full = _reconcile(opts["reconcile"], base, h, panel, context.T)
        else:
            if np.isnan(base).any():
                raise DataError("forecast file is missing rows; pass --reconcile to derive them")
            ok, gap = check_coherence(base, h, tol=1e-9 * (1.0 + float(np.abs(base).max())))
            if not ok:
                raise DataError(f"forecasts are incoherent (max violation {gap:.6g}); pass --reconcile bu|td")
            full = base
    H = full.shape[1]
    actual = panel.values[:, panel.T - H :]
    table = evaluate(full, actual, h, history=context.values, variant=variant)
    if opts.get("out"):
        atomic_write_text(opts["out"], table.to_csv(include_nodes=True))
    if opts.get("format") == "text":
        print(table.to_text())
    else:
        sys.stdout.write(table.to_csv(include_nodes=False))
    if opts.get("plot_dir"):
        from .plots import plot_forecasts, plot_level_wape

        plot_forecasts(h, context.values, full, os.path.join(opts["plot_dir"], "forecast.png"), actual=actual)
        plot_level_wape(table, os.path.join(opts["plot_dir"], "level_wape.png"))
    return EXIT_OK


def cmd_reconcile(opts: dict) -> int:
    _need(opts, "forecasts", "hierarchy", "method")
    h = read_hierarchy(opts["hierarchy"])
    base, labels = read_forecasts(opts["forecasts"], h)
    panel = load_panel(opts["panel"], h) if opts.get("panel") else None
    full = _reconcile(opts["method"], base, h, panel, None)
    _emit(panel_to_csv(h.node_ids, full, labels), opts.get("out"))
    return EXIT_OK


def cmd_gradcheck(opts: dict) -> int:
    from .gradsuite import run_suite

    seeds = _coerce(opts.get("seeds", 5), int, "seeds")
    tol = _coerce(opts.get("tol", 1e-4), float, "tol")
    kinds = opts.get("kinds") or list(BACKBONE_KINDS)
    unknown = [k for k in kinds if k not in BACKBONE_KINDS]
    if unknown or seeds < 1:
        raise ConfigError(f"bad gradcheck options: kinds {unknown}, seeds {seeds}")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["group", "name", "seed", "max_rel_error", "passed"])

    def row(r):
        w.writerow([r.group, r.name, r.seed, f"{r.max_rel_error:.3e}", int(r.passed(tol))])
        sys.stdout.flush()

    results = run_suite(seeds=range(seeds), kinds=kinds, progress=row)
    return EXIT_OK if all(r.passed(tol) for r in results) else EXIT_GRAD


# --------------------------------------------------------------------------
# parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--backbone", choices=BACKBONE_KINDS)
    g.add_argument("--horizon", type=int)
    g.add_argument("--input-window", type=int)
    g.add_argument("--hidden", type=int)
    g.add_argument("--layers", type=int)
    g.add_argument("--K", type=int, help="hops / diffusion steps / polynomial order")
    g.add_argument("--beta", type=float, help="mix-hop retention")
    g.add_argument("--alpha-geg", type=float)
    g.add_argument("--dilation-q", type=int)
    g.add_argument("--graph-mode", choices=GRAPH_MODES)
    g.add_argument("--trend-window", type=int)
    g.add_argument("--ode-time", type=float)
    g.add_argument("--ode-steps", type=int)
    t = p.add_argument_group("training")
    t.add_argument("--lambda", dest="lam", type=float, help="aggregate-loss weight (default 0.5)")
    t.add_argument("--lr", type=float)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--curriculum", type=_bool, metavar="BOOL")
    t.add_argument("--curriculum-step", type=int)
    t.add_argument("--loss", choices=("mse", "mae"))
    t.add_argument("--seed", type=int)
    t.add_argument("--scaling", choices=("per_node_zscore", "none"))
    t.add_argument("--train-frac", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiergnn", description="Hierarchical forecasting with graph backbones.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="write a synthetic hierarchy and panel")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-bottom", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--length", type=int, help="number of time steps")
    p.add_argument("--factors", type=int, help="latent factors")
    p.add_argument("--sigma", type=float, help="noise standard deviation")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a backbone and write a checkpoint plus report")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--hierarchy")
    p.add_argument("--panel")
    p.add_argument("--out", help="checkpoint path (default model.ckpt)")
    p.add_argument("--report", help="training report CSV (default <out>.report.csv)")
    p.add_argument("--plot-dir")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="forecast past the end of the panel")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--hierarchy")
    p.add_argument("--panel")
    p.add_argument("--horizon", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="score forecasts on the last horizon of the panel")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--forecasts", help="external wide forecast file instead of a checkpoint")
    p.add_argument("--hierarchy")
    p.add_argument("--panel")
    p.add_argument("--horizon", type=int)
    p.add_argument("--metric-variant", choices=("standard", "as_printed"))
    p.add_argument("--reconcile", choices=("bu", "td"))
    p.add_argument("--format", choices=("csv", "text"), default="csv")
    p.add_argument("--out", help="full table including per-node rows")
    p.add_argument("--plot-dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reconcile", help="bottom-up or top-down reconciliation of base forecasts")
    p.add_argument("--forecasts", required=True)
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--method", choices=("bu", "td"), required=True)
    p.add_argument("--panel", help="history for top-down shares")
    p.add_argument("--out")
    p.set_defaults(func=cmd_reconcile)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and backbone")
    p.add_argument("--seeds", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--kinds", nargs="+")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    raw = os.environ.get("HGNN_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"HGNN_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        opts = resolve(args)
        with _thread_limit():
            return args.func(opts)
    except UsageError as exc:
        sub = parser._subparsers._group_actions[0].choices[args.cmd]  # noqa: SLF001
        sub.print_usage(sys.stderr)
        print(f"hiergnn {args.cmd}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, HierarchyError, MetricError, CheckpointError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
