"""Command-line driver: ingest, backtest, evolve, aggregate, report.

Configuration is a JSON object validated against a fixed key schema;
--set key=value overrides config-file entries and dedicated flags override
both. Every run directory gets a manifest.json tying outputs to the config
hash, code version, and input checksums. No command embeds timestamps, so
identical inputs and seed reproduce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, dsl, metrics, portfolio
from .aggregation import aggregate_records, pooled_library, save_merged
from .evolution import (
    EvolutionConfig,
    EvolutionResult,
    PerfTracker,
    composite_scores,
    load_checkpoints,
    run_evolution,
    save_checkpoints,
)
from .generator import (
    DEFAULT_API_KEY_ENV,
    GenerationRequest,
    GeneratorConfig,
    generate_offline,
    generate_remote,
)
from .market_data import (
    load_price_table,
    load_snapshot,
    save_snapshot,
    to_normalized_prices,
    to_relative_returns,
    window_matrices,
)
from .seeds import FactorRecord, load_library, save_library

logger = logging.getLogger(__name__)


def _windows(text: object) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(w) for w in text)
    return tuple(int(w) for w in str(text).split(",") if w.strip())


def _opt_int(text: object) -> int | None:
    if text is None or text == "":
        return None
    return int(text)


# key: (default, caster, what it controls)
CONFIG_SCHEMA: dict[str, tuple[object, Callable[[object], object], str]] = {
    "data": ("", str, "price snapshot consumed by backtest/evolve"),
    "output_dir": ("run", str, "directory receiving ledgers, reports, manifest"),
    "rng_seed": (0, int, "single entropy source; all randomness derives from it"),
    "lookback": (30, int, "window length fed to factor expressions"),
    "warmup_steps": (60, int, "steps earning the market average while factor history accumulates"),
    "search_interval": (5, int, "steps between generator calls; also the trailing stats window"),
    "m": (10, int, "portfolio cardinality cap (nonzero weights per step)"),
    "k_top": (5, int, "factors blended into the composite score"),
    "m_candidates": (5, int, "candidates requested per search step; small batches stay reliable"),
    "cost_rate": (0.0, float, "proportional transaction cost charged on turnover"),
    "weighting": ("equal", str, "weight scheme: equal | positive_score | temperature"),
    "tau": (1.0, float, "softmax temperature; small values concentrate on the top score"),
    "quality_metric": ("final_value", str, "factor ranking basis: final_value | mean_rankic"),
    "max_pool_size": (50, int, "pool size triggering pruning"),
    "keep_top_n": (20, int, "best factors guaranteed to survive pruning"),
    "t_drop": (0.0, float, "margin a candidate must clear over the market baseline"),
    "recall_n": (20, int, "top-N overlap size for recall quality stats"),
    "stats_window": (120, int, "cap on the trailing window behind checkpoint stats"),
    "seed_windows": ((3, 7, 14, 21), _windows, "window grid instantiating the seed library"),
    "generator": ("offline", str, "candidate source: offline (deterministic) | remote (HTTP endpoint)"),
    "endpoint": ("", str, "remote chat endpoint URL"),
    "model": ("", str, "remote model identifier"),
    "temperature": (0.7, float, "remote sampling temperature"),
    "max_retries": (3, int, "remote attempts before a search step gives up"),
    "min_valid": (None, _opt_int, "parsed candidates required to accept a batch; blank = half of m_candidates"),
    "timeout": (60.0, float, "remote request timeout in seconds"),
    "api_key_env": (DEFAULT_API_KEY_ENV, str, "environment variable holding the API key"),
    "audit_log": ("", str, "JSON-lines file recording every remote request/response"),
}

_EVOLUTION_KEYS = (
    "lookback",
    "warmup_steps",
    "search_interval",
    "m",
    "k_top",
    "m_candidates",
    "cost_rate",
    "weighting",
    "tau",
    "quality_metric",
    "max_pool_size",
    "keep_top_n",
    "t_drop",
    "recall_n",
    "stats_window",
    "rng_seed",
    "seed_windows",
)


def config_epilog() -> str:
    lines = ["config keys (JSON file and --set key=value):"]
    for key, (default, _, what) in CONFIG_SCHEMA.items():
        shown = "" if default is None else repr(list(default) if isinstance(default, tuple) else default)
        lines.append(f"  {key} (default {shown or 'auto'}): {what}")
    return "\n".join(lines)


def load_run_config(path: str | None, sets: Sequence[str]) -> dict:
    """Defaults, then config file, then --set overrides; unknown keys fail."""
    cfg = {key: default for key, (default, _, _) in CONFIG_SCHEMA.items()}
    if path:
        with open(path) as handle:
            doc = json.load(handle)
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
        for key, value in doc.items():
            if key not in CONFIG_SCHEMA:
                raise ValueError(f"unknown config key {key!r}")
            cfg[key] = CONFIG_SCHEMA[key][1](value)
    for item in sets:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        if key not in CONFIG_SCHEMA:
            raise ValueError(f"unknown config key {key!r}")
        cfg[key] = CONFIG_SCHEMA[key][1](value)
    return cfg


def evolution_config(cfg: dict) -> EvolutionConfig:
    return EvolutionConfig(**{key: cfg[key] for key in _EVOLUTION_KEYS})


def generator_config(cfg: dict) -> GeneratorConfig:
    return GeneratorConfig(
        endpoint=cfg["endpoint"],
        model=cfg["model"],
        temperature=cfg["temperature"],
        max_retries=cfg["max_retries"],
        min_valid=cfg["min_valid"],
        timeout=cfg["timeout"],
        api_key_env=cfg["api_key_env"],
        audit_path=cfg["audit_log"] or None,
    )


# ------------------------------------------------------------------ outputs


def _sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_json(cfg: dict) -> str:
    canonical = {
        key: list(value) if isinstance(value, tuple) else value for key, value in cfg.items()
    }
    return json.dumps(canonical, sort_keys=True, indent=2) + "\n"


def write_manifest(outdir: Path, cfg: dict, inputs: Sequence[str]) -> None:
    text = _config_json(cfg)
    manifest = {
        "code_version": __version__,
        "config": json.loads(text),
        "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "inputs": {path: _sha256_file(path) for path in sorted(inputs)},
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _ledger_metrics(rows: Sequence[portfolio.LedgerRow]) -> dict[str, float]:
    grosses = [row.step_return for row in rows]
    path = metrics.WealthPath.from_returns(grosses, initial=1.0)
    net = np.asarray(grosses) - 1.0
    baseline = metrics.WealthPath.from_returns([row.baseline_return for row in rows], initial=1.0)
    return {
        "cumulative_wealth": metrics.cumulative_wealth(path),
        "sharpe_ratio": metrics.sharpe_ratio(net).value,
        "max_drawdown": metrics.max_drawdown(path),
        "final_value": float(path.values[-1]),
        "baseline_cumulative_wealth": metrics.cumulative_wealth(baseline),
        "baseline_sharpe_ratio": metrics.sharpe_ratio(np.asarray([row.baseline_return for row in rows]) - 1.0).value,
        "baseline_max_drawdown": metrics.max_drawdown(baseline),
        "baseline_final_value": float(baseline.values[-1]),
    }


def _factor_rows(tracker: PerfTracker, pool: Sequence[FactorRecord], ecfg: EvolutionConfig) -> list[dict]:
    rows = []
    last = max((tracker.series(rec.name)[0][-1] for rec in pool if tracker.count(rec.name)), default=0)
    for rec in sorted(pool, key=lambda r: r.name):
        if tracker.count(rec.name) == 0:
            continue
        row: dict = {"factor": rec.name}
        row.update(tracker.performance_stats(rec.name, ecfg.stats_window, last))
        row.update(tracker.quality_stats(rec.name, ecfg.stats_window, last, ecfg.recall_n))
        rows.append(row)
    return rows


def write_run_outputs(
    outdir: Path, result: EvolutionResult, ecfg: EvolutionConfig, checkpoints: bool
) -> dict[str, float]:
    portfolio.write_ledger(result.ledger, str(outdir / "ledger.csv"))
    portfolio.write_ledger_json(result.ledger, str(outdir / "ledger.json"))
    save_library(list(result.pool), str(outdir / "pool.json"))
    if checkpoints:
        save_checkpoints(result.records, str(outdir / "checkpoints.jsonl"))
    metrics.write_factor_report(
        _factor_rows(result.tracker, result.pool, ecfg),
        str(outdir / "factor_report.csv"),
        str(outdir / "factor_report.json"),
        ecfg.recall_n,
    )
    summary = _ledger_metrics(result.ledger)
    (outdir / "metrics.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    return summary


def _print_summary(summary: dict[str, float]) -> None:
    print(
        "CW {cumulative_wealth:.4f}  SR {sharpe_ratio:.4f}  MDD {max_drawdown:.4f}  "
        "final {final_value:.4f} (baseline final {baseline_final_value:.4f})".format(**summary)
    )


# ----------------------------------------------------------------- commands


def cmd_ingest(args: argparse.Namespace) -> int:
    table = load_price_table(args.input, layout=args.layout, values=args.values)
    save_snapshot(table, args.output)
    print(
        f"assets {len(table.asset_ids)}  steps {len(table.dates)}  "
        f"dropped {len(table.dropped)}  -> {args.output}"
    )
    return 0


def cmd_backtest(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args.set or [])
    if args.snapshot:
        cfg["data"] = args.snapshot
    if args.output:
        cfg["output_dir"] = args.output
    if not cfg["data"]:
        raise ValueError("no snapshot: pass --snapshot or set the data key")
    table = load_snapshot(cfg["data"])
    library = load_library(args.library)
    if not library:
        raise ValueError("factor library is empty")
    ecfg = evolution_config(cfg)
    result = run_evolution(table, ecfg, gen=None, pool=library)
    outdir = Path(cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    summary = write_run_outputs(outdir, result, ecfg, checkpoints=False)
    write_manifest(outdir, cfg, [cfg["data"], args.library])
    _print_summary(summary)
    return 0


def _make_generator(cfg: dict) -> Callable[[GenerationRequest], object]:
    if cfg["generator"] == "offline":
        return generate_offline
    if cfg["generator"] == "remote":
        if not os.environ.get(cfg["api_key_env"], ""):
            raise ValueError(
                f"remote generation needs the {cfg['api_key_env']} environment variable"
            )
        gcfg = generator_config(cfg)
        return lambda req: generate_remote(req, gcfg)
    raise ValueError("generator must be 'offline' or 'remote'")


def cmd_evolve(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args.set or [])
    if args.snapshot:
        cfg["data"] = args.snapshot
    if args.output:
        cfg["output_dir"] = args.output
    if not cfg["data"]:
        raise ValueError("no snapshot: pass --snapshot or set the data key")
    gen = _make_generator(cfg)
    table = load_snapshot(cfg["data"])
    ecfg = evolution_config(cfg)
    resume = None
    if args.resume_from:
        tail = load_checkpoints(args.resume_from)
        if not tail:
            raise ValueError(f"no checkpoints in {args.resume_from}")
        resume = tail[-1]
    result = run_evolution(table, ecfg, gen=gen, resume_from=resume)
    outdir = Path(cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    summary = write_run_outputs(outdir, result, ecfg, checkpoints=True)
    inputs = [cfg["data"]] + ([args.resume_from] if args.resume_from else [])
    write_manifest(outdir, cfg, inputs)
    _print_summary(summary)
    return 0


def cmd_aggregate(args: argparse.Namespace) -> int:
    merged = aggregate_records(args.checkpoints, n_limit=args.max_records, ratio=args.ratio)
    library = pooled_library(merged)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    save_merged(merged, str(outdir / "merged.jsonl"))
    save_library(library, str(outdir / "pooled_library.json"))
    cfg = {"checkpoints": list(args.checkpoints), "max_records": args.max_records, "ratio": args.ratio}
    manifest = {
        "code_version": __version__,
        "config": cfg,
        "config_sha256": hashlib.sha256(
            (json.dumps(cfg, sort_keys=True, indent=2) + "\n").encode()
        ).hexdigest(),
        "inputs": {path: _sha256_file(path) for path in sorted(args.checkpoints)},
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(f"merged {len(merged)} records; pooled library holds {len(library)} factors")
    return 0


def _report_wealth_curve(args: argparse.Namespace, outdir: Path) -> None:
    ledgers = [portfolio.read_ledger(path) for path in args.ledger]
    names = [Path(path).stem for path in args.ledger]
    if len(set(names)) != len(names):
        names = [str(Path(path).parent / Path(path).stem) for path in args.ledger]
    common = set(row.date for row in ledgers[0])
    for rows in ledgers[1:]:
        common &= {row.date for row in rows}
    if not common:
        raise ValueError("ledgers share no dates")
    by_name = [{row.date: row.portfolio_value for row in rows} for rows in ledgers]
    with open(outdir / "wealth_curve.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["date"] + names)
        for row in ledgers[0]:
            if row.date in common:
                writer.writerow([row.date] + [repr(table[row.date]) for table in by_name])


def _report_factor_sweep(args: argparse.Namespace, outdir: Path, cfg: dict) -> None:
    if not args.snapshot or not args.library:
        raise ValueError("factor_sweep needs --snapshot and --library")
    table = load_snapshot(args.snapshot)
    library = load_library(args.library)
    ecfg = evolution_config(cfg)
    result = run_evolution(table, ecfg, gen=None, pool=library)
    rm = to_relative_returns(table)
    norm = to_normalized_prices(rm)
    pool_map = {rec.name: rec for rec in result.pool}
    n_steps = rm.values.shape[1]
    cost_model = portfolio.CostModel(ecfg.cost_rate)
    with open(outdir / "factor_sweep.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["k_top", "cumulative_wealth", "final_value", "mean_rankic"])
        for k in range(1, 11):
            value = 1.0
            prev = None
            ics = []
            for t in range(ecfg.warmup_steps + 1, n_steps):
                realized = rm.values[:, t]
                try:
                    composite, _ = composite_scores(
                        pool_map, result.tracker, norm, rm, ecfg, t, k_top=k
                    )
                    sel = portfolio.select_top_m(composite, ecfg.m)
                    weights = portfolio.equal_weights(sel, t)
                    r_t, _, _ = portfolio.step_return(weights, realized, prev, cost_model)
                    prev = portfolio.drift_weights(weights, realized)
                    ics.append(metrics.spearman_rank_corr(composite, realized).value)
                except Exception:  # noqa: BLE001 - mirror the loop's fallback
                    r_t = portfolio.fallback_market_return(realized)
                    prev = None
                value *= r_t
            mean_ic = float(np.mean(ics)) if ics else 0.0
            writer.writerow([k, repr(value - 1.0), repr(value), repr(mean_ic)])


def _report_score_heatmap(args: argparse.Namespace, outdir: Path, cfg: dict) -> None:
    if not args.snapshot or not args.library or len(args.ledger) != 1:
        raise ValueError("score_heatmap needs --snapshot, --library, and one --ledger")
    table = load_snapshot(args.snapshot)
    library = load_library(args.library)
    rows = portfolio.read_ledger(args.ledger[0])
    rm = to_relative_returns(table)
    norm = to_normalized_prices(rm)
    ecfg = evolution_config(cfg)
    date_to_t = {date: t - 1 for t, date in enumerate(rm.dates)}
    index_of = {asset: i for i, asset in enumerate(table.asset_ids)}
    names = sorted(rec.name for rec in library)
    exprs = {rec.name: rec.expr for rec in library}
    with open(outdir / "score_heatmap.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["factor"] + [row.date for row in rows])
        cells: dict[str, list[str]] = {name: [] for name in names}
        for row in rows:
            t = date_to_t.get(row.date)
            if t is None or t < ecfg.lookback:
                for name in names:
                    cells[name].append("")
                continue
            prices_win, returns_win = window_matrices(norm, rm, t, ecfg.lookback)
            held = [index_of[a] for a in row.selected_assets if a in index_of]
            idx = held if held else list(range(len(table.asset_ids)))
            for name in names:
                scores = dsl.normalize_scores(
                    dsl.evaluate_cross_section(exprs[name], prices_win, returns_win)
                )
                cells[name].append(repr(float(scores[idx].mean())))
        for name in names:
            writer.writerow([name] + cells[name])


def cmd_report(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args.set or [])
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    if args.mode == "wealth_curve":
        if not args.ledger:
            raise ValueError("wealth_curve needs at least one --ledger")
        _report_wealth_curve(args, outdir)
    elif args.mode == "factor_sweep":
        _report_factor_sweep(args, outdir, cfg)
    else:
        _report_score_heatmap(args, outdir, cfg)
    inputs = list(args.ledger or []) + [p for p in (args.snapshot, args.library) if p]
    write_manifest(outdir, cfg, inputs)
    print(f"wrote {args.mode} data under {outdir}")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evofactor",
        description="Evolutionary factor search: DSL factors, sparse top-m backtests, "
        "and a generate/validate/prune loop.",
        epilog=config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a price CSV and write a snapshot")
    p.add_argument("input", help="CSV of prices or return relatives")
    p.add_argument("-o", "--output", required=True, help="snapshot path to write")
    p.add_argument("--layout", choices=("wide", "long"), default="wide")
    p.add_argument("--values", choices=("prices", "relatives"), default="prices")
    p.set_defaults(func=cmd_ingest)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (see key list in --help)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser(
        "backtest",
        parents=[common],
        help="static-pool backtest of a factor library",
        epilog=config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--snapshot", help="price snapshot (overrides data key)")
    p.add_argument("--library", required=True, help="factor library JSON")
    p.add_argument("--output", help="run directory (overrides output_dir key)")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser(
        "evolve",
        parents=[common],
        help="full evolutionary search run",
        epilog=config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--snapshot", help="price snapshot (overrides data key)")
    p.add_argument("--output", help="run directory (overrides output_dir key)")
    p.add_argument("--resume-from", help="checkpoints.jsonl to resume after")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("aggregate", help="merge checkpoint streams from several runs")
    p.add_argument("checkpoints", nargs="+", help="checkpoints.jsonl files")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--max-records", type=int, default=0, help="cap on aligned records (0 = off)")
    p.add_argument("--ratio", type=float, default=1.0, help="fraction of aligned records kept")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser(
        "report",
        parents=[common],
        help="emit plot-ready CSV matrices",
        epilog=config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--mode", required=True, choices=("wealth_curve", "factor_sweep", "score_heatmap"))
    p.add_argument("--ledger", action="append", help="ledger CSV (repeatable)")
    p.add_argument("--snapshot", help="price snapshot (factor_sweep, score_heatmap)")
    p.add_argument("--library", help="factor library JSON (factor_sweep, score_heatmap)")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
