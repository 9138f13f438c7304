"""Evolutionary factor search: warm-up, periodic candidate generation,
benchmark gating, pool pruning, and the rolling sparse-portfolio backtest.

Timeline convention: step t forms scores from prices up to column t and
realizes the gross return landing on date t+1. Steps 0..warmup_steps earn
the equal-weight market average while factors accumulate history; live
trading starts at warmup_steps+1. Generation fires at live steps divisible
by search_interval.
"""

from __future__ import annotations

import json
import logging
from bisect import bisect_right
from dataclasses import dataclass
from statistics import median
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import dsl, metrics, portfolio
from .generator import (
    GenerationRequest,
    GenerationResult,
    TopFactor,
    build_prompt,
    scan_for_leakage,
    validate_candidate,
)
from .market_data import (
    NormalizedPrices,
    PriceTable,
    ReturnMatrix,
    to_normalized_prices,
    to_relative_returns,
    window_matrices,
)
from .portfolio import CostModel, LedgerRow, PortfolioWeights
from .seeds import (
    FactorRecord,
    json_to_record,
    parse_name,
    record_to_json,
    reset_created_step,
    seed_factors,
)

logger = logging.getLogger(__name__)

WEIGHTINGS = ("equal", "positive_score", "temperature")
QUALITY_METRICS = ("final_value", "mean_rankic")

Generator = Callable[[GenerationRequest], GenerationResult]


@dataclass(frozen=True)
class EvolutionConfig:
    """Loop parameters.

    lookback: window length fed to factor expressions (steps).
    warmup_steps: steps earning the 1/N return while history accumulates.
    search_interval: steps between generator calls; also the trailing
        window for prompt reports, factor selection, and the benchmark gate.
    m: portfolio cardinality. k_top: factors blended into the composite
    score. m_candidates: candidates requested per search step.
    stats_window: cap on the trailing window used for checkpoint stats.
    """

    lookback: int = 30
    warmup_steps: int = 60
    search_interval: int = 5
    m: int = 10
    k_top: int = 5
    m_candidates: int = 5
    cost_rate: float = 0.0
    weighting: str = "equal"
    tau: float = 1.0
    quality_metric: str = "final_value"
    max_pool_size: int = 50
    keep_top_n: int = 20
    t_drop: float = 0.0
    recall_n: int = 20
    stats_window: int = 120
    rng_seed: int = 0
    seed_windows: tuple[int, ...] = (3, 7, 14, 21)

    def __post_init__(self) -> None:
        if self.lookback < 2:
            raise ValueError("lookback must be at least 2")
        if self.warmup_steps < self.lookback:
            raise ValueError("warmup_steps must be >= lookback")
        if self.search_interval < 1:
            raise ValueError("search_interval must be >= 1")
        if self.m < 1 or self.k_top < 1 or self.m_candidates < 1:
            raise ValueError("m, k_top, m_candidates must be >= 1")
        if not 0.0 <= self.cost_rate < 1.0:
            raise ValueError("cost_rate must lie in [0, 1)")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.quality_metric not in QUALITY_METRICS:
            raise ValueError(f"quality_metric must be one of {QUALITY_METRICS}")
        if not 1 <= self.keep_top_n <= self.max_pool_size:
            raise ValueError("need max_pool_size >= keep_top_n >= 1")
        if self.recall_n < 1 or self.stats_window < 1:
            raise ValueError("recall_n and stats_window must be >= 1")
        for w in self.seed_windows:
            if w not in dsl.ALLOWED_WINDOWS:
                raise ValueError(f"seed window {w} not in {dsl.ALLOWED_WINDOWS}")


class PerfTracker:
    """Per-factor standalone evaluation series, appended step by step.

    Each entry holds the factor's own top-m equal-weight gross return, its
    RankIC against next-step returns, and recall@N. Stats are computed over
    trailing windows of entries up to a given step.
    """

    def __init__(self) -> None:
        self._steps: dict[str, list[int]] = {}
        self._gross: dict[str, list[float]] = {}
        self._rankic: dict[str, list[float]] = {}
        self._recall: dict[str, list[float]] = {}

    def add(self, name: str, step: int, gross: float, rankic: float, recall: float) -> None:
        steps = self._steps.setdefault(name, [])
        if steps and step <= steps[-1]:
            raise ValueError(f"tracker steps must increase for {name!r}")
        steps.append(step)
        self._gross.setdefault(name, []).append(float(gross))
        self._rankic.setdefault(name, []).append(float(rankic))
        self._recall.setdefault(name, []).append(float(recall))

    def names(self) -> list[str]:
        return sorted(self._steps)

    def count(self, name: str, upto: int | None = None) -> int:
        steps = self._steps.get(name, [])
        if upto is None:
            return len(steps)
        return bisect_right(steps, upto)

    def drop(self, name: str) -> None:
        for table in (self._steps, self._gross, self._rankic, self._recall):
            table.pop(name, None)

    def series(self, name: str) -> tuple[list[int], list[float], list[float], list[float]]:
        return (
            list(self._steps.get(name, [])),
            list(self._gross.get(name, [])),
            list(self._rankic.get(name, [])),
            list(self._recall.get(name, [])),
        )

    def _tail(self, name: str, window: int, upto: int) -> slice:
        steps = self._steps.get(name, [])
        hi = bisect_right(steps, upto)
        return slice(max(0, hi - window), hi)

    def performance_stats(self, name: str, window: int, upto: int) -> dict[str, float]:
        sl = self._tail(name, window, upto)
        g = np.asarray(self._gross.get(name, [])[sl], dtype=np.float64)
        net = g - 1.0
        mean, std = metrics.mean_std(net)
        path = 100.0 * np.concatenate([[1.0], np.cumprod(g)])
        return {
            "mean_return": mean,
            "std_return": std,
            "sharpe_ratio": metrics.sharpe_ratio(net).value,
            "max_drawdown": -metrics.max_drawdown(path),
            "final_value": float(100.0 * np.prod(g)),
        }

    def quality_stats(self, name: str, window: int, upto: int, recall_n: int) -> dict[str, float]:
        sl = self._tail(name, window, upto)
        mean_ic, std_ic = metrics.mean_std(self._rankic.get(name, [])[sl])
        mean_rc, std_rc = metrics.mean_std(self._recall.get(name, [])[sl])
        cols = metrics.quality_columns(recall_n)
        return {cols[0]: mean_ic, cols[1]: std_ic, cols[2]: mean_rc, cols[3]: std_rc}

    def stat(self, name: str, metric: str, window: int, upto: int, recall_n: int = 20) -> float:
        if metric == "final_value":
            return self.performance_stats(name, window, upto)["final_value"]
        if metric == "mean_rankic":
            return self.quality_stats(name, window, upto, recall_n)["mean_rankic"]
        raise ValueError(f"unknown quality metric {metric!r}")


def filter_factor_versions(values: Mapping[str, float]) -> list[str]:
    """Per base factor, keep the latest version and the best-valued one.

    Ties (shared top version across windows, or equal values) break toward
    the lexicographically smallest name. Returns sorted kept names.
    """
    groups: dict[str, list[str]] = {}
    for name in values:
        groups.setdefault(parse_name(name)[0], []).append(name)
    kept: set[str] = set()
    for names in groups.values():
        kept.add(min(names, key=lambda n: (-parse_name(n)[2], n)))
        kept.add(min(names, key=lambda n: (-values[n], n)))
    return sorted(kept)


def _report_window(t: int, cfg: EvolutionConfig) -> int:
    return max(1, min(t - cfg.lookback, cfg.stats_window))


def _update_tracker(
    tracker: PerfTracker,
    pool: Mapping[str, FactorRecord],
    norm: NormalizedPrices,
    rm: ReturnMatrix,
    t: int,
    cfg: EvolutionConfig,
) -> None:
    prices_win, returns_win = window_matrices(norm, rm, t, cfg.lookback)
    realized = rm.values[:, t]
    for name in sorted(pool):
        scores = dsl.evaluate_cross_section(pool[name].expr, prices_win, returns_win)
        sel = portfolio.select_top_m(scores, cfg.m)
        gross = float(realized[sel].mean())
        ic = metrics.spearman_rank_corr(scores, realized).value
        recall, _ = metrics.recall_precision_at_n(scores, realized, cfg.recall_n)
        tracker.add(name, t, gross, ic, recall)


def warmup(
    table: PriceTable, pool: Sequence[FactorRecord], cfg: EvolutionConfig
) -> PerfTracker:
    """Populate standalone factor series for steps lookback..warmup_steps."""
    rm = to_relative_returns(table)
    norm = to_normalized_prices(rm)
    n_steps = rm.values.shape[1]
    if n_steps < cfg.warmup_steps + 2:
        raise ValueError("dataset shorter than warmup_steps + 2 return steps")
    if not pool:
        raise ValueError("empty factor pool")
    pool_map = {rec.name: rec for rec in pool}
    tracker = PerfTracker()
    for t in range(cfg.lookback, cfg.warmup_steps + 1):
        _update_tracker(tracker, pool_map, norm, rm, t, cfg)
    return tracker


def clean_factor_pool(
    pool: Mapping[str, FactorRecord],
    tracker: PerfTracker,
    cfg: EvolutionConfig,
    t: int,
) -> dict[str, FactorRecord]:
    """Prune an oversized pool: keep seeds (always), the keep_top_n best by
    quality after version filtering, then fill to max_pool_size by recency.
    Tracker entries of removed factors are dropped in place."""
    if len(pool) <= cfg.max_pool_size:
        return dict(pool)
    window = _report_window(t, cfg)
    values = {
        name: tracker.stat(name, cfg.quality_metric, window, t - 1, cfg.recall_n)
        for name in pool
    }
    ranked = sorted(filter_factor_versions(values), key=lambda n: (-values[n], n))
    survivors = {name for name in pool if pool[name].origin == "seed"}
    survivors.update(ranked[: cfg.keep_top_n])
    if len(survivors) > cfg.max_pool_size:
        # seeds are immortal; shed the weakest non-seed picks to fit
        for name in reversed([n for n in ranked[: cfg.keep_top_n] if pool[n].origin != "seed"]):
            if len(survivors) <= cfg.max_pool_size:
                break
            survivors.discard(name)
    by_recency = sorted(
        (n for n in pool if n not in survivors),
        key=lambda n: (-pool[n].created_step, n),
    )
    for name in by_recency:
        if len(survivors) >= cfg.max_pool_size:
            break
        survivors.add(name)
    for name in set(pool) - survivors:
        tracker.drop(name)
    return {name: pool[name] for name in sorted(survivors)}


def benchmark_gate(
    candidate: FactorRecord,
    tracker: PerfTracker,
    norm: NormalizedPrices,
    rm: ReturnMatrix,
    cfg: EvolutionConfig,
    t: int,
    pool: Mapping[str, FactorRecord],
) -> tuple[bool, str]:
    """Keep/drop a fresh candidate by a trailing-window standalone backtest.

    Dropped only when both legs fail: final value below (1 + t_drop) times
    the 1/N baseline over the same window AND mean RankIC below the median
    of incumbent pool factors. Costs are ignored here (comparison is c=0).
    """
    start = max(cfg.lookback, t - cfg.search_interval + 1)
    grosses: list[float] = []
    ics: list[float] = []
    base: list[float] = []
    for u in range(start, t + 1):
        prices_win, returns_win = window_matrices(norm, rm, u, cfg.lookback)
        scores = dsl.evaluate_cross_section(candidate.expr, prices_win, returns_win)
        realized = rm.values[:, u]
        sel = portfolio.select_top_m(scores, cfg.m)
        grosses.append(float(realized[sel].mean()))
        ics.append(metrics.spearman_rank_corr(scores, realized).value)
        base.append(float(realized.mean()))
    fv = float(100.0 * np.prod(grosses))
    base_fv = float(100.0 * np.prod(base))
    mean_ic = float(np.mean(ics))
    incumbents = [
        name
        for name in pool
        if name != candidate.name
        and pool[name].created_step < t
        and tracker.count(name, t) > 0
    ]
    if not incumbents:
        return True, "no incumbents to compare against"
    pool_median = median(
        tracker.stat(name, "mean_rankic", cfg.search_interval, t, cfg.recall_n)
        for name in incumbents
    )
    if fv < (1.0 + cfg.t_drop) * base_fv and mean_ic < pool_median:
        return False, (
            f"final_value {fv:.4f} < gated baseline {(1.0 + cfg.t_drop) * base_fv:.4f}"
            f" and mean rankic {mean_ic:.4f} < pool median {pool_median:.4f}"
        )
    return True, "cleared benchmark"


# --------------------------------------------------------------- checkpoints


@dataclass(frozen=True)
class SearchRecord:
    """Self-contained checkpoint written after each search step: the pool
    snapshot with expressions, trailing-window stat maps, and the scalars
    needed to resume the backtest mid-run."""

    step: int
    pool: tuple[FactorRecord, ...]
    performance: dict[str, dict[str, float]]
    quality: dict[str, dict[str, float]]
    state: dict

    def pool_map(self) -> dict[str, FactorRecord]:
        return {rec.name: rec for rec in self.pool}


def search_record_to_json(record: SearchRecord) -> dict:
    return {
        "step": record.step,
        "pool": [record_to_json(rec) for rec in record.pool],
        "performance": record.performance,
        "quality": record.quality,
        "state": record.state,
    }


def json_to_search_record(doc: dict) -> SearchRecord:
    for key in ("step", "pool", "performance", "quality", "state"):
        if key not in doc:
            raise ValueError(f"checkpoint record missing key {key!r}")
    return SearchRecord(
        step=int(doc["step"]),
        pool=tuple(json_to_record(item) for item in doc["pool"]),
        performance={k: dict(v) for k, v in doc["performance"].items()},
        quality={k: dict(v) for k, v in doc["quality"].items()},
        state=dict(doc["state"]),
    )


def save_checkpoints(records: Sequence[SearchRecord], path: str) -> None:
    with open(path, "w") as handle:
        for record in records:
            handle.write(json.dumps(search_record_to_json(record), sort_keys=True) + "\n")


def load_checkpoints(path: str) -> list[SearchRecord]:
    records = []
    with open(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(json_to_search_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad checkpoint record: {exc}") from exc
    return records


def _make_search_record(
    t: int,
    pool: Mapping[str, FactorRecord],
    tracker: PerfTracker,
    cfg: EvolutionConfig,
    value: float,
    baseline: float,
    prev: PortfolioWeights | None,
    phase: str,
) -> SearchRecord:
    window = _report_window(t, cfg)
    names = sorted(pool)
    return SearchRecord(
        step=t,
        pool=tuple(pool[name] for name in names),
        performance={n: tracker.performance_stats(n, window, t) for n in names},
        quality={n: tracker.quality_stats(n, window, t, cfg.recall_n) for n in names},
        state={
            "portfolio_value": value,
            "baseline_value": baseline,
            "prev_weights": None
            if prev is None
            else [[int(i), float(w)] for i, w in sorted(prev.weights.items())],
            "prev_t": -1 if prev is None else prev.t,
            "phase": phase,
        },
    )


# ----------------------------------------------------------------- main loop


@dataclass(frozen=True)
class EvolutionResult:
    pool: tuple[FactorRecord, ...]
    ledger: tuple[LedgerRow, ...]
    records: tuple[SearchRecord, ...]
    tracker: PerfTracker


def _build_request(
    pool: Mapping[str, FactorRecord], tracker: PerfTracker, cfg: EvolutionConfig, t: int
) -> GenerationRequest:
    upto = t - 1
    window = cfg.search_interval
    evaluable = [n for n in sorted(pool) if tracker.count(n, upto) > 0]
    values = {
        n: tracker.stat(n, cfg.quality_metric, window, upto, cfg.recall_n)
        for n in evaluable
    }
    ranked = sorted(filter_factor_versions(values), key=lambda n: (-values[n], n))
    tops = tuple(
        TopFactor(
            record=pool[n],
            performance=tracker.performance_stats(n, window, upto),
            quality=tracker.quality_stats(n, window, upto, cfg.recall_n),
        )
        for n in ranked[: cfg.k_top]
    )
    library = tuple(pool[n] for n in sorted(pool) if pool[n].origin == "seed")
    return GenerationRequest(
        step=t,
        top_factors=tops,
        library_factors=library,
        m_candidates=cfg.m_candidates,
        pool_records=tuple(pool[n] for n in sorted(pool)),
        rng_seed=cfg.rng_seed,
        recall_n=cfg.recall_n,
    )


def _weights_for(
    selection: np.ndarray, composite: np.ndarray, cfg: EvolutionConfig, t: int
) -> PortfolioWeights:
    if cfg.weighting == "equal":
        return portfolio.equal_weights(selection, t)
    if cfg.weighting == "positive_score":
        return portfolio.positive_score_weights(selection, composite, t)
    return portfolio.temperature_weights(selection, composite, cfg.tau, t)


def composite_scores(
    pool: Mapping[str, FactorRecord],
    tracker: PerfTracker,
    norm: NormalizedPrices,
    rm: ReturnMatrix,
    cfg: EvolutionConfig,
    t: int,
    k_top: int | None = None,
) -> tuple[np.ndarray, list[str]]:
    """Mean of the top-k factors' normalized score rows at step t.

    Factors are version-filtered, then ranked by quality_metric over the
    trailing search_interval entries. Returns (composite row, used names).
    """
    names = [n for n in sorted(pool) if tracker.count(n, t) > 0]
    if not names:
        raise RuntimeError("no factor has tracker history at this step")
    values = {
        n: tracker.stat(n, cfg.quality_metric, cfg.search_interval, t, cfg.recall_n)
        for n in names
    }
    ranked = sorted(filter_factor_versions(values), key=lambda n: (-values[n], n))
    used = ranked[: cfg.k_top if k_top is None else k_top]
    prices_win, returns_win = window_matrices(norm, rm, t, cfg.lookback)
    rows = [
        dsl.normalize_scores(dsl.evaluate_cross_section(pool[n].expr, prices_win, returns_win))
        for n in used
    ]
    return portfolio.aggregate_scores(rows), used


def run_evolution(
    table: PriceTable,
    cfg: EvolutionConfig,
    gen: Generator | None = None,
    pool: Iterable[FactorRecord] | None = None,
    resume_from: SearchRecord | None = None,
) -> EvolutionResult:
    """Full search-and-backtest loop over the table's steps.

    gen=None disables generation entirely (static-pool backtest). Generator
    failures are logged and skipped; scoring errors at a live step fall back
    to the market-average return for that step and liquidate holdings.
    resume_from restarts after the given checkpoint and returns only the
    remaining ledger rows; the tracker is rebuilt by deterministic replay.
    """
    rm = to_relative_returns(table)
    norm = to_normalized_prices(rm)
    n_steps = rm.values.shape[1]
    if n_steps < cfg.warmup_steps + 2:
        raise ValueError("dataset shorter than warmup_steps + 2 return steps")
    records_in = seed_factors(cfg.seed_windows) if pool is None else list(pool)
    if not records_in:
        raise ValueError("empty factor pool")
    pool_map: dict[str, FactorRecord] = {}
    for rec in records_in:
        if rec.name in pool_map:
            raise ValueError(f"duplicate factor name {rec.name!r}")
        pool_map[rec.name] = rec

    tracker = PerfTracker()
    value = 100.0
    baseline = 100.0
    prev: PortfolioWeights | None = None
    start_t = 0
    if resume_from is not None:
        pool_map = resume_from.pool_map()
        state = resume_from.state
        value = float(state["portfolio_value"])
        baseline = float(state["baseline_value"])
        raw_prev = state.get("prev_weights")
        prev = (
            None
            if raw_prev is None
            else PortfolioWeights(
                {int(i): float(w) for i, w in raw_prev}, int(state.get("prev_t", -1))
            )
        )
        start_t = resume_from.step + 1
        for u in range(cfg.lookback, resume_from.step + 1):
            subset = {n: r for n, r in pool_map.items() if r.created_step <= u}
            if subset:
                _update_tracker(tracker, subset, norm, rm, u, cfg)

    cost_model = CostModel(cfg.cost_rate)
    forbidden = [tok for tok in (*table.asset_ids, *table.dates) if len(tok) >= 3]
    rows: list[LedgerRow] = []
    checkpoints: list[SearchRecord] = []

    for t in range(start_t, n_steps):
        realized = rm.values[:, t]
        rbar = portfolio.fallback_market_return(realized)
        searching = (
            gen is not None and t > cfg.warmup_steps and t % cfg.search_interval == 0
        )
        new_names: list[str] = []
        if searching:
            pool_map = clean_factor_pool(pool_map, tracker, cfg, t)
            req = _build_request(pool_map, tracker, cfg, t)
            prompt = build_prompt(req)
            leaks = scan_for_leakage(prompt["system"] + "\n" + prompt["user"], forbidden)
            if leaks:
                raise RuntimeError(f"prompt leaks dataset tokens: {leaks[:5]}")
            try:
                result = gen(req)
            except Exception as exc:  # noqa: BLE001 - generator failure is non-fatal
                logger.warning("generator failed at step %d: %s", t, exc)
                result = GenerationResult((), 0, ({"error": str(exc)},), False)
            for cand in result.candidates[: cfg.m_candidates]:
                ok, reason = validate_candidate(cand, pool_map)
                if not ok:
                    logger.info("step %d: rejected %s (%s)", t, cand.name, reason)
                    continue
                cand = reset_created_step(cand, t)
                pool_map[cand.name] = cand
                new_names.append(cand.name)
        if t >= cfg.lookback:
            _update_tracker(tracker, pool_map, norm, rm, t, cfg)
        for name in new_names:
            keep, why = benchmark_gate(pool_map[name], tracker, norm, rm, cfg, t, pool_map)
            if not keep:
                logger.info("step %d: gated out %s (%s)", t, name, why)
                del pool_map[name]
                tracker.drop(name)

        if t > cfg.warmup_steps:
            try:
                composite, _ = composite_scores(pool_map, tracker, norm, rm, cfg, t)
                sel = portfolio.select_top_m(composite, cfg.m)
                weights = _weights_for(sel, composite, cfg, t)
                r_t, turn, fee = portfolio.step_return(weights, realized, prev, cost_model)
                prev = portfolio.drift_weights(weights, realized)
                sel_ids = tuple(table.asset_ids[int(i)] for i in sel)
                sel_ws = tuple(float(weights.weights[int(i)]) for i in sel)
                phase = "live"
            except Exception as exc:  # noqa: BLE001 - scoring errors fall back
                logger.warning("step %d: scoring failed (%s); market fallback", t, exc)
                r_t, turn, fee = rbar, 0.0, 0.0
                sel_ids, sel_ws = (), ()
                prev = None
                phase = "fallback"
        else:
            r_t, turn, fee = rbar, 0.0, 0.0
            sel_ids, sel_ws = (), ()
            phase = "warmup"
        value *= r_t
        baseline *= rbar
        rows.append(
            LedgerRow(
                date=rm.dates[t + 1],
                phase=phase,
                portfolio_value=value,
                baseline_value=baseline,
                step_return=r_t,
                baseline_return=rbar,
                turnover=turn,
                cost=fee,
                selected_assets=sel_ids,
                weights=sel_ws,
            )
        )
        if searching:
            checkpoints.append(
                _make_search_record(t, pool_map, tracker, cfg, value, baseline, prev, phase)
            )

    final_pool = tuple(pool_map[name] for name in sorted(pool_map))
    return EvolutionResult(final_pool, tuple(rows), tuple(checkpoints), tracker)
