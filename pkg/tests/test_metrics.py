"""Metric tests against brute-force oracles and scipy cross-checks."""
from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest
from scipy import stats

import oracles
from evofactor.metrics import (
    PERFORMANCE_COLUMNS,
    WealthPath,
    cumulative_wealth,
    max_drawdown,
    mean_std,
    quality_columns,
    rank_icir,
    rankic_series,
    recall_precision_at_n,
    report_columns,
    sharpe_ratio,
    spearman_rank_corr,
    top_n_indices,
    write_factor_report,
)

# ---------------------------------------------------------- wealth path


def test_wealth_path_from_returns() -> None:
    path = WealthPath.from_returns([1.1, 0.9, 1.05], initial=100.0)
    assert path.values == pytest.approx([100.0, 110.0, 99.0, 103.95])
    assert cumulative_wealth(path) == pytest.approx(3.95)
    with pytest.raises(ValueError):
        WealthPath(np.ones(3), np.ones(3))


def test_cumulative_wealth_is_final_minus_initial() -> None:
    path = WealthPath(np.array([2.0, 3.0, 2.5]), np.array([1.5, 2.5 / 3.0]))
    assert cumulative_wealth(path) == pytest.approx(0.5)


# ------------------------------------------------------------ mean/std


def test_mean_std_conventions() -> None:
    assert mean_std([]) == (0.0, 0.0)
    assert mean_std([4.0]) == (4.0, 0.0)
    mean, std = mean_std([1.0, 2.0, 3.0, 4.0])
    assert mean == pytest.approx(2.5)
    assert std == pytest.approx(oracles.sstd([1.0, 2.0, 3.0, 4.0]), rel=1e-12)


# ------------------------------------------------------------- sharpe


def test_sharpe_ratio_matches_oracle() -> None:
    rng = np.random.default_rng(10)
    for _ in range(300):
        rets = rng.normal(0.001, 0.02, size=int(rng.integers(2, 40)))
        got = sharpe_ratio(rets)
        want = oracles.sharpe(list(rets))
        if want is None:
            assert got.degenerate
        else:
            assert not got.degenerate
            assert got.value == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_sharpe_ratio_options() -> None:
    rets = [0.01, 0.03, -0.02, 0.02]
    raw = sharpe_ratio(rets).value
    assert sharpe_ratio(rets, periods_per_year=12).value == pytest.approx(raw * math.sqrt(12))
    assert sharpe_ratio(rets, periods_per_year=252).value == pytest.approx(raw * math.sqrt(252))
    shifted = sharpe_ratio(rets, risk_free=0.01).value
    assert shifted == pytest.approx(oracles.sharpe(rets, risk_free=0.01), rel=1e-12)
    flat = sharpe_ratio([0.01, 0.01, 0.01])
    assert flat.degenerate and flat.value == 0.0
    assert sharpe_ratio([0.05]).degenerate
    assert float(sharpe_ratio(rets)) == raw  # MetricValue coerces to float


# ------------------------------------------------------------ drawdown


def test_max_drawdown_matches_bruteforce() -> None:
    rng = np.random.default_rng(20)
    for _ in range(300):
        steps = int(rng.integers(2, 60))
        values = np.cumprod(1.0 + rng.normal(0, 0.05, size=steps))
        got = max_drawdown(values)
        assert got == pytest.approx(oracles.mdd_bruteforce(values), rel=1e-12, abs=1e-12)
        assert 0.0 <= got < 1.0


def test_max_drawdown_edge_cases() -> None:
    assert max_drawdown([1.0, 1.1, 1.2, 1.3]) == 0.0  # monotone climb
    assert max_drawdown([2.0, 1.0]) == pytest.approx(0.5)
    assert max_drawdown([1.0, 2.0, 1.0, 4.0, 1.0]) == pytest.approx(0.75)
    # Non-positive prefix is ignored until a positive peak exists.
    mixed = [-1.0, -2.0, 3.0, 1.5]
    assert max_drawdown(mixed) == pytest.approx(oracles.mdd_bruteforce(mixed))
    path = WealthPath.from_returns([0.5, 2.0, 0.25])
    assert max_drawdown(path) == pytest.approx(0.75)


# ------------------------------------------------------------- spearman


def test_spearman_matches_scipy_and_oracle() -> None:
    rng = np.random.default_rng(30)
    for trial in range(300):
        n = int(rng.integers(3, 30))
        if trial % 2 == 0:
            x = rng.normal(size=n)
            y = rng.normal(size=n)
        else:  # heavy ties
            x = rng.integers(0, 4, size=n).astype(float)
            y = rng.integers(0, 4, size=n).astype(float)
        want = oracles.spearman(x, y)
        got = spearman_rank_corr(x, y)
        if want is None:
            assert got.degenerate and got.value == 0.0
            continue
        assert got.value == pytest.approx(want, rel=1e-12, abs=1e-12)
        scipy_rho = stats.spearmanr(x, y).statistic
        assert got.value == pytest.approx(scipy_rho, rel=1e-9, abs=1e-9)


def test_spearman_edges() -> None:
    assert spearman_rank_corr([1.0, 2.0, 3.0], [10.0, 20.0, 30.0]).value == pytest.approx(1.0)
    assert spearman_rank_corr([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]).value == pytest.approx(-1.0)
    assert spearman_rank_corr([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]).degenerate
    assert spearman_rank_corr([2.0], [3.0]).degenerate
    with pytest.raises(ValueError):
        spearman_rank_corr([1.0, 2.0], [1.0, 2.0, 3.0])


# --------------------------------------------------------------- rankic


def test_rankic_series_and_icir() -> None:
    rng = np.random.default_rng(40)
    scores = [rng.normal(size=8) for _ in range(20)]
    rets = [rng.normal(size=8) for _ in range(20)]
    series, skipped = rankic_series(scores, rets)
    assert skipped == []
    assert len(series) == 20
    for k in range(20):
        assert series[k] == pytest.approx(oracles.spearman(scores[k], rets[k]), rel=1e-12)
    got = rank_icir(series)
    assert got.value == pytest.approx(oracles.rank_icir(list(series)), rel=1e-12)

    # Rows with fewer than two assets are skipped and reported.
    series2, skipped2 = rankic_series([np.array([1.0]), scores[0]], [np.array([2.0]), rets[0]])
    assert skipped2 == [0] and len(series2) == 1

    with pytest.raises(ValueError):
        rankic_series(scores, rets[:-1])
    assert rank_icir([0.3]).degenerate
    assert rank_icir([0.3, 0.3, 0.3]).degenerate


# ------------------------------------------------------------ selection


def test_top_n_indices_tie_stability() -> None:
    values = np.array([1.0, 3.0, 3.0, 2.0, 3.0])
    assert top_n_indices(values, 3).tolist() == [1, 2, 4]
    assert top_n_indices(values, 1).tolist() == [1]
    rng = np.random.default_rng(50)
    for _ in range(100):
        vals = rng.integers(0, 5, size=12).astype(float)
        n = int(rng.integers(1, 13))
        assert top_n_indices(vals, n).tolist() == oracles.top_n(vals, n)


def test_recall_precision_at_n() -> None:
    scores = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
    realized = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    recall, precision = recall_precision_at_n(scores, realized, 2)
    assert recall == 0.0 and precision == 0.0
    recall, precision = recall_precision_at_n(scores, scores, 3)
    assert recall == 1.0 and precision == 1.0
    rng = np.random.default_rng(60)
    for _ in range(200):
        s = rng.normal(size=15)
        r = rng.normal(size=15)
        n = int(rng.integers(1, 16))
        recall, precision = recall_precision_at_n(s, r, n)
        assert recall == precision == pytest.approx(oracles.recall_at_n(s, r, n))
    with pytest.raises(ValueError):
        recall_precision_at_n(scores, realized, 0)
    with pytest.raises(ValueError):
        recall_precision_at_n(scores, realized, 6)
    with pytest.raises(ValueError):
        recall_precision_at_n(scores, realized[:-1], 2)


# -------------------------------------------------------------- reports


def test_report_columns() -> None:
    assert report_columns(20) == ("factor",) + PERFORMANCE_COLUMNS + quality_columns(20)
    assert quality_columns(5) == ("mean_rankic", "std_rankic", "mean_recall@5", "std_recall@5")


def test_write_factor_report_round_trip(tmp_path) -> None:
    rows = [
        {
            "factor": "momentum_7",
            "mean_return": 0.0123456789012345,
            "std_return": 0.05,
            "sharpe_ratio": 0.2469,
            "max_drawdown": -0.3,
            "final_value": 181.25,
            "mean_rankic": 0.031,
            "std_rankic": 0.2,
            "mean_recall@20": 0.55,
            "std_recall@20": 0.1,
        },
        {"factor": "rsi_14"},  # missing metrics render as empty cells
    ]
    csv_path = tmp_path / "report.csv"
    json_path = tmp_path / "report.json"
    write_factor_report(rows, str(csv_path), str(json_path), recall_n=20)

    with open(csv_path, newline="") as handle:
        parsed = list(csv.DictReader(handle))
    assert parsed[0]["factor"] == "momentum_7"
    # repr round-trip: the CSV cell reparses to the exact float
    assert float(parsed[0]["mean_return"]) == rows[0]["mean_return"]
    assert parsed[1]["mean_return"] == ""

    doc = json.loads(json_path.read_text())
    assert doc[0]["mean_return"] == rows[0]["mean_return"]
    assert list(doc[0]) == sorted(report_columns(20))
    assert doc[1]["final_value"] == ""
