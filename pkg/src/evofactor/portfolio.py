"""Sparse top-m portfolio construction, transaction costs, and the ledger.

The weight vector always satisfies w >= 0, sum(w) = 1 and at most m nonzero
entries. Costs are charged per unit of one-way turnover, computed as half
the L1 distance between today's weights and yesterday's weights after they
have drifted with realized returns; the first allocation from cash pays the
half buy-in charge.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

LEDGER_COLUMNS = (
    "date",
    "phase",
    "portfolio_value",
    "baseline_value",
    "step_return",
    "baseline_return",
    "turnover",
    "cost",
    "selected_assets",
    "weights",
)


@dataclass(frozen=True)
class PortfolioWeights:
    """Sparse long-only weights at one step: asset index -> weight."""

    weights: dict[int, float]
    t: int = -1

    def __post_init__(self) -> None:
        if not self.weights:
            raise ValueError("empty weight map")
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {total}, not 1")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("weights must be nonnegative")

    def as_vector(self, n: int) -> np.ndarray:
        vec = np.zeros(n)
        for i, w in self.weights.items():
            vec[i] = w
        return vec

    @property
    def cardinality(self) -> int:
        return sum(1 for w in self.weights.values() if w > 0)


@dataclass(frozen=True)
class CostModel:
    """Proportional transaction cost per unit of one-way turnover."""

    rate_c: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate_c < 1.0:
            raise ValueError("cost rate must be in [0, 1)")

    def charge(self, turnover_value: float) -> float:
        return self.rate_c * turnover_value


def aggregate_scores(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Composite score: arithmetic mean of the k normalized factor rows."""
    if not rows:
        raise ValueError("need at least one factor row")
    matrix = np.asarray(rows, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError("rows must share one asset dimension")
    return matrix.mean(axis=0)


def select_top_m(scores: Sequence[float] | np.ndarray, m: int) -> np.ndarray:
    """Indices of the m best scores; ties keep the earlier asset."""
    scores = np.asarray(scores, dtype=np.float64)
    if m < 1:
        raise ValueError("m must be positive")
    m = min(m, scores.size)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:m])


def equal_weights(selection: Sequence[int] | np.ndarray, t: int = -1) -> PortfolioWeights:
    selection = list(selection)
    if not selection:
        raise ValueError("empty selection")
    w = 1.0 / len(selection)
    return PortfolioWeights({int(i): w for i in selection}, t)


def positive_score_weights(
    selection: Sequence[int] | np.ndarray,
    scores: Sequence[float] | np.ndarray,
    t: int = -1,
) -> PortfolioWeights:
    """Weights proportional to max(score, 0); all-nonpositive falls back to
    equal weights."""
    selection = [int(i) for i in selection]
    if not selection:
        raise ValueError("empty selection")
    scores = np.asarray(scores, dtype=np.float64)
    clipped = np.maximum(scores[selection], 0.0)
    total = clipped.sum()
    if total <= 0.0:
        return equal_weights(selection, t)
    return PortfolioWeights(
        {i: float(c / total) for i, c in zip(selection, clipped)}, t
    )


def temperature_weights(
    selection: Sequence[int] | np.ndarray,
    scores: Sequence[float] | np.ndarray,
    tau: float,
    t: int = -1,
) -> PortfolioWeights:
    """Softmax over the selected scores; tau controls concentration."""
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    selection = [int(i) for i in selection]
    if not selection:
        raise ValueError("empty selection")
    scores = np.asarray(scores, dtype=np.float64)
    logits = scores[selection] / tau
    logits -= logits.max()  # overflow-safe
    expw = np.exp(logits)
    expw /= expw.sum()
    return PortfolioWeights({i: float(w) for i, w in zip(selection, expw)}, t)


def drift_weights(
    weights: PortfolioWeights, realized_gross: Sequence[float] | np.ndarray
) -> PortfolioWeights:
    """Let held weights ride the realized returns, then renormalize."""
    realized = np.asarray(realized_gross, dtype=np.float64)
    grown = {i: w * float(realized[i]) for i, w in weights.weights.items()}
    total = sum(grown.values())
    if total <= 0.0:
        raise ValueError("non-positive portfolio value after drift")
    return PortfolioWeights({i: w / total for i, w in grown.items()}, weights.t)


def turnover(current: PortfolioWeights, previous: PortfolioWeights | None) -> float:
    """Half-L1 distance to the (already drifted) previous weights.

    From cash (previous is None) the distance to the zero vector gives the
    half buy-in turnover of 0.5.
    """
    if previous is None:
        return 0.5 * sum(abs(w) for w in current.weights.values())
    keys = set(current.weights) | set(previous.weights)
    return 0.5 * sum(
        abs(current.weights.get(i, 0.0) - previous.weights.get(i, 0.0)) for i in keys
    )


def step_return(
    weights: PortfolioWeights,
    gross_returns_next: Sequence[float] | np.ndarray,
    prev_weights: PortfolioWeights | None,
    cost_model: CostModel,
) -> tuple[float, float, float]:
    """One backtest step: (net gross return, turnover, cost charged).

    prev_weights must already be drifted by the intra-period returns (see
    drift_weights); pass None for the first allocation from cash.
    """
    gross = np.asarray(gross_returns_next, dtype=np.float64)
    raw = sum(w * float(gross[i]) for i, w in weights.weights.items())
    turn = turnover(weights, prev_weights)
    cost = cost_model.charge(turn)
    return raw - cost, turn, cost


def fallback_market_return(gross_returns: Sequence[float] | np.ndarray) -> float:
    """Equal-weight market proxy: plain mean of the gross returns."""
    gross = np.asarray(gross_returns, dtype=np.float64)
    if gross.size == 0:
        raise ValueError("empty return vector")
    return float(gross.mean())


# ------------------------------------------------------------------- ledger


@dataclass(frozen=True)
class LedgerRow:
    """One backtest step. Warm-up and fallback steps hold no sparse
    portfolio: they earn the market average and carry empty selections."""

    date: str
    phase: str  # warmup | live | fallback
    portfolio_value: float
    baseline_value: float
    step_return: float
    baseline_return: float
    turnover: float
    cost: float
    selected_assets: tuple[str, ...]
    weights: tuple[float, ...]

    def weight_map(self) -> dict[str, float]:
        return dict(zip(self.selected_assets, self.weights))


def write_ledger(rows: Sequence[LedgerRow], path: str) -> None:
    """CSV export; floats keep full repr precision for byte-stable replays."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(LEDGER_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.date,
                    row.phase,
                    repr(row.portfolio_value),
                    repr(row.baseline_value),
                    repr(row.step_return),
                    repr(row.baseline_return),
                    repr(row.turnover),
                    repr(row.cost),
                    json.dumps(list(row.selected_assets)),
                    json.dumps([repr(w) for w in row.weights]),
                ]
            )


def ledger_to_json(rows: Sequence[LedgerRow]) -> list[dict]:
    return [
        {
            "date": row.date,
            "phase": row.phase,
            "portfolio_value": row.portfolio_value,
            "baseline_value": row.baseline_value,
            "step_return": row.step_return,
            "baseline_return": row.baseline_return,
            "turnover": row.turnover,
            "cost": row.cost,
            "weights": row.weight_map(),
        }
        for row in rows
    ]


def write_ledger_json(rows: Sequence[LedgerRow], path: str) -> None:
    with open(path, "w") as handle:
        json.dump(ledger_to_json(rows), handle, sort_keys=True, indent=2)
        handle.write("\n")


def read_ledger(path: str) -> list[LedgerRow]:
    rows: list[LedgerRow] = []
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != list(LEDGER_COLUMNS):
            raise ValueError(f"{path}: unexpected ledger columns {reader.fieldnames}")
        for rec in reader:
            rows.append(
                LedgerRow(
                    date=rec["date"],
                    phase=rec["phase"],
                    portfolio_value=float(rec["portfolio_value"]),
                    baseline_value=float(rec["baseline_value"]),
                    step_return=float(rec["step_return"]),
                    baseline_return=float(rec["baseline_return"]),
                    turnover=float(rec["turnover"]),
                    cost=float(rec["cost"]),
                    selected_assets=tuple(json.loads(rec["selected_assets"])),
                    weights=tuple(float(w) for w in json.loads(rec["weights"])),
                )
            )
    return rows
