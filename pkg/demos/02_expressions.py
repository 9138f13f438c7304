"""Tour of the factor expression language.

Parses a few expressions, evaluates them over a shared window, and shows
the guard rails: canonical printing, per-step score normalization, and the
total-function policy that maps every domain error to 0.
"""
from __future__ import annotations

import argparse
import logging

import numpy as np

from evofactor import dsl
from evofactor.synthetic import random_walk_table
from evofactor.market_data import to_normalized_prices, to_relative_returns, window_matrices

EXAMPLES = (
    "sub(div(last(prices), last(lag(prices, 7))), 1.0)",   # 7-step momentum
    "last(ts_std(log(returns), 14))",                      # realized volatility
    "neg(last(ts_drawdown(prices, 21)))",                  # drawdown severity
    "div(last(prices), last(ts_ema(prices, 7)))",          # price vs trend
    "div(1.0, sub(prices, prices))",                       # division by zero -> 0
)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=3)
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)

    table = random_walk_table(n_assets=5, n_steps=40, seed=args.seed)
    rm = to_relative_returns(table)
    norm = to_normalized_prices(rm)
    prices, returns = window_matrices(norm, rm, t=35, lookback=21)

    for text in EXAMPLES:
        expr = dsl.parse(text)
        dsl.validate_expr(expr)
        canonical = dsl.print_expr(expr)
        scores = dsl.evaluate_cross_section(expr, prices, returns)
        ranks = dsl.normalize_scores(scores)
        print(canonical)
        print(f"  raw    {np.array2string(scores, precision=4)}")
        print(f"  ranked {np.array2string(ranks, precision=4)}")

    # Round trip: printing then parsing reproduces the same tree.
    tree = dsl.parse(EXAMPLES[0])
    assert dsl.parse(dsl.print_expr(tree)) == tree
    print("\nround trip: parse(print(expr)) == expr holds")
    print(f"node budget: depth <= {dsl.MAX_DEPTH}, nodes <= {dsl.MAX_NODES}, "
          f"windows in {dsl.ALLOWED_WINDOWS}")


if __name__ == "__main__":
    main()
