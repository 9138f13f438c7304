"""Factor expression trees: grammar, parser, printer and evaluator.

Expressions are small prefix-notation trees over two features (`prices`,
`returns`, each a trailing window of length T) plus float constants, e.g.

    sub(div(last(prices), ts_mean(prices, 7)), 1.0)

Every node evaluates to a full length-T vector (constants and `last`
broadcast), and the root is coerced to a scalar by taking the final element.
Time-series operators work on trailing windows of their child's vector; the
series is treated as flat before its first element (edge padding, and `lag`
clamps to the first element), so every position is defined without NaN.

All arithmetic is total: division by ~0 and log of a non-positive value
yield the neutral score 0.0, and any NaN/inf produced by overflow is
scrubbed to 0.0 at the node boundary. Window lengths are restricted to the
whitelist {3, 7, 14, 21}; trees are capped at depth 12 and 64 nodes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .market_data import Window

FEATURES = ("prices", "returns")
UNARY_OPS = ("abs", "log", "neg", "sign", "sqrt_abs")
BINARY_OPS = ("add", "sub", "mul", "div", "min2", "max2")
TS_OPS = (
    "ts_sum",
    "ts_mean",
    "ts_std",
    "ts_min",
    "ts_max",
    "ts_ema",
    "ts_delta",
    "ts_rank_pos",
    "ts_drawdown",
    "ts_argmax_recency",
    "lag",
)
ALLOWED_WINDOWS = (3, 7, 14, 21)
MAX_DEPTH = 12
MAX_NODES = 64

_DIV_EPS = 1e-12


class ExprError(ValueError):
    """Raised for structurally invalid expressions."""


class ParseError(ExprError):
    """Raised when expression text cannot be parsed."""


@dataclass(frozen=True)
class Feature:
    name: str  # "prices" or "returns"


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Unary:
    op: str
    child: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class TimeSeries:
    op: str
    child: "Expr"
    window: int


@dataclass(frozen=True)
class Last:
    child: "Expr"


Expr = Union[Feature, Const, Unary, Binary, TimeSeries, Last]


# ---------------------------------------------------------------- structure


def children(expr: Expr) -> tuple[Expr, ...]:
    if isinstance(expr, (Feature, Const)):
        return ()
    if isinstance(expr, Unary):
        return (expr.child,)
    if isinstance(expr, Binary):
        return (expr.left, expr.right)
    if isinstance(expr, TimeSeries):
        return (expr.child,)
    if isinstance(expr, Last):
        return (expr.child,)
    raise TypeError(f"not an expression node: {expr!r}")


def iter_nodes(expr: Expr) -> Iterator[Expr]:
    """Preorder traversal."""
    stack = [expr]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def count_nodes(expr: Expr) -> int:
    return sum(1 for _ in iter_nodes(expr))


def depth(expr: Expr) -> int:
    kids = children(expr)
    if not kids:
        return 1
    return 1 + max(depth(k) for k in kids)


def windows_in(expr: Expr) -> tuple[int, ...]:
    """Window lengths appearing in the tree, in preorder."""
    return tuple(n.window for n in iter_nodes(expr) if isinstance(n, TimeSeries))


def subtree_at(expr: Expr, pos: int) -> Expr:
    """Return the subtree at preorder position pos (root is 0)."""
    for i, node in enumerate(iter_nodes(expr)):
        if i == pos:
            return node
    raise IndexError(f"no node at position {pos}")


def replace_at(expr: Expr, pos: int, replacement: Expr) -> Expr:
    """Rebuild the tree with the node at preorder position pos swapped out."""

    def rebuild(node: Expr, counter: list[int]) -> Expr:
        index = counter[0]
        counter[0] += 1
        if index == pos:
            # Skip the replaced subtree's positions.
            counter[0] += count_nodes(node) - 1
            return replacement
        if isinstance(node, (Feature, Const)):
            return node
        if isinstance(node, Unary):
            return Unary(node.op, rebuild(node.child, counter))
        if isinstance(node, Binary):
            left = rebuild(node.left, counter)
            right = rebuild(node.right, counter)
            return Binary(node.op, left, right)
        if isinstance(node, TimeSeries):
            return TimeSeries(node.op, rebuild(node.child, counter), node.window)
        if isinstance(node, Last):
            return Last(rebuild(node.child, counter))
        raise TypeError(f"not an expression node: {node!r}")

    if pos < 0 or pos >= count_nodes(expr):
        raise IndexError(f"no node at position {pos}")
    return rebuild(expr, [0])


def validate_expr(expr: Expr) -> None:
    """Check structural invariants; raises ExprError on violation."""
    n = 0
    for node in iter_nodes(expr):
        n += 1
        if isinstance(node, Feature):
            if node.name not in FEATURES:
                raise ExprError(f"unknown feature {node.name!r}")
        elif isinstance(node, Const):
            if not np.isfinite(node.value):
                raise ExprError(f"non-finite constant {node.value!r}")
        elif isinstance(node, Unary):
            if node.op not in UNARY_OPS:
                raise ExprError(f"unknown unary op {node.op!r}")
        elif isinstance(node, Binary):
            if node.op not in BINARY_OPS:
                raise ExprError(f"unknown binary op {node.op!r}")
        elif isinstance(node, TimeSeries):
            if node.op not in TS_OPS:
                raise ExprError(f"unknown time-series op {node.op!r}")
            if node.window not in ALLOWED_WINDOWS:
                raise ExprError(
                    f"window {node.window} not in allowed set {ALLOWED_WINDOWS}"
                )
        elif not isinstance(node, Last):
            raise ExprError(f"unknown node type {type(node).__name__}")
    if n > MAX_NODES:
        raise ExprError(f"expression has {n} nodes, cap is {MAX_NODES}")
    d = depth(expr)
    if d > MAX_DEPTH:
        raise ExprError(f"expression depth {d} exceeds cap {MAX_DEPTH}")


# ------------------------------------------------------------ parse / print


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[a-z_][a-z0-9_]*)"
    r"|(?P<punct>[(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            if text[pos:].strip() == "":
                break
            raise ParseError(f"unexpected character {text[pos]!r} at position {pos}")
        if match.lastgroup is not None:
            tokens.append((match.lastgroup, match.group(match.lastgroup), match.start()))
        pos = match.end()
    return tokens


def parse(text: str) -> Expr:
    """Parse canonical expression text; validates structure on the way out."""
    tokens = _tokenize(text)
    if not tokens:
        raise ParseError("empty expression")
    index = [0]

    def peek() -> tuple[str, str, int] | None:
        return tokens[index[0]] if index[0] < len(tokens) else None

    def take(kind: str | None = None, value: str | None = None) -> tuple[str, str, int]:
        tok = peek()
        if tok is None:
            raise ParseError("unexpected end of expression")
        if kind is not None and tok[0] != kind:
            raise ParseError(f"expected {kind} at position {tok[2]}, got {tok[1]!r}")
        if value is not None and tok[1] != value:
            raise ParseError(f"expected {value!r} at position {tok[2]}, got {tok[1]!r}")
        index[0] += 1
        return tok

    def parse_window() -> int:
        tok = take("num")
        try:
            window = int(tok[1])
        except ValueError:
            raise ParseError(f"window must be an integer, got {tok[1]!r}") from None
        if window not in ALLOWED_WINDOWS:
            raise ParseError(
                f"window {window} not in allowed set {ALLOWED_WINDOWS}"
            )
        return window

    def parse_expr() -> Expr:
        tok = take()
        kind, value, at = tok
        if kind == "num":
            return Const(float(value))
        if kind != "name":
            raise ParseError(f"unexpected token {value!r} at position {at}")
        if value in FEATURES:
            return Feature(value)
        if value in UNARY_OPS:
            take("punct", "(")
            child = parse_expr()
            take("punct", ")")
            return Unary(value, child)
        if value in BINARY_OPS:
            take("punct", "(")
            left = parse_expr()
            take("punct", ",")
            right = parse_expr()
            take("punct", ")")
            return Binary(value, left, right)
        if value in TS_OPS:
            take("punct", "(")
            child = parse_expr()
            take("punct", ",")
            window = parse_window()
            take("punct", ")")
            return TimeSeries(value, child, window)
        if value == "last":
            take("punct", "(")
            child = parse_expr()
            take("punct", ")")
            return Last(child)
        raise ParseError(f"unknown operator {value!r} at position {at}")

    expr = parse_expr()
    if peek() is not None:
        tok = peek()
        raise ParseError(f"trailing input at position {tok[2]}: {tok[1]!r}")  # type: ignore[index]
    validate_expr(expr)
    return expr


def print_expr(expr: Expr) -> str:
    """Canonical text form; parse(print_expr(e)) reproduces e exactly."""
    if isinstance(expr, Feature):
        return expr.name
    if isinstance(expr, Const):
        return repr(float(expr.value))
    if isinstance(expr, Unary):
        return f"{expr.op}({print_expr(expr.child)})"
    if isinstance(expr, Binary):
        return f"{expr.op}({print_expr(expr.left)}, {print_expr(expr.right)})"
    if isinstance(expr, TimeSeries):
        return f"{expr.op}({print_expr(expr.child)}, {expr.window})"
    if isinstance(expr, Last):
        return f"last({print_expr(expr.child)})"
    raise TypeError(f"not an expression node: {expr!r}")


# ----------------------------------------------------------------- evaluate


def _scrub(values: np.ndarray) -> np.ndarray:
    # Neutral-zero policy: overflow and undefined arithmetic must not leak.
    if not np.all(np.isfinite(values)):
        values = np.nan_to_num(values, copy=False, nan=0.0, posinf=0.0, neginf=0.0)
    return values


def _lag_index(steps: int, window: int) -> np.ndarray:
    return np.maximum(np.arange(steps) - window, 0)


def _eval_ts(op: str, child: np.ndarray, window: int) -> np.ndarray:
    n, steps = child.shape
    if op == "lag":
        return child[:, _lag_index(steps, window)]
    if op == "ts_delta":
        return child - child[:, _lag_index(steps, window)]
    pad = np.concatenate([np.repeat(child[:, :1], window - 1, axis=1), child], axis=1)
    win = sliding_window_view(pad, window, axis=1)  # (n, steps, window)
    if op == "ts_sum":
        return win.sum(axis=-1)
    if op == "ts_mean":
        return win.mean(axis=-1)
    if op == "ts_std":
        return win.std(axis=-1)  # population std, matches the seed formulas
    if op == "ts_min":
        return win.min(axis=-1)
    if op == "ts_max":
        return win.max(axis=-1)
    if op == "ts_ema":
        alpha = 2.0 / (window + 1.0)
        coef = alpha * (1.0 - alpha) ** np.arange(window - 1, -1, -1, dtype=np.float64)
        coef[0] = (1.0 - alpha) ** (window - 1)  # recursion seeded at the oldest value
        return win @ coef
    if op == "ts_rank_pos":
        last = win[..., -1:]
        if window == 1:
            return np.full((n, steps), 0.5)
        less = (win < last).sum(axis=-1)
        equal = (win == last).sum(axis=-1)
        return (less + 0.5 * (equal - 1)) / (window - 1)
    if op == "ts_drawdown":
        runmax = np.maximum.accumulate(win, axis=-1)
        safe = np.where(np.abs(runmax) >= _DIV_EPS, runmax, 1.0)
        dd = np.where(np.abs(runmax) >= _DIV_EPS, (win - runmax) / safe, 0.0)
        return dd.min(axis=-1)
    if op == "ts_argmax_recency":
        # Last index attaining the window max, scaled to (0, 1].
        from_end = np.argmax(win[..., ::-1], axis=-1)
        return (window - from_end).astype(np.float64) / window
    raise ExprError(f"unknown time-series op {op!r}")


def _eval(expr: Expr, prices: np.ndarray, returns: np.ndarray) -> np.ndarray:
    if isinstance(expr, Feature):
        return prices if expr.name == "prices" else returns
    steps = prices.shape[1]
    if isinstance(expr, Const):
        return np.full((prices.shape[0], steps), float(expr.value))
    if isinstance(expr, Unary):
        x = _eval(expr.child, prices, returns)
        if expr.op == "abs":
            out = np.abs(x)
        elif expr.op == "log":
            out = np.where(x > 0.0, np.log(np.where(x > 0.0, x, 1.0)), 0.0)
        elif expr.op == "neg":
            out = -x
        elif expr.op == "sign":
            out = np.sign(x)
        elif expr.op == "sqrt_abs":
            out = np.sqrt(np.abs(x))
        else:
            raise ExprError(f"unknown unary op {expr.op!r}")
        return _scrub(out)
    if isinstance(expr, Binary):
        a = _eval(expr.left, prices, returns)
        b = _eval(expr.right, prices, returns)
        if expr.op == "add":
            out = a + b
        elif expr.op == "sub":
            out = a - b
        elif expr.op == "mul":
            out = a * b
        elif expr.op == "div":
            ok = np.abs(b) >= _DIV_EPS
            out = np.where(ok, a / np.where(ok, b, 1.0), 0.0)
        elif expr.op == "min2":
            out = np.minimum(a, b)
        elif expr.op == "max2":
            out = np.maximum(a, b)
        else:
            raise ExprError(f"unknown binary op {expr.op!r}")
        return _scrub(out)
    if isinstance(expr, TimeSeries):
        x = _eval(expr.child, prices, returns)
        return _scrub(_eval_ts(expr.op, x, expr.window))
    if isinstance(expr, Last):
        x = _eval(expr.child, prices, returns)
        return np.repeat(x[:, -1:], steps, axis=1)
    raise TypeError(f"not an expression node: {expr!r}")


def evaluate_cross_section(
    expr: Expr, prices: np.ndarray, returns: np.ndarray
) -> np.ndarray:
    """Evaluate one expression over stacked asset windows.

    prices and returns are (n_assets, lookback) matrices sharing a step; the
    result is the (n_assets,) vector of raw scores. Guaranteed finite.
    """
    prices = np.asarray(prices, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    if prices.shape != returns.shape or prices.ndim != 2:
        raise ValueError("prices and returns must share an (n, lookback) shape")
    # Overflow and invalid operations are scrubbed to 0 by policy, so the
    # corresponding numpy warnings are noise.
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = _eval(expr, prices, returns)
    return _scrub(out[:, -1].copy())


def evaluate(expr: Expr, window: Window) -> float:
    """Evaluate one expression on one asset window; always finite."""
    score = evaluate_cross_section(
        expr, window.prices[None, :], window.returns[None, :]
    )
    return float(score[0])


def normalize_scores(scores: Sequence[float] | np.ndarray) -> np.ndarray:
    """Min-max rescale a cross-section to [-1, 1]; degenerate rows go to 0.

    The max maps to exactly +1 and the min to exactly -1. A row whose values
    are all equal (or that is empty) comes back as zeros.
    """
    values = _scrub(np.asarray(scores, dtype=np.float64).copy())
    if values.size == 0:
        return values
    low = values.min()
    high = values.max()
    if high == low:
        return np.zeros_like(values)
    return 2.0 * (values - low) / (high - low) - 1.0
