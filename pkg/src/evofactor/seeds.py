"""Initial factor library and the named, versioned factor record type.

Twelve classic price/return factors expressed in the DSL, instantiated per
legal window size. Names follow `[factor_name_part]_[window_size]_v[version]`
for generated factors; seeds use bare names like momentum_7 or rsi_14 (an
implicit version 1).

Expression notes: windows carry gross relatives r = p_t/p_{t-1}, so net
returns are sub(returns, 1.0) and log returns are log(returns). RSI is
written as 100 * G / (G + L), identical to 100 - 100/(1 + G/L) for L > 0 and
exactly 100 on gain-only windows thanks to safe division.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

from . import dsl
from .dsl import Expr

LIBRARY_SCHEMA = "evofactor/factor-library@1"

ORIGINS = ("seed", "mutated", "crossover", "remote", "pooled")

_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")
_VERSION_RE = re.compile(r"^(?P<stem>[a-z0-9_]+)_v(?P<version>[0-9]+)$")
_WINDOW_RE = re.compile(r"^(?P<base>[a-z0-9_]+)_(?P<window>3|7|14|21)$")


def parse_name(name: str) -> tuple[str, int | None, int]:
    """Split a factor name into (base_name, window_token, version).

    The version suffix _vK and then a trailing legal window token are
    stripped; a missing version means 1. "momentum_comb_sharpe_ratio_14_v2"
    -> ("momentum_comb_sharpe_ratio", 14, 2); "log_return_1" -> ("log_return_1",
    None, 1).
    """
    if not _NAME_RE.match(name):
        raise ValueError(f"invalid factor name {name!r}")
    version = 1
    stem = name
    vm = _VERSION_RE.match(stem)
    if vm:
        stem = vm.group("stem")
        version = int(vm.group("version"))
        if version < 1:
            raise ValueError(f"invalid version in {name!r}")
    window: int | None = None
    wm = _WINDOW_RE.match(stem)
    if wm:
        stem = wm.group("base")
        window = int(wm.group("window"))
    if not stem:
        raise ValueError(f"invalid factor name {name!r}")
    return stem, window, version


def make_name(base: str, window: int, version: int) -> str:
    return f"{base}_{window}_v{version}"


def is_generated_name(name: str) -> bool:
    """True when the name carries both a window token and a version suffix."""
    return re.match(r"^[a-z][a-z0-9_]*_(3|7|14|21)_v[0-9]+$", name) is not None


@dataclass(frozen=True)
class FactorRecord:
    """A named factor: its expression plus lineage metadata."""

    name: str
    expr: Expr
    base_name: str
    version: int
    origin: str = "seed"
    parents: tuple[str, ...] = ()
    created_step: int = 0
    window: int | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.origin == "crossover":
            if len(self.parents) != 2:
                raise ValueError("crossover records need exactly 2 parents")
            if self.version != 1:
                raise ValueError("crossover records restart at version 1")
            if "_comb_" not in self.base_name:
                raise ValueError("crossover base_name must contain '_comb_'")
        if len(self.parents) > 2:
            raise ValueError("at most 2 parents")
        dsl.validate_expr(self.expr)

    @property
    def expr_text(self) -> str:
        return dsl.print_expr(self.expr)


def make_record(
    name: str,
    expr: Expr,
    origin: str,
    parents: tuple[str, ...] = (),
    created_step: int = 0,
) -> FactorRecord:
    base, window, version = parse_name(name)
    return FactorRecord(name, expr, base, version, origin, parents, created_step, window)


# ------------------------------------------------------------ seed factors


def _e(text: str) -> Expr:
    return dsl.parse(text)


def _seed_exprs(w: int) -> dict[str, Expr]:
    """The ten window-parametric factors at window w."""
    return {
        f"mean_return_{w}": _e(f"last(ts_mean(sub(returns, 1.0), {w}))"),
        f"std_return_{w}": _e(f"last(ts_std(returns, {w}))"),
        f"momentum_{w}": _e(f"sub(div(last(prices), last(lag(prices, {w}))), 1.0)"),
        f"max_drawdown_{w}": _e(f"last(ts_drawdown(prices, {w}))"),
        f"sharpe_ratio_{w}": _e(
            f"div(last(ts_mean(sub(returns, 1.0), {w})), last(ts_std(returns, {w})))"
        ),
        f"volatility_{w}": _e(f"last(ts_std(log(returns), {w}))"),
        f"price_position_{w}": _e(
            f"div(sub(last(prices), last(ts_min(prices, {w}))),"
            f" sub(last(ts_max(prices, {w})), last(ts_min(prices, {w}))))"
        ),
        f"ma_{w}": _e(f"last(ts_mean(prices, {w}))"),
        f"bb_width_{w}": _e(
            f"div(mul(2.0, last(ts_std(prices, {w}))), last(ts_mean(prices, {w})))"
        ),
        f"ema_ratio_{w}": _e(f"div(last(prices), last(ts_ema(prices, {w})))"),
    }


def _fixed_seed_exprs() -> dict[str, Expr]:
    """Window-fixed factors: one-step log return and 14-step RSI."""
    gain = "last(ts_mean(max2(sub(returns, 1.0), 0.0), 14))"
    loss = "last(ts_mean(max2(sub(1.0, returns), 0.0), 14))"
    return {
        "log_return_1": _e("last(log(returns))"),
        "rsi_14": _e(f"mul(100.0, div({gain}, add({gain}, {loss})))"),
    }


def seed_factors(windows: tuple[int, ...] = dsl.ALLOWED_WINDOWS) -> list[FactorRecord]:
    """Instantiate the initial library over the given window subset."""
    if not windows:
        raise ValueError("need at least one window size")
    for w in windows:
        if w not in dsl.ALLOWED_WINDOWS:
            raise ValueError(f"window {w} not in allowed set {dsl.ALLOWED_WINDOWS}")
    records: list[FactorRecord] = []
    for w in windows:
        for name, expr in _seed_exprs(w).items():
            records.append(make_record(name, expr, "seed"))
    for name, expr in _fixed_seed_exprs().items():
        records.append(make_record(name, expr, "seed"))
    return records


# ------------------------------------------------------------ serialization


def record_to_json(record: FactorRecord) -> dict:
    return {
        "name": record.name,
        "expr": record.expr_text,
        "base_name": record.base_name,
        "version": record.version,
        "origin": record.origin,
        "parents": list(record.parents),
        "created_step": record.created_step,
    }


def json_to_record(doc: dict) -> FactorRecord:
    for key in ("name", "expr", "base_name", "version", "origin", "parents", "created_step"):
        if key not in doc:
            raise ValueError(f"factor record missing {key!r}")
    base, window, _ = parse_name(doc["name"])
    record = FactorRecord(
        name=doc["name"],
        expr=dsl.parse(doc["expr"]),
        base_name=doc["base_name"],
        version=int(doc["version"]),
        origin=doc["origin"],
        parents=tuple(doc["parents"]),
        created_step=int(doc["created_step"]),
        window=window,
    )
    if record.base_name != base:
        raise ValueError(
            f"base_name {doc['base_name']!r} does not match name {doc['name']!r}"
        )
    return record


def save_library(records: list[FactorRecord], path: str) -> None:
    doc = {
        "schema": LIBRARY_SCHEMA,
        "factors": [record_to_json(r) for r in records],
    }
    with open(path, "w") as handle:
        json.dump(doc, handle, sort_keys=True, separators=(",", ":"))
        handle.write("\n")


def load_library(path: str) -> list[FactorRecord]:
    with open(path) as handle:
        doc = json.load(handle)
    if not isinstance(doc, dict) or doc.get("schema") != LIBRARY_SCHEMA:
        raise ValueError(f"{path}: not a {LIBRARY_SCHEMA} document")
    return [json_to_record(item) for item in doc["factors"]]


def reset_created_step(record: FactorRecord, step: int) -> FactorRecord:
    return replace(record, created_step=step)
