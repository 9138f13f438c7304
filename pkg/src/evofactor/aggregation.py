"""Merge checkpoint streams from independent runs into one record stream
and a pooled factor library for re-evaluation under a static backtest.

Per aligned step, each run's record is version-filtered, then factors are
max-merged on final_value; an exact final_value tie is broken by the higher
mean_rankic. Runs are processed in a canonical content order so the merge
result does not depend on argument order.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Sequence

from . import dsl
from .evolution import SearchRecord, filter_factor_versions, load_checkpoints, search_record_to_json
from .seeds import FactorRecord, make_record

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MergedRecord:
    """One aligned step of the merged stream; every factor name is keyed in
    all three maps, with values taken from exactly one source run."""

    step: int
    performance: dict[str, float]  # factor -> final_value
    quality: dict[str, float]  # factor -> mean_rankic
    expressions: dict[str, str]  # factor -> expression text

    def __post_init__(self) -> None:
        if not (self.performance.keys() == self.quality.keys() == self.expressions.keys()):
            raise ValueError("merged maps must share the same factor names")


def _canonical_key(run: Sequence[SearchRecord]) -> str:
    return "\n".join(json.dumps(search_record_to_json(r), sort_keys=True) for r in run)


def _mean_rankic_key(record: SearchRecord, name: str) -> float:
    return float(record.quality[name]["mean_rankic"])


def merge_runs(
    runs: Sequence[Sequence[SearchRecord]], n_limit: int = 0, ratio: float = 1.0
) -> list[MergedRecord]:
    """Align, truncate, and max-merge already-loaded checkpoint streams."""
    if not runs:
        raise ValueError("need at least one run")
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    length = min(len(run) for run in runs)
    if n_limit > 1:
        length = min(length, n_limit)
    if ratio < 1.0:
        length = min(length, math.floor(length * ratio))
    if length < 1:
        raise ValueError("no aligned records remain after truncation")
    ordered = sorted((list(run[:length]) for run in runs), key=_canonical_key)
    merged: list[MergedRecord] = []
    for i in range(length):
        perf: dict[str, float] = {}
        qual: dict[str, float] = {}
        exprs: dict[str, str] = {}
        for run in ordered:
            record = run[i]
            values = {
                name: float(stats["final_value"])
                for name, stats in record.performance.items()
            }
            expr_by_name = {rec.name: rec.expr_text for rec in record.pool}
            for name in filter_factor_versions(values):
                fv = values[name]
                ic = _mean_rankic_key(record, name)
                if name not in perf or fv > perf[name]:
                    perf[name] = fv
                    qual[name] = ic
                    exprs[name] = expr_by_name[name]
                elif fv == perf[name] and ic > qual[name]:
                    # literal tie rule: quality updates, expression source stays
                    qual[name] = ic
        merged.append(MergedRecord(ordered[0][i].step, perf, qual, exprs))
    return merged


def aggregate_records(
    paths: Sequence[str], n_limit: int = 0, ratio: float = 1.0
) -> list[MergedRecord]:
    """Load checkpoint files and merge them (see merge_runs)."""
    if not paths:
        raise ValueError("need at least one checkpoint path")
    return merge_runs([load_checkpoints(path) for path in paths], n_limit, ratio)


def pooled_library(merged: Sequence[MergedRecord]) -> list[FactorRecord]:
    """Factor records from the final merged step, deduplicated structurally.

    Structural duplicates under different names keep the lexicographically
    first name; dropped aliases are logged.
    """
    if not merged:
        raise ValueError("empty merge")
    final = merged[-1]
    seen: dict[str, str] = {}
    records: list[FactorRecord] = []
    for name in sorted(final.expressions):
        expr = dsl.parse(final.expressions[name])
        canon = dsl.print_expr(expr)
        if canon in seen:
            logger.info("pooled alias %s duplicates %s", name, seen[canon])
            continue
        seen[canon] = name
        records.append(make_record(name, expr, origin="pooled", parents=(), created_step=0))
    return records


def merged_to_json(record: MergedRecord) -> dict:
    return {
        "step": record.step,
        "performance": record.performance,
        "quality": record.quality,
        "expressions": record.expressions,
    }


def json_to_merged(doc: dict) -> MergedRecord:
    for key in ("step", "performance", "quality", "expressions"):
        if key not in doc:
            raise ValueError(f"merged record missing key {key!r}")
    return MergedRecord(
        step=int(doc["step"]),
        performance={k: float(v) for k, v in doc["performance"].items()},
        quality={k: float(v) for k, v in doc["quality"].items()},
        expressions={k: str(v) for k, v in doc["expressions"].items()},
    )


def save_merged(records: Sequence[MergedRecord], path: str) -> None:
    with open(path, "w") as handle:
        for record in records:
            handle.write(json.dumps(merged_to_json(record), sort_keys=True) + "\n")


def load_merged(path: str) -> list[MergedRecord]:
    records = []
    with open(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(json_to_merged(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad merged record: {exc}") from exc
    return records
