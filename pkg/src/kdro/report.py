"""Summary statistics and table rendering for Monte-Carlo reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import KdroError

PERCENTILES = (5, 10, 15, 20, 25, 30)


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: the ``ceil(pct/100 * n)``-th smallest value."""
    n = len(sorted_values)
    if n == 0:
        raise KdroError("percentile of an empty sample")
    rank = max(1, math.ceil(pct / 100.0 * n))
    return float(sorted_values[rank - 1])


def streaming_mean_se(values) -> tuple[float, float]:
    """Welford one-pass mean and ``std / sqrt(n)`` (sample std, ddof = 1)."""
    n, mean, m2 = 0, 0.0, 0.0
    for v in values:
        n += 1
        delta = v - mean
        mean += delta / n
        m2 += delta * (v - mean)
    if n == 0:
        return math.nan, math.nan
    if n == 1:
        return mean, 0.0
    return mean, math.sqrt(m2 / (n - 1)) / math.sqrt(n)


@dataclass(frozen=True)
class CellStats:
    mean: float
    se: float
    percentiles: tuple
    replications: int
    excluded: int = 0

    @property
    def se_percent(self) -> float:
        """Standard error scaled by 100, as printed in the text tables."""
        return 100.0 * self.se


def summarize(values, excluded: int = 0) -> CellStats:
    v = np.asarray([x for x in values], dtype=float)
    if v.size == 0:
        return CellStats(math.nan, math.nan, tuple(math.nan for _ in PERCENTILES), 0, excluded)
    mean = float(np.mean(v))
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    s_mean, s_se = streaming_mean_se(v.tolist())
    if not (math.isclose(mean, s_mean, rel_tol=1e-9, abs_tol=1e-12) and math.isclose(se, s_se, rel_tol=1e-6, abs_tol=1e-12)):
        raise KdroError("standard error disagrees with its streaming recomputation")
    s = np.sort(v)
    pct = tuple(nearest_rank(s, p) for p in PERCENTILES)
    if any(b < a for a, b in zip(pct, pct[1:])):
        raise KdroError("percentiles are not non-decreasing")
    return CellStats(mean, se, pct, int(v.size), excluded)


@dataclass
class EvalReport:
    """A rows x columns table of summarised Monte-Carlo cells."""

    title: str
    column_name: str
    rows: list
    columns: list
    cells: dict  # (row, column) -> CellStats
    runtime_seconds: float = math.nan
    reference: dict = field(default_factory=dict)  # (row, column) -> reference mean
    notes: list = field(default_factory=list)

    def cell(self, row, column) -> CellStats:
        return self.cells[(row, column)]

    def means(self, row) -> list:
        return [self.cells[(row, c)].mean for c in self.columns]

    def to_csv(self) -> str:
        """Deterministic machine-readable table (no timings)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["table", "row", self.column_name, "mean", "se", "se_percent"]
            + [f"p{p}" for p in PERCENTILES]
            + ["replications", "excluded", "reference_mean"]
        )
        for r in self.rows:
            for c in self.columns:
                s = self.cells[(r, c)]
                ref = self.reference.get((r, c))
                w.writerow(
                    [self.title, r, _fmt_key(c), repr(s.mean), repr(s.se), repr(s.se_percent)]
                    + [repr(p) for p in s.percentiles]
                    + [s.replications, s.excluded, "" if ref is None else repr(ref)]
                )
        return buf.getvalue()

    def to_text(self, digits: int = 3) -> str:
        """Aligned ``mean +- SE%`` table, followed by reference values when present."""
        head = [self.title] + [f"{self.column_name}={_fmt_key(c)}" for c in self.columns]
        body = []
        for r in self.rows:
            line = [r]
            for c in self.columns:
                s = self.cells[(r, c)]
                line.append(f"{s.mean:.{digits}f} +- {s.se_percent:.2f}")
            body.append(line)
        if self.reference:
            for r in self.rows:
                if any((r, c) in self.reference for c in self.columns):
                    line = [f"  reference: {r}"]
                    for c in self.columns:
                        ref = self.reference.get((r, c))
                        line.append("" if ref is None else f"{ref:.{digits}f}")
                    body.append(line)
        widths = [max(len(row[j]) for row in [head] + body) for j in range(len(head))]
        out = ["  ".join(x.ljust(wd) for x, wd in zip(head, widths)).rstrip()]
        out.append("  ".join("-" * wd for wd in widths))
        out.extend("  ".join(x.ljust(wd) for x, wd in zip(row, widths)).rstrip() for row in body)
        excluded = max((s.excluded for s in self.cells.values()), default=0)
        out.append(f"replications: {max(s.replications for s in self.cells.values())}, excluded: {excluded}")
        out.extend(self.notes)
        return "\n".join(out) + "\n"

    def percentile_table(self, digits: int = 3) -> str:
        """One line per row with mean, SE% and the nearest-rank percentiles (single-column reports)."""
        head = ["policy", "mean", "SE%"] + [f"p{p}" for p in PERCENTILES]
        body = []
        for r in self.rows:
            for c in self.columns:
                s = self.cells[(r, c)]
                body.append([r, f"{s.mean:.{digits}f}", f"{s.se_percent:.2f}"] + [f"{p:.{digits}f}" for p in s.percentiles])
        widths = [max(len(row[j]) for row in [head] + body) for j in range(len(head))]
        lines = ["  ".join(x.ljust(wd) for x, wd in zip(head, widths)).rstrip()]
        lines.extend("  ".join(x.ljust(wd) for x, wd in zip(row, widths)).rstrip() for row in body)
        return "\n".join(lines) + "\n"


def _fmt_key(c) -> str:
    if isinstance(c, float):
        return f"{c:g}"
    return str(c)


def build_report(
    title: str,
    column_name: str,
    rows: list,
    columns: list,
    per_rep: list,
    excluded: int,
    reference: Optional[dict] = None,
) -> EvalReport:
    """Summarise ``per_rep`` (one dict ``(row, col) -> value`` per successful replication)."""
    cells = {}
    for r in rows:
        for c in columns:
            cells[(r, c)] = summarize([rep[(r, c)] for rep in per_rep], excluded)
    return EvalReport(title, column_name, list(rows), list(columns), cells, reference=dict(reference or {}))
