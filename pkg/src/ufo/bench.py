"""Benchmark tables (CSV) and cross-benchmark rank-correlation reports.

CSV layout: header ``arch_id,arch,flops,params`` followed by score columns
named ``group/benchmark`` (suffix ``:min`` marks lower-is-better). Columns
without a ``/`` are carried through untouched as extra string fields.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .arch_space import DecodeError, SearchSpace, decode
from .objectives import UndefinedCorrelation, kendall_tau

FIXED = ("arch_id", "arch", "flops", "params")


@dataclass(frozen=True)
class BenchColumn:
    name: str
    group: str
    higher_is_better: bool = True

    @property
    def header(self) -> str:
        return f"{self.group}/{self.name}" + ("" if self.higher_is_better else ":min")

    @classmethod
    def parse(cls, header: str) -> BenchColumn:
        text, hib = header, True
        if text.endswith(":min"):
            text, hib = text[:-4], False
        group, _, name = text.partition("/")
        if not group or not name:
            raise ValueError(f"score column {header!r} must look like group/name")
        return cls(name, group, hib)


@dataclass
class BenchRow:
    arch_id: str
    arch: str
    flops: int
    params: int
    scores: dict[str, float]
    extra: dict[str, str] = field(default_factory=dict)


@dataclass
class BenchTable:
    columns: list[BenchColumn]
    rows: list[BenchRow]
    extra_columns: list[str] = field(default_factory=list)

    def column(self, header: str) -> np.ndarray:
        return np.array([r.scores[header] for r in self.rows], dtype=np.float64)

    def headers(self) -> list[str]:
        return [c.header for c in self.columns]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BenchTable)
            and self.columns == other.columns
            and self.extra_columns == other.extra_columns
            and len(self.rows) == len(other.rows)
            and all(_row_eq(a, b) for a, b in zip(self.rows, other.rows))
        )


def _row_eq(a: BenchRow, b: BenchRow) -> bool:
    if (a.arch_id, a.arch, a.flops, a.params, a.extra) != (b.arch_id, b.arch, b.flops, b.params, b.extra):
        return False
    if a.scores.keys() != b.scores.keys():
        return False
    return all(a.scores[k] == b.scores[k] or (math.isnan(a.scores[k]) and math.isnan(b.scores[k])) for k in a.scores)


@dataclass(frozen=True)
class RowError:
    line: int
    message: str


class BenchFormatError(ValueError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


def export_bench(table: BenchTable, path: str | Path | None = None) -> str:
    """Write the table as CSV (floats in shortest round-trip form); returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(FIXED) + table.headers() + table.extra_columns)
    for r in table.rows:
        w.writerow(
            [r.arch_id, r.arch, str(r.flops), str(r.params)]
            + [_fmt(r.scores[h]) for h in table.headers()]
            + [r.extra.get(c, "") for c in table.extra_columns]
        )
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def import_bench(path: str | Path, space: SearchSpace | None = None) -> tuple[BenchTable, list[RowError]]:
    """Parse a CSV; malformed rows are skipped and reported with their line number."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_bench(text, space)


def parse_bench(text: str, space: SearchSpace | None = None) -> tuple[BenchTable, list[RowError]]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise BenchFormatError("empty file: header row required") from None
    missing = [c for c in FIXED if c not in header]
    if missing:
        raise BenchFormatError(f"header lacks required columns {missing}")
    idx = {h: i for i, h in enumerate(header)}
    score_headers = [h for h in header if h not in FIXED and "/" in h]
    try:
        columns = [BenchColumn.parse(h) for h in score_headers]
    except ValueError as exc:
        raise BenchFormatError(str(exc)) from exc
    extra = [h for h in header if h not in FIXED and "/" not in h]
    rows: list[BenchRow] = []
    errors: list[RowError] = []
    seen: set[str] = set()
    for line, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            errors.append(RowError(line, f"expected {len(header)} fields, found {len(rec)}"))
            continue
        arch_id, arch = rec[idx["arch_id"]], rec[idx["arch"]]
        if arch_id in seen:
            errors.append(RowError(line, f"duplicate arch_id {arch_id!r}"))
            continue
        if space is not None:
            try:
                decode(arch, space)
            except DecodeError as exc:
                errors.append(RowError(line, f"undecodable arch: {exc}"))
                continue
        try:
            flops, params = int(rec[idx["flops"]]), int(rec[idx["params"]])
            scores = {h: float(rec[idx[h]]) for h in score_headers}
        except ValueError as exc:
            errors.append(RowError(line, f"non-numeric value: {exc}"))
            continue
        seen.add(arch_id)
        rows.append(BenchRow(arch_id, arch, flops, params, scores, {c: rec[idx[c]] for c in extra}))
    return BenchTable(columns, rows, extra), errors


# ---------------------------------------------------------------------------
# correlation


@dataclass
class CorrelationReport:
    names: list[str]
    groups: list[str]
    matrix: np.ndarray

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([""] + self.names)
        for name, row in zip(self.names, self.matrix):
            w.writerow([name] + ["nan" if math.isnan(v) else f"{v:.6f}" for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def pair(self, a: str, b: str) -> float:
        return float(self.matrix[self.names.index(a), self.names.index(b)])

    def group_means(self) -> dict[str, float]:
        """Mean off-diagonal tau within each group and across groups."""
        out: dict[str, list[float]] = {}
        n = len(self.names)
        for i in range(n):
            for j in range(i + 1, n):
                v = self.matrix[i, j]
                if math.isnan(v):
                    continue
                key = self.groups[i] if self.groups[i] == self.groups[j] else "cross"
                out.setdefault(key, []).append(float(v))
        return {k: float(np.mean(v)) for k, v in sorted(out.items())}

    def to_svg(self, path: str | Path | None = None, cell: int = 48) -> str:
        """Heatmap: blue for positive tau, red for negative, grey for undefined."""
        n = len(self.names)
        label_w = 8 * max((len(s) for s in self.names), default=1) + 12
        size = label_w + n * cell + 10
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="monospace" font-size="11">'
        ]
        for i, name in enumerate(self.names):
            y = label_w + i * cell + cell // 2 + 4
            parts.append(f'<text x="4" y="{y}">{_esc(name)}</text>')
            x = label_w + i * cell + cell // 2
            parts.append(f'<text x="{x}" y="{label_w - 6}" transform="rotate(-60 {x} {label_w - 6})">{_esc(name)}</text>')
        for i in range(n):
            for j in range(n):
                v = self.matrix[i, j]
                x, y = label_w + j * cell, label_w + i * cell
                parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_color(v)}" stroke="white"/>')
                txt = "nan" if math.isnan(v) else f"{v:.2f}"
                parts.append(f'<text x="{x + cell // 2}" y="{y + cell // 2 + 4}" text-anchor="middle">{txt}</text>')
        parts.append("</svg>")
        text = "\n".join(parts) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _color(v: float) -> str:
    if math.isnan(v):
        return "#cccccc"
    a = min(1.0, abs(v))
    base = (33, 102, 172) if v >= 0 else (178, 24, 43)
    rgb = [round(255 + (c - 255) * a) for c in base]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def correlation_report(table: BenchTable, columns: Sequence[str] | None = None, group_order: bool = True) -> CorrelationReport:
    """Kendall tau-b between every pair of score columns (lower-is-better columns are negated)."""
    if len(table.rows) < 2:
        raise ValueError("correlation needs at least 2 rows")
    cols = [c for c in table.columns if columns is None or c.header in columns]
    if group_order:
        cols = sorted(cols, key=lambda c: (c.group, c.name))
    data = [table.column(c.header) * (1.0 if c.higher_is_better else -1.0) for c in cols]
    n = len(cols)
    m = np.eye(n)
    for i in range(n):
        try:
            kendall_tau(data[i], data[i])
        except UndefinedCorrelation:
            m[i, i] = math.nan
        for j in range(i + 1, n):
            try:
                v = kendall_tau(data[i], data[j])
            except UndefinedCorrelation:
                v = math.nan
            m[i, j] = m[j, i] = v
    return CorrelationReport([c.header for c in cols], [c.group for c in cols], m)
