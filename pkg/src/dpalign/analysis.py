"""Marginal-gain analysis of reward-vs-epsilon curves and the CSV results table."""

from __future__ import annotations

import csv
import io
import math
from importlib.resources import files
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

from .evaluation import CurvePoint, SweepCurve
from .privacy_accounting import format_epsilon, parse_epsilon

ARROWS = {"up": "↑", "down": "↓", "flat": "→"}
GRID_COLUMNS = ("model", "optimizer", "method")


class ResultsTableError(ValueError):
    pass


@dataclass(frozen=True)
class GainRow:
    left: float
    right: float
    delta: float
    percent: float | None  # relative to f(left), in percent; None when f(left) == 0
    trend: str
    slope: float | None  # finite-difference quotient, None at the ZERO/INFINITY ends

    @property
    def label(self) -> str:
        return f"{format_epsilon(self.left)}->{format_epsilon(self.right)}"


@dataclass(frozen=True)
class MarginalGainReport:
    rows: tuple[GainRow, ...]
    critical_epsilon: float | None
    total: float

    def to_json(self) -> dict:
        return {
            "rows": [
                {
                    "range": r.label,
                    "delta": r.delta,
                    "percent": r.percent,
                    "trend": r.trend,
                    "slope": r.slope,
                }
                for r in self.rows
            ],
            "critical_epsilon": None if self.critical_epsilon is None else format_epsilon(self.critical_epsilon),
            "total": self.total,
        }


def _trend(delta: float) -> str:
    if delta > 0:
        return "up"
    if delta < 0:
        return "down"
    return "flat"


def marginal_gains(curve: SweepCurve | Sequence[tuple[float, float]]) -> MarginalGainReport:
    """Deltas, left-based percents and slopes over adjacent epsilons.

    Rows touching ZERO or INFINITY carry a delta but no slope, so the critical
    epsilon (left end of the steepest finite slope, first one on ties) only
    considers interior ranges.
    """
    if isinstance(curve, SweepCurve):
        pts = [(p.epsilon, p.mean_reward) for p in curve.points]
    else:
        pts = sorted((parse_epsilon(e), float(f)) for e, f in curve)
    if len(pts) < 2:
        raise ValueError("marginal_gains needs at least two curve points")
    rows = []
    for (e0, f0), (e1, f1) in zip(pts, pts[1:]):
        delta = f1 - f0
        percent = None if f0 == 0 else 100.0 * delta / f0
        interior = e0 > 0 and math.isfinite(e1)
        rows.append(GainRow(e0, e1, delta, percent, _trend(delta), delta / (e1 - e0) if interior else None))
    best = None
    for r in rows:
        if r.slope is not None and (best is None or r.slope > best.slope):
            best = r
    return MarginalGainReport(tuple(rows), None if best is None else best.left, pts[-1][1] - pts[0][1])


def format_delta(delta: float) -> str:
    return f"{delta:.4f}"


def format_percent(percent: float | None) -> str:
    """One decimal; magnitudes below 0.1 keep one significant figure (e.g. +0.03%)."""
    if percent is None:
        return "n/a"
    if percent != 0 and abs(percent) < 0.1:
        digits = -int(math.floor(math.log10(abs(percent))))
        return f"{percent:+.{digits}f}%"
    return f"{percent:+.1f}%"


def render_report(report: MarginalGainReport, title: str = "") -> str:
    lines = [title] if title else []
    lines.append(f"{'range':<10} {'delta':>9} {'percent':>9}  trend")
    for r in report.rows:
        lines.append(f"{r.label:<10} {format_delta(r.delta):>9} {format_percent(r.percent):>9}  {ARROWS[r.trend]}")
    lines.append(f"{'total':<10} {format_delta(report.total):>9}")
    eps0 = "n/a" if report.critical_epsilon is None else format_epsilon(report.critical_epsilon)
    lines.append(f"critical epsilon: {eps0}")
    return "\n".join(lines)


def report_csv(reports: dict[str, MarginalGainReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "range", "delta", "percent", "trend"])
    for name, rep in reports.items():
        for r in rep.rows:
            w.writerow([name, r.label, format_delta(r.delta), format_percent(r.percent), r.trend])
        w.writerow([name, "total", format_delta(rep.total), "", ""])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# results table


@dataclass(frozen=True)
class ResultsRow:
    model: str
    optimizer: str
    method: str
    values: dict[float, float]

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.model, self.optimizer, self.method)

    def curve(self) -> SweepCurve:
        return SweepCurve(
            [CurvePoint(e, v, 0.0, 1) for e, v in sorted(self.values.items())], label="/".join(self.key)
        )


def _header_epsilon(text: str) -> float:
    try:
        return parse_epsilon(text)
    except ValueError as exc:
        raise ResultsTableError(f"bad epsilon column {text!r}") from exc


def emit_results_table(rows: Iterable[ResultsRow], path: str | Path | None = None) -> str:
    """Write a (model, optimizer, method) x epsilon grid; raises on ragged input.

    Row order is the order of first appearance, which keeps round trips
    byte-identical.
    """
    rows = list(rows)
    if not rows:
        raise ResultsTableError("no rows to emit")
    seen: dict[tuple, ResultsRow] = {}
    for r in rows:
        if r.key in seen:
            raise ResultsTableError(f"duplicate row {'/'.join(r.key)}")
        seen[r.key] = r
    epsilons = sorted(set().union(*(r.values for r in rows)))
    missing = [f"{'/'.join(r.key)} @ eps={format_epsilon(e)}" for r in rows for e in epsilons if e not in r.values]
    if missing:
        raise ResultsTableError("ragged grid, missing cells: " + ", ".join(missing))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*GRID_COLUMNS, *(format_epsilon(e) for e in epsilons)])
    for r in rows:
        w.writerow([*r.key, *(f"{r.values[e]:.4f}" for e in epsilons)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def parse_results_table(text: str, source: str = "<table>") -> list[ResultsRow]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ResultsTableError(f"{source}: empty table") from None
    if tuple(header[:3]) != GRID_COLUMNS or len(header) < 4:
        raise ResultsTableError(f"{source}: header must start with {','.join(GRID_COLUMNS)} and list epsilons")
    epsilons = [_header_epsilon(h) for h in header[3:]]
    rows = []
    for lineno, rec in enumerate(reader, 2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise ResultsTableError(f"{source}: line {lineno} has {len(rec)} fields, expected {len(header)}")
        try:
            values = {e: float(v) for e, v in zip(epsilons, rec[3:])}
        except ValueError:
            raise ResultsTableError(f"{source}: line {lineno} has a non-numeric value") from None
        rows.append(ResultsRow(rec[0], rec[1], rec[2], values))
    if not rows:
        raise ResultsTableError(f"{source}: no data rows")
    return rows


def load_results_table(path: str | Path) -> list[ResultsRow]:
    return parse_results_table(Path(path).read_text(encoding="utf-8"), str(path))


def select_row(rows: Sequence[ResultsRow], model: str | None = None, optimizer: str | None = None, method: str | None = None) -> ResultsRow:
    hits = [
        r
        for r in rows
        if (model is None or r.model == model)
        and (optimizer is None or r.optimizer == optimizer)
        and (method is None or r.method == method)
    ]
    if len(hits) != 1:
        raise ResultsTableError(f"selection matched {len(hits)} rows, expected exactly one")
    return hits[0]


def curves_to_rows(curves: dict[tuple[str, str, str], SweepCurve]) -> list[ResultsRow]:
    return [ResultsRow(*key, {p.epsilon: p.mean_reward for p in c.points}) for key, c in curves.items()]


BUNDLED_TABLES = {
    "llama-gpt2": "reward_grid_llama_gpt2.csv",
    "deepseek": "reward_grid_deepseek.csv",
    "published-gains": "marginal_gains_llama_dpo.csv",
}


def bundled_path(name: str) -> Path:
    """Filesystem path of a bundled reference table (see ``BUNDLED_TABLES``)."""
    try:
        filename = BUNDLED_TABLES[name]
    except KeyError:
        raise ResultsTableError(f"unknown bundled table {name!r}; choose from {sorted(BUNDLED_TABLES)}") from None
    return Path(str(files("dpalign") / "data" / filename))
