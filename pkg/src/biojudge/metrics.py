"""Accuracy accounting and comparison tables.

Accuracy definitions (None means undefined, rendered "n/a"):

* strict   = correct / (correct + incorrect + inconclusive + low-res denials)
* adjusted = correct / (correct + incorrect)
* exclusion-adjusted (classification) =
  correct / (n_total - low-res - refusals - provider failures)

Refusals and provider failures never enter a denominator.
"""

from __future__ import annotations

import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from functools import singledispatch
from typing import Iterable, Mapping, Sequence

from biojudge.errors import ContractError, IntegrityError
from biojudge.grading import Outcome, TrialRecord
from biojudge.protocol import ClassLabel, Protocol, Task

log = logging.getLogger(__name__)

UNDEFINED = "n/a"
MISSING = "—"


class ReportWarning(UserWarning):
    pass


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class MetricsReport:
    protocol_name: str
    task: Task
    counts: Mapping[Outcome, int]
    n_total: int
    per_class: Mapping[str, Mapping[Outcome, int]] = field(default_factory=dict)

    def count(self, outcome: Outcome) -> int:
        return self.counts.get(outcome, 0)

    @property
    def strict_accuracy(self) -> float | None:
        c, i = self.count(Outcome.CORRECT), self.count(Outcome.INCORRECT)
        den = c + i + self.count(Outcome.INCONCLUSIVE) + self.count(Outcome.EXCLUDED_LOW_RES)
        return _ratio(c, den)

    @property
    def adjusted_accuracy(self) -> float | None:
        c = self.count(Outcome.CORRECT)
        return _ratio(c, c + self.count(Outcome.INCORRECT))

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol_name,
            "task": self.task.value,
            "n_total": self.n_total,
            "counts": {o.value: self.count(o) for o in Outcome},
            "strict_accuracy": self.strict_accuracy,
            "adjusted_accuracy": self.adjusted_accuracy,
            "exclusion_adjusted_accuracy": (
                exclusion_adjusted_accuracy(self) if self.task is Task.CLASSIFICATION else None
            ),
            "per_class": {
                label: {o.value: c.get(o, 0) for o in Outcome} for label, c in self.per_class.items()
            },
        }


def aggregate(records: Iterable[TrialRecord], protocol: Protocol) -> MetricsReport:
    trials = protocol.by_id()
    seen: set[str] = set()
    counts: Counter[Outcome] = Counter()
    per_class: dict[str, Counter[Outcome]] = {}
    if protocol.task is Task.CLASSIFICATION:
        per_class = {label: Counter() for label in protocol.label_set or ()}
    for rec in records:
        if rec.spec_id in seen:
            raise IntegrityError(f"duplicate record for trial {rec.spec_id}")
        if rec.spec_id not in trials:
            raise IntegrityError(f"record for unknown trial {rec.spec_id}")
        seen.add(rec.spec_id)
        counts[rec.outcome] += 1
        truth = trials[rec.spec_id].truth
        if isinstance(truth, ClassLabel):
            per_class[truth.label][rec.outcome] += 1
    return MetricsReport(
        protocol_name=protocol.name,
        task=protocol.task,
        counts=dict(counts),
        n_total=sum(counts.values()),
        per_class={k: dict(v) for k, v in per_class.items()},
    )


def exclusion_adjusted_accuracy(report: MetricsReport) -> float | None:
    if report.task is not Task.CLASSIFICATION:
        raise ContractError("exclusion-adjusted accuracy is defined for classification reports only")
    excluded = (
        report.count(Outcome.EXCLUDED_LOW_RES)
        + report.count(Outcome.EXCLUDED_REFUSAL)
        + report.count(Outcome.PROVIDER_FAILURE)
    )
    return _ratio(report.count(Outcome.CORRECT), report.n_total - excluded)


def to_percent(value: float | None) -> Decimal | None:
    # via repr so 0.7475 is exactly 74.75, not 74.749999...
    return None if value is None else Decimal(repr(value)) * 100


def _quantize(pct: Decimal | None) -> str:
    if pct is None:
        return UNDEFINED
    return str(pct.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def format_percent(value: float | None) -> str:
    """``0.7475 -> '74.75'``: value*100 rounded half-up to two decimals."""
    return _quantize(to_percent(value))


# --------------------------------------------------------------------------
# comparison tables


@dataclass(frozen=True)
class ComparisonRow:
    method_name: str
    values: Mapping[str, Decimal | None]


@dataclass(frozen=True)
class ComparisonTable:
    columns: tuple[str, ...]
    rows: tuple[ComparisonRow, ...]
    header: str = "Method/Dataset"


def parse_baselines(csv_text: str) -> list[ComparisonRow]:
    """Rows ``method,protocol,accuracy_percent``; ``#`` comments ignored."""
    rows: dict[str, dict[str, Decimal]] = {}
    for lineno, raw in enumerate(csv_text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 3:
            raise ValueError(f"line {lineno}: expected method,protocol,accuracy_percent")
        method, proto, value = fields
        if lineno == 1 and value == "accuracy_percent":
            continue
        try:
            rows.setdefault(method, {})[proto] = Decimal(value)
        except ArithmeticError:
            raise ValueError(f"line {lineno}: accuracy {value!r} is not a number") from None
    return [ComparisonRow(m, v) for m, v in rows.items()]


def comparison_table(reports: Sequence[MetricsReport], baselines: Sequence[ComparisonRow] = (),
                     method_name: str = "harness", metric: str = "strict") -> ComparisonTable:
    """Baseline rows first, then one row for the harness reports (percent values)."""
    columns: list[str] = []
    for row in baselines:
        for proto in row.values:
            if proto not in columns:
                columns.append(proto)
    known = [r.protocol_name for r in reports]
    for proto in columns:
        if proto not in known and reports:
            warnings.warn(f"baseline protocol {proto!r} has no harness report", ReportWarning, stacklevel=2)
    for name in known:
        if name not in columns:
            columns.append(name)
    rows = list(baselines)
    if reports:
        accessor = {
            "strict": lambda r: r.strict_accuracy,
            "adjusted": lambda r: r.adjusted_accuracy,
            "exclusion_adjusted": exclusion_adjusted_accuracy,
        }[metric]
        values = {r.protocol_name: to_percent(accessor(r)) for r in reports}
        rows.append(ComparisonRow(method_name, values))
    return ComparisonTable(tuple(columns), tuple(rows))


def _cell(row: ComparisonRow, column: str) -> str:
    if column not in row.values:
        return MISSING
    return _quantize(row.values[column])


# --------------------------------------------------------------------------
# rendering

_REPORT_COLUMNS = (
    "protocol", "task", "n_total", *[o.value for o in Outcome], "strict_accuracy", "adjusted_accuracy",
    "exclusion_adjusted_accuracy",
)


def _report_cells(report: MetricsReport) -> list[str]:
    excl = exclusion_adjusted_accuracy(report) if report.task is Task.CLASSIFICATION else None
    return [
        report.protocol_name,
        report.task.value,
        str(report.n_total),
        *[str(report.count(o)) for o in Outcome],
        format_percent(report.strict_accuracy),
        format_percent(report.adjusted_accuracy),
        format_percent(excl) if report.task is Task.CLASSIFICATION else MISSING,
    ]


def _markdown(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _csv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    out = []
    for r in [list(header), *rows]:
        if any("," in c or "\n" in c for c in r):
            raise ValueError(f"cell contains a separator, not representable without quoting: {r}")
        out.append(",".join(r))
    return "\n".join(out) + "\n"


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


@singledispatch
def render(obj, fmt: str = "markdown") -> str:
    raise TypeError(f"cannot render {type(obj).__name__}")


@render.register
def _(obj: MetricsReport, fmt: str = "markdown") -> str:
    if fmt == "json":
        return _json(obj.to_dict())
    rows = [_report_cells(obj)]
    return _markdown(_REPORT_COLUMNS, rows) if fmt == "markdown" else _csv_or_fail(fmt, _REPORT_COLUMNS, rows)


@render.register
def _(obj: ComparisonTable, fmt: str = "markdown") -> str:
    if fmt == "json":
        return _json({
            "columns": list(obj.columns),
            "rows": [{"method": r.method_name,
                      "values": {c: None if r.values.get(c) is None else float(r.values[c]) for c in obj.columns}}
                     for r in obj.rows],
        })
    header = [obj.header, *obj.columns]
    rows = [[r.method_name, *[_cell(r, c) for c in obj.columns]] for r in obj.rows]
    return _markdown(header, rows) if fmt == "markdown" else _csv_or_fail(fmt, header, rows)


def _csv_or_fail(fmt: str, header, rows) -> str:
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}; expected markdown, csv or json")
    return _csv(header, rows)


def per_class_csv(report: MetricsReport) -> str:
    """Per-label correct / incorrect / low-res / other counts for stacked plots."""
    rows = []
    for label, c in report.per_class.items():
        correct = c.get(Outcome.CORRECT, 0)
        incorrect = c.get(Outcome.INCORRECT, 0)
        low_res = c.get(Outcome.EXCLUDED_LOW_RES, 0)
        other = sum(c.values()) - correct - incorrect - low_res
        rows.append([label, str(correct), str(incorrect), str(low_res), str(other)])
    return _csv(["label", "correct", "incorrect", "low_res", "other"], rows)
