"""Static-analysis report intake and static+dynamic aggregation."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from .findings import DYNAMIC_HIGH, Category, Finding, Locator, Severity, Source

logger = logging.getLogger(__name__)

# PHP-report category labels, in the order reports usually list them
PHP_CATEGORIES: dict[str, Category] = {
    "cross-site scripting": Category.XSS,
    "file manipulation": Category.FILE_MANIPULATION,
    "command execution": Category.COMMAND_EXECUTION,
    "file inclusion": Category.FILE_INCLUSION,
    "file disclosure": Category.FILE_DISCLOSURE,
    "sql injection": Category.SQL_INJECTION,
    "possible flow control": Category.FLOW_CONTROL,
    "code execution": Category.CODE_EXECUTION,
    "http response splitting": Category.HTTP_RESPONSE_SPLITTING,
    "unserialize": Category.UNSERIALIZE,
    "pop gadgets": Category.POP_GADGET,
    "http header injection": Category.HTTP_HEADER_INJECTION,
}
PHP_LABELS = {c: label for label, c in PHP_CATEGORIES.items()}
DYNAMIC_ORDER = (
    Category.XSS, Category.CSRF, Category.COMMAND_EXECUTION, Category.COOKIE_NO_HTTPONLY,
    Category.NO_X_CONTENT_TYPE_OPTIONS, Category.NO_X_FRAME_OPTIONS, Category.BACKUP_FILE,
    Category.APP_ERROR_INFO,
)
FIELDS = ("tool", "file", "line", "category", "message")


@dataclass
class StaticReportLine:
    tool: str
    file: str
    line: int
    category_raw: str
    message: str = ""


def map_category(raw: str) -> Category:
    key = " ".join(raw.strip().lower().replace("_", " ").split())
    if key in PHP_CATEGORIES:
        return PHP_CATEGORIES[key]
    for cat in Category:
        if cat != Category.UNMAPPED and key.replace(" ", "") == cat.value.lower():
            return cat
    return Category.UNMAPPED


def _line_from(rec: dict) -> StaticReportLine:
    category = rec.get("category", rec.get("category_raw"))
    if not isinstance(category, str) or not category.strip() or not rec.get("file"):
        raise ValueError("record lacks file or category")
    line = rec.get("line")
    return StaticReportLine(str(rec.get("tool") or "unknown"), str(rec["file"]),
                            int(line) if line not in (None, "") else 0, category, str(rec.get("message") or ""))


def parse_report_text(text: str, fmt: str | None = None) -> tuple[list[StaticReportLine], int]:
    """Parse JSON Lines or CSV; returns (lines, number of skipped records)."""
    lines: list[StaticReportLine] = []
    skipped = 0
    if fmt is None:
        first = next((ln.strip() for ln in text.splitlines() if ln.strip()), "")
        fmt = "jsonl" if first.startswith("{") or not first else "csv"
    if fmt == "jsonl":
        for n, raw in enumerate(text.splitlines(), 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                if not isinstance(rec, dict):
                    raise ValueError("not an object")
                lines.append(_line_from(rec))
            except (ValueError, TypeError) as exc:
                skipped += 1
                logger.warning("static report line %d skipped: %s", n, exc)
    else:
        reader = csv.DictReader(io.StringIO(text))
        for n, rec in enumerate(reader, 2):
            try:
                lines.append(_line_from({k.strip().lower(): v for k, v in rec.items() if k}))
            except (ValueError, TypeError, AttributeError) as exc:
                skipped += 1
                logger.warning("static report row %d skipped: %s", n, exc)
    return lines, skipped


def to_finding(line: StaticReportLine, firmware_id: str) -> Finding:
    cat = map_category(line.category_raw)
    return Finding(cat, Source.STATIC, Locator(line.file, None, line.line or None), line.message, firmware_id,
                   raw_category=line.category_raw)


def read_static_report(path: str | os.PathLike, firmware_id: str) -> tuple[list[Finding], int]:
    p = Path(path)
    fmt = "csv" if p.suffix.lower() == ".csv" else None
    lines, skipped = parse_report_text(p.read_text("utf-8", "replace"), fmt)
    return [to_finding(ln, firmware_id) for ln in lines], skipped


def ingest_static_report(path: str | os.PathLike, firmware_id: str) -> list[Finding]:
    findings, skipped = read_static_report(path, firmware_id)
    if skipped:
        logger.warning("%s: %d malformed record(s) skipped", path, skipped)
    return findings


def select_high_impact(findings: Iterable[Finding]) -> list[str]:
    """Distinct files carrying High static findings, in first-seen order."""
    out: list[str] = []
    for f in findings:
        if f.source == Source.STATIC and f.high and f.locator.target not in out:
            out.append(f.locator.target)
    return out


@dataclass
class FirmwareRollup:
    static_issue_count: int = 0
    dynamic_issue_count: int = 0
    manual_issue_count: int = 0
    high_impact: bool = False


@dataclass
class TableRow:
    category: str
    issues: int
    firmware: int
    severity: str = ""


@dataclass
class AggregateReport:
    per_firmware: dict[str, FirmwareRollup] = field(default_factory=dict)
    unique_vulnerable_firmware: int = 0
    category_totals: dict[str, int] = field(default_factory=dict)
    php_table: list[TableRow] = field(default_factory=list)
    dynamic_table: list[TableRow] = field(default_factory=list)
    dynamic_high_subtotal: TableRow | None = None
    dynamic_low_subtotal: TableRow | None = None
    unmapped_raw: dict[str, int] = field(default_factory=dict)

    @property
    def high_impact_firmware(self) -> int:
        return sum(1 for r in self.per_firmware.values() if r.high_impact)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["high_impact_firmware"] = self.high_impact_firmware
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AggregateReport":
        def row(x):
            return TableRow(**x) if x else None

        return cls(
            {k: FirmwareRollup(**v) for k, v in d.get("per_firmware", {}).items()},
            d.get("unique_vulnerable_firmware", 0),
            dict(d.get("category_totals", {})),
            [TableRow(**r) for r in d.get("php_table", [])],
            [TableRow(**r) for r in d.get("dynamic_table", [])],
            row(d.get("dynamic_high_subtotal")),
            row(d.get("dynamic_low_subtotal")),
            dict(d.get("unmapped_raw", {})),
        )


def aggregate(findings: Iterable[Finding]) -> AggregateReport:
    findings = list(findings)
    rollups: dict[str, FirmwareRollup] = defaultdict(FirmwareRollup)
    totals: Counter = Counter()
    static_issues: Counter = Counter()
    static_fw: dict[Category, set] = defaultdict(set)
    dyn_issues: Counter = Counter()
    dyn_fw: dict[Category, set] = defaultdict(set)
    unmapped: Counter = Counter()
    for f in findings:
        r = rollups[f.firmware_id]
        if f.source == Source.STATIC:
            r.static_issue_count += 1
            static_issues[f.category] += 1
            static_fw[f.category].add(f.firmware_id)
        elif f.source == Source.DYNAMIC:
            r.dynamic_issue_count += 1
            dyn_issues[f.category] += 1
            dyn_fw[f.category].add(f.firmware_id)
        else:
            r.manual_issue_count += 1
        r.high_impact = r.high_impact or f.severity == Severity.HIGH
        totals[f.category.value] += 1
        if f.unmapped:
            unmapped[f.raw_category or ""] += 1

    php_table = [TableRow(PHP_LABELS[c], static_issues[c], len(static_fw[c]))
                 for c in PHP_CATEGORIES.values() if static_issues[c]]
    php_table.sort(key=lambda r: (-r.issues, r.category))

    dyn_cats = [c for c in DYNAMIC_ORDER if dyn_issues[c]]
    dyn_cats += sorted((c for c in dyn_issues if c not in DYNAMIC_ORDER), key=lambda c: c.value)
    dynamic_table = [TableRow(c.value, dyn_issues[c], len(dyn_fw[c]), "High" if c in DYNAMIC_HIGH else "Low")
                     for c in dyn_cats]

    def subtotal(label: str, high: bool) -> TableRow:
        cats = [c for c in dyn_cats if (c in DYNAMIC_HIGH) == high]
        fws = set().union(*(dyn_fw[c] for c in cats)) if cats else set()
        return TableRow(label, sum(dyn_issues[c] for c in cats), len(fws), "High" if high else "Low")

    return AggregateReport(
        per_firmware=dict(sorted(rollups.items())),
        unique_vulnerable_firmware=len(rollups),
        category_totals=dict(sorted(totals.items())),
        php_table=php_table,
        dynamic_table=dynamic_table,
        dynamic_high_subtotal=subtotal("Sub-total HIGH impact", True),
        dynamic_low_subtotal=subtotal("Sub-total LOW impact", False),
        unmapped_raw=dict(sorted(unmapped.items())),
    )
