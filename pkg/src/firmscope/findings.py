"""Vulnerability finding taxonomy shared by the scanner and static intake."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable


class Category(str, enum.Enum):
    COMMAND_EXECUTION = "CommandExecution"
    XSS = "XSS"
    CSRF = "CSRF"
    FILE_MANIPULATION = "FileManipulation"
    FILE_INCLUSION = "FileInclusion"
    FILE_DISCLOSURE = "FileDisclosure"
    SQL_INJECTION = "SQLInjection"
    FLOW_CONTROL = "FlowControl"
    CODE_EXECUTION = "CodeExecution"
    HTTP_RESPONSE_SPLITTING = "HTTPResponseSplitting"
    UNSERIALIZE = "Unserialize"
    POP_GADGET = "POPGadget"
    HTTP_HEADER_INJECTION = "HTTPHeaderInjection"
    COOKIE_NO_HTTPONLY = "CookieNoHttpOnly"
    NO_X_CONTENT_TYPE_OPTIONS = "NoXContentTypeOptions"
    NO_X_FRAME_OPTIONS = "NoXFrameOptions"
    BACKUP_FILE = "BackupFile"
    APP_ERROR_INFO = "AppErrorInfo"
    UNMAPPED = "Unmapped"


class Severity(str, enum.Enum):
    HIGH = "High"
    LOW = "Low"


class Source(str, enum.Enum):
    STATIC = "Static"
    DYNAMIC = "Dynamic"
    MANUAL = "Manual"


DYNAMIC_HIGH = frozenset({Category.COMMAND_EXECUTION, Category.XSS, Category.CSRF})
STATIC_HIGH = frozenset({
    Category.COMMAND_EXECUTION,
    Category.CODE_EXECUTION,
    Category.SQL_INJECTION,
    Category.FILE_INCLUSION,
    Category.XSS,
})


def severity_for(category: Category, source: Source) -> Severity:
    if source == Source.DYNAMIC:
        high = DYNAMIC_HIGH
    elif source == Source.STATIC:
        high = STATIC_HIGH
    else:
        high = DYNAMIC_HIGH | STATIC_HIGH
    return Severity.HIGH if category in high else Severity.LOW


@dataclass
class Locator:
    target: str  # URL path or file path
    parameter: str | None = None
    line: int | None = None


@dataclass
class Finding:
    category: Category
    source: Source
    locator: Locator
    evidence: str = ""
    firmware_id: str = ""
    severity: Severity | None = None
    raw_category: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.category = Category(self.category)
        self.source = Source(self.source)
        # severity is a function of (category, source); incoming values are not trusted
        self.severity = severity_for(self.category, self.source)

    @property
    def unmapped(self) -> bool:
        return self.category == Category.UNMAPPED

    @property
    def high(self) -> bool:
        return self.severity == Severity.HIGH

    def key(self) -> tuple:
        return (self.firmware_id, self.category.value, self.source.value, self.locator.target,
                self.locator.parameter or "", self.locator.line or 0)

    def to_dict(self) -> dict:
        d = {
            "category": self.category.value,
            "severity": self.severity.value,
            "source": self.source.value,
            "locator": {"target": self.locator.target, "parameter": self.locator.parameter,
                        "line": self.locator.line},
            "evidence": self.evidence,
            "firmware_id": self.firmware_id,
        }
        if self.raw_category is not None:
            d["raw_category"] = self.raw_category
        if self.extra:
            d["extra"] = self.extra
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Finding":
        loc = d.get("locator") or {}
        return cls(
            category=Category(d["category"]),
            source=Source(d.get("source", "Dynamic")),
            locator=Locator(loc.get("target", ""), loc.get("parameter"), loc.get("line")),
            evidence=d.get("evidence", ""),
            firmware_id=d.get("firmware_id", ""),
            severity=d.get("severity"),
            raw_category=d.get("raw_category"),
            extra=d.get("extra") or {},
        )


def dump_jsonl(findings: Iterable[Finding]) -> str:
    return "".join(json.dumps(f.to_dict(), sort_keys=True) + "\n" for f in findings)


def load_jsonl(text: str) -> list[Finding]:
    return [Finding.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
