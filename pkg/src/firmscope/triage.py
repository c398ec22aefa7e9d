"""Failure classification and sample-based extrapolation.

Failures are classified from session logs with an ordered pattern table.
Because classification of real logs needs a human in the loop, a random
sample is drawn, and cause proportions are extrapolated to the whole
failure population with a finite-population-corrected normal interval.
"""

from __future__ import annotations

import enum
import math
import os
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Iterable

from .emulation.base import CHROOT_MARKER, SHELL_ENTRIES
from . import fsutil

DEFAULT_Z = 1.96
DEFAULT_HALF_WIDTH = 0.10
PLANNING_P = 0.5
# conventional two-sided z values; other levels fall back to the normal quantile
Z_TABLE = {0.80: 1.282, 0.90: 1.645, 0.95: 1.96, 0.98: 2.326, 0.99: 2.576}


class Stage(str, enum.Enum):
    CHROOT = "Chroot"
    WEB_SERVER = "WebServer"


class Cause(str, enum.Enum):
    EXEC_FORMAT_ERROR = "ExecFormatError"
    PARTIAL_FIRMWARE = "PartialFirmware"
    FALSE_POSITIVE_CHROOT = "FalsePositiveChroot"
    MISSING_DEVICE = "MissingDevice"
    INIT_PID = "InitPid"
    WEB_LAUNCH_ERROR = "WebLaunchError"
    UNKNOWN = "Unknown"


class Fixability(str, enum.Enum):
    EASY = "Easy"
    HARD = "Hard"
    UNKNOWN = "Unknown"


FIXABILITY = {
    Cause.EXEC_FORMAT_ERROR: Fixability.EASY,
    Cause.FALSE_POSITIVE_CHROOT: Fixability.EASY,
    # fixable only by swapping in generic utilities, which drifts from the shipped firmware
    Cause.PARTIAL_FIRMWARE: Fixability.HARD,
    Cause.MISSING_DEVICE: Fixability.HARD,
    Cause.INIT_PID: Fixability.EASY,
    Cause.WEB_LAUNCH_ERROR: Fixability.EASY,
    Cause.UNKNOWN: Fixability.UNKNOWN,
}

CHROOT_ORDER = (Cause.EXEC_FORMAT_ERROR, Cause.PARTIAL_FIRMWARE, Cause.FALSE_POSITIVE_CHROOT)
WEB_ORDER = (Cause.MISSING_DEVICE, Cause.INIT_PID, Cause.WEB_LAUNCH_ERROR)

_ERR = r"(?:no such|not found|cannot|can't|could not|couldn't|unable|fail|error|missing)"


@dataclass(frozen=True)
class Rule:
    stage: Stage
    cause: Cause
    pattern: re.Pattern

    @classmethod
    def make(cls, stage: str | Stage, cause: str | Cause, regex: str) -> "Rule":
        return cls(Stage(stage), Cause(cause), re.compile(regex, re.I | re.M))


BUILTIN_RULES = (
    Rule.make(Stage.CHROOT, Cause.EXEC_FORMAT_ERROR, r"^.*(?:exec format error|illegal instruction).*$"),
    Rule.make(Stage.WEB_SERVER, Cause.MISSING_DEVICE, rf"^.*\b(?:eth\d+|br\d+)\b.*{_ERR}.*$"),
    Rule.make(Stage.WEB_SERVER, Cause.MISSING_DEVICE, rf"^.*{_ERR}.*\b(?:eth\d+|br\d+)\b.*$"),
    Rule.make(Stage.WEB_SERVER, Cause.MISSING_DEVICE, r"^.*/dev/(?:gpio|mtd|nvram)\S*.*$"),
    Rule.make(Stage.WEB_SERVER, Cause.MISSING_DEVICE, r"^.*No such device.*$"),
    Rule.make(Stage.WEB_SERVER, Cause.INIT_PID, r"^.*(?:must be run as PID 1|Init is the parent of all processes).*$"),
    Rule.make(Stage.WEB_SERVER, Cause.WEB_LAUNCH_ERROR, r"^.*loading plugins finally failed.*$"),
    Rule.make(Stage.WEB_SERVER, Cause.WEB_LAUNCH_ERROR, r"^.*opening errorlog .* failed.*$"),
)
TIMEOUT_RE = re.compile(r"^.*(?:timed? ?out|did not settle|BootTimeout).*$", re.I | re.M)


@dataclass
class FailureRecord:
    firmware_id: str
    stage: Stage
    cause: Cause
    fixability: Fixability
    evidence: str = ""

    def __post_init__(self):
        self.stage = Stage(self.stage)
        self.cause = Cause(self.cause)
        self.fixability = Fixability(self.fixability)

    def to_dict(self) -> dict:
        return {"firmware_id": self.firmware_id, "stage": self.stage.value, "cause": self.cause.value,
                "fixability": self.fixability.value, "evidence": self.evidence}

    @classmethod
    def from_dict(cls, d: dict) -> "FailureRecord":
        return cls(d["firmware_id"], d["stage"], d["cause"], d["fixability"], d.get("evidence", ""))


@dataclass
class RootfsFacts:
    shell_entries: tuple[str, ...] = ()

    @property
    def has_shell(self) -> bool:
        return bool(self.shell_entries)


def rootfs_facts(rootfs: str | os.PathLike) -> RootfsFacts:
    root = os.fspath(rootfs)
    present = []
    for entry in SHELL_ENTRIES:
        resolved = fsutil.resolve_in_root(root, entry)
        if resolved is not None and fsutil.is_regular(fsutil.host_path(root, resolved)):
            present.append(entry)
    return RootfsFacts(tuple(present))


class Classifier:
    """Ordered pattern table. Extra rules slot in by cause precedence."""

    def __init__(self, extra_rules: Iterable[Rule] = ()):
        self.rules = list(BUILTIN_RULES) + list(extra_rules)

    def _first(self, stage: Stage, cause: Cause, log: str) -> str | None:
        for rule in self.rules:
            if rule.stage == stage and rule.cause == cause:
                m = rule.pattern.search(log)
                if m:
                    return m.group(0).strip()
        return None

    def classify_chroot(self, firmware_id: str, boot_log: str, facts: RootfsFacts | None = None,
                        timed_out: bool = False) -> FailureRecord:
        for cause in CHROOT_ORDER:
            evidence = None
            if cause == Cause.PARTIAL_FIRMWARE:
                if facts is not None and not facts.has_shell:
                    evidence = "rootfs has none of " + ", ".join(SHELL_ENTRIES)
            elif cause == Cause.FALSE_POSITIVE_CHROOT:
                if CHROOT_MARKER in boot_log:
                    m = TIMEOUT_RE.search(boot_log)
                    if m or timed_out:
                        evidence = m.group(0).strip() if m else "supervisor timeout after chroot marker"
            else:
                evidence = self._first(Stage.CHROOT, cause, boot_log)
            if evidence is not None:
                return FailureRecord(firmware_id, Stage.CHROOT, cause, FIXABILITY[cause], evidence)
        return FailureRecord(firmware_id, Stage.CHROOT, Cause.UNKNOWN, Fixability.UNKNOWN, _tail(boot_log))

    def classify_web(self, firmware_id: str, web_log: str) -> FailureRecord:
        for cause in WEB_ORDER:
            evidence = self._first(Stage.WEB_SERVER, cause, web_log)
            if evidence is not None:
                return FailureRecord(firmware_id, Stage.WEB_SERVER, cause, FIXABILITY[cause], evidence)
        return FailureRecord(firmware_id, Stage.WEB_SERVER, Cause.UNKNOWN, Fixability.UNKNOWN, _tail(web_log))


def _tail(log: str, lines: int = 3) -> str:
    return "\n".join(log.strip().splitlines()[-lines:])


_DEFAULT = Classifier()


def classify_chroot_failure(boot_log: str, facts: RootfsFacts | None = None, firmware_id: str = "",
                            timed_out: bool = False, classifier: Classifier | None = None) -> FailureRecord:
    return (classifier or _DEFAULT).classify_chroot(firmware_id, boot_log, facts, timed_out)


def classify_web_failure(web_log: str, firmware_id: str = "", classifier: Classifier | None = None) -> FailureRecord:
    return (classifier or _DEFAULT).classify_web(firmware_id, web_log)


# --- statistics ---

def z_for_confidence(confidence: float) -> float:
    if not 0 < confidence < 1:
        raise ValueError("confidence must be in (0, 1)")
    for level, z in Z_TABLE.items():
        if math.isclose(level, confidence):
            return z
    return NormalDist().inv_cdf(0.5 + confidence / 2)


@dataclass(frozen=True)
class ProportionEstimate:
    k: int
    n: int
    N: int
    z: float
    p: float
    half_width: float
    lower: float
    upper: float

    def as_percent(self) -> str:
        return f"{self.p * 100:.1f}% ± {self.half_width * 100:.1f}%"

    def to_dict(self) -> dict:
        return {"k": self.k, "n": self.n, "N": self.N, "z": self.z, "p": self.p, "half_width": self.half_width,
                "lower": self.lower, "upper": self.upper}


def fpc(n: int, N: int) -> float:
    return math.sqrt((N - n) / (N - 1)) if N > 1 else 0.0


def estimate_proportion(k: int, n: int, N: int, z: float = DEFAULT_Z) -> ProportionEstimate:
    if not (isinstance(k, int) and isinstance(n, int) and isinstance(N, int)):
        raise TypeError("k, n and N must be integers")
    if n < 1 or k < 0 or k > n or N < n:
        raise ValueError(f"need 0 <= k <= n <= N and n >= 1 (got k={k}, n={n}, N={N})")
    if z <= 0:
        raise ValueError("z must be positive")
    p = k / n
    half = z * math.sqrt(p * (1 - p) / n) * fpc(n, N)
    return ProportionEstimate(k, n, N, z, p, half, max(0.0, p - half), min(1.0, p + half))


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


@dataclass
class SamplePlan:
    N: int
    e: float
    z: float
    p0: float
    n: int
    seed: int | None = None
    indices: list[int] = field(default_factory=list)

    @property
    def n0(self) -> float:
        return self.z ** 2 * self.p0 * (1 - self.p0) / self.e ** 2

    def to_dict(self) -> dict:
        return {"N": self.N, "e": self.e, "z": self.z, "p0": self.p0, "n0": self.n0, "n": self.n,
                "seed": self.seed, "indices": list(self.indices)}


def sample_size(N: int, e: float = DEFAULT_HALF_WIDTH, z: float = DEFAULT_Z, p0: float = PLANNING_P) -> int:
    if N < 1:
        raise ValueError("population must be at least 1")
    if e <= 0 or z <= 0:
        raise ValueError("half-width and z must be positive")
    n0 = z ** 2 * p0 * (1 - p0) / e ** 2
    n = round_half_up(n0 / (1 + (n0 - 1) / N))
    return min(max(n, 1), N)


def plan_sample(N: int, e: float = DEFAULT_HALF_WIDTH, z: float = DEFAULT_Z, seed: int | None = 0,
                p0: float = PLANNING_P) -> SamplePlan:
    n = sample_size(N, e, z, p0)
    indices = sorted(random.Random(seed).sample(range(N), n)) if seed is not None else []
    return SamplePlan(N, e, z, p0, n, seed, indices)


@dataclass(frozen=True)
class EasyFixBound:
    stage: Stage
    estimate: ProportionEstimate

    @property
    def lower_bound(self) -> float:
        return self.estimate.lower

    def to_dict(self) -> dict:
        return {"stage": self.stage.value, "estimate": self.estimate.to_dict(), "lower_bound": self.lower_bound}


def easy_fix_bound(records: Iterable[FailureRecord], stage: Stage | str, N: int,
                   z: float = DEFAULT_Z) -> EasyFixBound:
    stage = Stage(stage)
    sample = [r for r in records if r.stage == stage]
    if not sample:
        raise ValueError(f"no classified {stage.value} records in the sample")
    k = sum(1 for r in sample if r.fixability == Fixability.EASY)
    return EasyFixBound(stage, estimate_proportion(k, len(sample), max(N, len(sample)), z))


def cause_estimates(records: Iterable[FailureRecord], stage: Stage | str, N: int,
                    z: float = DEFAULT_Z) -> dict[str, ProportionEstimate]:
    stage = Stage(stage)
    sample = [r for r in records if r.stage == stage]
    if not sample:
        return {}
    counts = Counter(r.cause for r in sample)
    N = max(N, len(sample))
    return {c.value: estimate_proportion(counts[c], len(sample), N, z) for c in Cause if counts[c]}


def draw_sample(records: list[FailureRecord], plan: SamplePlan) -> list[FailureRecord]:
    if plan.N != len(records):
        raise ValueError("plan population does not match the record count")
    return [records[i] for i in plan.indices]


def rules_from_section(section) -> list[Rule]:
    """Rules from ``name = stage | cause | regex`` entries of a config section."""
    rules = []
    for name, value in section.items():
        parts = [p.strip() for p in value.split("|", 2)]
        if len(parts) != 3:
            raise ValueError(f"pattern {name!r} must be 'stage | cause | regex'")
        rules.append(Rule.make(*parts))
    return rules
