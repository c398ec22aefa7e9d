"""Snapshots, filesystem diffs, the injection oracle, and HTTP transcripts."""

from __future__ import annotations

import enum
import json
import os
import posixpath
import re
import stat
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from urllib.parse import unquote_plus

from . import fsutil
from .findings import Category, Finding, Locator, Source

PSEUDO_TREES = frozenset({"proc", "sys", "dev"})
BODY_LIMIT = 256 * 1024


class SnapshotLabel(str, enum.Enum):
    PRE_EMULATION = "PreEmulation"
    POST_BOOT = "PostBoot"
    POST_SCAN = "PostScan"

    @property
    def rank(self) -> int:
        return list(SnapshotLabel).index(self)


@dataclass(frozen=True, order=True)
class Service:
    proto: str
    port: int
    program: str = ""


@dataclass
class FileEntry:
    size: int
    mtime: int
    content_hash: str


@dataclass
class Snapshot:
    label: SnapshotLabel
    files: dict[str, FileEntry] = field(default_factory=dict)
    services: list[Service] = field(default_factory=list)
    taken_at: float = 0.0

    def to_dict(self) -> dict:
        return {
            "label": self.label.value,
            "taken_at": self.taken_at,
            "files": {p: asdict(e) for p, e in sorted(self.files.items())},
            "services": [asdict(s) for s in self.services],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Snapshot":
        return cls(
            SnapshotLabel(d["label"]),
            {p: FileEntry(**e) for p, e in d["files"].items()},
            [Service(**s) for s in d.get("services", [])],
            d.get("taken_at", 0.0),
        )

    def save(self, path: str | os.PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), "utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Snapshot":
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))


def manifest_from_dir(root: str | os.PathLike) -> dict[str, FileEntry]:
    """Manifest of a guest tree, keyed by guest-absolute path."""
    root = os.fspath(root)
    files = {}
    for rel, st in fsutil.walk(root, skip_dirs=PSEUDO_TREES):
        full = os.path.join(root, rel)
        if stat.S_ISREG(st.st_mode):
            try:
                digest = fsutil.sha256_file(full)
            except OSError:
                digest = "unreadable"
        elif stat.S_ISLNK(st.st_mode):
            digest = "link:" + fsutil.sha256_bytes(os.readlink(full).encode("utf-8", "surrogateescape"))
        else:
            continue
        files["/" + rel] = FileEntry(st.st_size, int(st.st_mtime), digest)
    return files


TCP_LISTEN = "0A"


def parse_proc_net(text: str, proto: str = "TCP", programs: dict[str, str] | None = None) -> list[Service]:
    """Listening sockets from a /proc/net/{tcp,udp,tcp6,udp6} table.

    ``programs`` maps socket inode to process name when the caller could
    resolve it from /proc/<pid>/fd.
    """
    programs = programs or {}
    proto = proto.upper()
    seen = set()
    out = []
    for line in text.splitlines()[1:]:
        cols = line.split()
        if len(cols) < 10:
            continue
        local, state, inode = cols[1], cols[3], cols[9]
        if proto == "TCP" and state != TCP_LISTEN:
            continue
        if proto == "UDP" and not cols[2].endswith(":0000"):
            continue
        port = int(local.rsplit(":", 1)[1], 16)
        svc = Service(proto, port, programs.get(inode, ""))
        if svc not in seen:
            seen.add(svc)
            out.append(svc)
    return sorted(out)


@dataclass
class SnapshotDiff:
    added: list[str] = field(default_factory=list)
    modified: list[str] = field(default_factory=list)
    deleted: list[str] = field(default_factory=list)
    new_services: list[Service] = field(default_factory=list)
    log_files: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.added or self.modified or self.deleted or self.new_services)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["new_services"] = [asdict(s) for s in self.new_services]
        return d


LOG_RE = re.compile(r"(\.log$|^/var/log/|^/tmp/log/)")


def diff_snapshots(a: Snapshot, b: Snapshot) -> SnapshotDiff:
    """Changes from ``a`` to ``b``. Modification is judged by content hash only."""
    before, after = a.files, b.files
    added = sorted(set(after) - set(before))
    deleted = sorted(set(before) - set(after))
    modified = sorted(p for p in set(after) & set(before) if after[p].content_hash != before[p].content_hash)
    old = set(a.services)
    new_services = [s for s in b.services if s not in old]
    log_files = sorted(p for p in added + modified if LOG_RE.search(p))
    return SnapshotDiff(added, modified, deleted, new_services, log_files)


def detect_injection_artifacts(diff: SnapshotDiff, marker_prefix: str, firmware_id: str = "") -> list[Finding]:
    findings = []
    for path in diff.added:
        if posixpath.basename(path).startswith(marker_prefix):
            findings.append(Finding(
                Category.COMMAND_EXECUTION, Source.DYNAMIC, Locator(path),
                evidence=f"marker file {path} appeared during the scan",
                firmware_id=firmware_id,
                extra={"artifact": path},
            ))
    return findings


def _clip(body: bytes | str | None) -> tuple[str, bool]:
    if body is None:
        return "", False
    if isinstance(body, str):
        body = body.encode("utf-8", "replace")
    truncated = len(body) > BODY_LIMIT
    return body[:BODY_LIMIT].decode("utf-8", "replace"), truncated


class TranscriptRecorder:
    """Append-only JSON Lines transcript; one instance per session."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path else None
        self.entries: list[dict] = []
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, method: str, url: str, headers: dict, body, status: int | None,
               response_headers: dict, response_body) -> dict:
        req_body, req_trunc = _clip(body)
        resp_body, resp_trunc = _clip(response_body)
        with self._lock:
            entry = {
                "seq": len(self.entries),
                "t": time.time(),
                "request": {"method": method, "url": url, "headers": dict(headers), "body": req_body,
                            "truncated": req_trunc},
                "response": {"status": status, "headers": dict(response_headers), "body": resp_body,
                             "truncated": resp_trunc},
            }
            self.entries.append(entry)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry) + "\n")
        return entry


def load_transcript(path: str | os.PathLike) -> list[dict]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entries.append(json.loads(line))
    return entries


@dataclass
class TriggerSearch:
    matches: list[dict]
    window: list[dict]
    full_window: bool


def _request_text(entry: dict) -> str:
    req = entry["request"]
    return unquote_plus(req.get("url", "")) + "\n" + unquote_plus(req.get("body") or "")


def find_trigger_requests(transcript: list[dict], artifact_name: str) -> TriggerSearch:
    """Entries whose request carries the artifact's nonce, in sequence order.

    The window holds every entry up to the last match, for replaying inputs
    that may have acted in combination. When nothing matches, the whole
    transcript is the window.
    """
    needle = posixpath.basename(artifact_name)
    ordered = sorted(transcript, key=lambda e: e["seq"])
    matches = [e for e in ordered if needle in _request_text(e)]
    if not matches:
        return TriggerSearch([], ordered, True)
    last = matches[-1]["seq"]
    return TriggerSearch(matches, [e for e in ordered if e["seq"] <= last], False)
