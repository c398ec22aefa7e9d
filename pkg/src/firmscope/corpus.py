"""Firmware ingestion and the selection filter.

A firmware image enters the pipeline as an already-unpacked directory tree.
``ingest`` copies it into the workspace under a content-derived id and
records whether it looks like a Linux userland with a web interface.
"""

from __future__ import annotations

import contextlib
import fcntl
import hashlib
import json
import logging
import os
import shutil
import stat
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator

from . import fsutil
from .webheur import CONFIG_NAMES, SERVER_NAMES

logger = logging.getLogger(__name__)

LINUX_MARKERS = ("bin/sh", "bin/busybox", "sbin/init", "init", "linuxrc")
WEB_CONTENT_EXTS = frozenset({"html", "shtml", "htm", "php", "asp", "cgi", "pl", "js"})
UNREADABLE_SENTINEL = "UNREADABLE"


class IngestError(Exception):
    pass


@dataclass
class SelectionVerdict:
    is_linux_like: bool = False
    has_web_server_binary: bool = False
    has_web_config: bool = False
    has_web_content: bool = False
    selected: bool = False
    unreadable: int = 0


@dataclass
class FirmwareImage:
    id: str
    source_path: str
    vendor: str | None
    ingested_at: str
    selection: SelectionVerdict = field(default_factory=SelectionVerdict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "FirmwareImage":
        data = dict(data)
        data["selection"] = SelectionVerdict(**data.get("selection", {}))
        return cls(**data)


def _mode_class(st: os.stat_result) -> str:
    mode = st.st_mode
    if stat.S_ISLNK(mode):
        return "l"
    if stat.S_ISDIR(mode):
        return "d"
    if stat.S_ISREG(mode):
        return "x" if mode & 0o111 else "f"
    return "o"


def tree_id(tree_path: str | os.PathLike) -> str:
    """SHA-256 over sorted (path, mode class, content hash) triples.

    Symlinks contribute their target string; unreadable files a fixed sentinel.
    """
    root = os.fspath(tree_path)
    entries = []
    for rel, st in fsutil.walk(root):
        cls = _mode_class(st)
        full = os.path.join(root, rel)
        if cls == "l":
            digest = fsutil.sha256_bytes(os.readlink(full).encode("utf-8", "surrogateescape"))
        elif cls in ("f", "x"):
            try:
                digest = fsutil.sha256_file(full)
            except OSError:
                digest = UNREADABLE_SENTINEL
        else:
            digest = ""
        entries.append((rel, cls, digest))
    entries.sort()
    h = hashlib.sha256()
    for rel, cls, digest in entries:
        h.update(rel.encode("utf-8", "surrogateescape"))
        h.update(b"\0" + cls.encode() + b"\0" + digest.encode() + b"\0")
    return h.hexdigest()


def classify_selection(tree_path: str | os.PathLike) -> SelectionVerdict:
    verdict = SelectionVerdict()
    root = os.fspath(tree_path)
    for rel, st in fsutil.walk(root):
        if not os.access(os.path.join(root, rel), os.R_OK, follow_symlinks=False):
            verdict.unreadable += 1
        if stat.S_ISDIR(st.st_mode):
            continue
        name = rel.rsplit("/", 1)[-1]
        if any(rel == m or rel.endswith("/" + m) for m in LINUX_MARKERS):
            verdict.is_linux_like = True
        if name in SERVER_NAMES:
            verdict.has_web_server_binary = True
        if name in CONFIG_NAMES:
            verdict.has_web_config = True
        if "." in name and name.rsplit(".", 1)[1].lower() in WEB_CONTENT_EXTS:
            verdict.has_web_content = True
    verdict.selected = verdict.is_linux_like and (
        verdict.has_web_server_binary or verdict.has_web_config or verdict.has_web_content
    )
    return verdict


class Workspace:
    """On-disk layout: ``<root>/<firmware id>/{manifest.json, tree/, ...}``."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def firmware_dir(self, firmware_id: str) -> Path:
        return self.root / firmware_id

    def manifest_path(self, firmware_id: str) -> Path:
        return self.firmware_dir(firmware_id) / "manifest.json"

    def tree(self, firmware_id: str) -> Path:
        return self.firmware_dir(firmware_id) / "tree"

    def ids(self) -> list[str]:
        if not self.root.is_dir():
            return []
        return sorted(p.name for p in self.root.iterdir() if (p / "manifest.json").is_file())

    def load(self, firmware_id: str) -> FirmwareImage:
        return FirmwareImage.from_dict(json.loads(self.manifest_path(firmware_id).read_text("utf-8")))

    @contextlib.contextmanager
    def lock(self, firmware_id: str) -> Iterator[None]:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / f".{firmware_id}.lock", "w") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)


def _copy_tree(src: str, dst: Path) -> None:
    try:
        shutil.copytree(src, dst, symlinks=True, ignore_dangling_symlinks=True)
    except shutil.Error as exc:
        # partial copies are kept; broken entries are already in the id stream
        logger.warning("copied %s with %d errors", src, len(exc.args[0]))


def ingest(tree_path: str | os.PathLike, vendor: str | None = None,
           workspace: str | os.PathLike | Workspace = "workspace") -> FirmwareImage:
    src = os.fspath(tree_path)
    if not os.path.isdir(src) or not os.access(src, os.R_OK | os.X_OK):
        raise IngestError(f"cannot read firmware tree {src!r}")
    ws = workspace if isinstance(workspace, Workspace) else Workspace(workspace)
    fid = tree_id(src)
    with ws.lock(fid):
        manifest = ws.manifest_path(fid)
        if manifest.is_file():
            return ws.load(fid)
        fw = FirmwareImage(
            id=fid,
            source_path=os.path.abspath(src),
            vendor=vendor,
            ingested_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            selection=classify_selection(src),
        )
        try:
            fdir = ws.firmware_dir(fid)
            fdir.mkdir(parents=True, exist_ok=True)
            if not ws.tree(fid).exists():
                _copy_tree(src, ws.tree(fid))
            tmp = manifest.with_suffix(".tmp")
            tmp.write_text(json.dumps(fw.to_dict(), indent=2), "utf-8")
            tmp.replace(manifest)
        except OSError as exc:
            raise IngestError(f"workspace write failed for {fid}: {exc}") from exc
    logger.info("ingested %s as %s (selected=%s)", src, fid[:12], fw.selection.selected)
    return fw
