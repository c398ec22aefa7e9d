"""Root filesystem detection, sanitization and packing."""

from __future__ import annotations

import io
import json
import logging
import os
import posixpath
import shutil
import stat
import tarfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import fsutil

logger = logging.getLogger(__name__)

KEY_DIRS = ("bin", "sbin", "etc", "usr")
KEY_FILES = ("init", "linuxrc", "bin/sh", "bin/bash", "bin/dash", "bin/busybox")
LINK_FILE_LIMIT = 4096
LINK_PREFIXES = ("/", "./", "../")


class RootFsError(Exception):
    pass


@dataclass
class SymlinkRepair:
    path: str
    target: str
    applied: bool
    reason: str  # TargetExists | TargetMissing | NotTextual


@dataclass
class RootFsCandidate:
    firmware_id: str
    root_rel_path: str
    score: int
    variant: str = "Original"  # "Original" or "Sanitized(k)"
    fs_path: str = ""  # materialized directory on the host
    packed_path: str | None = None
    index: int = 0
    repairs: list[SymlinkRepair] = field(default_factory=list)

    @property
    def label(self) -> str:
        tag = "original" if self.variant == "Original" else self.variant.lower().replace("(", "").replace(")", "")
        return f"c{self.index}-{tag}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RootFsCandidate":
        data = dict(data)
        data["repairs"] = [SymlinkRepair(**r) for r in data.get("repairs", [])]
        return cls(**data)


def _lexists_rel(root: str, rel: str) -> bool:
    return os.path.lexists(os.path.join(root, rel))


def _key_parts(root: str) -> tuple[int, int]:
    dirs = sum(fsutil.is_real_dir(os.path.join(root, d)) for d in KEY_DIRS)
    files = sum(_lexists_rel(root, f) for f in KEY_FILES)
    return dirs, files


def score_dir(path: str | os.PathLike) -> int:
    d, f = _key_parts(os.fspath(path))
    return d + f


def _ancestor(a: str, b: str) -> bool:
    if a == "":
        return b != ""
    return b.startswith(a + "/")


def scan_candidates(tree_path: str | os.PathLike, firmware_id: str = "") -> list[RootFsCandidate]:
    root = os.fspath(tree_path)
    scored: dict[str, tuple[int, int]] = {}
    dirs = [""] + [rel for rel, st in fsutil.walk(root) if stat.S_ISDIR(st.st_mode)]
    for rel in dirs:
        d, f = _key_parts(os.path.join(root, rel) if rel else root)
        if d + f >= 1:
            scored[rel] = (d + f, f)
    dropped = set()
    names = sorted(scored)
    for a in names:
        for b in names:
            if not _ancestor(a, b):
                continue
            # sbin/init or usr/bin/bash of a root are part of that root's userland
            if (b[len(a) + 1:] if a else b).split("/", 1)[0] in KEY_DIRS:
                dropped.add(b)
                continue
            (sa, fa), (sb, fb) = scored[a], scored[b]
            if fa > 0 and fb > 0:
                continue
            dropped.add(a if sa <= sb else b)
    kept = [r for r in names if r not in dropped]
    kept.sort(key=lambda r: (-scored[r][0], 0 if r == "" else r.count("/") + 1, r))
    return [
        RootFsCandidate(firmware_id, r or ".", scored[r][0], fs_path=os.path.join(root, r) if r else root, index=i)
        for i, r in enumerate(kept)
    ]


def _link_string(data: bytes) -> str | None:
    """Decode a link-looking file body, or None when it is not a clean path string."""
    if b"\0" in data:
        return None
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError:
        return None
    if text.endswith("\n"):
        text = text[:-1]
    if not text or "\n" in text or "\r" in text:
        return None
    if any(not (0x20 <= ord(c) < 0x7F) for c in text) or text != text.strip():
        return None
    return text


def detect_broken_symlinks(root: str | os.PathLike) -> list[SymlinkRepair]:
    root = os.fspath(root)
    repairs = []
    for rel, st in fsutil.walk(root):
        if not stat.S_ISREG(st.st_mode) or st.st_size == 0 or st.st_size > LINK_FILE_LIMIT:
            continue
        data = fsutil.read_head(os.path.join(root, rel), LINK_FILE_LIMIT + 1)
        if data is None or not data.startswith(tuple(p.encode() for p in LINK_PREFIXES)):
            continue
        target = _link_string(data)
        if target is None:
            repairs.append(SymlinkRepair(rel, data[:80].decode("ascii", "replace"), False, "NotTextual"))
            continue
        parent = posixpath.dirname("/" + rel)
        guest_target = posixpath.normpath(posixpath.join(parent, target))
        exists = guest_target != "/" + rel and os.path.lexists(fsutil.host_path(root, guest_target))
        repairs.append(SymlinkRepair(rel, target, False, "TargetExists" if exists else "TargetMissing"))
    return repairs


def apply_repairs(root: str | os.PathLike, repairs: list[SymlinkRepair]) -> list[SymlinkRepair]:
    applied = []
    for r in repairs:
        if r.reason != "TargetExists":
            applied.append(r)
            continue
        path = os.path.join(os.fspath(root), r.path)
        os.unlink(path)
        os.symlink(r.target, path)
        applied.append(SymlinkRepair(r.path, r.target, True, r.reason))
    return applied


def generate_variants(candidate: RootFsCandidate, out_dir: str | os.PathLike) -> list[RootFsCandidate]:
    """Original plus one apply-all sanitized copy when a repair is possible.

    Every variant is packed into ``out_dir``.
    """
    out = Path(out_dir)
    repairs = detect_broken_symlinks(candidate.fs_path)
    variants = [candidate]
    candidate.repairs = repairs
    fixable = [r for r in repairs if r.reason == "TargetExists"]
    if fixable and candidate.variant == "Original":
        sanitized = RootFsCandidate(
            candidate.firmware_id, candidate.root_rel_path, candidate.score, "Sanitized(1)",
            index=candidate.index,
        )
        dest = out / "variants" / sanitized.label
        if dest.exists():
            shutil.rmtree(dest)
        try:
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copytree(candidate.fs_path, dest, symlinks=True)
        except (OSError, shutil.Error) as exc:
            raise RootFsError(f"cannot materialize {sanitized.label}: {exc}") from exc
        sanitized.fs_path = str(dest)
        sanitized.repairs = apply_repairs(dest, repairs)
        variants.append(sanitized)
    for v in variants:
        pack_rootfs(v, out)
    return variants


def _tarinfo(tf: tarfile.TarFile, full: str, arcname: str) -> tarfile.TarInfo:
    info = tf.gettarinfo(full, arcname)
    info.mtime = 0
    info.uid = info.gid = 0
    info.uname = info.gname = ""
    return info


def pack_rootfs(candidate: RootFsCandidate, out_dir: str | os.PathLike) -> Path:
    if candidate.score < 1:
        raise RootFsError(f"refusing to pack {candidate.root_rel_path!r}: score {candidate.score}")
    root = candidate.fs_path
    if not os.path.isdir(root):
        raise RootFsError(f"candidate not materialized at {root!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dest = out / f"{candidate.label}.tar"
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w", format=tarfile.GNU_FORMAT) as tf:
        for rel, st in fsutil.walk(root):
            full = os.path.join(root, rel)
            info = _tarinfo(tf, full, rel)
            if info.isreg():
                try:
                    with open(full, "rb") as fh:
                        tf.addfile(info, fh)
                except OSError:
                    logger.warning("unreadable file %s left out of %s", rel, dest.name)
            else:
                tf.addfile(info)
    try:
        tmp = dest.with_suffix(".tmp")
        tmp.write_bytes(buf.getvalue())
        tmp.replace(dest)
    except OSError as exc:
        raise RootFsError(f"cannot write {dest}: {exc}") from exc
    candidate.packed_path = str(dest)
    return dest


def write_candidates(path: str | os.PathLike, candidates: list[RootFsCandidate]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps([c.to_dict() for c in candidates], indent=2), "utf-8")


def load_candidates(path: str | os.PathLike) -> list[RootFsCandidate]:
    return [RootFsCandidate.from_dict(d) for d in json.loads(Path(path).read_text("utf-8"))]
