"""Small filesystem helpers shared by the scanning stages.

Firmware trees are hostile input: absolute symlinks point at the analysis
host, permissions are often broken, and device nodes may appear anywhere.
Everything here works on ``lstat`` results and never follows links.
"""

from __future__ import annotations

import hashlib
import logging
import os
import posixpath
import stat
from pathlib import Path
from typing import Iterator

logger = logging.getLogger(__name__)

CHUNK = 1 << 16


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(CHUNK)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def read_head(path: str | os.PathLike, limit: int) -> bytes | None:
    """Return at most ``limit`` bytes of a regular file, or None if unreadable."""
    try:
        with open(path, "rb") as fh:
            return fh.read(limit)
    except OSError:
        return None


def walk(root: str | os.PathLike, skip_dirs: frozenset[str] = frozenset()) -> Iterator[tuple[str, os.stat_result]]:
    """Yield ``(relative_posix_path, lstat)`` for every entry below ``root``.

    Entries come out in sorted order so callers get a stable enumeration.
    Directories named in ``skip_dirs`` (relative paths) are not descended.
    Unreadable directories are logged and skipped.
    """
    root = os.fspath(root)
    stack = [""]
    while stack:
        rel_dir = stack.pop()
        abs_dir = os.path.join(root, rel_dir) if rel_dir else root
        try:
            names = sorted(os.listdir(abs_dir))
        except OSError as exc:
            logger.debug("skipping unreadable directory %s: %s", abs_dir, exc)
            continue
        subdirs = []
        for name in names:
            rel = f"{rel_dir}/{name}" if rel_dir else name
            try:
                st = os.lstat(os.path.join(abs_dir, name))
            except OSError:
                continue
            yield rel, st
            if stat.S_ISDIR(st.st_mode) and rel not in skip_dirs:
                subdirs.append(rel)
        stack.extend(reversed(subdirs))


def is_real_dir(path: str | os.PathLike) -> bool:
    try:
        return stat.S_ISDIR(os.lstat(path).st_mode)
    except OSError:
        return False


def is_regular(path: str | os.PathLike) -> bool:
    try:
        return stat.S_ISREG(os.lstat(path).st_mode)
    except OSError:
        return False


def resolve_in_root(root: str | os.PathLike, guest_path: str, cwd: str = "/", max_hops: int = 16) -> str | None:
    """Resolve ``guest_path`` as the guest would see it with ``root`` as ``/``.

    Symlinks are followed inside the root (absolute targets are re-rooted).
    Returns the guest-absolute path of the final entry, or None when it does
    not exist or the chain is too long.
    """
    root = os.fspath(root)
    if not guest_path.startswith("/"):
        guest_path = posixpath.join(cwd, guest_path)
    parts = [p for p in posixpath.normpath(guest_path).split("/") if p]
    resolved: list[str] = []
    hops = 0
    while parts:
        name = parts.pop(0)
        if name == ".":
            continue
        if name == "..":
            if resolved:
                resolved.pop()
            continue
        candidate = "/" + "/".join(resolved + [name])
        host = root + candidate
        try:
            st = os.lstat(host)
        except OSError:
            return None
        if stat.S_ISLNK(st.st_mode):
            hops += 1
            if hops > max_hops:
                return None
            target = os.readlink(host)
            if target.startswith("/"):
                resolved = []
            parts = [p for p in target.split("/") if p] + parts
            continue
        resolved.append(name)
    return "/" + "/".join(resolved)


def host_path(root: str | os.PathLike, guest_path: str) -> Path:
    """Map a guest-absolute path onto the host without escaping ``root``."""
    norm = posixpath.normpath("/" + guest_path.lstrip("/"))
    return Path(root) / norm.lstrip("/")
