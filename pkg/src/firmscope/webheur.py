"""Web server, configuration and document-root heuristics.

Given a candidate root filesystem this module answers: which web server
binaries ship in it, what their configs say, where the web content lives,
which URLs are worth scanning, and how to start the server.
"""

from __future__ import annotations

import enum
import os
import posixpath
import re
import stat
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import quote

from . import fsutil


class ServerKind(str, enum.Enum):
    HTTPD = "Httpd"
    BOA = "Boa"
    LIGHTTPD = "Lighttpd"
    THTTPD = "Thttpd"
    MINIHTTPD = "Minihttpd"
    WEBS = "Webs"
    GOAHEAD = "Goahead"
    UNKNOWN = "Unknown"


SERVER_NAMES: dict[str, ServerKind] = {
    "httpd": ServerKind.HTTPD,
    "boa": ServerKind.BOA,
    "lighttpd": ServerKind.LIGHTTPD,
    "thttpd": ServerKind.THTTPD,
    "minihttpd": ServerKind.MINIHTTPD,
    "mini_httpd": ServerKind.MINIHTTPD,
    "webs": ServerKind.WEBS,
    "goahead": ServerKind.GOAHEAD,
}

CONFIG_FOR_KIND: dict[ServerKind, str] = {
    ServerKind.HTTPD: "httpd.conf",
    ServerKind.BOA: "boa.conf",
    ServerKind.LIGHTTPD: "lighttpd.conf",
    ServerKind.THTTPD: "thttpd.conf",
    ServerKind.MINIHTTPD: "mini_httpd.conf",
}
CONFIG_NAMES = frozenset(CONFIG_FOR_KIND.values())

# flag used to pass a config file, and to pass a bare document root
CONFIG_FLAG = {
    ServerKind.BOA: "-f",
    ServerKind.LIGHTTPD: "-f",
    ServerKind.THTTPD: "-C",
    ServerKind.MINIHTTPD: "-C",
    ServerKind.HTTPD: "-c",
}
DOCROOT_FLAG = {
    ServerKind.THTTPD: "-d",
    ServerKind.MINIHTTPD: "-d",
    ServerKind.HTTPD: "-h",
    ServerKind.GOAHEAD: "",  # positional
}

INDEX_STEMS = ("index", "default")
INDEX_EXTS = frozenset({"html", "htm", "shtml", "php", "asp", "cgi"})
SITEMAP_EXTS = frozenset({"html", "htm", "shtml", "php", "asp", "cgi", "pl", "sh"})
ASSET_EXTS = frozenset({"png", "jpg", "jpeg", "gif", "ico", "css", "svg", "woff"})
TECH_FOR_EXT = {
    "cgi": "CGI",
    "php": "PHP",
    "pl": "Perl",
    "sh": "Shell",
    "html": "HTML",
    "htm": "HTML",
    "shtml": "HTML",
}

CERT_RE = re.compile(rb"-----BEGIN CERTIFICATE-----")
KEY_RE = re.compile(rb"-----BEGIN (?:RSA |EC )?PRIVATE KEY-----")
HTTPS_SCAN_LIMIT = 4 << 20


@dataclass
class ServerConfig:
    document_root: str | None = None
    port: int | None = None
    cgi_path: str | None = None
    source: str = "Fallback"


@dataclass
class WebServerProfile:
    kind: ServerKind
    binary_rel_path: str
    config_rel_path: str | None = None
    parsed: ServerConfig | None = None
    launch_commands: list[str] = field(default_factory=list)


@dataclass
class DocRoot:
    dir_rel_path: str
    index_files: list[str]
    technologies: set[str] = field(default_factory=set)
    origin: str = "Discovered"

    def __post_init__(self):
        if not self.index_files:
            raise ValueError(f"docroot {self.dir_rel_path!r} has no index file")
        prefix = "" if self.dir_rel_path in ("", ".") else self.dir_rel_path.rstrip("/") + "/"
        for f in self.index_files:
            if not f.startswith(prefix):
                raise ValueError(f"index file {f!r} is outside docroot {self.dir_rel_path!r}")


@dataclass
class SiteMap:
    docroot: DocRoot
    urls: list[str]


def _ext(name: str) -> str:
    return name.rsplit(".", 1)[1].lower() if "." in name else ""


def _guest(rel: str) -> str:
    return "/" + rel.lstrip("/")


def _is_ancestor(a: str, b: str) -> bool:
    """True when directory ``a`` is a strict ancestor of ``b`` (relative paths)."""
    if a in ("", "."):
        return b not in ("", ".")
    return b.startswith(a.rstrip("/") + "/")


def kind_for_binary(path: str) -> ServerKind:
    return SERVER_NAMES.get(posixpath.basename(path), ServerKind.UNKNOWN)


def _config_rank(binary_rel: str, config_rel: str) -> tuple:
    bin_parts = binary_rel.split("/")[:-1]
    cfg_parts = config_rel.split("/")[:-1]
    common = 0
    for a, b in zip(bin_parts, cfg_parts):
        if a != b:
            break
        common += 1
    if common > 0:
        tier = 0
    elif cfg_parts[:1] == ["etc"]:
        tier = 1
    else:
        tier = 2
    return (tier, -common, len(cfg_parts), config_rel)


def find_web_servers(rootfs: str | os.PathLike) -> list[WebServerProfile]:
    root = os.fspath(rootfs)
    binaries: list[str] = []
    configs: dict[str, list[str]] = {}
    for rel, st in fsutil.walk(root):
        if stat.S_ISDIR(st.st_mode):
            continue
        name = rel.rsplit("/", 1)[-1]
        if name in SERVER_NAMES and (stat.S_ISREG(st.st_mode) or stat.S_ISLNK(st.st_mode)):
            binaries.append(rel)
        elif name in CONFIG_NAMES and stat.S_ISREG(st.st_mode):
            configs.setdefault(name, []).append(rel)
    profiles = []
    for rel in binaries:
        kind = kind_for_binary(rel)
        candidates = configs.get(CONFIG_FOR_KIND.get(kind, ""), [])
        config_rel = min(candidates, key=lambda c: _config_rank(rel, c)) if candidates else None
        parsed = None
        if config_rel is not None:
            text = (fsutil.read_head(os.path.join(root, config_rel), 1 << 20) or b"").decode("utf-8", "replace")
            parsed = parse_server_config(kind, text)
        profiles.append(WebServerProfile(kind, rel, config_rel, parsed))
    return profiles


_LIGHTTPD_RE = {
    "document_root": re.compile(r'^server\.document-root\s*=\s*"([^"]*)"'),
    "port": re.compile(r"^server\.port\s*=\s*(\d+)"),
    "cgi_path": re.compile(r'^alias\.url\s*\+?=.*?"/cgi-bin/"\s*=>\s*"([^"]+)"'),
}
_KEYWORD_RE = {
    "document_root": re.compile(r"^(?:DocumentRoot|dir|data_dir)(?:\s*=\s*|\s+)\"?([^\"\s]+)", re.I),
    "port": re.compile(r"^(?:Port|Listen)(?:\s*=\s*|\s+)(?:[\d.]+:)?(\d+)\s*$", re.I),
    "cgi_path": re.compile(r"^(?:ScriptAlias\s+\S+\s+\"?([^\"\s]+)|cgipat(?:\s*=\s*|\s+)(\S+))", re.I),
}


def parse_server_config(kind: ServerKind, text: str | bytes) -> ServerConfig:
    if isinstance(text, bytes):
        text = text.decode("utf-8", "replace")
    patterns = _LIGHTTPD_RE if kind == ServerKind.LIGHTTPD else _KEYWORD_RE
    found: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for key, rx in patterns.items():
            if key in found:
                continue
            m = rx.match(line)
            if m:
                found[key] = next(g for g in m.groups() if g is not None)
    cfg = ServerConfig()
    cfg.document_root = found.get("document_root")
    cfg.cgi_path = found.get("cgi_path")
    if "port" in found and 1 <= int(found["port"]) <= 65535:
        cfg.port = int(found["port"])
    if cfg.document_root or cfg.port or cfg.cgi_path:
        cfg.source = "ConfigFile"
    return cfg


def _is_index(name: str) -> bool:
    stem, _, ext = name.rpartition(".")
    return stem.lower() in INDEX_STEMS and ext.lower() in INDEX_EXTS


def _technologies(files: list[str]) -> set[str]:
    return {TECH_FOR_EXT[e] for e in map(_ext, files) if e in TECH_FOR_EXT}


def discover_docroots(rootfs: str | os.PathLike) -> list[DocRoot]:
    """Maximal (shallowest) directories holding an index file."""
    root = os.fspath(rootfs)
    index_files: list[str] = []
    all_files: list[str] = []
    for rel, st in fsutil.walk(root):
        if stat.S_ISREG(st.st_mode):
            all_files.append(rel)
            if _is_index(rel.rsplit("/", 1)[-1]):
                index_files.append(rel)
    dirs = sorted({posixpath.dirname(f) for f in index_files})
    maximal = [d for d in dirs if not any(_is_ancestor(o, d) for o in dirs if o != d)]
    result = []
    for d in maximal:
        under = [f for f in index_files if d == "" or f.startswith(d + "/")]
        files = [f for f in all_files if d == "" or f.startswith(d + "/")]
        result.append(DocRoot(d, under, _technologies(files), "Discovered"))
    return result


def docroot_from_config(rootfs: str | os.PathLike, guest_dir: str) -> DocRoot | None:
    """Build a DocRoot for a configured document root if it has an index file."""
    root = os.fspath(rootfs)
    resolved = fsutil.resolve_in_root(root, guest_dir)
    if resolved is None or not fsutil.is_real_dir(fsutil.host_path(root, resolved)):
        return None
    rel = resolved.lstrip("/")
    base = os.path.join(root, rel) if rel else root
    files = [f"{rel}/{r}" if rel else r for r, st in fsutil.walk(base) if stat.S_ISREG(st.st_mode)]
    index = [f for f in files if _is_index(f.rsplit("/", 1)[-1])]
    if not index:
        return None
    return DocRoot(rel, index, _technologies(files), "FromConfig")


def build_sitemap(rootfs: str | os.PathLike, docroot: DocRoot) -> SiteMap:
    base = Path(rootfs) / docroot.dir_rel_path if docroot.dir_rel_path else Path(rootfs)
    urls = []
    for rel, st in fsutil.walk(base):
        if not stat.S_ISREG(st.st_mode):
            continue
        ext = _ext(rel.rsplit("/", 1)[-1])
        if ext in SITEMAP_EXTS and ext not in ASSET_EXTS:
            urls.append("/" + quote(rel))
    urls.sort()
    return SiteMap(docroot, urls)


def synthesize_launch_commands(profile: WebServerProfile, docroots: list[DocRoot]) -> list[str]:
    binary = _guest(profile.binary_rel_path)
    kind = profile.kind
    if profile.config_rel_path and kind in CONFIG_FLAG:
        return [f"{binary} {CONFIG_FLAG[kind]} {_guest(profile.config_rel_path)}"]
    if kind in DOCROOT_FLAG and docroots:
        flag = DOCROOT_FLAG[kind]
        cmds = []
        for d in docroots:
            arg = _guest(d.dir_rel_path)
            cmds.append(f"{binary} {flag} {arg}" if flag else f"{binary} {arg}")
        return cmds
    return [binary]


def profile_with_commands(profile: WebServerProfile, docroots: list[DocRoot]) -> WebServerProfile:
    profile.launch_commands = synthesize_launch_commands(profile, docroots)
    return profile


def detect_https_material(rootfs: str | os.PathLike) -> dict[str, int]:
    root = os.fspath(rootfs)
    certs = keys = 0
    for rel, st in fsutil.walk(root):
        if not stat.S_ISREG(st.st_mode) or st.st_size > HTTPS_SCAN_LIMIT:
            continue
        data = fsutil.read_head(os.path.join(root, rel), HTTPS_SCAN_LIMIT)
        if not data:
            continue
        if CERT_RE.search(data):
            certs += 1
        if KEY_RE.search(data):
            keys += 1
    return {"cert_count": certs, "key_count": keys}
