"""Synthetic firmware corpus.

Each fixture is an unpacked firmware tree built from a set of traits. The
binaries are fake ELF headers carrying ``fscope-fixture`` directives for the
fixture backend; CGI scripts are real (inert) shell scripts that also carry
directives describing how the fixture backend should behave.
"""

from __future__ import annotations

import enum
import json
import os
import random
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path

from .archdetect import EM_ARM, EM_MIPS, ArchId, Endian, Family

FIXED_MTIME = 1262304000  # 2010-01-01, any constant works


class Trait(str, enum.Enum):
    FULL_ROOTFS = "FullRootfs"
    PARTIAL_UPDATE = "PartialUpdate"
    BROKEN_SYMLINKS = "BrokenSymlinks"
    TWO_ROOTS = "TwoRoots"
    BOA_CONFIG = "BoaConfig"
    LIGHTTPD_CONFIG = "LighttpdConfig"
    NO_CONFIG = "NoConfig"
    VULN_CMD_INJECTION = "VulnCmdInjection"
    VULN_XSS = "VulnXSS"
    VULN_CSRF = "VulnCSRF"
    HTTPS_CERT = "HttpsCert"
    WRONG_ARCH_SHELL = "WrongArchShell"
    BENIGN = "Benign"
    NEEDS_DEVICE = "NeedsDevice"
    BROKEN_WEB_CONFIG = "BrokenWebConfig"


VULN_TRAITS = frozenset({Trait.VULN_CMD_INJECTION, Trait.VULN_XSS, Trait.VULN_CSRF})
# traits that only make sense on a full userland
NEEDS_FULL = VULN_TRAITS | {
    Trait.BROKEN_SYMLINKS, Trait.TWO_ROOTS, Trait.WRONG_ARCH_SHELL, Trait.HTTPS_CERT,
    Trait.NEEDS_DEVICE, Trait.BROKEN_WEB_CONFIG, Trait.BOA_CONFIG, Trait.LIGHTTPD_CONFIG, Trait.NO_CONFIG,
}
MACHINE_FOR = {
    Family.ARM: EM_ARM,
    Family.MIPS: EM_MIPS,
    Family.MIPSEL: EM_MIPS,
}


@dataclass(frozen=True)
class FixtureSpec:
    name: str
    traits: frozenset[Trait] = frozenset()
    arch: str = "ARM/Little"
    banner: str | None = None  # None keeps the server's default, "" sends no Server header
    vendor: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "traits", frozenset(Trait(t) for t in self.traits))
        if Trait.PARTIAL_UPDATE in self.traits and Trait.FULL_ROOTFS in self.traits:
            raise ValueError(f"{self.name}: PartialUpdate excludes FullRootfs")
        needs = self.traits & NEEDS_FULL
        if needs and Trait.FULL_ROOTFS not in self.traits:
            raise ValueError(f"{self.name}: {sorted(t.value for t in needs)} require FullRootfs")
        configs = self.traits & {Trait.BOA_CONFIG, Trait.LIGHTTPD_CONFIG, Trait.NO_CONFIG}
        if len(configs) > 1:
            raise ValueError(f"{self.name}: pick one of BoaConfig, LighttpdConfig, NoConfig")
        arch = ArchId.parse(self.arch)
        if arch.family not in MACHINE_FOR:
            raise ValueError(f"{self.name}: fixtures support ARM, MIPS and MIPSel only")

    def has(self, trait: Trait) -> bool:
        return trait in self.traits

    def to_dict(self) -> dict:
        d = {"name": self.name, "traits": sorted(t.value for t in self.traits), "arch": self.arch,
             "vendor": self.vendor}
        if self.banner is not None:
            d["banner"] = self.banner
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FixtureSpec":
        return cls(d["name"], frozenset(d.get("traits", [])), d.get("arch", "ARM/Little"), d.get("banner"),
                   d.get("vendor", "synthetic"))


def _spec(name: str, *traits: Trait, **kw) -> FixtureSpec:
    return FixtureSpec(name, frozenset(traits), **kw)


T = Trait
DEFAULT_CORPUS: tuple[FixtureSpec, ...] = (
    _spec("fw01-boa-cmdinj", T.FULL_ROOTFS, T.BOA_CONFIG, T.VULN_CMD_INJECTION),
    _spec("fw02-lighttpd-xss", T.FULL_ROOTFS, T.LIGHTTPD_CONFIG, T.VULN_XSS, arch="MIPS/Big"),
    _spec("fw03-thttpd-csrf", T.FULL_ROOTFS, T.NO_CONFIG, T.VULN_CSRF),
    _spec("fw04-lighttpd-https", T.FULL_ROOTFS, T.BENIGN, T.LIGHTTPD_CONFIG, T.HTTPS_CERT, arch="MIPSel/Little",
          banner=""),
    _spec("fw05-boa-tworoots", T.FULL_ROOTFS, T.BENIGN, T.BOA_CONFIG, T.TWO_ROOTS),
    _spec("fw06-boa-textlinks", T.FULL_ROOTFS, T.BENIGN, T.BOA_CONFIG, T.BROKEN_SYMLINKS),
    _spec("fw07-boa-needsdevice", T.FULL_ROOTFS, T.BENIGN, T.BOA_CONFIG, T.NEEDS_DEVICE),
    _spec("fw08-lighttpd-badconf", T.FULL_ROOTFS, T.BENIGN, T.LIGHTTPD_CONFIG, T.BROKEN_WEB_CONFIG),
    _spec("fw09-partial-update", T.PARTIAL_UPDATE),
    _spec("fw10-wrongarch-shell", T.FULL_ROOTFS, T.BENIGN, T.BOA_CONFIG, T.WRONG_ARCH_SHELL),
    _spec("fw11-blob-only"),
    _spec("fw12-loose-html", T.BENIGN),
)
DEFAULT_EXPECTED_FUNNEL = {"Ingested": 12, "Candidate": 10, "ChrootOK": 8, "WebServerOK": 6, "Vulnerable": 3}

WEB_FAIL_MESSAGES = {
    Trait.NEEDS_DEVICE: "ioctl SIOCGIFADDR eth1: No such device",
    Trait.BROKEN_WEB_CONFIG: "(server.c.621) loading plugins finally failed",
}
CGI_HEADER = 'echo "Content-Type: text/html"\necho ""\n'


def fake_elf(arch: ArchId, directive: dict | None = None, pad: int = 76) -> bytes:
    """ELF32 executable header for ``arch`` plus padding and an optional directive."""
    le = arch.endianness == Endian.LITTLE
    e = "<" if le else ">"
    ident = b"\x7fELF" + bytes([1, 1 if le else 2, 1, 0]) + bytes(8)
    header = ident + struct.pack(e + "HHIIIIIHHHHHH", 2, MACHINE_FOR[arch.family], 1, 0x400000, 52, 0, 0,
                                 52, 32, 0, 40, 0, 0)
    assert len(header) == 52
    data = header + bytes(pad)
    if directive is not None:
        data += b"fscope-fixture: " + json.dumps(directive, sort_keys=True).encode() + b"\n"
    return data


def fake_png(rng: random.Random) -> bytes:
    return b"\x89PNG\r\n\x1a\n" + bytes(rng.getrandbits(8) for _ in range(56))


def fake_pem(rng: random.Random, kind: str) -> str:
    lines = ["".join(rng.choice("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/")
                     for _ in range(64)) for _ in range(4)]
    return f"-----BEGIN {kind}-----\n" + "\n".join(lines) + f"\n-----END {kind}-----\n"


class _TreeWriter:
    def __init__(self, root: Path):
        self.root = root

    def file(self, rel: str, data: bytes | str, mode: int = 0o644) -> None:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data.encode() if isinstance(data, str) else data)
        path.chmod(mode)

    def link(self, rel: str, target: str) -> None:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        os.symlink(target, path)

    def dir(self, rel: str) -> None:
        (self.root / rel).mkdir(parents=True, exist_ok=True)


def _server_name(spec: FixtureSpec) -> str:
    if spec.has(T.LIGHTTPD_CONFIG):
        return "lighttpd"
    if spec.has(T.BOA_CONFIG):
        return "boa"
    return "thttpd"


def _web_pages(w: _TreeWriter, docroot: str, spec: FixtureSpec, rng: random.Random) -> None:
    token = "%08x" % rng.getrandbits(32)
    csrf_field = "" if spec.has(T.VULN_CSRF) else f'<input type="hidden" name="csrf_token" value="{token}">'
    w.file(f"{docroot}/index.html", f"""<html><head><title>{spec.name}</title>
<link rel="stylesheet" href="/style.css"></head>
<body><img src="/img/logo.png" alt="logo">
<h1>Device management</h1>
<form action="/cgi-bin/ping.cgi" method="get">Diagnostics: <input type="text" name="ip" value="192.168.1.1">
<input type="submit" value="Ping"></form>
<form action="/cgi-bin/search.cgi" method="get">Search logs: <input type="text" name="q">
<input type="submit" value="Go"></form>
<a href="/admin.html">Administration</a>
</body></html>
""")
    w.file(f"{docroot}/admin.html", f"""<html><body><h1>Administration</h1>
<form action="/cgi-bin/admin.cgi" method="post">{csrf_field}
Hostname: <input type="text" name="hostname" value="router">
<input type="submit" value="Save"></form>
</body></html>
""")
    w.file(f"{docroot}/style.css", "body { font-family: sans-serif; }\n")
    w.file(f"{docroot}/img/logo.png", fake_png(rng))

    if spec.has(T.VULN_CMD_INJECTION):
        ping = "exec param=ip template='ping -c 1 {}' strip='|`$'"
    else:
        ping = "exec param=ip template='ping -c 1 {}' quote=yes"
    escape = "none" if spec.has(T.VULN_XSS) else "html"
    scripts = {
        "ping.cgi": [ping],
        "search.cgi": [f"reflect param=q escape={escape}"],
        "admin.cgi": ["body Settings saved", "header Set-Cookie: sid=" + token + "; path=/"],
        "status.sh": ["body uptime: 42 days"],
    }
    for name, directives in scripts.items():
        lines = ["#!/bin/sh"] + [f"# fscope-fixture: {d}" for d in directives]
        lines += [CGI_HEADER.rstrip("\n"), 'echo "<html><body>OK</body></html>"', ""]
        w.file(f"{docroot}/cgi-bin/{name}", "\n".join(lines), 0o755)


def _userland(w: _TreeWriter, base: str, spec: FixtureSpec, rng: random.Random) -> None:
    arch = ArchId.parse(spec.arch)
    p = (base + "/") if base else ""
    shell_arch = arch
    if spec.has(T.WRONG_ARCH_SHELL):
        shell_arch = ArchId(Family.MIPS, Endian.BIG) if arch.family != Family.MIPS else ArchId(Family.ARM, Endian.LITTLE)
    w.file(p + "bin/busybox", fake_elf(shell_arch, {"exit": 0, "log": "BusyBox v1.19.4 built-in shell",
                                                    "services": [["TCP", 23, "telnetd"]]}), 0o755)
    applets = {"bin/sh": "busybox", "bin/ls": "busybox", "sbin/init": "../bin/busybox"}
    for rel, target in applets.items():
        if spec.has(T.BROKEN_SYMLINKS):
            # the unpacker wrote the link target as file content
            w.file(p + rel, "/bin/busybox", 0o644)
        else:
            w.link(p + rel, target)
    for rel in ("lib/libc.so.0", "lib/ld-uClibc.so.0", "usr/bin/fwupdate", "usr/sbin/udhcpd", "sbin/nvram"):
        w.file(p + rel, fake_elf(arch, {"exit": 0}), 0o755)
    w.file(p + "etc/passwd", "root:x:0:0:root:/root:/bin/sh\n")
    w.file(p + "etc/hostname", spec.name + "\n")
    w.file(p + "etc/init.d/rcS", "#!/bin/sh\n# fscope-fixture: log mounting /proc\nmount -t proc proc /proc\n", 0o755)
    w.dir(p + "tmp")
    w.dir(p + "var/log")

    server = _server_name(spec)
    directive: dict = {"exit": 0}
    for trait, msg in WEB_FAIL_MESSAGES.items():
        if spec.has(trait):
            directive["web_fail"] = msg
    if spec.banner is not None:
        directive["banner"] = spec.banner
    w.file(p + f"usr/sbin/{server}", fake_elf(arch, directive), 0o755)
    if spec.has(T.BOA_CONFIG):
        w.file(p + "etc/boa/boa.conf", "# Boa configuration\nPort 80\nUser root\nDocumentRoot /www\n"
                                       "ScriptAlias /cgi-bin/ /www/cgi-bin/\n")
    elif spec.has(T.LIGHTTPD_CONFIG):
        w.file(p + "etc/lighttpd/lighttpd.conf", 'server.document-root = "/www"\nserver.port = 80\n'
                                                 'server.modules = ("mod_cgi")\ncgi.assign = (".cgi" => "")\n')
    if spec.has(T.HTTPS_CERT):
        w.file(p + "etc/ssl/server.pem", fake_pem(rng, "CERTIFICATE") + fake_pem(rng, "RSA PRIVATE KEY"), 0o600)
    _web_pages(w, p + "www", spec, rng)


def build_fixture(spec: FixtureSpec, out_dir: str | os.PathLike, seed: int = 0) -> Path:
    dest = Path(out_dir) / spec.name
    if dest.exists():
        shutil.rmtree(dest)
    dest.mkdir(parents=True)
    w = _TreeWriter(dest)
    rng = random.Random(f"{seed}:{spec.name}")
    w.file("firmware.bin", b"\x27\x05\x19\x56" + bytes(rng.getrandbits(8) for _ in range(2044)))
    if spec.has(T.FULL_ROOTFS):
        if spec.has(T.TWO_ROOTS):
            _userland(w, "upgrade", spec, rng)
            _userland(w, "factory", spec, rng)
        else:
            _userland(w, "squashfs-root", spec, rng)
    elif spec.has(T.PARTIAL_UPDATE):
        arch = ArchId.parse(spec.arch)
        w.file("update/sbin/init", fake_elf(arch, {"exit": 0}), 0o755)
        w.file("update/etc/version", "2.0.1\n")
        w.file("update/www/index.html", "<html><body>Updated UI</body></html>\n")
    elif spec.has(T.BENIGN):
        w.file("html/index.html", "<html><body>Quick start guide</body></html>\n")
        w.file("html/help.htm", "<html><body>Help</body></html>\n")
    _normalize_times(dest)
    return dest


def _normalize_times(root: Path) -> None:
    for dirpath, dirnames, filenames in os.walk(root):
        for name in filenames + dirnames:
            os.utime(os.path.join(dirpath, name), (FIXED_MTIME, FIXED_MTIME), follow_symlinks=False)
    os.utime(root, (FIXED_MTIME, FIXED_MTIME))


def build_corpus(specs, out_dir: str | os.PathLike, seed: int = 0) -> list[Path]:
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("fixture names must be unique")
    return [build_fixture(s, out_dir, seed) for s in specs]


def load_specs(path: str | os.PathLike) -> list[FixtureSpec]:
    data = json.loads(Path(path).read_text("utf-8"))
    if isinstance(data, dict):
        data = data.get("fixtures", [])
    return [FixtureSpec.from_dict(d) for d in data]


def dump_specs(specs, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in specs], indent=2) + "\n", "utf-8")

