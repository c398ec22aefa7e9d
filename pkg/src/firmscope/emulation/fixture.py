"""Deterministic fixture backend.

Nothing from the firmware is executed. The packed rootfs is unpacked into
the session directory and "run" by interpreting ``fscope-fixture``
directives embedded in fake binaries and scripts. Binary formats are still
checked against the session architecture, so wrong-arch shells fail with
the same log text a real chroot produces.

Directive syntax:
  * ELF fake binaries carry one line ``fscope-fixture: {json}`` after the
    header padding. Keys: ``exit``, ``log``, ``hang``, ``services``,
    ``web_fail``, ``banner``, ``port``.
  * Scripts carry ``# fscope-fixture: <verb> key=value ...`` lines. Verbs:
    ``exit N``, ``hang``, ``log TEXT``, ``service PROTO PORT PROGRAM`` (init
    scripts) and ``exec``, ``reflect``, ``header``, ``status``, ``body``
    (CGI scripts).
"""

from __future__ import annotations

import html
import json
import logging
import posixpath
import shlex
import tarfile
import time
from pathlib import Path
from urllib.parse import parse_qs

from ..archdetect import ELF_MAGIC, detect_file_arch
from ..collector import Service, Snapshot, SnapshotLabel, manifest_from_dir
from ..webheur import CONFIG_FLAG, ServerKind, kind_for_binary, parse_server_config
from . import base
from .base import (
    Backend,
    BackendKind,
    EmulationSession,
    ExecFormatError,
    ExecResult,
    PartialFirmwareError,
    WebLaunchFailed,
)
from .httpd import DocrootServer, ScriptRequest, ScriptResponse
from .. import fsutil

logger = logging.getLogger(__name__)

TAG = "fscope-fixture:"
TAG_BYTES = TAG.encode()

DEFAULT_BANNERS = {
    ServerKind.BOA: "Boa/0.94.14rc21",
    ServerKind.LIGHTTPD: "lighttpd/1.4.35",
    ServerKind.THTTPD: "thttpd/2.25b 29dec2003",
    ServerKind.MINIHTTPD: "mini_httpd/1.19 19dec2003",
    ServerKind.HTTPD: "httpd",
    ServerKind.GOAHEAD: "GoAhead-Webs",
    ServerKind.WEBS: "GoAhead-Webs",
}
SHELL_NAMES = frozenset({"sh", "ash", "bash", "dash", "busybox"})


def binary_directive(data: bytes) -> dict:
    idx = data.find(TAG_BYTES)
    if idx < 0:
        return {}
    line = data[idx + len(TAG_BYTES):].split(b"\n", 1)[0]
    try:
        return json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return {}


def script_directives(text: str) -> list[list[str]]:
    out = []
    for line in text.splitlines():
        stripped = line.lstrip("# \t")
        if stripped.startswith(TAG):
            try:
                out.append(shlex.split(stripped[len(TAG):]))
            except ValueError:
                continue
    return [d for d in out if d]


def _kv(args: list[str]) -> dict[str, str]:
    return dict(a.split("=", 1) for a in args if "=" in a)


# --- a very small shell model: only enough to see which commands would run ---

def _split_commands(cmd: str) -> list[str]:
    """Split a command line into simple commands, hoisting substitutions out."""
    commands: list[str] = []
    cur: list[str] = []
    quote = None
    i = 0
    while i < len(cmd):
        c = cmd[i]
        if quote == "'":
            if c == "'":
                quote = None
            cur.append(c)
        elif c == "\\" and i + 1 < len(cmd):
            cur.append(cmd[i:i + 2])
            i += 1
        elif c == "`":
            end = cmd.find("`", i + 1)
            if end < 0:
                cur.append(c)
            else:
                commands.extend(_split_commands(cmd[i + 1:end]))
                i = end
        elif c == "$" and cmd[i + 1:i + 2] == "(":
            depth, j = 1, i + 2
            while j < len(cmd) and depth:
                depth += {"(": 1, ")": -1}.get(cmd[j], 0)
                j += 1
            if depth:
                cur.append(c)
            else:
                commands.extend(_split_commands(cmd[i + 2:j - 1]))
                i = j - 1
        elif quote == '"':
            if c == '"':
                quote = None
            cur.append(c)
        elif c in "'\"":
            quote = c
            cur.append(c)
        elif c in ";|&\n":
            commands.append("".join(cur))
            cur = []
        else:
            cur.append(c)
        i += 1
    commands.append("".join(cur))
    return [c.strip() for c in commands if c.strip()]


def simulate_shell(command: str, guest_root: str | Path) -> list[list[str]]:
    """Return the argv of every simple command the line would run.

    ``touch`` is the only command with an effect: it creates its file
    arguments inside the guest tree.
    """
    ran = []
    for simple in _split_commands(command):
        try:
            argv = shlex.split(simple)
        except ValueError:
            continue
        if not argv:
            continue
        ran.append(argv)
        if posixpath.basename(argv[0]) == "touch":
            for arg in argv[1:]:
                if arg.startswith("-"):
                    continue
                target = fsutil.host_path(guest_root, posixpath.join("/", arg))
                if target.parent.is_dir():
                    target.touch()
    return ran


class FixtureScriptRunner:
    """CGI interpreter for fixture web apps."""

    def __init__(self, guest_root: Path):
        self.guest_root = guest_root

    def __call__(self, req: ScriptRequest) -> ScriptResponse:
        text = req.host_path.read_text("utf-8", "replace")
        params = parse_qs(req.query, keep_blank_values=True)
        if req.method == "POST" and req.body:
            for k, v in parse_qs(req.body.decode("utf-8", "replace"), keep_blank_values=True).items():
                params.setdefault(k, []).extend(v)
        resp = ScriptResponse(200, [("Content-Type", "text/html")])
        chunks: list[str] = []
        for directive in script_directives(text):
            verb, args = directive[0], directive[1:]
            opts = _kv(args)
            if verb == "exec":
                value = params.get(opts.get("param", ""), [""])[0]
                for ch in opts.get("strip", ""):
                    value = value.replace(ch, "")
                arg = shlex.quote(value) if opts.get("quote", "no") == "yes" else value
                simulate_shell(opts.get("template", "{}").replace("{}", arg), self.guest_root)
                chunks.append(f"<pre>{html.escape(opts.get('template', '{}').replace('{}', value))}</pre>")
            elif verb == "reflect":
                value = params.get(opts.get("param", ""), [""])[0]
                if opts.get("escape", "html") == "html":
                    value = html.escape(value)
                chunks.append(f"<p>Results for: {value}</p>")
            elif verb == "header" and args:
                name, _, val = " ".join(args).partition(":")
                resp.headers.append((name.strip(), val.strip()))
            elif verb == "status" and args:
                resp.status = int(args[0])
            elif verb == "body" and args:
                chunks.append(" ".join(args))
        if not chunks:
            chunks.append("OK")
        resp.body = ("<html><body>" + "".join(chunks) + "</body></html>").encode()
        return resp


class FixtureBackend(Backend):
    kind = BackendKind.FIXTURE

    def guest(self, session: EmulationSession) -> Path:
        return session.directory / "guest"

    def _prepare(self, session: EmulationSession) -> None:
        packed = session.plan.candidate.packed_path
        guest = self.guest(session)
        guest.mkdir(parents=True, exist_ok=True)
        with tarfile.open(packed) as tf:
            tf.extractall(guest, filter="tar")
        session.backend_state.update(servers={}, services=[])

    # binary handling

    def _check_format(self, session: EmulationSession, guest_path: str) -> tuple[str, bytes]:
        """Classify the file as 'elf' or 'script'; raise on a foreign format."""
        data = (fsutil.host_path(self.guest(session), guest_path)).read_bytes()
        if data.startswith(ELF_MAGIC):
            arch = detect_file_arch(data)
            if arch != session.arch:
                raise ExecFormatError(f"{guest_path}: exec format error (binary is {arch}, guest is {session.arch})")
            return "elf", data
        if data.startswith(b"#!"):
            return "script", data
        raise ExecFormatError(f"{guest_path}: exec format error")

    def _resolve(self, session: EmulationSession, path: str) -> str | None:
        resolved = fsutil.resolve_in_root(self.guest(session), path)
        if resolved is None or not fsutil.is_regular(fsutil.host_path(self.guest(session), resolved)):
            return None
        return resolved

    def _enter_chroot(self, session: EmulationSession) -> None:
        for shell in ("/bin/sh", "/bin/busybox"):
            resolved = self._resolve(session, shell)
            if resolved is None:
                continue
            try:
                self._check_format(session, resolved)
            except ExecFormatError:
                session.log_boot(f"chroot: failed to run command '{shell}': Exec format error")
                raise
            return
        session.log_boot("chroot: failed to run command '/bin/sh': No such file or directory")
        raise PartialFirmwareError("no shell or busybox in the root filesystem")

    def exec(self, session: EmulationSession, command: str, timeout: float | None = None) -> ExecResult:
        argv = base.split_command(command)
        if not argv:
            return ExecResult(0)
        resolved = self._resolve(session, argv[0])
        if resolved is None:
            return ExecResult(base.EXIT_NOT_FOUND, f"{argv[0]}: not found")
        try:
            fmt, data = self._check_format(session, resolved)
        except ExecFormatError as exc:
            return ExecResult(base.EXIT_EXEC_FORMAT, str(exc))
        if fmt == "elf":
            d = binary_directive(data)
            if posixpath.basename(resolved) in SHELL_NAMES and "-c" in argv:
                simulate_shell(" ".join(argv[argv.index("-c") + 1:]), self.guest(session))
            self._add_services(session, d.get("services", []))
            return ExecResult(int(d.get("exit", 0)), d.get("log", ""), bool(d.get("hang", False)))
        code, lines, hang = 0, [], False
        for directive in script_directives(data.decode("utf-8", "replace")):
            verb, args = directive[0], directive[1:]
            if verb == "exit" and args:
                code = int(args[0])
            elif verb == "hang":
                hang = True
            elif verb == "log":
                lines.append(" ".join(args))
            elif verb == "service" and len(args) >= 3:
                self._add_services(session, [args[:3]])
        return ExecResult(code, "\n".join(lines), hang)

    def _add_services(self, session: EmulationSession, specs) -> None:
        for proto, port, program in specs:
            svc = Service(str(proto).upper(), int(port), str(program))
            if svc not in session.services:
                session.services.append(svc)

    # web server

    def _start_web(self, session: EmulationSession, command: str) -> int | None:
        argv = base.split_command(command)
        if not argv:
            raise WebLaunchFailed("empty launch command")
        resolved = self._resolve(session, argv[0])
        if resolved is None:
            raise WebLaunchFailed(f"{argv[0]}: not found")
        try:
            fmt, data = self._check_format(session, resolved)
        except ExecFormatError as exc:
            session.log_web(str(exc))
            raise WebLaunchFailed(str(exc)) from exc
        directive = binary_directive(data) if fmt == "elf" else {}
        if directive.get("web_fail"):
            session.log_web(directive["web_fail"])
            raise WebLaunchFailed(directive["web_fail"])
        kind = kind_for_binary(argv[0])
        docroot, port = None, directive.get("port")
        args = argv[1:]
        i = 0
        while i < len(args):
            flag = args[i]
            value = args[i + 1] if i + 1 < len(args) else None
            if flag in ("-f", "-C", "-c") and value and kind in CONFIG_FLAG:
                cfg_path = self._resolve(session, value)
                if cfg_path is None:
                    raise WebLaunchFailed(f"cannot open config {value}")
                cfg = parse_server_config(kind, fsutil.host_path(self.guest(session), cfg_path).read_bytes())
                docroot = docroot or cfg.document_root
                port = port or cfg.port
                i += 2
            elif flag in ("-d", "-h") and value:
                docroot = value
                i += 2
            elif flag in ("-p",) and value:
                port = int(value)
                i += 2
            elif not flag.startswith("-") and kind == ServerKind.GOAHEAD:
                docroot = flag
                i += 1
            else:
                i += 1
        if not docroot:
            raise WebLaunchFailed(f"{argv[0]}: no document root configured")
        root_guest = fsutil.resolve_in_root(self.guest(session), docroot)
        if root_guest is None or not fsutil.is_real_dir(fsutil.host_path(self.guest(session), root_guest)):
            raise WebLaunchFailed(f"{argv[0]}: document root {docroot} does not exist")
        port = int(port or 80)
        banner = directive.get("banner", DEFAULT_BANNERS.get(kind))
        server = DocrootServer(
            fsutil.host_path(self.guest(session), root_guest),
            FixtureScriptRunner(self.guest(session)),
            banner=banner,
        ).start()
        session.backend_state["servers"][port] = server
        self._add_services(session, [("TCP", port, posixpath.basename(argv[0]))])
        session.log_web(f"{posixpath.basename(argv[0])}: serving {docroot} on port {port}")
        return port

    def resolve(self, session: EmulationSession, guest_port: int) -> tuple[str, int] | None:
        server = session.backend_state.get("servers", {}).get(guest_port)
        return server.address if server else None

    def _stop_web(self, session: EmulationSession) -> None:
        servers = session.backend_state.get("servers", {})
        for port, server in list(servers.items()):
            server.stop()
            del servers[port]
            session.services = [s for s in session.services if not (s.proto == "TCP" and s.port == port)]

    def snapshot(self, session: EmulationSession, label: SnapshotLabel) -> Snapshot:
        services = [] if label == SnapshotLabel.PRE_EMULATION else sorted(session.services)
        snap = Snapshot(SnapshotLabel(label), manifest_from_dir(self.guest(session)), services, time.time())
        session.record_snapshot(snap)
        return snap
