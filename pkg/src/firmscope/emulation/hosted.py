"""Hosted transplant: serve a firmware docroot from a generic host web server.

Scripts are executed for real on the host, with their interpreter lines
pointed at host interpreters. Only use this backend on a disposable
analysis host.
"""

from __future__ import annotations

import logging
import os
import shutil
import subprocess
import tarfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..collector import Service, Snapshot, SnapshotLabel, manifest_from_dir
from . import base
from .base import Backend, BackendKind, EmulationSession, ExecResult, SessionState, WebLaunchFailed
from .httpd import DocrootServer, ScriptRequest, ScriptResponse

logger = logging.getLogger(__name__)

HOST_INTERPRETERS = {
    "sh": "sh",
    "ash": "sh",
    "dash": "sh",
    "bash": "bash",
    "busybox": "sh",
    "perl": "perl",
    "microperl": "perl",
    "php": "php-cgi",
    "php-cgi": "php-cgi",
    "lua": "lua",
}
CGI_TIMEOUT = 10
HOSTED_BANNER = "firmscope-hosted"


@dataclass
class HostedSite:
    content_dir: Path
    rewritten: list[str] = field(default_factory=list)
    disabled: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    base_url: str | None = None


def _interpreter_name(shebang: str) -> tuple[str, list[str]]:
    parts = shebang[2:].strip().split()
    if not parts:
        return "", []
    name = os.path.basename(parts[0])
    rest = parts[1:]
    if name == "env" and rest:
        name, rest = os.path.basename(rest[0]), rest[1:]
    if name == "busybox" and rest and rest[0] in HOST_INTERPRETERS:
        name, rest = rest[0], rest[1:]
    return name, rest


def hosted_transplant(docroot: str | os.PathLike, host_root: str | os.PathLike, site: str = "site",
                      interpreters: dict[str, str] | None = None) -> HostedSite:
    """Copy a docroot into ``host_root/site`` and adapt it to the host."""
    interpreters = HOST_INTERPRETERS if interpreters is None else interpreters
    dest = Path(host_root) / site
    if dest.exists():
        shutil.rmtree(dest)
    shutil.copytree(docroot, dest, symlinks=True, ignore_dangling_symlinks=True)
    result = HostedSite(dest)
    for path in sorted(dest.rglob("*")):
        if path.is_symlink() or not path.is_file():
            continue
        rel = path.relative_to(dest).as_posix()
        if path.name == ".htaccess":
            path.rename(path.with_name(".htaccess.disabled"))
            result.disabled.append(rel)
            continue
        with open(path, "rb") as fh:
            head = fh.readline(512)
        if not head.startswith(b"#!"):
            continue
        name, rest = _interpreter_name(head.decode("utf-8", "replace"))
        host = shutil.which(interpreters.get(name, name)) if name else None
        if host is None:
            logger.warning("no host interpreter for %s (%s); leaving it out", rel, name or "?")
            path.unlink()
            result.skipped.append(rel)
            continue
        data = path.read_bytes()
        first, sep, body = data.partition(b"\n")
        new_first = ("#!" + " ".join([host] + rest)).encode()
        path.write_bytes(new_first + sep + body)
        path.chmod(0o755)
        result.rewritten.append(rel)
    return result


class CgiRunner:
    def __init__(self, docroot: Path, timeout: float = CGI_TIMEOUT):
        self.docroot = docroot
        self.timeout = timeout

    def __call__(self, req: ScriptRequest) -> ScriptResponse:
        env = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            "GATEWAY_INTERFACE": "CGI/1.1",
            "SERVER_PROTOCOL": "HTTP/1.0",
            "SERVER_SOFTWARE": HOSTED_BANNER,
            "REQUEST_METHOD": req.method,
            "QUERY_STRING": req.query,
            "SCRIPT_NAME": req.url_path,
            "SCRIPT_FILENAME": str(req.host_path),
            "DOCUMENT_ROOT": str(self.docroot),
            "CONTENT_LENGTH": str(len(req.body)),
            "CONTENT_TYPE": req.headers.get("Content-Type", ""),
            "REDIRECT_STATUS": "200",
        }
        for k, v in req.headers.items():
            env["HTTP_" + k.upper().replace("-", "_")] = v
        if not os.access(req.host_path, os.X_OK):
            return ScriptResponse(500, [("Content-Type", "text/plain")], b"script is not executable")
        try:
            proc = subprocess.run([str(req.host_path)], input=req.body, capture_output=True, env=env,
                                  cwd=req.host_path.parent, timeout=self.timeout)
        except subprocess.TimeoutExpired:
            return ScriptResponse(504, [("Content-Type", "text/plain")], b"script timed out")
        return parse_cgi_output(proc.stdout)


def parse_cgi_output(out: bytes) -> ScriptResponse:
    for sep in (b"\r\n\r\n", b"\n\n"):
        head, found, body = out.partition(sep)
        if found:
            break
    else:
        return ScriptResponse(500, [("Content-Type", "text/plain")], b"malformed CGI output")
    resp = ScriptResponse(200, [], body)
    for line in head.decode("latin-1").splitlines():
        name, _, value = line.partition(":")
        if not _:
            continue
        if name.strip().lower() == "status":
            resp.status = int(value.strip().split()[0])
        else:
            resp.headers.append((name.strip(), value.strip()))
    return resp


class HostedBackend(Backend):
    kind = BackendKind.HOSTED_TRANSPLANT
    PORT = 80

    def __init__(self, host_root: str | os.PathLike | None = None):
        self.host_root = Path(host_root) if host_root else None

    def _prepare(self, session: EmulationSession) -> None:
        guest = session.directory / "guest"
        guest.mkdir(parents=True, exist_ok=True)
        with tarfile.open(session.plan.candidate.packed_path) as tf:
            tf.extractall(guest, filter="tar")
        session.backend_state.update(servers={}, site=None)

    def host_dir(self, session: EmulationSession) -> Path:
        return (self.host_root or session.directory / "hosted") / session.session_id

    def boot(self, session: EmulationSession) -> SessionState:
        session.log_boot("hosted transplant: nothing to boot")
        session.transition(SessionState.BOOTED)
        return session.state

    def _enter_chroot(self, session: EmulationSession) -> None:
        pass

    def exec(self, session: EmulationSession, command: str, timeout: float | None = None) -> ExecResult:
        return ExecResult(base.EXIT_NOT_FOUND, "hosted transplant has no guest shell")

    def launch_web(self, session: EmulationSession, commands=None) -> SessionState:
        docroots = session.plan.docroots
        return super().launch_web(session, [f"hosted:{d.dir_rel_path}" for d in docroots])

    def _start_web(self, session: EmulationSession, command: str) -> int | None:
        rel = command.split(":", 1)[1]
        src = session.directory / "guest" / rel
        if not src.is_dir():
            raise WebLaunchFailed(f"docroot {rel} missing from the rootfs")
        site = hosted_transplant(src, self.host_dir(session))
        for r in site.rewritten:
            session.log_web(f"shebang rewritten: {r}")
        for r in site.disabled:
            session.log_web(f"disabled: {r}")
        for r in site.skipped:
            session.log_web(f"skipped (no interpreter): {r}")
        server = DocrootServer(site.content_dir, CgiRunner(site.content_dir), banner=HOSTED_BANNER).start()
        host, port = server.address
        site.base_url = f"http://{host}:{port}/"
        session.backend_state["servers"][self.PORT] = server
        session.backend_state["site"] = site
        session.services = [Service("TCP", self.PORT, "hosted-httpd")]
        return self.PORT

    def resolve(self, session: EmulationSession, guest_port: int) -> tuple[str, int] | None:
        server = session.backend_state.get("servers", {}).get(guest_port)
        return server.address if server else None

    def _stop_web(self, session: EmulationSession) -> None:
        for server in session.backend_state.get("servers", {}).values():
            server.stop()
        session.backend_state["servers"] = {}

    def snapshot(self, session: EmulationSession, label: SnapshotLabel) -> Snapshot:
        site = session.backend_state.get("site")
        files = manifest_from_dir(site.content_dir) if site else {}
        services = [] if label == SnapshotLabel.PRE_EMULATION else list(session.services)
        snap = Snapshot(SnapshotLabel(label), files, services, time.time())
        session.record_snapshot(snap)
        return snap
