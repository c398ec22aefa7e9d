"""Backend contract, plans and sessions.

A backend brings a packed root filesystem up far enough to serve its web
interface. Backends differ in how they get there (a QEMU guest with a
chroot, a host web server with the docroot copied in, or the deterministic
fixture interpreter used for tests) but share the session lifecycle and
the init-chain and liveness logic defined here.
"""

from __future__ import annotations

import abc
import enum
import http.client
import json
import logging
import shlex
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..archdetect import ArchId
from ..collector import Service, Snapshot, SnapshotLabel
from ..fsroot import RootFsCandidate
from ..webheur import DocRoot, WebServerProfile

logger = logging.getLogger(__name__)

CHROOT_MARKER = "fscope: chroot ok"
INIT_ENTRIES = (
    "/sbin/init",
    "/init",
    "/etc/init",
    "/etc/rc",
    "/etc/rc.d/rcS",
    "/etc/init.d/rcS",
    "/bin/sh",
)
SHELL_ENTRIES = ("/bin/sh", "/bin/bash", "/bin/dash", "/bin/busybox")
DEFAULT_PORTS = (80, 8080, 443)
EXIT_NOT_FOUND = 127
EXIT_EXEC_FORMAT = 126


class BackendKind(str, enum.Enum):
    QEMU_CHROOT = "QemuChroot"
    HOSTED_TRANSPLANT = "HostedTransplant"
    FIXTURE = "Fixture"


class EmulationError(Exception):
    cause = "Unknown"


class ExecFormatError(EmulationError):
    cause = "ExecFormatError"


class PartialFirmwareError(EmulationError):
    cause = "PartialFirmware"


class BootTimeout(EmulationError):
    cause = "BootTimeout"


class WebTimeout(EmulationError):
    cause = "WebTimeout"


class BackendUnavailable(EmulationError):
    cause = "BackendUnavailable"


class WebLaunchFailed(EmulationError):
    cause = "WebLaunchError"


class SessionState(str, enum.Enum):
    PREPARED = "Prepared"
    BOOTED = "Booted"
    WEB_UP = "WebUp"
    FAILED = "Failed"
    STOPPED = "Stopped"


_TRANSITIONS = {
    SessionState.PREPARED: {SessionState.BOOTED, SessionState.FAILED},
    SessionState.BOOTED: {SessionState.WEB_UP, SessionState.FAILED, SessionState.STOPPED},
    SessionState.WEB_UP: {SessionState.STOPPED},
    SessionState.FAILED: set(),
    SessionState.STOPPED: set(),
}


@dataclass
class EmulationPlan:
    firmware_id: str
    candidate: RootFsCandidate
    arch_list: list[ArchId]
    backend: BackendKind = BackendKind.FIXTURE
    profiles: list[WebServerProfile] = field(default_factory=list)
    docroots: list[DocRoot] = field(default_factory=list)
    boot_timeout_s: int = 60
    web_timeout_s: int = 30
    workdir: str = ""
    port_candidates: tuple[int, ...] = DEFAULT_PORTS

    def __post_init__(self):
        if not self.arch_list:
            raise ValueError("plan needs at least one architecture")
        if self.boot_timeout_s <= 0 or self.web_timeout_s <= 0:
            raise ValueError("timeouts must be positive")
        self.backend = BackendKind(self.backend)

    def describe(self) -> dict:
        return {
            "firmware_id": self.firmware_id,
            "candidate": self.candidate.label,
            "root_rel_path": self.candidate.root_rel_path,
            "packed_path": self.candidate.packed_path,
            "arch_list": [str(a) for a in self.arch_list],
            "backend": self.backend.value,
            "launch_commands": [c for p in self.profiles for c in p.launch_commands],
            "docroots": [d.dir_rel_path for d in self.docroots],
            "boot_timeout_s": self.boot_timeout_s,
            "web_timeout_s": self.web_timeout_s,
        }


@dataclass
class ExecResult:
    exit_code: int
    output: str = ""
    timed_out: bool = False


@dataclass
class InitOutcome:
    entry: str | None
    exit_code: int
    warnings: list[str] = field(default_factory=list)


@dataclass
class EmulationSession:
    session_id: str
    plan: EmulationPlan
    arch: ArchId
    directory: Path
    state: SessionState = SessionState.PREPARED
    boot_log: str = ""
    web_log: str = ""
    base_url: str | None = None
    guest_url: str | None = None
    banner: str | None = None
    web_command: str | None = None
    web_port: int | None = None
    init_entry: str | None = None
    failure: EmulationError | None = None
    snapshots: list[str] = field(default_factory=list)
    services: list[Service] = field(default_factory=list)
    backend_state: dict = field(default_factory=dict)

    def transition(self, new: SessionState) -> None:
        if new not in _TRANSITIONS[self.state]:
            raise RuntimeError(f"illegal session transition {self.state.value} -> {new.value}")
        self.state = new
        if new == SessionState.WEB_UP:
            assert self.base_url is not None

    def fail(self, exc: EmulationError) -> SessionState:
        self.failure = exc
        self.transition(SessionState.FAILED)
        return self.state

    def _append(self, name: str, text: str) -> None:
        line = text if text.endswith("\n") else text + "\n"
        if name == "boot":
            self.boot_log += line
        else:
            self.web_log += line
        self.directory.mkdir(parents=True, exist_ok=True)
        with open(self.directory / f"{name}.log", "a", encoding="utf-8") as fh:
            fh.write(line)

    def log_boot(self, text: str) -> None:
        self._append("boot", text)

    def log_web(self, text: str) -> None:
        self._append("web", text)

    def record_snapshot(self, snap: Snapshot) -> None:
        if snap.label.value in self.snapshots:
            raise RuntimeError(f"snapshot {snap.label.value} already taken")
        taken = [SnapshotLabel(s).rank for s in self.snapshots]
        if taken and snap.label.rank < max(taken):
            raise RuntimeError(f"snapshot {snap.label.value} out of order")
        self.snapshots.append(snap.label.value)
        snap.save(self.directory / "snapshots" / f"{snap.label.value}.json")

    def summary(self) -> dict:
        return {
            "session_id": self.session_id,
            "arch": str(self.arch),
            "state": self.state.value,
            "init_entry": self.init_entry,
            "web_command": self.web_command,
            "web_port": self.web_port,
            "banner": self.banner,
            "failure": type(self.failure).__name__ if self.failure else None,
            "snapshots": list(self.snapshots),
        }


class Backend(abc.ABC):
    kind: BackendKind

    def supports(self, arch: ArchId) -> bool:
        return True

    def prepare(self, plan: EmulationPlan, session_id: str, arch: ArchId | None = None) -> EmulationSession:
        arch = arch or plan.arch_list[0]
        if not self.supports(arch):
            raise BackendUnavailable(f"{self.kind.value} cannot run {arch}")
        directory = Path(plan.workdir or ".") / session_id
        if directory.exists():
            shutil.rmtree(directory)
        directory.mkdir(parents=True)
        (directory / "plan.json").write_text(json.dumps(plan.describe(), indent=2), "utf-8")
        session = EmulationSession(session_id, plan, arch, directory)
        self._prepare(session)
        return session

    def boot(self, session: EmulationSession) -> SessionState:
        try:
            self._enter_chroot(session)
            session.log_boot(CHROOT_MARKER)
            outcome = run_init_chain(self, session)
        except EmulationError as exc:
            session.log_boot(f"boot failed: {type(exc).__name__}: {exc}")
            return session.fail(exc)
        session.init_entry = outcome.entry
        session.transition(SessionState.BOOTED)
        return session.state

    def launch_web(self, session: EmulationSession, commands: str | list[str]) -> SessionState:
        if isinstance(commands, str):
            commands = [commands]
        last: EmulationError | None = None
        for command in commands:
            session.log_web(f"$ {command}")
            try:
                port = self._start_web(session, command)
                ports = [port] if port else []
                ports += [p for p in session.plan.port_candidates if p not in ports]
                url = probe_web_up(self, session, ports)
            except EmulationError as exc:
                session.log_web(f"launch failed: {type(exc).__name__}: {exc}")
                self._stop_web(session)
                last = exc
                continue
            session.web_command = command
            session.base_url = url
            session.transition(SessionState.WEB_UP)
            return session.state
        return session.fail(last or WebLaunchFailed("no launch command available"))

    @abc.abstractmethod
    def exec(self, session: EmulationSession, command: str, timeout: float | None = None) -> ExecResult:
        ...

    @abc.abstractmethod
    def snapshot(self, session: EmulationSession, label: SnapshotLabel) -> Snapshot:
        ...

    @abc.abstractmethod
    def resolve(self, session: EmulationSession, guest_port: int) -> tuple[str, int] | None:
        """Host address where a guest TCP port is reachable, if forwarded."""

    def stop(self, session: EmulationSession) -> None:
        self._stop_web(session)
        self._teardown(session)
        if session.state in (SessionState.BOOTED, SessionState.WEB_UP):
            session.transition(SessionState.STOPPED)

    # backend hooks
    def _prepare(self, session: EmulationSession) -> None:
        pass

    @abc.abstractmethod
    def _enter_chroot(self, session: EmulationSession) -> None:
        ...

    @abc.abstractmethod
    def _start_web(self, session: EmulationSession, command: str) -> int | None:
        """Run the launch command; return the guest port it should listen on."""

    def _stop_web(self, session: EmulationSession) -> None:
        pass

    def _teardown(self, session: EmulationSession) -> None:
        pass


def run_init_chain(backend: Backend, session: EmulationSession) -> InitOutcome:
    """Try the init entries in order; the first one that exists is run.

    A failing init script only produces a warning: firmware init scripts
    routinely expect hardware that is not there.
    """
    timeout = session.plan.boot_timeout_s
    for entry in INIT_ENTRIES:
        result = backend.exec(session, entry, timeout=timeout)
        if result.exit_code == EXIT_NOT_FOUND:
            continue
        session.log_boot(f"init: ran {entry} (exit {result.exit_code})")
        if result.output:
            session.log_boot(result.output)
        if result.timed_out:
            raise BootTimeout(f"{entry} did not settle within {timeout}s")
        if result.exit_code == EXIT_EXEC_FORMAT:
            raise ExecFormatError(f"{entry}: exec format error")
        outcome = InitOutcome(entry, result.exit_code)
        if result.exit_code != 0:
            warning = f"warning: {entry} exited with {result.exit_code}; continuing with partial configuration"
            outcome.warnings.append(warning)
            session.log_boot(warning)
        session.init_entry = entry
        return outcome
    raise PartialFirmwareError("no init entry or shell found: " + ", ".join(INIT_ENTRIES))


def _http_probe(host: str, port: int, timeout: float) -> tuple[int, str | None] | None:
    conn = http.client.HTTPConnection(host, port, timeout=timeout)
    try:
        conn.request("GET", "/", headers={"User-Agent": "firmscope-probe"})
        resp = conn.getresponse()
        resp.read()
        return resp.status, resp.getheader("Server")
    except (OSError, http.client.HTTPException):
        return None
    finally:
        conn.close()


def probe_web_up(backend: Backend, session: EmulationSession, ports: list[int]) -> str:
    """Poll candidate ports until one answers with any valid HTTP status line.

    Records the Server banner (None for the empty-banner class).
    """
    deadline = time.monotonic() + session.plan.web_timeout_s
    while True:
        for port in ports:
            addr = backend.resolve(session, port)
            if addr is None:
                continue
            got = _http_probe(addr[0], addr[1], timeout=min(2.0, session.plan.web_timeout_s))
            if got is None:
                continue
            status, banner = got
            session.banner = banner or None
            session.web_port = port
            session.guest_url = f"http://guest:{port}/"
            session.log_web(f"web up on guest port {port}: HTTP {status}, Server: {banner or '<empty>'}")
            return f"http://{addr[0]}:{addr[1]}/"
        if time.monotonic() >= deadline:
            raise WebTimeout(f"no HTTP answer on ports {ports} within {session.plan.web_timeout_s}s")
        time.sleep(0.1)


def split_command(command: str) -> list[str]:
    try:
        return shlex.split(command)
    except ValueError:
        return command.split()
