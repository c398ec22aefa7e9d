from .base import (
    CHROOT_MARKER,
    DEFAULT_PORTS,
    INIT_ENTRIES,
    SHELL_ENTRIES,
    Backend,
    BackendKind,
    BackendUnavailable,
    BootTimeout,
    EmulationError,
    EmulationPlan,
    EmulationSession,
    ExecFormatError,
    ExecResult,
    PartialFirmwareError,
    SessionState,
    WebLaunchFailed,
    WebTimeout,
    probe_web_up,
    run_init_chain,
)
from .fixture import FixtureBackend
from .hosted import HostedBackend, hosted_transplant
from .qemu import QemuChrootBackend

BACKEND_NAMES = {
    "fixture": BackendKind.FIXTURE,
    "hosted": BackendKind.HOSTED_TRANSPLANT,
    "qemu": BackendKind.QEMU_CHROOT,
}


def get_backend(name: str | BackendKind, **options) -> Backend:
    kind = BACKEND_NAMES.get(name, name) if isinstance(name, str) else name
    kind = BackendKind(kind)
    if kind == BackendKind.FIXTURE:
        return FixtureBackend()
    if kind == BackendKind.HOSTED_TRANSPLANT:
        return HostedBackend(options.get("host_root"))
    return QemuChrootBackend(options.get("image_dir", "/var/lib/firmscope/guests"))


__all__ = [
    "CHROOT_MARKER", "DEFAULT_PORTS", "INIT_ENTRIES", "SHELL_ENTRIES", "Backend", "BackendKind",
    "BackendUnavailable", "BootTimeout", "EmulationError", "EmulationPlan", "EmulationSession",
    "ExecFormatError", "ExecResult", "PartialFirmwareError", "SessionState", "WebLaunchFailed", "WebTimeout",
    "probe_web_up", "run_init_chain", "FixtureBackend", "HostedBackend", "hosted_transplant",
    "QemuChrootBackend", "BACKEND_NAMES", "get_backend",
]
