"""QEMU system emulation with a chroot into the firmware rootfs.

A prebuilt generic guest (kernel + disk image per architecture) is booted
with the packed rootfs tarball attached as a second drive. The guest is
driven over SSH on a forwarded port; the firmware is unpacked inside the
guest and entered with chroot.
"""

from __future__ import annotations

import logging
import shlex
import shutil
import socket
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

from ..archdetect import ArchId, Endian, Family
from ..collector import FileEntry, Snapshot, SnapshotLabel, parse_proc_net
from . import base
from .base import (
    Backend,
    BackendKind,
    BackendUnavailable,
    BootTimeout,
    EmulationSession,
    ExecFormatError,
    ExecResult,
    PartialFirmwareError,
    WebLaunchFailed,
)

logger = logging.getLogger(__name__)

GUEST_MOUNT = "/mnt/fw"


@dataclass(frozen=True)
class MachineSpec:
    binary: str
    machine: str
    kernel: str
    image: str
    console: str
    disk_if: str = "scsi"
    root_dev: str = "/dev/sda1"
    fw_dev: str = "/dev/sdb"


MACHINES: dict[ArchId, MachineSpec] = {
    ArchId(Family.ARM, Endian.LITTLE): MachineSpec(
        "qemu-system-arm", "versatilepb", "vmlinuz-3.2.0-4-versatile", "debian_squeeze_armel_standard.qcow2",
        "ttyAMA0"),
    ArchId(Family.MIPS, Endian.BIG): MachineSpec(
        "qemu-system-mips", "malta", "vmlinux-3.2.0-4-4kc-malta", "debian_squeeze_mips_standard.qcow2",
        "ttyS0", disk_if="ide", root_dev="/dev/hda1", fw_dev="/dev/hdb"),
    ArchId(Family.MIPSEL, Endian.LITTLE): MachineSpec(
        "qemu-system-mipsel", "malta", "vmlinux-3.2.0-4-4kc-malta", "debian_squeeze_mipsel_standard.qcow2",
        "ttyS0", disk_if="ide", root_dev="/dev/hda1", fw_dev="/dev/hdb"),
}


class Channel(Protocol):
    def run(self, command: str, timeout: float) -> ExecResult: ...

    def close(self) -> None: ...


@dataclass
class SshChannel:
    host: str
    port: int
    user: str = "root"
    identity: str | None = None
    options: list[str] = field(default_factory=lambda: [
        "-o", "StrictHostKeyChecking=no", "-o", "UserKnownHostsFile=/dev/null", "-o", "BatchMode=yes",
        "-o", "ConnectTimeout=5", "-o", "LogLevel=ERROR",
    ])

    def argv(self, command: str) -> list[str]:
        cmd = ["ssh", "-p", str(self.port), *self.options]
        if self.identity:
            cmd += ["-i", self.identity]
        return cmd + [f"{self.user}@{self.host}", command]

    def run(self, command: str, timeout: float) -> ExecResult:
        try:
            proc = subprocess.run(self.argv(command), capture_output=True, timeout=timeout)
        except subprocess.TimeoutExpired as exc:
            out = (exc.stdout or b"") + (exc.stderr or b"")
            return ExecResult(-1, out.decode("utf-8", "replace"), timed_out=True)
        out = proc.stdout + proc.stderr
        return ExecResult(proc.returncode, out.decode("utf-8", "replace"))

    def close(self) -> None:
        pass


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def build_qemu_command(spec: MachineSpec, image_dir: Path, packed: str, forwards: dict[int, int],
                       memory_mb: int = 256) -> list[str]:
    """argv for the guest VM; ``forwards`` maps guest TCP ports to host ports."""
    hostfwd = ",".join(f"hostfwd=tcp:127.0.0.1:{h}-:{g}" for g, h in sorted(forwards.items()))
    return [
        spec.binary,
        "-M", spec.machine,
        "-m", str(memory_mb),
        "-kernel", str(image_dir / spec.kernel),
        "-drive", f"file={image_dir / spec.image},if={spec.disk_if},snapshot=on",
        "-drive", f"file={packed},if={spec.disk_if},format=raw,readonly=on",
        "-append", f"root={spec.root_dev} console={spec.console}",
        "-netdev", f"user,id=net0,{hostfwd}",
        "-device", "e1000,netdev=net0" if spec.machine != "versatilepb" else "rtl8139,netdev=net0",
        "-nographic",
    ]


def parse_guest_manifest(stat_output: str, hash_output: str) -> dict[str, FileEntry]:
    """Combine ``stat -c '%s %Y %n'`` and ``sha256sum`` output from the guest."""
    hashes = {}
    for line in hash_output.splitlines():
        digest, _, name = line.partition("  ")
        if name:
            hashes[name] = digest
    files = {}
    for line in stat_output.splitlines():
        parts = line.split(" ", 2)
        if len(parts) != 3:
            continue
        size, mtime, name = parts
        path = "/" + name.lstrip("./")
        files[path] = FileEntry(int(size), int(mtime), hashes.get(name, "link-or-unreadable"))
    return files


class QemuChrootBackend(Backend):
    kind = BackendKind.QEMU_CHROOT

    def __init__(self, image_dir: str | Path = "/var/lib/firmscope/guests",
                 channel_factory: Callable[[int], Channel] | None = None,
                 ssh_wait_s: int = 120):
        self.image_dir = Path(image_dir)
        self.channel_factory = channel_factory or (lambda port: SshChannel("127.0.0.1", port))
        self.ssh_wait_s = ssh_wait_s
        self.launch_vm = channel_factory is None

    def supports(self, arch: ArchId) -> bool:
        return arch in MACHINES

    def _prepare(self, session: EmulationSession) -> None:
        spec = MACHINES[session.arch]
        forwards = {22: free_port()}
        for port in session.plan.port_candidates:
            forwards[port] = free_port()
        session.backend_state["forwards"] = forwards
        if self.launch_vm:
            if shutil.which(spec.binary) is None:
                raise BackendUnavailable(f"{spec.binary} not installed")
            for f in (spec.kernel, spec.image):
                if not (self.image_dir / f).is_file():
                    raise BackendUnavailable(f"guest image {self.image_dir / f} missing")
            argv = build_qemu_command(spec, self.image_dir, session.plan.candidate.packed_path, forwards)
            session.log_boot("$ " + shlex.join(argv))
            log = open(session.directory / "qemu.log", "wb")
            session.backend_state["vm"] = subprocess.Popen(argv, stdin=subprocess.DEVNULL, stdout=log,
                                                           stderr=subprocess.STDOUT)
        channel = self.channel_factory(forwards[22])
        session.backend_state["channel"] = channel
        deadline = time.monotonic() + (self.ssh_wait_s if self.launch_vm else 1)
        while True:
            res = channel.run("true", timeout=10)
            if res.exit_code == 0:
                break
            if time.monotonic() > deadline:
                self._teardown(session)
                raise BootTimeout("guest never answered on its command channel")
            time.sleep(2)
        res = channel.run(
            f"mkdir -p {GUEST_MOUNT} && tar -xf {spec.fw_dev} -C {GUEST_MOUNT} && "
            f"for d in proc sys dev; do mkdir -p {GUEST_MOUNT}/$d; done && "
            f"mount -t proc proc {GUEST_MOUNT}/proc && mount -t sysfs sys {GUEST_MOUNT}/sys && "
            f"mount --bind /dev {GUEST_MOUNT}/dev",
            timeout=session.plan.boot_timeout_s,
        )
        session.log_boot(res.output or "rootfs unpacked")

    def _channel(self, session: EmulationSession) -> Channel:
        return session.backend_state["channel"]

    def _enter_chroot(self, session: EmulationSession) -> None:
        res = self._channel(session).run(
            f"chroot {GUEST_MOUNT} /bin/sh -c 'echo {base.CHROOT_MARKER}'", timeout=session.plan.boot_timeout_s)
        if res.output:
            session.log_boot(res.output.rstrip())
        low = res.output.lower()
        if "exec format error" in low or "illegal instruction" in low:
            raise ExecFormatError("/bin/sh: exec format error")
        if res.timed_out:
            raise BootTimeout("chroot shell did not answer")
        if res.exit_code != 0 and "no such file" in low:
            raise PartialFirmwareError("no usable shell in the rootfs")
        if base.CHROOT_MARKER not in res.output:
            raise BootTimeout("chroot marker not seen")

    def exec(self, session: EmulationSession, command: str, timeout: float | None = None) -> ExecResult:
        path = base.split_command(command)[0] if command.strip() else ""
        probe = self._channel(session).run(f"test -e {GUEST_MOUNT}{shlex.quote(path)}", timeout=10)
        if probe.exit_code != 0:
            return ExecResult(base.EXIT_NOT_FOUND, f"{path}: not found")
        res = self._channel(session).run(f"chroot {GUEST_MOUNT} {command}",
                                         timeout=timeout or session.plan.boot_timeout_s)
        if "exec format error" in res.output.lower():
            return ExecResult(base.EXIT_EXEC_FORMAT, res.output, res.timed_out)
        return res

    def _start_web(self, session: EmulationSession, command: str) -> int | None:
        log = f"/tmp/fscope-web-{session.session_id}.log"
        self._channel(session).run(
            f"chroot {GUEST_MOUNT} /bin/sh -c {shlex.quote(command)} > {log} 2>&1 &", timeout=15)
        time.sleep(2)
        out = self._channel(session).run(f"cat {log}", timeout=10).output
        if out:
            session.log_web(out.rstrip())
        if "exec format error" in out.lower():
            raise WebLaunchFailed("web server: exec format error")
        for profile in session.plan.profiles:
            if command in profile.launch_commands and profile.parsed and profile.parsed.port:
                return profile.parsed.port
        return None

    def resolve(self, session: EmulationSession, guest_port: int) -> tuple[str, int] | None:
        host_port = session.backend_state.get("forwards", {}).get(guest_port)
        return ("127.0.0.1", host_port) if host_port else None

    def snapshot(self, session: EmulationSession, label: SnapshotLabel) -> Snapshot:
        ch = self._channel(session)
        prune = r"\( -path ./proc -o -path ./sys -o -path ./dev \) -prune -o"
        stat_out = ch.run(f"cd {GUEST_MOUNT} && find . -xdev {prune} \\( -type f -o -type l \\) "
                          f"-exec stat -c '%s %Y %n' {{}} +", timeout=300).output
        hash_out = ch.run(f"cd {GUEST_MOUNT} && find . -xdev {prune} -type f -exec sha256sum {{}} +",
                          timeout=600).output
        services = []
        if label != SnapshotLabel.PRE_EMULATION:
            services = (parse_proc_net(ch.run("cat /proc/net/tcp", timeout=10).output, "TCP")
                        + parse_proc_net(ch.run("cat /proc/net/udp", timeout=10).output, "UDP"))
        snap = Snapshot(SnapshotLabel(label), parse_guest_manifest(stat_out, hash_out), services, time.time())
        session.record_snapshot(snap)
        return snap

    def _teardown(self, session: EmulationSession) -> None:
        channel = session.backend_state.pop("channel", None)
        if channel is not None:
            if self.launch_vm:
                channel.run("poweroff", timeout=10)
            channel.close()
        vm = session.backend_state.pop("vm", None)
        if vm is not None:
            try:
                vm.wait(timeout=20)
            except subprocess.TimeoutExpired:
                vm.kill()
