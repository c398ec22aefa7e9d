"""CPU architecture identification for root filesystems.

Each executable votes for an architecture, read from its ELF header or,
for raw images, guessed from characteristic instruction words.
"""

from __future__ import annotations

import enum
import os
import stat
import struct
from collections import Counter
from dataclasses import dataclass, field

from . import fsutil


class Family(str, enum.Enum):
    ARM = "ARM"
    MIPS = "MIPS"
    MIPSEL = "MIPSel"
    POWERPC = "PowerPC"
    I386 = "I386"
    CRIS = "CRIS"
    BFLT = "BFLT"
    NIOSII = "NiosII"
    ARC = "ARC"
    UNKNOWN = "Unknown"


class Endian(str, enum.Enum):
    LITTLE = "Little"
    BIG = "Big"
    NA = "NA"


_FAMILY_ORDER = {f: i for i, f in enumerate(Family)}
_ENDIAN_ORDER = {e: i for i, e in enumerate(Endian)}

# architectures the generic guest images exist for
QEMU_SUPPORTED = frozenset({Family.ARM, Family.MIPS, Family.MIPSEL})


@dataclass(frozen=True)
class ArchId:
    family: Family
    endianness: Endian = Endian.NA

    def __post_init__(self):
        if self.family == Family.MIPSEL and self.endianness != Endian.LITTLE:
            raise ValueError("MIPSel is little-endian")
        if self.family == Family.MIPS and self.endianness != Endian.BIG:
            raise ValueError("MIPS is big-endian")

    def sort_key(self) -> tuple[int, int]:
        return _FAMILY_ORDER[self.family], _ENDIAN_ORDER[self.endianness]

    def __str__(self) -> str:
        return f"{self.family.value}/{self.endianness.value}"

    @classmethod
    def parse(cls, text: str) -> "ArchId":
        fam, _, end = text.partition("/")
        return cls(Family(fam), Endian(end or "NA"))


UNKNOWN = ArchId(Family.UNKNOWN, Endian.NA)

ELF_MAGIC = b"\x7fELF"
BFLT_MAGIC = b"bFLT"

# e_machine values from the ELF gABI / processor supplements
EM_386 = 0x03
EM_MIPS = 0x08
EM_PPC = 0x14
EM_ARM = 0x28
EM_ARC = 0x2D
EM_CRIS = 0x4C
EM_ARC_COMPACT = 0x5D
EM_ALTERA_NIOS2 = 0x71
EM_ARC_COMPACT2 = 0xC3

_MACHINE = {
    EM_386: Family.I386,
    EM_PPC: Family.POWERPC,
    EM_ARM: Family.ARM,
    EM_ARC: Family.ARC,
    EM_CRIS: Family.CRIS,
    EM_ARC_COMPACT: Family.ARC,
    EM_ALTERA_NIOS2: Family.NIOSII,
    EM_ARC_COMPACT2: Family.ARC,
}

OPCODE_MIN_LEN = 1024
OPCODE_THRESHOLD = 0.02


@dataclass(frozen=True)
class OpcodeProfile:
    arch: ArchId
    # (mask, value) pairs over big-endian-read 32-bit words
    signatures: tuple[tuple[int, int], ...]


OPCODE_PROFILES = (
    OpcodeProfile(ArchId(Family.MIPS, Endian.BIG), (
        (0xFFFFFFFF, 0x03E00008),  # jr ra
        (0xFFFF8000, 0x27BD8000),  # addiu sp, sp, -imm
        (0xFFFF0000, 0xAFBF0000),  # sw ra, imm(sp)
        (0xFFFF0000, 0x8FBF0000),  # lw ra, imm(sp)
    )),
    OpcodeProfile(ArchId(Family.MIPSEL, Endian.LITTLE), (
        (0xFFFFFFFF, 0x0800E003),
        (0x0080FFFF, 0x0080BD27),
        (0x0000FFFF, 0x0000BFAF),
        (0x0000FFFF, 0x0000BF8F),
    )),
    OpcodeProfile(ArchId(Family.ARM, Endian.LITTLE), (
        (0xFFFFFFFF, 0x1EFF2FE1),  # bx lr
        (0x0040FFFF, 0x00402DE9),  # push {..., lr}
        (0x0080FFFF, 0x0080BDE8),  # pop {..., pc}
    )),
    OpcodeProfile(ArchId(Family.ARM, Endian.BIG), (
        (0xFFFFFFFF, 0xE12FFF1E),
        (0xFFFF4000, 0xE92D4000),
        (0xFFFF8000, 0xE8BD8000),
    )),
    OpcodeProfile(ArchId(Family.POWERPC, Endian.BIG), (
        (0xFFFFFFFF, 0x4E800020),  # blr
        (0xFFFFFFFF, 0x7C0802A6),  # mflr r0
        (0xFFFFFFFF, 0x7C0803A6),  # mtlr r0
        (0xFFFF0000, 0x94210000),  # stwu r1, imm(r1)
    )),
)


def profile_hit_rates(data: bytes) -> dict[ArchId, float]:
    """Fraction of aligned words matching each profile's signatures."""
    nwords = len(data) // 4
    if nwords == 0:
        return {p.arch: 0.0 for p in OPCODE_PROFILES}
    words = struct.unpack(f">{nwords}I", data[: nwords * 4])
    counts = Counter(words)
    rates = {}
    for prof in OPCODE_PROFILES:
        hits = 0
        for word, n in counts.items():
            if any(word & mask == value for mask, value in prof.signatures):
                hits += n
        rates[prof.arch] = hits / nwords
    return rates


def opcode_histogram(data: bytes, threshold: float = OPCODE_THRESHOLD) -> tuple[ArchId, float] | None:
    if len(data) < OPCODE_MIN_LEN:
        return None
    rates = profile_hit_rates(data)
    arch, score = max(rates.items(), key=lambda kv: (kv[1], -kv[0].sort_key()[0], -kv[0].sort_key()[1]))
    if score <= threshold:
        return None
    return arch, score


def detect_file_arch(data: bytes) -> ArchId | None:
    if data.startswith(ELF_MAGIC):
        if len(data) < 20:
            return None
        ei_data = data[5]
        if ei_data == 1:
            endian, fmt = Endian.LITTLE, "<H"
        elif ei_data == 2:
            endian, fmt = Endian.BIG, ">H"
        else:
            return UNKNOWN
        (machine,) = struct.unpack(fmt, data[18:20])
        if machine == EM_MIPS:
            return ArchId(Family.MIPSEL if endian == Endian.LITTLE else Family.MIPS, endian)
        family = _MACHINE.get(machine, Family.UNKNOWN)
        return ArchId(family, endian)
    if data.startswith(BFLT_MAGIC):
        return ArchId(Family.BFLT, Endian.NA)
    guess = opcode_histogram(data)
    return guess[0] if guess else None


@dataclass
class ArchitectureGuess:
    votes: dict[ArchId, int] = field(default_factory=dict)
    winner: ArchId = UNKNOWN
    runner_up: ArchId | None = None
    confidence: float = 0.0
    tie: bool = False
    tied: list[ArchId] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.votes.values())

    def plan_arches(self) -> list[ArchId]:
        """Architectures emulation should try, tied ones expanded in enum order."""
        return list(self.tied) if self.tie else [self.winner]

    def to_dict(self) -> dict:
        return {
            "votes": {str(k): v for k, v in sorted(self.votes.items(), key=lambda kv: kv[0].sort_key())},
            "winner": str(self.winner),
            "runner_up": str(self.runner_up) if self.runner_up else None,
            "confidence": self.confidence,
            "tie": self.tie,
            "tied": [str(a) for a in self.tied],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureGuess":
        return cls(
            votes={ArchId.parse(k): v for k, v in data["votes"].items()},
            winner=ArchId.parse(data["winner"]),
            runner_up=ArchId.parse(data["runner_up"]) if data.get("runner_up") else None,
            confidence=data["confidence"],
            tie=data["tie"],
            tied=[ArchId.parse(a) for a in data.get("tied", [])],
        )


def tally(votes: Counter | dict[ArchId, int]) -> ArchitectureGuess:
    votes = {k: v for k, v in votes.items() if v > 0}
    total = sum(votes.values())
    if not total:
        return ArchitectureGuess()
    ranked = sorted(votes.items(), key=lambda kv: (-kv[1], kv[0].sort_key()))
    top = ranked[0][1]
    tied = [a for a, n in ranked if n == top]
    return ArchitectureGuess(
        votes=dict(votes),
        winner=ranked[0][0],
        runner_up=ranked[1][0] if len(ranked) > 1 else None,
        confidence=top / total,
        tie=len(tied) > 1,
        tied=tied if len(tied) > 1 else [],
    )


LIB_DIRS = ("bin", "sbin", "usr/bin", "usr/sbin", "lib", "usr/lib")
HEADER_READ = 1 << 16


def _votes_for(rel: str, st: os.stat_result) -> bool:
    if not stat.S_ISREG(st.st_mode):
        return False
    if st.st_mode & 0o111:
        return True
    return any(rel.startswith(d + "/") for d in LIB_DIRS)


def vote_architecture(rootfs: str | os.PathLike) -> ArchitectureGuess:
    root = os.fspath(rootfs)
    votes: Counter = Counter()
    for rel, st in fsutil.walk(root):
        if not _votes_for(rel, st):
            continue
        data = fsutil.read_head(os.path.join(root, rel), HEADER_READ)
        if data is None:
            continue
        arch = detect_file_arch(data)
        if arch is not None:
            votes[arch] += 1
    return tally(votes)
