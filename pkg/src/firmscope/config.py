"""Run configuration loaded from an INI-style ``key = value`` file.

Example::

    [pipeline]
    jobs = 4
    seed = 0
    port_candidates = 80, 8080, 443

    [emulation]
    boot_timeout_s = 60
    web_timeout_s = 30

    [triage.patterns]
    gpio = WebServer | MissingDevice | cannot open /sys/class/gpio
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .triage import Rule, rules_from_section

FIXTURE_TIMEOUT_S = 5


@dataclass
class Config:
    jobs: int = 4
    seed: int = 0
    port_candidates: tuple[int, ...] = (80, 8080, 443)
    boot_timeout_s: int = 60
    web_timeout_s: int = 30
    fixture_timeout_s: int = FIXTURE_TIMEOUT_S
    scan_timeout_s: float = 10.0
    confidence: float = 0.95
    half_width: float = 0.10
    sample_seed: int = 0
    qemu_image_dir: str = "/var/lib/firmscope/guests"
    hosted_root: str | None = None
    extra_rules: list[Rule] = field(default_factory=list)

    def timeouts_for(self, backend: str) -> tuple[int, int]:
        if backend == "Fixture":
            return self.fixture_timeout_s, self.fixture_timeout_s
        return self.boot_timeout_s, self.web_timeout_s

    def fingerprint(self) -> dict:
        """Settings that change analysis results (resume is invalidated when they differ)."""
        return {"seed": self.seed, "port_candidates": list(self.port_candidates),
                "extra_rules": [(r.stage.value, r.cause.value, r.pattern.pattern) for r in self.extra_rules]}


_SECTION_KEYS = {
    "pipeline": ("jobs", "seed", "port_candidates"),
    "emulation": ("boot_timeout_s", "web_timeout_s", "fixture_timeout_s", "qemu_image_dir", "hosted_root"),
    "scanner": ("scan_timeout_s",),
    "triage": ("confidence", "half_width", "sample_seed"),
}


def _convert(name: str, raw: str):
    types = {f.name: f.type for f in fields(Config)}
    kind = types[name]
    if name == "port_candidates":
        ports = tuple(int(p) for p in raw.replace(",", " ").split())
        if not ports or any(not 1 <= p <= 65535 for p in ports):
            raise ValueError(f"bad port list {raw!r}")
        return ports
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw or None


def load_config(path: str | os.PathLike | None = None) -> Config:
    cfg = Config()
    if path is None:
        return cfg
    cp = configparser.ConfigParser(interpolation=None)
    if not cp.read(Path(path), encoding="utf-8"):
        raise FileNotFoundError(path)
    for section, keys in _SECTION_KEYS.items():
        if not cp.has_section(section):
            continue
        for key in keys:
            if key in cp[section]:
                setattr(cfg, key, _convert(key, cp[section][key].strip()))
    if cp.has_section("triage.patterns"):
        cfg.extra_rules = rules_from_section(cp["triage.patterns"])
    if cfg.jobs < 1:
        raise ValueError("jobs must be at least 1")
    return cfg
