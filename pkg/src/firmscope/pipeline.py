"""Batch orchestration: run every stage per firmware, persist, and report.

Per firmware the chain is selection, root filesystem candidates and
variants, architecture vote, web-server heuristics, emulation, scan and
collection. Each firmware's result is written to its workspace directory,
so an interrupted batch resumes where it stopped. The report is a
reduction over the per-firmware results in id order.
"""

from __future__ import annotations

import enum
import json
import logging
import random
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from . import staticintake
from .archdetect import ArchId, vote_architecture
from .collector import (
    SnapshotLabel,
    TranscriptRecorder,
    detect_injection_artifacts,
    diff_snapshots,
    find_trigger_requests,
)
from .config import Config
from .corpus import Workspace
from .emulation import (
    Backend,
    BackendUnavailable,
    BootTimeout,
    EmulationPlan,
    SessionState,
    get_backend,
)
from .findings import Finding, load_jsonl
from .fsroot import RootFsCandidate, generate_variants, scan_candidates, write_candidates
from .scanner import BuiltinScanner, ScanJob
from .triage import (
    Classifier,
    FailureRecord,
    Stage as FailureStage,
    cause_estimates,
    draw_sample,
    easy_fix_bound,
    plan_sample,
    rootfs_facts,
    z_for_confidence,
)
from .webheur import (
    DocRoot,
    WebServerProfile,
    build_sitemap,
    detect_https_material,
    discover_docroots,
    docroot_from_config,
    find_web_servers,
    profile_with_commands,
)

logger = logging.getLogger(__name__)

MARKER_BASE = "fscope-inj-"
EMPTY_BANNER = "empty banner"


class Stage(str, enum.Enum):
    INGESTED = "Ingested"
    CANDIDATE = "Candidate"
    CHROOT_OK = "ChrootOK"
    WEB_SERVER_OK = "WebServerOK"
    VULNERABLE = "Vulnerable"

    @property
    def rank(self) -> int:
        return list(Stage).index(self)


@dataclass
class StageOutcome:
    firmware_id: str
    stage: Stage
    detail: str = ""


def marker_prefix(seed: int, firmware_id: str) -> str:
    return MARKER_BASE + "%08x" % random.Random(f"{seed}:{firmware_id}").getrandbits(32) + "-"


@dataclass
class FirmwareResult:
    firmware_id: str
    name: str = ""
    stage: Stage = Stage.INGESTED
    detail: str = ""
    selected: bool = False
    candidates: list[str] = field(default_factory=list)
    arch: str | None = None
    arch_votes: dict = field(default_factory=dict)
    attempts: list[dict] = field(default_factory=list)
    web_variant: str | None = None
    server_kind: str | None = None
    banner: str | None = None
    technologies: list[str] = field(default_factory=list)
    findings: list[dict] = field(default_factory=list)
    failure: dict | None = None
    new_services: list[list] = field(default_factory=list)
    https: dict = field(default_factory=dict)
    error: str | None = None
    fingerprint: dict = field(default_factory=dict)

    def advance(self, stage: Stage, detail: str = "") -> None:
        if stage.rank > self.stage.rank:
            self.stage = stage
            self.detail = detail or self.detail

    @property
    def outcome(self) -> StageOutcome:
        return StageOutcome(self.firmware_id, self.stage, self.detail)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FirmwareResult":
        d = dict(d)
        d["stage"] = Stage(d["stage"])
        return cls(**d)


@dataclass
class WebPlan:
    profiles: list[WebServerProfile]
    docroots: list[DocRoot]
    command_docroot: dict[str, DocRoot]


def plan_web(rootfs: str | Path) -> WebPlan:
    """Server profiles with launch commands, and the docroot each command serves."""
    discovered = discover_docroots(rootfs)
    profiles = find_web_servers(rootfs)
    docroots: list[DocRoot] = []
    mapping: dict[str, DocRoot] = {}
    for profile in profiles:
        roots = discovered
        if profile.parsed and profile.parsed.document_root:
            configured = docroot_from_config(rootfs, profile.parsed.document_root)
            if configured is not None:
                roots = [configured]
        profile_with_commands(profile, roots)
        for i, cmd in enumerate(profile.launch_commands):
            if roots:
                mapping[cmd] = roots[i] if len(roots) == len(profile.launch_commands) else roots[0]
        for r in roots:
            if all(r.dir_rel_path != d.dir_rel_path for d in docroots):
                docroots.append(r)
    if not profiles:
        docroots = list(discovered)
    return WebPlan(profiles, docroots, mapping)


def _slug(arch: ArchId) -> str:
    return str(arch).replace("/", "-").lower()


def static_findings(ws: Workspace, firmware_id: str) -> list[Finding]:
    d = ws.firmware_dir(firmware_id) / "static"
    out: list[Finding] = []
    if d.is_dir():
        for p in sorted(d.glob("*.jsonl")):
            out.extend(load_jsonl(p.read_text("utf-8")))
    return out


class FirmwareAnalysis:
    """Runs the stage chain for one firmware with one backend."""

    def __init__(self, ws: Workspace, firmware_id: str, backend: Backend, cfg: Config,
                 scan: bool = True, focus_from_static: bool = True, session_id: str | None = None):
        self.ws = ws
        self.scan = scan
        self.focus_from_static = focus_from_static
        self.session_id = session_id
        self.fid = firmware_id
        self.backend = backend
        self.cfg = cfg
        self.classifier = Classifier(cfg.extra_rules)
        self.fw_dir = ws.firmware_dir(firmware_id)
        self.sessions_root = self.fw_dir / "sessions" / backend.kind.value.lower()
        self.result = FirmwareResult(firmware_id, fingerprint=cfg.fingerprint())
        self._failure: tuple[int, FailureRecord] | None = None

    def run(self) -> FirmwareResult:
        try:
            self._run()
        except Exception as exc:  # one firmware must never take the batch down
            logger.exception("analysis of %s crashed", self.fid[:12])
            self.result.error = f"{type(exc).__name__}: {exc}"
        if self._failure and self.result.stage.rank < Stage.WEB_SERVER_OK.rank:
            self.result.failure = self._failure[1].to_dict()
        return self.result

    def _run(self) -> None:
        res = self.result
        image = self.ws.load(self.fid)
        res.name = Path(image.source_path).name
        res.selected = image.selection.selected
        if not res.selected:
            res.detail = "not selected (no Linux userland with web interface markers)"
            return
        candidates = scan_candidates(self.ws.tree(self.fid), self.fid)
        if not candidates:
            res.detail = "no root filesystem candidate"
            return
        res.advance(Stage.CANDIDATE, f"{len(candidates)} root filesystem candidate(s)")
        variants: list[RootFsCandidate] = []
        rootfs_dir = self.fw_dir / "rootfs"
        for c in candidates:
            variants.extend(generate_variants(c, rootfs_dir))
        write_candidates(rootfs_dir / "candidates.json", variants)
        res.candidates = [v.label for v in variants]
        res.https = detect_https_material(variants[0].fs_path)

        static = static_findings(self.ws, self.fid)
        focus = staticintake.select_high_impact(static) if self.focus_from_static else []
        for variant in variants:
            if self._try_variant(variant, focus):
                break
        high = [f for f in res.findings if f.get("severity") == "High"] + [f.to_dict() for f in static if f.high]
        if res.stage == Stage.WEB_SERVER_OK and high:
            cats = sorted({f["category"] for f in high})
            res.advance(Stage.VULNERABLE, "high-impact findings: " + ", ".join(cats))

    def _record_failure(self, rank: int, record: FailureRecord) -> None:
        if self._failure is None or rank > self._failure[0]:
            self._failure = (rank, record)

    def _try_variant(self, variant: RootFsCandidate, focus: list[str]) -> bool:
        res = self.result
        guess = vote_architecture(variant.fs_path)
        if res.arch is None:
            res.arch = str(guess.winner)
            res.arch_votes = guess.to_dict()
        web = plan_web(variant.fs_path)
        arches = guess.plan_arches()
        boot_t, web_t = self.cfg.timeouts_for(self.backend.kind.value)
        for arch in arches:
            plan = EmulationPlan(self.fid, variant, arches, self.backend.kind, web.profiles, web.docroots,
                                 boot_t, web_t, str(self.sessions_root), tuple(self.cfg.port_candidates))
            sid = f"{variant.label}-{_slug(arch)}"
            if self.session_id and sid != self.session_id:
                continue
            try:
                session = self.backend.prepare(plan, sid, arch)
            except BackendUnavailable as exc:
                res.attempts.append({"session_id": sid, "state": "Unavailable", "failure": str(exc)})
                continue
            try:
                if self._run_session(session, variant, web, focus):
                    return True
            finally:
                self.backend.stop(session)
                res.attempts.append(session.summary())
        return False

    def _run_session(self, session, variant: RootFsCandidate, web: WebPlan, focus: list[str]) -> bool:
        res = self.result
        backend = self.backend
        pre = backend.snapshot(session, SnapshotLabel.PRE_EMULATION)
        if backend.boot(session) == SessionState.FAILED:
            record = self.classifier.classify_chroot(
                self.fid, session.boot_log, rootfs_facts(variant.fs_path),
                timed_out=isinstance(session.failure, BootTimeout))
            self._record_failure(1, record)
            return False
        res.advance(Stage.CHROOT_OK, f"chroot ok ({variant.label}, {session.arch})")
        commands = [c for p in web.profiles for c in p.launch_commands]
        state = backend.launch_web(session, commands)
        post_boot = backend.snapshot(session, SnapshotLabel.POST_BOOT)
        boot_diff = diff_snapshots(pre, post_boot)
        services = sorted({(s.proto, s.port, s.program) for s in boot_diff.new_services})
        if state != SessionState.WEB_UP:
            self._record_failure(2, self.classifier.classify_web(self.fid, session.web_log))
            res.new_services = [list(s) for s in services]
            return False
        res.new_services = [list(s) for s in services]
        res.advance(Stage.WEB_SERVER_OK, f"web up ({variant.label}, {session.web_command})")
        res.web_variant = variant.label
        res.banner = session.banner
        profile = next((p for p in web.profiles if session.web_command in p.launch_commands), None)
        res.server_kind = profile.kind.value if profile else None
        docroot = self._served_docroot(session.web_command or "", web)
        res.technologies = sorted(docroot.technologies) if docroot else []
        if not self.scan:
            return True
        sitemap = build_sitemap(variant.fs_path, docroot) if docroot else None
        urls = sitemap.urls if sitemap and sitemap.urls else ["/"]
        prefix = marker_prefix(self.cfg.seed, self.fid)
        job = ScanJob(session.base_url, urls, prefix, focus, self.fid)
        recorder = TranscriptRecorder(session.directory / "transcript.jsonl")
        scan = BuiltinScanner(recorder, self.cfg.scan_timeout_s).scan(job)
        post_scan = backend.snapshot(session, SnapshotLabel.POST_SCAN)
        scan_diff = diff_snapshots(post_boot, post_scan)
        (session.directory / "diff-PostBoot-PostScan.json").write_text(
            json.dumps(scan_diff.to_dict(), indent=1), "utf-8")
        findings = list(scan.findings)
        for f in detect_injection_artifacts(scan_diff, prefix, self.fid):
            trig = find_trigger_requests(recorder.entries, f.locator.target)
            f.extra["trigger_seqs"] = [e["seq"] for e in trig.matches]
            f.extra["full_window"] = trig.full_window
            if trig.matches:
                req = trig.matches[0]["request"]
                f.locator.parameter = next((p.parameter for p in scan.payloads if p.nonce in f.locator.target), None)
                f.evidence += f"; triggered by {req['method']} {_path_only(req['url'])}"
            findings.append(f)
        if scan.error:
            res.detail += f"; scan partial: {scan.error}"
        res.findings = [f.to_dict() for f in findings]
        return True

    def _served_docroot(self, command: str, web: WebPlan) -> DocRoot | None:
        if command in web.command_docroot:
            return web.command_docroot[command]
        if command.startswith("hosted:"):
            rel = command.split(":", 1)[1]
            return next((d for d in web.docroots if d.dir_rel_path == rel), None)
        return web.docroots[0] if web.docroots else None


def _path_only(url: str) -> str:
    from urllib.parse import urlsplit

    parts = urlsplit(url)
    return parts.path + ("?" + parts.query if parts.query else "")


def result_path(ws: Workspace, firmware_id: str, backend: Backend) -> Path:
    return ws.firmware_dir(firmware_id) / "results" / f"{backend.kind.value.lower()}.json"


def analyze_firmware(ws: Workspace, firmware_id: str, backend: Backend, cfg: Config | None = None,
                     force: bool = False) -> FirmwareResult:
    cfg = cfg or Config()
    path = result_path(ws, firmware_id, backend)
    with ws.lock(firmware_id):
        if not force and path.is_file():
            cached = FirmwareResult.from_dict(json.loads(path.read_text("utf-8")))
            if cached.fingerprint == cfg.fingerprint() and cached.error is None:
                return cached
        result = FirmwareAnalysis(ws, firmware_id, backend, cfg).run()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(result.to_dict(), indent=1, sort_keys=True), "utf-8")
    return result


# --- report ---

@dataclass
class BatchReport:
    backend: str = ""
    firmware_count: int = 0
    funnel: dict[str, int] = field(default_factory=lambda: {s.value: 0 for s in Stage})
    per_arch: list[dict] = field(default_factory=list)
    banners: list[dict] = field(default_factory=list)
    technologies: list[dict] = field(default_factory=list)
    findings: dict = field(default_factory=dict)
    services: list[dict] = field(default_factory=list)
    https: dict = field(default_factory=dict)
    triage: dict = field(default_factory=dict)
    firmware: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BatchReport":
        return cls(**d)


def banner_label(banner: str | None) -> str:
    if not banner:
        return EMPTY_BANNER
    return banner.split("/", 1)[0].split()[0]


def _triage_section(records: list[FailureRecord], stage: FailureStage, cfg: Config) -> dict:
    population = [r for r in records if r.stage == stage]
    if not population:
        return {"population": 0}
    z = z_for_confidence(cfg.confidence)
    plan = plan_sample(len(population), cfg.half_width, z, cfg.sample_seed)
    sample = draw_sample(population, plan)
    causes = cause_estimates(sample, stage, plan.N, z)
    bound = easy_fix_bound(sample, stage, plan.N, z)
    return {
        "population": plan.N,
        "sample_size": plan.n,
        "causes": {c: e.to_dict() for c, e in causes.items()},
        "easy_fix": bound.to_dict(),
        "records": [r.to_dict() for r in sample],
    }


def build_report(results: list[FirmwareResult], backend_name: str, cfg: Config | None = None,
                 static: dict[str, list[Finding]] | None = None) -> BatchReport:
    cfg = cfg or Config()
    results = sorted(results, key=lambda r: r.firmware_id)
    rep = BatchReport(backend=backend_name, firmware_count=len(results))
    for s in Stage:
        rep.funnel[s.value] = sum(1 for r in results if r.stage.rank >= s.rank)

    arch_rows: dict[str, Counter] = {}
    for r in results:
        if r.stage.rank < Stage.CANDIDATE.rank or not r.arch:
            continue
        row = arch_rows.setdefault(r.arch, Counter())
        row["original"] += 1
        row["chroot_ok"] += r.stage.rank >= Stage.CHROOT_OK.rank
        row["web_ok"] += r.stage.rank >= Stage.WEB_SERVER_OK.rank
    rep.per_arch = [{"arch": a, "original": c["original"], "chroot_ok": c["chroot_ok"], "web_ok": c["web_ok"]}
                    for a, c in sorted(arch_rows.items(), key=lambda kv: ArchId.parse(kv[0]).sort_key())]

    web_ok = [r for r in results if r.stage.rank >= Stage.WEB_SERVER_OK.rank]
    banners = Counter(banner_label(r.banner) for r in web_ok)
    rep.banners = [{"banner": b, "count": n, "of": len(web_ok)}
                   for b, n in sorted(banners.items(), key=lambda kv: (-kv[1], kv[0]))]
    techs = Counter(t for r in web_ok for t in r.technologies)
    rep.technologies = [{"technology": t, "count": n, "of": len(web_ok)}
                        for t, n in sorted(techs.items(), key=lambda kv: (-kv[1], kv[0]))]

    all_findings = [Finding.from_dict(f) for r in results for f in r.findings]
    for fid in sorted(static or {}):
        all_findings.extend(static[fid])
    rep.findings = staticintake.aggregate(all_findings).to_dict()

    services = Counter(tuple(s) for r in results for s in r.new_services)
    rep.services = [{"proto": p, "port": port, "program": prog, "firmware": n}
                    for (p, port, prog), n in sorted(services.items(), key=lambda kv: (-kv[1], kv[0][1], kv[0]))]
    candidates = [r for r in results if r.stage.rank >= Stage.CANDIDATE.rank]
    rep.https = {
        "candidates": len(candidates),
        "with_certificate": sum(1 for r in candidates if r.https.get("cert_count")),
        "with_private_key": sum(1 for r in candidates if r.https.get("key_count")),
        "web_ok": len(web_ok),
        "web_ok_with_certificate": sum(1 for r in web_ok if r.https.get("cert_count")),
    }

    records = [FailureRecord.from_dict(r.failure) for r in results if r.failure]
    rep.triage = {
        "chroot": _triage_section(records, FailureStage.CHROOT, cfg),
        "web": _triage_section(records, FailureStage.WEB_SERVER, cfg),
    }
    rep.firmware = [{
        "id": r.firmware_id,
        "name": r.name,
        "stage": r.stage.value,
        "detail": r.detail,
        "arch": r.arch,
        "banner": banner_label(r.banner) if r.stage.rank >= Stage.WEB_SERVER_OK.rank else None,
        "failure": r.failure["cause"] if r.failure else None,
        "high_findings": sum(1 for f in r.findings if f.get("severity") == "High"),
        "error": r.error,
    } for r in results]
    return rep


def run_batch(workspace: str | Path | Workspace, backend: str | Backend = "fixture", jobs: int = 1,
              cfg: Config | None = None, force: bool = False, write: bool = True) -> BatchReport:
    cfg = cfg or Config()
    ws = workspace if isinstance(workspace, Workspace) else Workspace(workspace)
    if isinstance(backend, str):
        backend = get_backend(backend, image_dir=cfg.qemu_image_dir, host_root=cfg.hosted_root)
    ids = ws.ids()
    started = time.monotonic()
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(lambda fid: analyze_firmware(ws, fid, backend, cfg, force), ids))
    static = {fid: static_findings(ws, fid) for fid in ids}
    report = build_report(results, backend.kind.value, cfg, static)
    logger.info("batch of %d firmware finished in %.1fs", len(ids), time.monotonic() - started)
    if write and ids:
        (ws.root / "report.json").write_text(render_report(report, "json"), "utf-8")
        (ws.root / "report.md").write_text(render_report(report, "md"), "utf-8")
    return report


def load_results(ws: Workspace, backend_name: str = "fixture") -> list[FirmwareResult]:
    name = get_backend(backend_name).kind.value.lower()
    out = []
    for fid in ws.ids():
        p = ws.firmware_dir(fid) / "results" / f"{name}.json"
        if p.is_file():
            out.append(FirmwareResult.from_dict(json.loads(p.read_text("utf-8"))))
    return out


# --- rendering ---

def pct(num: int | float, den: int | float) -> str:
    if not den:
        return "-"
    value = (Decimal(str(num)) * 100 / Decimal(str(den))).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    return f"{value}%"


def pct_value(x: float) -> str:
    return f"{Decimal(repr(x * 100)).quantize(Decimal('0.1'), rounding=ROUND_HALF_UP)}%"


def _table(headers: list[str], rows: list[list]) -> list[str]:
    out = ["| " + " | ".join(headers) + " |", "|" + "|".join("---" for _ in headers) + "|"]
    out += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return out


def render_report(report: BatchReport, fmt: str = "md") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt != "md":
        raise ValueError(f"unknown report format {fmt!r}")
    ingested = report.funnel.get(Stage.INGESTED.value, 0)
    lines = [f"# firmscope report ({report.backend} backend, {report.firmware_count} firmware)", ""]

    lines += ["## Analysis funnel", ""]
    lines += _table(["Stage", "Firmware", "Share of ingested"],
                    [[s, n, pct(n, ingested)] for s, n in report.funnel.items()])

    lines += ["", "## Architectures", ""]
    lines += _table(["Architecture", "Original", "Chroot OK", "Chroot %", "Web OK", "Web %"],
                    [[r["arch"], r["original"], r["chroot_ok"], pct(r["chroot_ok"], r["original"]),
                      r["web_ok"], pct(r["web_ok"], r["original"])] for r in report.per_arch])

    lines += ["", "## Web server banners", ""]
    lines += _table(["Banner", "Firmware", "Share"],
                    [[r["banner"], r["count"], pct(r["count"], r["of"])] for r in report.banners])

    lines += ["", "## Web technologies", ""]
    lines += _table(["Technology", "Firmware", "Share"],
                    [[r["technology"], r["count"], pct(r["count"], r["of"])] for r in report.technologies])

    f = report.findings or {}
    lines += ["", "## Dynamic analysis findings", ""]
    rows = [[r["category"], r["issues"], r["firmware"], r["severity"]] for r in f.get("dynamic_table", [])]
    for key in ("dynamic_high_subtotal", "dynamic_low_subtotal"):
        if f.get(key):
            r = f[key]
            rows.append([f"**{r['category']}**", r["issues"], r["firmware"], r["severity"]])
    lines += _table(["Vulnerability", "Issues", "Firmware", "Impact"], rows)

    lines += ["", "## Static analysis findings", ""]
    lines += _table(["Vulnerability", "Issues", "Firmware"],
                    [[r["category"], r["issues"], r["firmware"]] for r in f.get("php_table", [])])
    lines += ["", f"Firmware with any finding: {f.get('unique_vulnerable_firmware', 0)}; "
                  f"with a high-impact finding: {f.get('high_impact_firmware', 0)}"]

    lines += ["", "## New network services after boot", ""]
    lines += _table(["Proto", "Port", "Program", "Firmware"],
                    [[r["proto"], r["port"], r["program"], r["firmware"]] for r in report.services])

    h = report.https or {}
    lines += ["", "## HTTPS material", ""]
    lines += _table(["Population", "Firmware", "With certificate", "With private key"], [
        ["candidates", h.get("candidates", 0), h.get("with_certificate", 0), h.get("with_private_key", 0)],
        ["web OK", h.get("web_ok", 0), h.get("web_ok_with_certificate", 0), "-"],
    ])

    lines += ["", "## Failure triage", ""]
    rows = []
    for name, sec in report.triage.items():
        if not sec.get("population"):
            rows.append([name, "-", 0, 0, "-", "-"])
            continue
        for cause, e in sec["causes"].items():
            rows.append([name, cause, e["k"], f"{sec['sample_size']}/{sec['population']}",
                         f"{pct_value(e['p'])} ± {pct_value(e['half_width'])}", pct_value(e["lower"])])
        ez = sec["easy_fix"]
        rows.append([name, "**easy to fix**", ez["estimate"]["k"], f"{sec['sample_size']}/{sec['population']}",
                     f"{pct_value(ez['estimate']['p'])} ± {pct_value(ez['estimate']['half_width'])}",
                     pct_value(ez["lower_bound"])])
    lines += _table(["Stage", "Cause", "k", "Sample/Population", "Estimate", "At least"], rows)

    lines += ["", "## Firmware", ""]
    lines += _table(["Firmware", "Id", "Stage", "Arch", "Banner", "Failure", "High findings"],
                    [[r["name"], r["id"][:12], r["stage"], r["arch"] or "-", r["banner"] or "-",
                      r["failure"] or "-", r["high_findings"]] for r in report.firmware])
    return "\n".join(lines) + "\n"


def compare_backends(workspace: str | Path | Workspace, backends: tuple[str, ...] = ("fixture", "hosted"),
                     cfg: Config | None = None) -> list[dict]:
    """Stage reached per firmware under each backend (selected firmware only)."""
    cfg = cfg or Config()
    ws = workspace if isinstance(workspace, Workspace) else Workspace(workspace)
    rows = []
    instances = [get_backend(b, image_dir=cfg.qemu_image_dir, host_root=cfg.hosted_root) for b in backends]
    for fid in ws.ids():
        if not ws.load(fid).selection.selected:
            continue
        row = {"id": fid, "name": Path(ws.load(fid).source_path).name}
        for name, backend in zip(backends, instances):
            r = analyze_firmware(ws, fid, backend, cfg)
            row[name] = {"stage": r.stage.value,
                         "high_findings": sum(1 for f in r.findings if f.get("severity") == "High")}
        rows.append(row)
    return rows


def render_comparison(rows: list[dict], backends: tuple[str, ...]) -> str:
    headers = ["Firmware"] + [f"{b} stage" for b in backends] + [f"{b} high" for b in backends]
    body = [[r["name"]] + [r[b]["stage"] for b in backends] + [r[b]["high_findings"] for b in backends]
            for r in rows]
    return "\n".join(_table(headers, body)) + "\n"
