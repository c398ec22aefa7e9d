"""Command-line entry point. Each subcommand runs one stage or the whole chain."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import fixtures, pipeline, staticintake, triage
from .archdetect import vote_architecture
from .collector import (
    Snapshot,
    SnapshotLabel,
    detect_injection_artifacts,
    diff_snapshots,
    find_trigger_requests,
    load_transcript,
)
from .config import load_config
from .corpus import IngestError, Workspace, ingest
from .emulation import BACKEND_NAMES, get_backend
from .findings import dump_jsonl
from .fsroot import generate_variants, load_candidates, scan_candidates, write_candidates
from .webheur import build_sitemap, detect_https_material

log = logging.getLogger("firmscope")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(obj), "utf-8")


def resolve_id(ws: Workspace, prefix: str) -> str:
    matches = [i for i in ws.ids() if i.startswith(prefix)]
    if not matches:
        names = {i: Path(ws.load(i).source_path).name for i in ws.ids()}
        matches = [i for i, n in names.items() if n == prefix] or \
            [i for i, n in names.items() if n.startswith(prefix)]
    if len(matches) != 1:
        raise SystemExit(f"firmware {prefix!r}: {'ambiguous' if matches else 'not found'}")
    return matches[0]


def _variants(ws: Workspace, fid: str):
    path = ws.firmware_dir(fid) / "rootfs" / "candidates.json"
    if path.is_file():
        return load_candidates(path)
    variants = []
    for c in scan_candidates(ws.tree(fid), fid):
        variants.extend(generate_variants(c, path.parent))
    write_candidates(path, variants)
    return variants


def cmd_ingest(args, cfg) -> int:
    ws = Workspace(args.workspace)
    trees = sorted(p for p in Path(args.path).iterdir() if p.is_dir()) if args.each else [Path(args.path)]
    status = 0
    for tree in trees:
        try:
            fw = ingest(tree, args.vendor, ws)
        except IngestError as exc:
            log.error("%s", exc)
            status = 1
            continue
        print(f"{fw.id[:12]}  {'selected' if fw.selection.selected else 'skipped '}  {tree}")
    return status


def cmd_rootfs(args, cfg) -> int:
    ws = Workspace(args.workspace)
    fid = resolve_id(ws, args.id)
    out = ws.firmware_dir(fid) / "rootfs"
    variants = []
    for c in scan_candidates(ws.tree(fid), fid):
        variants.extend(generate_variants(c, out))
    write_candidates(out / "candidates.json", variants)
    for v in variants:
        print(f"{v.label:20} score={v.score:<3} repairs={len(v.repairs):<3} {v.root_rel_path}")
    if not variants:
        print("no root filesystem candidate")
    return 0


def cmd_arch(args, cfg) -> int:
    ws = Workspace(args.workspace)
    fid = resolve_id(ws, args.id)
    variants = _variants(ws, fid)
    if not variants:
        raise SystemExit("no root filesystem candidate; nothing to vote on")
    guess = vote_architecture(variants[0].fs_path)
    _write_json(ws.firmware_dir(fid) / "arch.json", guess.to_dict())
    print(_dump(guess.to_dict()), end="")
    return 0


def cmd_webheur(args, cfg) -> int:
    ws = Workspace(args.workspace)
    fid = resolve_id(ws, args.id)
    out = []
    for v in _variants(ws, fid):
        web = pipeline.plan_web(v.fs_path)
        out.append({
            "candidate": v.label,
            "profiles": [{"kind": p.kind.value, "binary": p.binary_rel_path, "config": p.config_rel_path,
                          "document_root": p.parsed.document_root if p.parsed else None,
                          "launch_commands": p.launch_commands} for p in web.profiles],
            "docroots": [{"dir": d.dir_rel_path, "origin": d.origin, "index_files": d.index_files,
                          "technologies": sorted(d.technologies)} for d in web.docroots],
            "sitemaps": {d.dir_rel_path: build_sitemap(v.fs_path, d).urls for d in web.docroots},
            "https": detect_https_material(v.fs_path),
        })
    _write_json(ws.firmware_dir(fid) / "web.json", out)
    print(_dump(out), end="")
    return 0


def _backend(args, cfg):
    return get_backend(args.backend, image_dir=cfg.qemu_image_dir, host_root=cfg.hosted_root)


def cmd_emulate(args, cfg) -> int:
    ws = Workspace(args.workspace)
    fid = resolve_id(ws, args.id)
    res = pipeline.FirmwareAnalysis(ws, fid, _backend(args, cfg), cfg, scan=False).run()
    print(f"stage: {res.stage.value} ({res.detail})")
    for a in res.attempts:
        print(f"  {a['session_id']:28} {a['state']:10} {a.get('failure') or ''}")
    if res.failure:
        print(f"failure: {res.failure['stage']} {res.failure['cause']} ({res.failure['fixability']})")
    return 0 if res.error is None else 1


def _split_session(ws: Workspace, ref: str) -> tuple[str, str | None]:
    fid, _, sid = ref.partition("/")
    return resolve_id(ws, fid), sid or None


def cmd_scan(args, cfg) -> int:
    ws = Workspace(args.workspace)
    fid, sid = _split_session(ws, args.session)
    res = pipeline.FirmwareAnalysis(ws, fid, _backend(args, cfg), cfg, scan=True,
                                    focus_from_static=args.focus_from_static, session_id=sid).run()
    print(f"stage: {res.stage.value} ({res.detail})")
    for f in res.findings:
        loc = f["locator"]
        param = f" [{loc['parameter']}]" if loc.get("parameter") else ""
        print(f"  {f['severity']:4} {f['category']:22} {loc['target']}{param}")
    return 0 if res.error is None else 1


def _session_dirs(ws: Workspace, ref: str) -> list[Path]:
    fid, sid = _split_session(ws, ref)
    root = ws.firmware_dir(fid) / "sessions"
    dirs = sorted(p.parent for p in root.glob("*/*/plan.json"))
    return [d for d in dirs if sid is None or d.name == sid]


def cmd_collect(args, cfg) -> int:
    ws = Workspace(args.workspace)
    fid, _ = _split_session(ws, args.session)
    dirs = _session_dirs(ws, args.session)
    if not dirs:
        raise SystemExit("no recorded session")
    prefix = args.prefix or pipeline.marker_prefix(cfg.seed, fid)
    for d in dirs:
        snaps = {s.label: s for s in (Snapshot.load(p) for p in sorted((d / "snapshots").glob("*.json")))}
        print(f"{d.parent.name}/{d.name}: snapshots {', '.join(l.value for l in sorted(snaps, key=lambda l: l.rank))}")
        order = [l for l in SnapshotLabel if l in snaps]
        transcript = load_transcript(d / "transcript.jsonl") if (d / "transcript.jsonl").is_file() else []
        for a, b in zip(order, order[1:]):
            diff = diff_snapshots(snaps[a], snaps[b])
            _write_json(d / f"diff-{a.value}-{b.value}.json", diff.to_dict())
            print(f"  {a.value}->{b.value}: +{len(diff.added)} ~{len(diff.modified)} -{len(diff.deleted)} "
                  f"services+{len(diff.new_services)}")
            for f in detect_injection_artifacts(diff, prefix, fid):
                trig = find_trigger_requests(transcript, f.locator.target)
                seqs = [e["seq"] for e in trig.matches]
                print(f"    CommandExecution {f.locator.target} triggered by seq {seqs or 'unknown'}")
    return 0


def cmd_static_ingest(args, cfg) -> int:
    ws = Workspace(args.workspace)
    fid = resolve_id(ws, args.id)
    findings, skipped = staticintake.read_static_report(args.report, fid)
    out = ws.firmware_dir(fid) / "static" / (Path(args.report).stem + ".jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dump_jsonl(findings), "utf-8")
    print(f"{len(findings)} finding(s) stored in {out}; {skipped} malformed record(s) skipped")
    return 0


def cmd_report(args, cfg) -> int:
    ws = Workspace(args.workspace)
    results = pipeline.load_results(ws, args.backend)
    static = {fid: pipeline.static_findings(ws, fid) for fid in ws.ids()}
    report = pipeline.build_report(results, BACKEND_NAMES[args.backend].value, cfg, static)
    text = pipeline.render_report(report, args.format)
    if args.output:
        Path(args.output).write_text(text, "utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_triage(args, cfg) -> int:
    ws = Workspace(args.workspace)
    if args.confidence is not None:
        cfg.confidence = args.confidence
    if args.half_width is not None:
        cfg.half_width = args.half_width
    if args.sample_seed is not None:
        cfg.sample_seed = args.sample_seed
    results = pipeline.load_results(ws, args.backend)
    records = [triage.FailureRecord.from_dict(r.failure) for r in results if r.failure]
    stages = [triage.Stage.CHROOT, triage.Stage.WEB_SERVER]
    if args.stage:
        stages = [triage.Stage.CHROOT if args.stage == "chroot" else triage.Stage.WEB_SERVER]
    out = {s.value: pipeline._triage_section(records, s, cfg) for s in stages}
    _write_json(ws.root / "triage.json", out)
    for stage, sec in out.items():
        if not sec.get("population"):
            print(f"{stage}: no failures")
            continue
        print(f"{stage}: population {sec['population']}, sample {sec['sample_size']}")
        for cause, e in sec["causes"].items():
            print(f"  {cause:22} {e['k']:>4}  {pipeline.pct_value(e['p'])} ± {pipeline.pct_value(e['half_width'])}")
        print(f"  easy to fix: at least {pipeline.pct_value(sec['easy_fix']['lower_bound'])}")
    return 0


def cmd_run(args, cfg) -> int:
    jobs = args.jobs or cfg.jobs
    report = pipeline.run_batch(args.workspace, args.backend, jobs, cfg, force=args.force)
    sys.stdout.write(pipeline.render_report(report, args.format))
    return 0


def cmd_compare(args, cfg) -> int:
    backends = tuple(args.backends)
    rows = pipeline.compare_backends(args.workspace, backends, cfg)
    sys.stdout.write(pipeline.render_comparison(rows, backends))
    return 0


def cmd_fixtures(args, cfg) -> int:
    specs = fixtures.load_specs(args.specs) if args.specs else list(fixtures.DEFAULT_CORPUS)
    if args.dump_specs:
        fixtures.dump_specs(specs, args.dump_specs)
    for path in fixtures.build_corpus(specs, args.out, args.seed):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="firmscope", description="Analyze embedded web interfaces in unpacked firmware.")
    parser.add_argument("--config", help="INI-style config file")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workspace", default="workspace", help="workspace directory (default: %(default)s)")
    backend = argparse.ArgumentParser(add_help=False)
    backend.add_argument("--backend", choices=sorted(BACKEND_NAMES), default="fixture")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="register an unpacked firmware tree")
    p.add_argument("path")
    p.add_argument("--vendor")
    p.add_argument("--each", action="store_true", help="ingest every subdirectory of PATH")
    p.set_defaults(func=cmd_ingest)

    for name, func, text in (("rootfs", cmd_rootfs, "find root filesystem candidates"),
                             ("arch", cmd_arch, "vote the CPU architecture"),
                             ("webheur", cmd_webheur, "locate web servers and document roots")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("id", help="firmware id prefix or tree name")
        p.set_defaults(func=func)

    p = sub.add_parser("emulate", parents=[common, backend], help="boot and launch the web server")
    p.add_argument("id")
    p.set_defaults(func=cmd_emulate)

    p = sub.add_parser("scan", parents=[common, backend], help="emulate and scan the web interface")
    p.add_argument("session", help="ID or ID/SESSION")
    p.add_argument("--focus-from-static", action="store_true", help="scan files with static findings first")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("collect", parents=[common], help="diff recorded snapshots and attribute artifacts")
    p.add_argument("session", help="ID or ID/SESSION")
    p.add_argument("--prefix", help="marker prefix (default: derived from the seed)")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("static-ingest", parents=[common], help="import a static-analysis report")
    p.add_argument("id")
    p.add_argument("report")
    p.set_defaults(func=cmd_static_ingest)

    p = sub.add_parser("report", parents=[common, backend], help="render the batch report")
    p.add_argument("--format", choices=("md", "json"), default="md")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("triage", parents=[common, backend], help="sample and estimate failure causes")
    p.add_argument("--stage", choices=("chroot", "web"))
    p.add_argument("--sample-seed", type=int)
    p.add_argument("--confidence", type=float)
    p.add_argument("--half-width", type=float)
    p.set_defaults(func=cmd_triage)

    p = sub.add_parser("run", parents=[common, backend], help="run the whole chain over the workspace")
    p.add_argument("--jobs", type=int)
    p.add_argument("--force", action="store_true", help="ignore stored per-firmware results")
    p.add_argument("--format", choices=("md", "json"), default="md")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", parents=[common], help="compare stage outcomes across backends")
    p.add_argument("--backends", nargs="+", choices=sorted(BACKEND_NAMES), default=["fixture", "hosted"])
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("fixtures", help="generate the synthetic firmware corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--specs", help="JSON spec list (default: built-in corpus)")
    p.add_argument("--dump-specs", metavar="FILE", help="write the spec list used")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fixtures)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.config)
    return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
