import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from firmscope.collector import (
    FileEntry,
    Service,
    Snapshot,
    SnapshotLabel,
    TranscriptRecorder,
    detect_injection_artifacts,
    diff_snapshots,
    find_trigger_requests,
    load_transcript,
    manifest_from_dir,
    parse_proc_net,
)
from firmscope.config import Config, load_config
from firmscope.findings import Category, Finding, Locator, Severity, Source, dump_jsonl, load_jsonl
from firmscope.fixtures import DEFAULT_CORPUS, FixtureSpec, Trait, build_fixture, dump_specs, load_specs
from firmscope.corpus import tree_id
from firmscope.staticintake import (
    aggregate,
    ingest_static_report,
    map_category,
    parse_report_text,
    select_high_impact,
)

from conftest import write_tree

PROC_TCP = """  sl  local_address rem_address   st tx_queue rx_queue tr tm->when retrnsmt   uid  timeout inode
   0: 00000000:0050 00000000:0000 0A 00000000:00000000 00:00000000 00000000     0        0 1111 1
   1: 0100007F:1F90 00000000:0000 0A 00000000:00000000 00:00000000 00000000     0        0 2222 1
   2: 0100007F:0050 0100007F:C350 01 00000000:00000000 00:00000000 00000000     0        0 3333 1
   3: 00000000:0050 00000000:0000 0A 00000000:00000000 00:00000000 00000000     0        0 1111 1
short line
"""


# --- collector ---

def test_parse_proc_net_listeners_only():
    services = parse_proc_net(PROC_TCP, "tcp", {"1111": "httpd"})
    assert services == [Service("TCP", 80, "httpd"), Service("TCP", 8080, "")]


def test_parse_proc_net_udp_unconnected():
    text = "hdr\n 0: 00000000:0035 00000000:0000 07 0 0 0 0 0 4444 1\n 1: 00000000:0044 0A000001:0043 01 0 0 0 0 0 5 1\n"
    assert parse_proc_net(text, "udp") == [Service("UDP", 53, "")]


def test_manifest_skips_pseudo_trees(tmp_path):
    root = write_tree(tmp_path, {"etc/a": "1", "proc/self": "x", "dev/null": "", "bin/sh": ("link", "busybox")})
    files = manifest_from_dir(root)
    assert set(files) == {"/etc/a", "/bin/sh"}
    assert files["/bin/sh"].content_hash.startswith("link:")


def _snap(label, files, services=()):
    return Snapshot(label, {p: FileEntry(1, 0, h) for p, h in files.items()}, list(services))


paths = st.sampled_from([f"/p{i}" for i in range(8)])
hashes = st.sampled_from(["h1", "h2", "h3"])
manifests = st.dictionaries(paths, hashes, max_size=8)


@given(manifests, manifests, manifests)
def test_diff_composition(a, b, c):
    sa, sb, sc = (_snap(SnapshotLabel.POST_BOOT, m) for m in (a, b, c))
    ab, bc, ac = diff_snapshots(sa, sb), diff_snapshots(sb, sc), diff_snapshots(sa, sc)
    touched = set(ab.added + ab.modified + ab.deleted) | set(bc.added + bc.modified + bc.deleted)
    assert set(ac.added + ac.modified + ac.deleted) <= touched
    assert set(ac.added) == set(c) - set(a)
    assert set(ac.deleted) == set(a) - set(c)
    assert diff_snapshots(sa, sa).empty


def test_diff_services_and_logs():
    a = _snap(SnapshotLabel.POST_BOOT, {"/etc/x": "1"}, [Service("TCP", 80)])
    b = _snap(SnapshotLabel.POST_SCAN, {"/etc/x": "2", "/var/log/messages": "m", "/tmp/a.log": "l"},
              [Service("TCP", 80), Service("TCP", 23, "telnetd")])
    d = diff_snapshots(a, b)
    assert d.modified == ["/etc/x"]
    assert d.new_services == [Service("TCP", 23, "telnetd")]
    assert d.log_files == ["/tmp/a.log", "/var/log/messages"]


def test_snapshot_roundtrip(tmp_path):
    s = _snap(SnapshotLabel.PRE_EMULATION, {"/a": "h"}, [Service("TCP", 80, "boa")])
    s.save(tmp_path / "s.json")
    assert Snapshot.load(tmp_path / "s.json") == s


def test_injection_artifacts_match_prefix_only():
    a = _snap(SnapshotLabel.POST_BOOT, {})
    b = _snap(SnapshotLabel.POST_SCAN, {"/tmp/fscope-inj-0badf00d-n00003": "h", "/tmp/other": "h",
                                        "/tmp/fscope-inj-deadbeef-n00001": "h"})
    found = detect_injection_artifacts(diff_snapshots(a, b), "fscope-inj-0badf00d-", "fid")
    assert [f.locator.target for f in found] == ["/tmp/fscope-inj-0badf00d-n00003"]
    assert found[0].category == Category.COMMAND_EXECUTION and found[0].high


def test_transcript_and_trigger_search(tmp_path):
    rec = TranscriptRecorder(tmp_path / "t.jsonl")
    rec.record("GET", "http://h/a?x=1", {}, None, 200, {}, b"ok")
    rec.record("POST", "http://h/ping.cgi", {}, "ip=1%3Btouch+%2Ftmp%2Fmk-n00002", 200, {}, b"")
    rec.record("GET", "http://h/b", {}, None, None, {}, None)
    entries = load_transcript(tmp_path / "t.jsonl")
    assert [e["seq"] for e in entries] == [0, 1, 2]
    hit = find_trigger_requests(list(reversed(entries)), "/tmp/mk-n00002")
    assert [e["seq"] for e in hit.matches] == [1]
    assert [e["seq"] for e in hit.window] == [0, 1] and not hit.full_window
    miss = find_trigger_requests(entries, "/tmp/mk-n99999")
    assert miss.matches == [] and miss.full_window and len(miss.window) == 3


def test_transcript_truncates_large_bodies():
    entry = TranscriptRecorder().record("GET", "u", {}, None, 200, {}, b"x" * (300 * 1024))
    assert entry["response"]["truncated"] and len(entry["response"]["body"]) == 256 * 1024


# --- findings and static intake ---

def test_severity_is_derived():
    f = Finding(Category.CSRF, Source.DYNAMIC, Locator("/a"), severity="Low")
    assert f.severity == Severity.HIGH
    assert Finding(Category.CSRF, Source.STATIC, Locator("a.php")).severity == Severity.LOW
    assert Finding(Category.SQL_INJECTION, Source.STATIC, Locator("a.php")).high
    assert not Finding(Category.SQL_INJECTION, Source.DYNAMIC, Locator("/a")).high


def test_findings_jsonl_roundtrip():
    items = [Finding(Category.XSS, Source.DYNAMIC, Locator("/a", "q"), "ev", "fid", extra={"k": 1}),
             Finding(Category.UNMAPPED, Source.STATIC, Locator("x.php", None, 3), raw_category="weird")]
    assert load_jsonl(dump_jsonl(items)) == items


@pytest.mark.parametrize("raw,expected", [
    ("Cross-Site Scripting", Category.XSS), ("SQL_Injection", Category.SQL_INJECTION),
    ("command  execution", Category.COMMAND_EXECUTION), ("POP gadgets", Category.POP_GADGET),
    ("XSS", Category.XSS), ("Buffer overflow", Category.UNMAPPED),
])
def test_map_category(raw, expected):
    assert map_category(raw) == expected


def test_parse_jsonl_skips_malformed():
    text = ('{"tool": "t", "file": "www/a.php", "line": 4, "category": "SQL Injection"}\n'
            'not json\n[1, 2]\n{"file": "x"}\n\n{"file": "b.php", "category": "odd"}\n')
    lines, skipped = parse_report_text(text)
    assert [ln.file for ln in lines] == ["www/a.php", "b.php"] and skipped == 3


def test_parse_csv():
    text = "Tool,File,Line,Category,Message\nt,www/a.php,7,File Inclusion,inc\nt,,1,XSS,\n"
    lines, skipped = parse_report_text(text)
    assert len(lines) == 1 and lines[0].line == 7 and skipped == 1


def test_ingest_report_file(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("tool,file,line,category\nt,www/a.php,1,Command Execution\nt,www/b.php,,unknown thing\n")
    findings = ingest_static_report(p, "fid")
    assert [f.category for f in findings] == [Category.COMMAND_EXECUTION, Category.UNMAPPED]
    assert findings[1].raw_category == "unknown thing"
    assert select_high_impact(findings) == ["www/a.php"]


def test_aggregate_tables():
    S, D = Source.STATIC, Source.DYNAMIC
    fs = [
        Finding(Category.SQL_INJECTION, S, Locator("a.php"), firmware_id="f1"),
        Finding(Category.SQL_INJECTION, S, Locator("b.php"), firmware_id="f2"),
        Finding(Category.XSS, S, Locator("b.php"), firmware_id="f2"),
        Finding(Category.CSRF, D, Locator("/a"), firmware_id="f1"),
        Finding(Category.NO_X_FRAME_OPTIONS, D, Locator("/a"), firmware_id="f3"),
        Finding(Category.UNMAPPED, S, Locator("c.php"), firmware_id="f3", raw_category="odd"),
    ]
    agg = aggregate(fs)
    assert agg.unique_vulnerable_firmware == 3
    assert agg.high_impact_firmware == 2
    assert [(r.category, r.issues, r.firmware) for r in agg.php_table] == [("sql injection", 2, 2),
                                                                           ("cross-site scripting", 1, 1)]
    assert [r.category for r in agg.dynamic_table] == ["CSRF", "NoXFrameOptions"]
    assert (agg.dynamic_high_subtotal.issues, agg.dynamic_low_subtotal.firmware) == (1, 1)
    assert agg.unmapped_raw == {"odd": 1}
    assert type(agg).from_dict(json.loads(json.dumps(agg.to_dict()))) == agg


# --- config ---

def test_load_config(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[pipeline]\njobs = 2\nport_candidates = 81, 8081\n[emulation]\nweb_timeout_s = 7\n"
                 "[triage.patterns]\ngpio = WebServer | MissingDevice | cannot open /sys/class/gpio\n")
    cfg = load_config(p)
    assert (cfg.jobs, cfg.port_candidates, cfg.web_timeout_s) == (2, (81, 8081), 7)
    assert cfg.extra_rules[0].pattern.search("cannot open /sys/class/gpio17")
    assert cfg.fingerprint() != Config().fingerprint()
    assert load_config(None) == Config()


def test_load_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.ini")
    bad = tmp_path / "b.ini"
    bad.write_text("[pipeline]\nport_candidates = 0\n")
    with pytest.raises(ValueError):
        load_config(bad)
    bad.write_text("[triage.patterns]\nx = only two | parts\n")
    with pytest.raises(ValueError):
        load_config(bad)


# --- fixtures ---

def test_fixture_bytes_are_deterministic(tmp_path):
    spec = DEFAULT_CORPUS[0]
    a = build_fixture(spec, tmp_path / "a", 3)
    b = build_fixture(spec, tmp_path / "b", 3)
    c = build_fixture(spec, tmp_path / "c", 4)
    assert tree_id(a) == tree_id(b) != tree_id(c)


@pytest.mark.parametrize("traits", [
    {Trait.PARTIAL_UPDATE, Trait.FULL_ROOTFS}, {Trait.VULN_XSS}, {Trait.FULL_ROOTFS, Trait.BOA_CONFIG, Trait.NO_CONFIG},
])
def test_spec_validation(traits):
    with pytest.raises(ValueError):
        FixtureSpec("bad", frozenset(traits))


def test_spec_rejects_unsupported_arch():
    with pytest.raises(ValueError):
        FixtureSpec("bad", frozenset(), arch="PowerPC/Big")


def test_specs_roundtrip(tmp_path):
    dump_specs(DEFAULT_CORPUS, tmp_path / "s.json")
    assert tuple(load_specs(tmp_path / "s.json")) == DEFAULT_CORPUS
