import shutil
from pathlib import Path

import pytest
import requests

from firmscope.archdetect import ArchId
from firmscope.collector import Service, SnapshotLabel
from firmscope.emulation import (
    BackendKind,
    BackendUnavailable,
    EmulationPlan,
    FixtureBackend,
    HostedBackend,
    QemuChrootBackend,
    SessionState,
    get_backend,
    hosted_transplant,
)
from firmscope.emulation.fixture import FixtureScriptRunner, simulate_shell
from firmscope.emulation.hosted import parse_cgi_output
from firmscope.emulation.httpd import DocrootServer
from firmscope.emulation.qemu import MACHINES, build_qemu_command, parse_guest_manifest
from firmscope.findings import Category
from firmscope.fsroot import generate_variants, scan_candidates
from firmscope.pipeline import plan_web
from firmscope.scanner import (
    BuiltinScanner,
    ScanJob,
    parse_forms,
    probe_csrf,
    probe_low_severity,
    xss_evidence,
)

from conftest import spec_named, write_tree
from firmscope.fixtures import build_fixture

PREFIX = "fscope-inj-0badf00d-"


# --- scanner helpers ---

def test_parse_forms():
    forms = parse_forms('<form action="/a" method=post><input name=user><input type=password name=pw>'
                        '<input type=submit name=go></form><form><textarea name=t></textarea></form><input name=x>')
    assert [(f.action, f.method) for f in forms] == [("/a", "POST"), ("", "GET")]
    assert [i.name for i in forms[0].fillable()] == ["user", "pw"]
    assert forms[1].inputs[0].type == "textarea"
    assert parse_forms("<form action='/x'><input name=a") != []


def test_probe_csrf_token_rules():
    html = ('<form action="save.cgi" method="post"><input name="host"></form>'
            '<form action="save.cgi" method="post"><input name="host"></form>'
            '<form action="/t.cgi" method="post"><input type="hidden" name="csrf_token" value="1"></form>'
            '<form action="/find" method="get"><input name="q"></form>'
            '<form action="/login" method="get"><input type="password" name="pw"></form>')
    found = probe_csrf("http://h/cgi-bin/admin.html", html)
    assert [(f.locator.target, f.locator.parameter) for f in found] == [
        ("/cgi-bin/admin.html", "/cgi-bin/save.cgi"), ("/cgi-bin/admin.html", "/login")]
    assert all(f.category == Category.CSRF and f.high for f in found)


def test_xss_evidence_window():
    body = "a" * 100 + "<fsxn00001>" + "b" * 100
    ev = xss_evidence(body, "<fsxn00001>")
    assert ev == "a" * 40 + "<fsxn00001>" + "b" * 40
    assert xss_evidence("&lt;fsxn00001&gt;", "<fsxn00001>") is None


def _response(status, headers, body=b""):
    r = requests.Response()
    r.status_code = status
    r.headers.update(headers)
    r._content = body
    return r


def test_low_severity_checks():
    r = _response(200, {"Content-Type": "text/html", "Set-Cookie": "sid=1; path=/"})
    cats = {f.category for f in probe_low_severity("http://h/a", r)}
    assert cats == {Category.COOKIE_NO_HTTPONLY, Category.NO_X_CONTENT_TYPE_OPTIONS, Category.NO_X_FRAME_OPTIONS}
    r = _response(500, {"Content-Type": "text/plain"}, b"Fatal error in /www/cgi-bin/x.cgi")
    assert [f.category for f in probe_low_severity("http://h/a", r)] == [Category.APP_ERROR_INFO]
    r = _response(200, {"Content-Type": "text/html", "X-Frame-Options": "DENY", "X-Content-Type-Options": "nosniff",
                        "Set-Cookie": "a=1; HttpOnly"})
    assert probe_low_severity("http://h/a", r) == []


def test_scan_job_validation():
    with pytest.raises(ValueError):
        ScanJob("http://h/", [], PREFIX)
    with pytest.raises(ValueError):
        ScanJob("http://h/", ["/"], "fscope-inj-")
    job = ScanJob("http://h/", ["/a"], PREFIX, ["x.php"], "fid")
    assert ScanJob.from_dict(job.to_dict()).to_dict() == job.to_dict()


# --- scanner against a live fixture web app ---

PING = "#!/bin/sh\n# fscope-fixture: exec param=ip template='ping -c 1 {}' strip='|`$'\n"
SEARCH = "#!/bin/sh\n# fscope-fixture: reflect param=q escape=none\n"
INDEX = ('<html><body><form action="/cgi-bin/ping.cgi" method="post"><input name="ip" value="1.1.1.1"></form>'
         '<form action="/cgi-bin/search.cgi"><input name="q"></form>'
         '<form action="http://elsewhere.example/x" method="post"><input name="z"></form></body></html>')


@pytest.fixture
def webapp(tmp_path):
    guest = write_tree(tmp_path / "guest", {"tmp": None, "www/index.html": INDEX, "www/cgi-bin/ping.cgi": PING,
                                            "www/cgi-bin/search.cgi": SEARCH, "www/hidden.html": "<p>x</p>"})
    server = DocrootServer(guest / "www", FixtureScriptRunner(guest), banner="test").start()
    host, port = server.address
    yield guest, f"http://{host}:{port}/"
    server.stop()


def test_scan_finds_xss_csrf_and_plants_markers(webapp):
    guest, base = webapp
    result = BuiltinScanner(timeout=5).scan(ScanJob(base, ["/index.html"], PREFIX, firmware_id="fid"))
    assert not result.partial
    cats = {f.category for f in result.findings}
    assert {Category.XSS, Category.CSRF} <= cats
    xss = next(f for f in result.findings if f.category == Category.XSS)
    assert (xss.locator.target, xss.locator.parameter) == ("/cgi-bin/search.cgi", "q")
    planted = sorted(p.name for p in (guest / "tmp").iterdir())
    semi = [p for p in result.payloads if p.value.startswith(";") and p.parameter == "ip"]
    assert planted == [semi[0].nonce]
    nonces = [p.nonce for p in result.payloads]
    assert len(nonces) == len(set(nonces)) and all(n.startswith(PREFIX) for n in nonces)


def test_scan_stays_inside_sitemap(webapp):
    _, base = webapp
    result = BuiltinScanner(timeout=5).scan(ScanJob(base, ["/index.html"], PREFIX))
    paths = {requests.utils.urlparse(u).path for u in result.requested}
    assert "/hidden.html" not in paths
    assert all(u.startswith(base) for u in result.requested)
    allowed = {"/index.html", "/cgi-bin/ping.cgi", "/cgi-bin/search.cgi", "/index.html~", "/index.html.bak"}
    assert paths <= allowed


def test_scan_focus_orders_first(webapp):
    _, base = webapp
    job = ScanJob(base, ["/index.html", "/hidden.html"], PREFIX, focus_paths=["www/hidden.html"])
    result = BuiltinScanner(timeout=5).scan(job)
    assert result.requested[0].endswith("/hidden.html")


def test_scan_aborts_on_dead_target():
    result = BuiltinScanner(timeout=1).scan(ScanJob("http://127.0.0.1:9/", ["/"], PREFIX))
    assert result.partial and result.findings == []


# --- fixture shell model ---

def test_simulate_shell_runs_chained_touch(tmp_path):
    (tmp_path / "tmp").mkdir()
    simulate_shell("ping -c 1 1.1.1.1; touch /tmp/a", tmp_path)
    simulate_shell("ping -c 1 '1.1.1.1; touch /tmp/b'", tmp_path)
    simulate_shell("echo $(touch /tmp/c)", tmp_path)
    assert sorted(p.name for p in (tmp_path / "tmp").iterdir()) == ["a", "c"]


# --- backends ---

def _plan(tmp_path, spec_prefix, backend=BackendKind.FIXTURE):
    tree = build_fixture(spec_named(spec_prefix), tmp_path / "corpus")
    cand = scan_candidates(tree, "fid")[0]
    variant = generate_variants(cand, tmp_path / "rootfs")[0]
    web = plan_web(Path(variant.fs_path))
    return EmulationPlan("fid", variant, [ArchId.parse(spec_named(spec_prefix).arch)], backend, web.profiles,
                         web.docroots, 5, 5, str(tmp_path / "sessions"))


def test_fixture_backend_lifecycle(tmp_path):
    plan = _plan(tmp_path, "fw01")
    backend = FixtureBackend()
    session = backend.prepare(plan, "s1")
    backend.snapshot(session, SnapshotLabel.PRE_EMULATION)
    assert backend.boot(session) == SessionState.BOOTED
    commands = [c for p in plan.profiles for c in p.launch_commands]
    assert backend.launch_web(session, commands) == SessionState.WEB_UP
    assert requests.get(session.base_url, timeout=5).headers["Server"] == session.banner
    backend.snapshot(session, SnapshotLabel.POST_BOOT)
    with pytest.raises(RuntimeError):
        backend.snapshot(session, SnapshotLabel.PRE_EMULATION)
    backend.stop(session)
    assert session.state == SessionState.STOPPED
    assert (session.directory / "snapshots" / "PostBoot.json").exists()
    with pytest.raises(RuntimeError):
        session.transition(SessionState.WEB_UP)


def test_fixture_backend_wrong_arch_shell(tmp_path):
    plan = _plan(tmp_path, "fw10")
    backend = FixtureBackend()
    session = backend.prepare(plan, "s1")
    assert backend.boot(session) == SessionState.FAILED
    assert "exec format error" in session.boot_log.lower()


def test_hosted_backend_serves_transplant(tmp_path):
    plan = _plan(tmp_path, "fw03", BackendKind.HOSTED_TRANSPLANT)
    backend = get_backend("hosted", host_root=tmp_path / "host")
    session = backend.prepare(plan, "s1")
    backend.boot(session)
    assert backend.launch_web(session) == SessionState.WEB_UP
    assert session.banner == "firmscope-hosted"
    assert session.services == [Service("TCP", 80, "hosted-httpd")]
    backend.stop(session)


def test_hosted_transplant_rewrites_and_disables(tmp_path):
    src = write_tree(tmp_path / "src", {"a.cgi": "#!/bin/sh\necho\n", "b.cgi": "#!/usr/bin/nonexistent-interp\n",
                                        ".htaccess": "Deny from all\n", "index.html": "x"})
    site = hosted_transplant(src, tmp_path / "host")
    assert site.rewritten == ["a.cgi"] and site.skipped == ["b.cgi"] and site.disabled == [".htaccess"]
    first = (site.content_dir / "a.cgi").read_text().splitlines()[0]
    assert first == "#!" + shutil.which("sh")
    assert (src / ".htaccess").exists()


def test_parse_cgi_output():
    r = parse_cgi_output(b"Status: 404 Not Found\r\nContent-Type: text/plain\r\n\r\nnope")
    assert (r.status, r.headers, r.body) == (404, [("Content-Type", "text/plain")], b"nope")
    assert parse_cgi_output(b"no header break").status == 500


def test_get_backend_names():
    assert isinstance(get_backend("fixture"), FixtureBackend)
    assert isinstance(get_backend("hosted"), HostedBackend)
    assert isinstance(get_backend(BackendKind.QEMU_CHROOT), QemuChrootBackend)
    with pytest.raises(ValueError):
        get_backend("vmware")


def test_qemu_unavailable_without_images(tmp_path):
    plan = _plan(tmp_path, "fw01", BackendKind.QEMU_CHROOT)
    backend = QemuChrootBackend(tmp_path / "no-images")
    with pytest.raises(BackendUnavailable):
        backend.prepare(plan, "s1")


def test_qemu_command_and_manifest():
    spec = MACHINES[ArchId.parse("MIPS/Big")]
    argv = build_qemu_command(spec, Path("/img"), "/w/c0.tar", {80: 18080, 22: 12222})
    assert argv[0] == "qemu-system-mips"
    assert "user,id=net0,hostfwd=tcp:127.0.0.1:12222-:22,hostfwd=tcp:127.0.0.1:18080-:80" in argv
    files = parse_guest_manifest("12 100 ./etc/passwd\n3 5 ./bin/sh\n", "abc  ./etc/passwd\n")
    assert files["/etc/passwd"].content_hash == "abc" and files["/bin/sh"].size == 3
