import json

import pytest

from firmscope.cli import main
from firmscope.config import Config
from firmscope.corpus import Workspace, ingest
from firmscope.emulation import FixtureBackend
from firmscope.findings import Category
from firmscope.fixtures import build_fixture
from firmscope.pipeline import (
    BatchReport,
    FirmwareResult,
    Stage,
    analyze_firmware,
    banner_label,
    build_report,
    marker_prefix,
    pct,
    render_report,
    run_batch,
)

from conftest import analyze_spec, spec_named


def test_marker_prefix_is_seeded():
    a = marker_prefix(0, "abc")
    assert a == marker_prefix(0, "abc") != marker_prefix(1, "abc")
    assert a.startswith("fscope-inj-") and len(a) == len("fscope-inj-") + 9


def test_pct_rounds_half_up():
    assert pct(1, 8) == "12.5%" and pct(1, 3) == "33.3%" and pct(1, 0) == "-"
    assert pct(2, 3) == "66.7%" and pct(1, 16) == "6.3%"


def test_banner_label():
    assert banner_label("Boa/0.94.14rc21") == "Boa"
    assert banner_label("thttpd/2.25b 29dec2003") == "thttpd"
    assert banner_label(None) == banner_label("") == "empty banner"


def test_empty_workspace_gives_zero_report(tmp_path):
    report = run_batch(tmp_path / "ws")
    assert report.firmware_count == 0 and set(report.funnel.values()) == {0}
    assert not (tmp_path / "ws" / "report.json").exists()
    assert "Analysis funnel" in render_report(report)


def _result(fid, stage, banner=None):
    return FirmwareResult(fid, stage=stage, banner=banner, arch="ARM/Little", selected=True)


def test_report_banner_share_and_funnel_rows():
    results = [_result("a", Stage.WEB_SERVER_OK, None), _result("b", Stage.WEB_SERVER_OK, "Boa/0.94"),
               _result("c", Stage.CHROOT_OK), _result("d", Stage.INGESTED)]
    report = build_report(results, "Fixture")
    md = render_report(report)
    assert "| empty banner | 1 | 50.0% |" in md
    funnel = md.split("## Analysis funnel")[1].split("##")[0]
    assert len([ln for ln in funnel.splitlines() if ln.startswith("| ") and not ln.startswith("| Stage")]) == 5
    counts = list(report.funnel.values())
    assert counts == sorted(counts, reverse=True)
    assert BatchReport.from_dict(json.loads(render_report(report, "json"))) == report
    with pytest.raises(ValueError):
        render_report(report, "xml")


def test_result_roundtrip():
    r = _result("a", Stage.VULNERABLE)
    r.findings = [{"category": "XSS", "severity": "High"}]
    assert FirmwareResult.from_dict(json.loads(json.dumps(r.to_dict()))) == r
    r.advance(Stage.CANDIDATE, "lower")
    assert r.stage == Stage.VULNERABLE


class ExplodingBackend(FixtureBackend):
    def boot(self, session):
        raise RuntimeError("boom")


def test_crash_is_contained(tmp_path):
    tree = build_fixture(spec_named("fw01"), tmp_path / "corpus")
    ws = Workspace(tmp_path / "ws")
    fid = ingest(tree, None, ws).id
    result = analyze_firmware(ws, fid, ExplodingBackend(), Config(), force=True)
    assert result.error and "boom" in result.error
    assert result.stage == Stage.CANDIDATE


def test_cache_reused_and_invalidated(tmp_path):
    ws, first = analyze_spec(spec_named("fw03"), tmp_path)
    again = analyze_firmware(ws, first.firmware_id, FixtureBackend(), Config())
    assert again.to_dict() == first.to_dict()
    reseeded = analyze_firmware(ws, first.firmware_id, FixtureBackend(), Config(seed=5))
    assert reseeded.fingerprint["seed"] == 5


def test_xss_fixture_reaches_vulnerable(tmp_path):
    _, result = analyze_spec(spec_named("fw02"), tmp_path)
    assert result.stage == Stage.VULNERABLE
    assert {f["category"] for f in result.findings if f["severity"] == "High"} == {Category.XSS.value}


def test_partial_update_fails_chroot(tmp_path):
    _, result = analyze_spec(spec_named("fw09"), tmp_path)
    assert result.stage == Stage.CANDIDATE
    assert result.failure["cause"] == "PartialFirmware"


# --- CLI ---

def test_cli_end_to_end(tmp_path, capsys):
    corpus, ws = tmp_path / "corpus", str(tmp_path / "ws")
    assert main(["fixtures", "--out", str(corpus), "--dump-specs", str(tmp_path / "specs.json")]) == 0
    assert main(["ingest", str(corpus), "--each", "--workspace", ws]) == 0
    assert main(["rootfs", "fw01-boa-cmdinj", "--workspace", ws]) == 0
    assert main(["arch", "fw01-boa-cmdinj", "--workspace", ws]) == 0
    assert main(["webheur", "fw01-boa-cmdinj", "--workspace", ws]) == 0
    capsys.readouterr()
    assert main(["scan", "fw01-boa-cmdinj", "--workspace", ws]) == 0
    assert main(["collect", "fw01-boa-cmdinj", "--workspace", ws]) == 0
    out = capsys.readouterr().out
    assert "CommandExecution" in out
    assert main(["run", "--workspace", ws, "--jobs", "2"]) == 0
    assert "| Vulnerable | 3 |" in capsys.readouterr().out
    report_path = tmp_path / "r.json"
    assert main(["report", "--workspace", ws, "--format", "json", "-o", str(report_path)]) == 0
    assert json.loads(report_path.read_text())["funnel"]["Ingested"] == 12
    assert main(["triage", "--workspace", ws, "--stage", "chroot"]) == 0
    assert (tmp_path / "ws" / "triage.json").exists()


def test_cli_static_ingest(tmp_path):
    corpus, ws = tmp_path / "corpus", str(tmp_path / "ws")
    build_fixture(spec_named("fw03"), corpus)
    assert main(["ingest", str(corpus / "fw03-thttpd-csrf"), "--workspace", ws]) == 0
    report = tmp_path / "php.csv"
    report.write_text("tool,file,line,category\nrips,www/cgi-bin/admin.cgi,3,SQL Injection\n")
    assert main(["static-ingest", "fw03", str(report), "--workspace", ws]) == 0
    assert main(["run", "--workspace", ws, "--format", "json"]) == 0
    data = json.loads((tmp_path / "ws" / "report.json").read_text())
    assert data["findings"]["php_table"][0]["category"] == "sql injection"


def test_cli_unknown_id(tmp_path):
    with pytest.raises(SystemExit):
        main(["arch", "nope", "--workspace", str(tmp_path / "ws")])


def test_cli_compare_backends(tmp_path, capsys):
    corpus, ws = tmp_path / "corpus", str(tmp_path / "ws")
    build_fixture(spec_named("fw10"), corpus)
    assert main(["ingest", str(corpus / "fw10-wrongarch-shell"), "--workspace", ws]) == 0
    capsys.readouterr()
    assert main(["compare", "--workspace", ws, "--backends", "fixture", "hosted"]) == 0
    row = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("| fw10")][0]
    assert "| Candidate | WebServerOK |" in row
