import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from firmscope.emulation import CHROOT_MARKER
from firmscope.triage import (
    BUILTIN_RULES,
    Cause,
    Classifier,
    FailureRecord,
    Fixability,
    RootfsFacts,
    Rule,
    Stage,
    cause_estimates,
    classify_chroot_failure,
    classify_web_failure,
    draw_sample,
    easy_fix_bound,
    estimate_proportion,
    fpc,
    plan_sample,
    rootfs_facts,
    sample_size,
    z_for_confidence,
)

from conftest import write_tree

# --- independent oracles ---


def solve_n_from_half_widths(observations, N, z=1.96, lo=20, hi=400):
    """Smallest-error integer n: brute force over n given (k/n-free) reported p and half-width.

    The reported point estimates are rounded, so for each n we take the k
    that reproduces the printed percentage and score the half-width error.
    """
    best = None
    for n in range(lo, min(hi, N)):
        err = 0.0
        for p_pct, half_pct in observations:
            k = round(p_pct / 100 * n)
            p = k / n
            # printed values are truncated or rounded; 0.1 pp covers both
            if abs(p * 100 - p_pct) >= 0.1:
                err = math.inf
                break
            half = z * math.sqrt(p * (1 - p) / n) * math.sqrt((N - n) / (N - 1)) * 100
            err += abs(half - half_pct)
        if best is None or err < best[0]:
            best = (err, n)
    return best[1]


def test_oracle_recovers_chroot_sample_size():
    obs = [(40.9, 9.8), (11.3, 6.3), (29.5, 9.1), (59.1, 9.8), (70.4, 9.1)]
    assert solve_n_from_half_widths(obs, 1092) == 88


def test_oracle_recovers_web_sample_size():
    obs = [(65.2, 9.5), (13.0, 6.7)]
    assert solve_n_from_half_widths(obs, 242) == 69


def cochran_oracle(N, e, z, p0=0.5):
    # textbook two-step form, written out independently of the implementation
    n0 = (z * z) * p0 * (1.0 - p0) / (e * e)
    adj = n0 / (1.0 + (n0 - 1.0) / N)
    frac = adj - math.floor(adj)
    return int(math.floor(adj)) + (1 if frac >= 0.5 else 0)


@pytest.mark.parametrize("N", [1, 2, 10, 50, 242, 1092, 5000, 100000])
def test_sample_size_matches_oracle(N):
    assert sample_size(N, 0.10, 1.96) == min(max(cochran_oracle(N, 0.10, 1.96), 1), N)


def test_planner_reference_values():
    assert plan_sample(1092, 0.10, 1.96).n == 88
    assert plan_sample(242, 0.10, 1.96).n == 69
    assert plan_sample(50, 0.10, 1.96).n == 33


def test_plan_indices_are_seeded_and_sorted():
    a = plan_sample(1092, seed=7)
    b = plan_sample(1092, seed=7)
    c = plan_sample(1092, seed=8)
    assert a.indices == b.indices == sorted(a.indices)
    assert len(set(a.indices)) == a.n
    assert a.indices != c.indices


def test_plan_without_seed_has_no_indices():
    assert plan_sample(100, seed=None).indices == []


@pytest.mark.parametrize("bad", [dict(N=0), dict(N=10, e=0), dict(N=10, z=-1)])
def test_sample_size_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        sample_size(**bad)


def test_z_table():
    assert z_for_confidence(0.95) == 1.96
    assert z_for_confidence(0.99) == 2.576
    assert z_for_confidence(0.97) == pytest.approx(2.1701, abs=1e-3)


def test_estimate_validation():
    with pytest.raises(ValueError):
        estimate_proportion(5, 4, 10)
    with pytest.raises(ValueError):
        estimate_proportion(1, 0, 10)
    with pytest.raises(ValueError):
        estimate_proportion(1, 10, 5)
    with pytest.raises(TypeError):
        estimate_proportion(1.0, 10, 20)


def test_full_census_has_zero_width():
    e = estimate_proportion(3, 10, 10)
    assert e.half_width == 0.0
    assert e.lower == e.upper == 0.3


def test_fpc_values():
    assert fpc(1, 1) == 0.0
    assert fpc(88, 1092) == pytest.approx(math.sqrt(1004 / 1091))


# --- properties ---

populations = st.integers(min_value=2, max_value=10**6)


@st.composite
def knN(draw):
    N = draw(populations)
    n = draw(st.integers(min_value=1, max_value=min(N, 5000)))
    k = draw(st.integers(min_value=0, max_value=n))
    return k, n, N


@given(knN())
def test_half_width_symmetric_in_k(args):
    k, n, N = args
    a = estimate_proportion(k, n, N)
    b = estimate_proportion(n - k, n, N)
    assert a.half_width == pytest.approx(b.half_width, rel=1e-12, abs=1e-15)


@given(knN())
def test_interval_bounds(args):
    k, n, N = args
    e = estimate_proportion(k, n, N)
    assert 0.0 <= e.lower <= e.p <= e.upper <= 1.0


@given(st.integers(min_value=1, max_value=99), st.integers(min_value=2, max_value=200), st.integers(min_value=400, max_value=10**5))
def test_half_width_non_increasing_in_n(pct, n, N):
    # fixed p: k = p*m exactly for both sample sizes
    p = pct / 100
    m1, m2 = 100 * n, 100 * (n + 1)
    if m2 > N:
        return
    a = estimate_proportion(round(p * m1), m1, N)
    b = estimate_proportion(round(p * m2), m2, N)
    assert b.half_width <= a.half_width + 1e-12


@given(st.integers(min_value=0, max_value=50), st.integers(min_value=50, max_value=200))
def test_fpc_limit(k, n):
    plain = 1.96 * math.sqrt((k / n) * (1 - k / n) / n)
    big = estimate_proportion(k, n, 10**12)
    assert big.half_width == pytest.approx(plain, rel=1e-6, abs=1e-12)


@given(st.integers(min_value=1, max_value=10**6), st.floats(min_value=0.01, max_value=0.5))
def test_sample_size_within_population(N, e):
    n = sample_size(N, e)
    assert 1 <= n <= N


# --- classifier ---

log_text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=300)


@given(log_text, st.booleans(), st.booleans())
def test_chroot_classification_total(log, has_shell, timed_out):
    facts = RootfsFacts(("/bin/sh",) if has_shell else ())
    r = classify_chroot_failure(log, facts, "x", timed_out)
    assert r.stage == Stage.CHROOT
    assert r.cause in set(Cause)


@given(log_text)
def test_web_classification_total(log):
    r = classify_web_failure(log)
    assert r.stage == Stage.WEB_SERVER
    assert r.cause in set(Cause)


@pytest.mark.parametrize("log,cause", [
    ("chroot: failed to run command '/bin/sh': Exec format error", Cause.EXEC_FORMAT_ERROR),
    ("Illegal instruction", Cause.EXEC_FORMAT_ERROR),
])
def test_chroot_patterns(log, cause):
    assert classify_chroot_failure(log, RootfsFacts(("/bin/sh",))).cause == cause


def test_partial_firmware_from_facts():
    r = classify_chroot_failure("chroot: cannot run /bin/sh", RootfsFacts(()))
    assert r.cause == Cause.PARTIAL_FIRMWARE
    assert r.fixability == Fixability.HARD


def test_exec_format_beats_partial():
    r = classify_chroot_failure("Exec format error", RootfsFacts(()))
    assert r.cause == Cause.EXEC_FORMAT_ERROR


def test_false_positive_needs_marker_and_timeout():
    log = f"{CHROOT_MARKER}\nwaiting for prompt... timed out"
    assert classify_chroot_failure(log, RootfsFacts(("/bin/sh",))).cause == Cause.FALSE_POSITIVE_CHROOT
    assert classify_chroot_failure(CHROOT_MARKER, RootfsFacts(("/bin/sh",)), timed_out=True).cause == \
        Cause.FALSE_POSITIVE_CHROOT
    assert classify_chroot_failure("timed out", RootfsFacts(("/bin/sh",))).cause == Cause.UNKNOWN


@pytest.mark.parametrize("log,cause,fix", [
    ("ioctl SIOCGIFADDR eth1: No such device", Cause.MISSING_DEVICE, Fixability.HARD),
    ("cannot bind to br0", Cause.MISSING_DEVICE, Fixability.HARD),
    ("open /dev/mtdblock0 failed", Cause.MISSING_DEVICE, Fixability.HARD),
    ("open(/dev/gpio): not found", Cause.MISSING_DEVICE, Fixability.HARD),
    ("init: must be run as PID 1", Cause.INIT_PID, Fixability.EASY),
    ("Init is the parent of all processes", Cause.INIT_PID, Fixability.EASY),
    ("(server.c.621) loading plugins finally failed", Cause.WEB_LAUNCH_ERROR, Fixability.EASY),
    ("(log.c.118) opening errorlog /tmp/log/lighttpd/error.log failed: No such file or directory",
     Cause.WEB_LAUNCH_ERROR, Fixability.EASY),
    ("segfault", Cause.UNKNOWN, Fixability.UNKNOWN),
])
def test_web_patterns(log, cause, fix):
    r = classify_web_failure(log)
    assert (r.cause, r.fixability) == (cause, fix)
    if cause != Cause.UNKNOWN:
        assert r.evidence


def test_missing_device_has_precedence_over_launch_error():
    log = "(server.c.621) loading plugins finally failed\nioctl eth0: No such device"
    assert classify_web_failure(log).cause == Cause.MISSING_DEVICE


def test_extra_rules_extend_table():
    extra = Rule.make("WebServer", "InitPid", r"^.*procd not running.*$")
    c = Classifier([extra])
    assert c.classify_web("x", "procd not running").cause == Cause.INIT_PID
    assert len(c.rules) == len(BUILTIN_RULES) + 1


def test_rootfs_facts(tmp_path):
    write_tree(tmp_path, {"bin/busybox": b"\x7fELF", "bin/sh": ("link", "busybox"), "etc/x": ""})
    assert set(rootfs_facts(tmp_path).shell_entries) == {"/bin/sh", "/bin/busybox"}
    assert not rootfs_facts(tmp_path / "etc").has_shell


def test_record_roundtrip():
    r = FailureRecord("id", Stage.WEB_SERVER, Cause.INIT_PID, Fixability.EASY, "ev")
    assert FailureRecord.from_dict(r.to_dict()) == r


def _records(stage, counts, fid="f"):
    out = []
    for cause, k in counts.items():
        fix = Fixability.EASY if cause in (Cause.EXEC_FORMAT_ERROR, Cause.FALSE_POSITIVE_CHROOT, Cause.INIT_PID,
                                           Cause.WEB_LAUNCH_ERROR) else Fixability.HARD
        out += [FailureRecord(f"{fid}{i}", stage, cause, fix) for i in range(k)]
    return out


def test_cause_estimates_and_bound():
    recs = _records(Stage.WEB_SERVER, {Cause.MISSING_DEVICE: 45, Cause.INIT_PID: 15, Cause.WEB_LAUNCH_ERROR: 9})
    est = cause_estimates(recs, Stage.WEB_SERVER, 242)
    assert est["MissingDevice"].k == 45 and est["MissingDevice"].n == 69
    bound = easy_fix_bound(recs, "WebServer", 242)
    assert bound.estimate.k == 24
    assert bound.lower_bound == pytest.approx(bound.estimate.p - bound.estimate.half_width)


def test_bound_requires_records():
    with pytest.raises(ValueError):
        easy_fix_bound([], Stage.CHROOT, 10)


def test_draw_sample_checks_population():
    recs = _records(Stage.CHROOT, {Cause.EXEC_FORMAT_ERROR: 10})
    plan = plan_sample(10, seed=1)
    assert len(draw_sample(recs, plan)) == plan.n
    with pytest.raises(ValueError):
        draw_sample(recs[:5], plan)


def test_sample_reproducible_from_seed():
    recs = _records(Stage.CHROOT, {Cause.EXEC_FORMAT_ERROR: 100, Cause.PARTIAL_FIRMWARE: 100})
    random.Random(3).shuffle(recs)
    plan = plan_sample(len(recs), seed=11)
    assert [r.firmware_id for r in draw_sample(recs, plan)] == \
        [r.firmware_id for r in draw_sample(recs, plan_sample(len(recs), seed=11))]
