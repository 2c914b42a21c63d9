import hashlib
import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lagsim.core import ConfigurationError, ConversationId, mac_from_int, parse_mac
from lagsim.metrics import (
    NOT_RECOVERED,
    REPORT_FILES,
    RTT,
    MetricSample,
    ReportWriteError,
    anomaly_scan,
    failover_delay,
    fairness_check,
    periodic_bursts,
    write_report,
)
from lagsim.scenario import ScenarioReport, run_scenario
from oracles import fold_oracle, hash_port_oracle, median_oracle

CONV = ConversationId(parse_mac("00:00:00:00:00:22"), parse_mac("00:00:00:00:00:11"))
BASE = 0.004


def series(points):
    """points: (time_s, rtt_s or None)."""
    return [
        MetricSample(round(t * 1e6), CONV, RTT, v, frozenset() if v is not None else frozenset({"lost"}), i)
        for i, (t, v) in enumerate(points, start=1)
    ]


def steady(start, stop, step=0.1, offset=0.05, rtt=BASE):
    n = round((stop - start) / step)
    return [(start + offset + i * step, rtt) for i in range(n)]


class TestFailoverDelay:
    def test_undisturbed_is_zero(self):
        assert failover_delay(series(steady(0, 20)), 10.0).seconds == 0.0

    def test_three_lost_pings(self):
        pts = steady(0, 10) + [(10.05, None), (10.15, None), (10.25, None)] + steady(10.3, 20)
        delay = failover_delay(series(pts), 10.0).seconds
        # hand computation: first normal request at 10.35 -> 0.35 s after the kill
        assert delay == pytest.approx(0.35, abs=1e-6)
        assert 0.3 < delay <= 0.4

    def test_elevated_samples_count_as_disturbed(self):
        pts = steady(0, 10) + [(10.05, 3 * BASE), (10.15, 2.5 * BASE)] + steady(10.2, 20)
        assert failover_delay(series(pts), 10.0).seconds == pytest.approx(0.25, abs=1e-6)

    def test_exactly_twice_median_is_normal(self):
        pts = steady(0, 10) + [(10.05, 2 * BASE)] + steady(10.1, 20)
        assert failover_delay(series(pts), 10.0).seconds == 0.0

    def test_never_recovers(self):
        pts = steady(0, 10) + [(10.05 + i / 10, None) for i in range(50)]
        result = failover_delay(series(pts), 10.0)
        assert result is NOT_RECOVERED or not result.recovered
        assert str(result) == "not recovered"

    def test_empty_series(self):
        with pytest.raises(ConfigurationError):
            failover_delay([], 1.0)

    def test_kill_outside_span(self):
        with pytest.raises(ConfigurationError):
            failover_delay(series(steady(0, 5)), 9.0)

    @given(st.integers(0, 30), st.floats(0.0, 0.099))
    def test_lost_run_property(self, lost, phase):
        kill = 10.0
        post = [(kill + phase + i / 10, None if i < lost else BASE) for i in range(40)]
        pre = [(kill - 1 + phase + i / 10, BASE) for i in range(10)]
        delay = failover_delay(series(pre + post), kill).seconds
        expected = 0.0 if lost == 0 else round(phase + lost / 10, 6)
        assert delay == pytest.approx(expected, abs=2e-6)


class TestFairness:
    def test_two_flows_per_link(self):
        v = fairness_check({"h2": 9.9e6, "h3": 10.05e6}, "per-link", 10e6)
        assert v.passed and v.target == 10e6

    def test_eight_flows_shared(self):
        rates = {f"h{i}": 1.25e6 * (1 + (-1) ** i * 0.01) for i in range(2, 10)}
        assert fairness_check(rates, "shared", 10e6).passed

    def test_outside_tolerance(self):
        v = fairness_check({"h2": 9.4e6, "h3": 10e6}, "per-link", 10e6)
        assert not v.passed and v.failing == ("h2",)

    def test_collision_named(self):
        v = fairness_check({"h2": 5e6, "h4": 5e6}, "per-link", 10e6, {"h2": 2, "h4": 2})
        assert not v.passed and v.collisions == ((2, ("h2", "h4")),)
        assert "collision port=2: h2+h4" in v.describe()

    def test_bad_mode(self):
        with pytest.raises(ConfigurationError):
            fairness_check({"h2": 1.0}, "both", 10e6)

    def test_adversarial_macs_collide_end_to_end(self):
        # brute-force a second client whose fold equals h2's, so both flows hash onto one link
        h1, h2 = "00:00:00:00:00:11", "00:00:00:00:00:22"
        twin = next(
            str(mac_from_int(v)) for v in itertools.count(0x0100)
            if fold_oracle(str(mac_from_int(v))) == fold_oracle(h2)
        )
        assert hash_port_oracle(h2, h1, [1, 2]) == hash_port_oracle(twin, h1, [1, 2])
        report = run_scenario("custom", links=2, clients=2, bulk=True, pings=False, duration=8,
                              client_macs=(parse_mac(h2), parse_mac(twin)))
        v = report.fairness
        assert not v.passed
        assert v.collisions == ((hash_port_oracle(h2, h1, [1, 2]), ("h2", "h3")),)
        for rate in v.rates.values():
            assert rate == pytest.approx(5e6, rel=0.05)


class TestAnomalyScan:
    def test_clean(self):
        a = anomaly_scan([], {"h2": series(steady(0, 20))})
        assert (a.duplicate_count, a.reorder_count, a.periodic_burst_flag) == (0, 0, False)

    def test_counts_flags_and_names_conversations(self):
        other = ConversationId(CONV.dst, CONV.src)
        marks = [
            MetricSample(0, CONV, RTT, BASE, frozenset({"duplicate"})),
            MetricSample(1, CONV, RTT, BASE, frozenset({"duplicate"})),
            MetricSample(2, other, RTT, BASE, frozenset({"reordered"})),
        ]
        a = anomaly_scan(marks)
        assert a.duplicate_count == 2 and a.reorder_count == 1
        assert a.duplicate_conversations == (CONV,) and a.reordered_conversations == (other,)

    def test_periodic_spikes_flagged(self):
        pts = [(t, 10 * BASE if t in (5.0, 10.0, 15.0) else BASE) for t in (i / 10 for i in range(200))]
        pts = [(round(t, 1), v) for t, v in pts]
        assert periodic_bursts(series(pts))
        assert anomaly_scan([], {"h5": series(pts)}).burst_hosts == ("h5",)

    def test_irregular_spikes_not_flagged(self):
        spikes = {2.0, 10.0, 11.0}
        pts = [(round(i / 10, 1), 10 * BASE if round(i / 10, 1) in spikes else BASE) for i in range(200)]
        assert not periodic_bursts(series(pts))

    def test_two_spikes_not_enough(self):
        pts = [(round(i / 10, 1), 10 * BASE if round(i / 10, 1) in (5.0, 10.0) else BASE) for i in range(200)]
        assert not periodic_bursts(series(pts))

    def test_contiguous_spike_is_one_burst(self):
        spikes = {5.0, 5.1, 5.2, 10.0, 15.0}
        pts = [(round(i / 10, 1), 10 * BASE if round(i / 10, 1) in spikes else BASE) for i in range(200)]
        assert periodic_bursts(series(pts))


def digest_dir(path):
    return {name: hashlib.sha256((path / name).read_bytes()).hexdigest() for name in REPORT_FILES}


class TestWriteReport:
    def test_empty_report_headers_only(self, tmp_path):
        files = write_report(ScenarioReport(), tmp_path)
        assert [f.name for f in files] == list(REPORT_FILES)
        for f in files[:5]:
            assert len(f.read_text().splitlines()) == 1
        assert (tmp_path / "rtt.csv").read_text() == "time,host,seq,rtt_s,flags\n"
        assert (tmp_path / "flows_before.csv").read_text().startswith("dst_mac,out_port,installed_at")

    def test_topo2_files(self, tmp_path):
        report = run_scenario("topo2")
        write_report(report, tmp_path)
        rows = (tmp_path / "rtt.csv").read_text().splitlines()[1:]
        assert {r.split(",")[1] for r in rows} == {"h2", "h3", "h4"}
        assert "claim 3: PASS" in (tmp_path / "summary.txt").read_text()

    def test_same_seed_identical_files(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        write_report(run_scenario("topo2", seed=11, duration=40), a)
        write_report(run_scenario("topo2", seed=11, duration=40), b)
        assert digest_dir(a) == digest_dir(b)

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(ReportWriteError) as err:
            write_report(ScenarioReport(), blocker / "sub")
        assert "file" in str(err.value)


def test_sample_rejects_negative():
    with pytest.raises(ConfigurationError):
        MetricSample(0, CONV, RTT, -1.0)


def test_median_oracle_agrees_with_pre_kill_threshold():
    values = [0.004, 0.005, 0.006, 0.100]
    pts = [(i / 10 + 0.05, v) for i, v in enumerate(values)] + [(1.05, 2 * median_oracle(values) + 1e-6)] + steady(1.1, 3)
    assert failover_delay(series(pts), 1.0).seconds == pytest.approx(0.15, abs=1e-6)
