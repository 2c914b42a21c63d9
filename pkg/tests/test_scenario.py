import pytest

from lagsim.cli import main
from lagsim.core import ConfigurationError
from lagsim.metrics import REPORT_FILES
from lagsim.scenario import ScenarioParams, run_scenario, scenario_params


class TestParams:
    def test_presets(self):
        p = scenario_params("topo8")
        assert (p.links, p.clients, p.kill_link, p.kill_at, p.duration) == (8, 8, 1, 30.0, 60.0)
        assert scenario_params("custom").kill_link is None

    @pytest.mark.parametrize(
        "override",
        [dict(kill_link=3), dict(kill_at=70.0), dict(inject="sometimes"), dict(mode="turbo"),
         dict(duration=0), dict(seed=-1), dict(seed=2**64)],
    )
    def test_invalid(self, override):
        with pytest.raises(ConfigurationError):
            scenario_params("topo2", **override)

    def test_unknown_name(self):
        with pytest.raises(ConfigurationError):
            run_scenario("topo3")

    def test_unknown_parameter(self):
        with pytest.raises(ConfigurationError):
            scenario_params("topo2", colour="red")

    def test_zero_kill_link_disables_kill(self):
        assert ScenarioParams(kill_link=0).kill_link is None


class TestRuns:
    def test_custom_without_kill(self):
        r = run_scenario("custom", duration=10)
        assert r.failover == {} and r.loss_count == 0
        assert all(c.sent == c.answered for c in r.ping_counts.values())

    def test_topo2_report(self):
        r = run_scenario("topo2")
        assert sorted(r.rtt) == ["h2", "h3", "h4"]
        assert r.flows_before and r.flows_after
        assert r.detection_complete is not None

    def test_topo8_kill_hits_only_hosts_on_link_one(self):
        r = run_scenario("topo8")
        assert len(r.rtt) == 8
        assert r.remapped_hosts == ("h9",)
        assert set(r.failover) == {"h9"}

    def test_ping_conservation(self):
        r = run_scenario("topo2", inject="duplicate-on-reforward", inject_count=2)
        for c in r.ping_counts.values():
            assert c.sent == c.answered + c.lost

    def test_lacp_only_detection_still_recovers(self):
        r = run_scenario("topo2", detection="lacp")
        (delay,) = r.failover.values()
        assert delay.recovered and delay.seconds <= r.failover_bound


class TestCli:
    def test_run_writes_report(self, tmp_path, capsys):
        out = tmp_path / "r"
        code = main(["run", "--scenario", "topo2", "--kill-link", "lag1", "--kill-at", "20", "--duration", "30",
                     "--seed", "5", "--out", str(out)])
        assert code == 0
        assert sorted(p.name for p in out.iterdir()) == sorted(REPORT_FILES)
        assert "scenario: topo2" in capsys.readouterr().out

    def test_config_file(self, tmp_path):
        conf = tmp_path / "t.conf"
        conf.write_text("lag_width = 4\nclient_count = 2\n")
        out = tmp_path / "r"
        assert main(["run", "--scenario", "custom", "--duration", "5", "--config", str(conf), "--out", str(out)]) == 0
        assert "links: 4 clients: 2" in (out / "summary.txt").read_text()

    def test_configuration_error_exit_code(self, tmp_path, capsys):
        code = main(["run", "--scenario", "topo2", "--kill-link", "5", "--out", str(tmp_path)])
        assert code == 2
        assert "kill_link" in capsys.readouterr().err

    def test_bad_mode_rejected_by_parser(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["run", "--mode", "turbo", "--out", str(tmp_path)])
