import threading

import httpx
import pytest

from limitd.cli import main

SCENARIO = """\
scenario: leader_crash
config:
  replication_mode: async
leader_crash:
  writes: 10
  unreplicated: 3
"""

RULES = """\
domain: api
descriptors:
  - key: user_id
    algorithm: rolling_window
    rate_limit: {unit: minute, requests_per_unit: 3}
"""


class TestBenchCommands:
    def test_bench_burst_passes(self, capsys):
        assert main(["bench-burst", "--window", "60", "--max-requests", "10"]) == 0
        out = capsys.readouterr().out
        assert "boundary-burst" in out and "verdict: pass" in out

    def test_bench_memory_reference(self, capsys):
        assert main(["bench-memory"]) == 0
        assert "total_mb=800.0" in capsys.readouterr().out

    def test_bench_memory_csv(self, capsys):
        assert main(["bench-memory", "--output", "csv"]) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0].startswith("algorithm")

    def test_bench_race_atomic(self, capsys):
        assert main(["bench-race", "--mode", "atomic", "--actors", "10",
                     "--iterations", "10"]) == 0
        assert "lost_updates=0" in capsys.readouterr().out

    def test_bench_race_non_atomic_reports_losses(self, capsys):
        assert main(["bench-race", "--mode", "non_atomic", "--actors", "50",
                     "--iterations", "50"]) == 0
        out = capsys.readouterr().out
        assert "lost_updates=0" not in out

    def test_quiet_suppresses_output(self, capsys):
        assert main(["bench-burst", "--quiet"]) == 0
        assert capsys.readouterr().out == ""


class TestSimulate:
    def test_scenario_file(self, tmp_path, capsys):
        path = tmp_path / "crash.yaml"
        path.write_text(SCENARIO)
        assert main(["simulate", str(path)]) == 0
        assert "lost_writes=3" in capsys.readouterr().out

    def test_same_seed_same_output(self, tmp_path, capsys):
        path = tmp_path / "drift.yaml"
        path.write_text("scenario: drift\ndrift: {checks: 50, crash_at: 15.0}\n")
        outputs = []
        for _ in range(2):
            assert main(["simulate", str(path), "--seed", "4"]) == 0
            outputs.append(capsys.readouterr().out)
        assert outputs[0] == outputs[1]

    def test_missing_file_is_usage_error(self):
        assert main(["simulate", "/no/such/scenario.yaml"]) == 2

    def test_malformed_file_is_usage_error(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("scenario: [unclosed")
        assert main(["simulate", str(path)]) == 2

    def test_unknown_scenario_kind(self, tmp_path):
        path = tmp_path / "odd.yaml"
        path.write_text("scenario: meteor_strike\n")
        assert main(["simulate", str(path)]) == 2


class TestUsageErrors:
    def test_no_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_serve_requires_rules(self):
        assert main(["serve"]) == 2

    def test_serve_missing_rules_file(self, tmp_path):
        assert main(["serve", "--rules", str(tmp_path / "none.yaml")]) == 1


class TestServe:
    def test_serve_answers_checks(self, tmp_path):
        rules = tmp_path / "rules.yaml"
        rules.write_text(RULES)
        # ephemeral port; run serve in a thread and stop via the server object
        import limitd.cli as cli_mod
        from limitd.gateway import GatewayServer

        started = threading.Event()
        captured = {}
        original_init = GatewayServer.__init__

        def spying_init(self, *args, **kwargs):
            original_init(self, *args, **kwargs)
            captured["server"] = self
            started.set()

        cli_mod.GatewayServer.__init__ = spying_init
        try:
            thread = threading.Thread(
                target=main,
                args=(["serve", "--rules", str(rules), "--listen",
                       "127.0.0.1:0", "--quiet"],),
                daemon=True,
            )
            thread.start()
            assert started.wait(timeout=5)
            port = captured["server"].port
            resp = httpx.post(
                f"http://127.0.0.1:{port}/v1/check",
                json={"domain": "api", "descriptors": {"user_id": "u"}},
                timeout=5.0,
            )
            assert resp.status_code == 200 and resp.json()["allowed"]
        finally:
            cli_mod.GatewayServer.__init__ = original_init
            if "server" in captured:
                captured["server"].stop()
            thread.join(timeout=5)
