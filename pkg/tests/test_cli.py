import json

import pytest

from main import main


@pytest.fixture(autouse=True)
def no_thread_cap(monkeypatch):
    monkeypatch.delenv("FE_THREADS", raising=False)


def run_json(tmp_path, *argv) -> tuple[int, dict]:
    out = tmp_path / "out.json"
    code = main([*argv, "--format", "json", "--out", str(out)])
    return code, json.loads(out.read_text()) if out.exists() else {}


class TestCapacity:
    def test_csv(self, tmp_path):
        out = tmp_path / "cap.csv"
        assert main(["capacity", "--channel", "bsc(0.1)", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        header = [line for line in lines if line.startswith("#")]
        assert any(line.startswith("# channel_hash: ") for line in header)
        assert lines[len(header)] == "p,c,gamma,phi_0,phi_1"

    def test_json(self, tmp_path):
        code, body = run_json(tmp_path, "capacity", "--channel", "example1(0.1)")
        assert code == 0
        assert body["landmarks"]["p_star"] == pytest.approx(1.0, abs=1e-5)
        assert body["provenance"]["config"]["command"] == "capacity"

    def test_summary_on_stdout_when_writing_a_file(self, tmp_path, capsys):
        main(["capacity", "--channel", "example1", "--out", str(tmp_path / "c.csv")])
        assert "C* =" in capsys.readouterr().out

    def test_malformed_channel_file(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["capacity", "--channel", str(path)]) == 2
        assert "malformed JSON" in capsys.readouterr().err

    def test_missing_channel_flag(self):
        with pytest.raises(SystemExit) as info:
            main(["capacity"])
        assert info.value.code == 2


class TestReliability:
    def test_grid(self, tmp_path):
        code, body = run_json(
            tmp_path, "reliability", "--channel", "example1(0.1)", "--power", "0.5", "--rate-grid", "0.02:0.15:5"
        )
        assert code == 0
        assert len(body["points"]) == 5
        exponents = [pt["exponent"] for pt in body["points"]]
        assert exponents == sorted(exponents, reverse=True)

    def test_append_limit(self, tmp_path):
        out = tmp_path / "rel.csv"
        argv = ["reliability", "--channel", "example1", "--power", "0.5", "--rate", "0.1", "--append-limit"]
        assert main([*argv, "--out", str(out)]) == 0
        rows = [line for line in out.read_text().splitlines() if not line.startswith("#")]
        assert rows[0] == "r,exponent,eta_opt,p1,p2"
        assert len(rows) == 3

    @pytest.mark.parametrize("grid", ["0.1:0.3:5", "0.1:0.2:0", "0.2:0.1:3"])
    def test_bad_grid(self, grid, capsys):
        argv = ["reliability", "--channel", "example1", "--power", "0.5", "--rate-grid", grid]
        assert main(argv) == 2
        assert capsys.readouterr().err.startswith("error:")

    def test_needs_a_rate(self):
        assert main(["reliability", "--channel", "example1", "--power", "0.5"]) == 2


class TestSimulate:
    ARGS = ["simulate", "--channel", "example1(0.1)", "--power", "0.5", "--rate", "0.092", "--ell", "16"]

    def test_reproducible_bytes(self, tmp_path):
        out = tmp_path / "sim.csv"
        argv = [*self.ARGS, "--trials", "300", "--seed", "7", "--out", str(out)]
        assert main(argv) == 0
        first = out.read_bytes()
        assert main(argv) == 0
        assert out.read_bytes() == first

    def test_verify_report(self, tmp_path):
        code, body = run_json(tmp_path, *self.ARGS, "--trials", "400", "--verify")
        report = body["converse"]
        assert report["status"] == "pass"
        assert code == 0
        names = {check["name"] for check in report["checks"]}
        assert {"pathwise_drop", "fano", "decoding_time", "submartingale_V", "energy_rate"} <= names
        assert body["result"]["trials"] == 400

    def test_zero_error_channel(self, tmp_path):
        code, body = run_json(
            tmp_path, "simulate", "--channel", "zchannel(0.1)", "--power", "0.5", "--rate", "0.2", "--ell", "24",
            "--trials", "200",
        )
        assert code == 0
        assert body["code"]["zero_error"]
        assert body["result"]["errors"] == 0
        assert "reliability" not in body

    def test_codebook_cap(self, capsys):
        assert main([*self.ARGS[:-1], "400", "--trials", "10"]) == 2
        assert "--m-cap" in capsys.readouterr().err


@pytest.mark.slow
def test_verify_examples(tmp_path):
    assert main(["verify-examples", "--out", str(tmp_path / "examples.csv")]) == 0
