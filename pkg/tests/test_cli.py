import csv
import json
import math

import pytest

from lastexit.acceptance import BODY_MARKER, Row, Settings, diffable_body, render_report
from lastexit.cli import load_config, main
from lastexit.errors import ConfigError
from lastexit.exit_census import csv_header


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def _summary(out):
    return json.loads(out)


class TestConfig:
    def test_flags_override_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"epsilon": 0.1, "reps": 50}))
        cfg = load_config("exits", str(p), {"reps": 7, "epsilon": None})
        assert cfg["epsilon"] == 0.1
        assert cfg["reps"] == 7

    def test_unknown_keys_are_listed(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"epsilon": 0.1, "bogus": 1, "zeta": 2}))
        with pytest.raises(ConfigError, match="bogus, zeta"):
            load_config("exits", str(p), {})

    def test_nested_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"model": {"name": "mean"}}))
        with pytest.raises(ConfigError, match="flat"):
            load_config("exits", str(p), {})

    def test_quick_and_reps_conflict(self, capsys):
        code, _, err = _run(capsys, "exits", "--quick", "--reps", "10")
        assert code == 1
        assert "conflict" in err

    def test_quick_divides_reps(self):
        assert load_config("exits", None, {"quick": True})["reps"] == 100

    def test_zero_epsilon(self, capsys):
        code, out, err = _run(capsys, "exits", "--epsilon", "0")
        assert code == 1
        assert "epsilon must be > 0" in err
        assert out == ""

    def test_unknown_model(self, capsys):
        code, _, err = _run(capsys, "exits", "--model", "mode")
        assert code == 1
        assert "unknown model" in err


class TestExits:
    def test_csv_records_and_summary(self, tmp_path, capsys):
        code, out, _ = _run(capsys, "exits", "--reps", "40", "--epsilon", "0.1",
                            "--out", str(tmp_path), "--seed", "3")
        assert code == 0
        s = _summary(out)
        assert s["schema_version"] == 1
        assert s["command"] == "exits"
        assert set(s["eps2_mean_last_exit"]) == {"estimate", "se"}
        with open(tmp_path / "records.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == csv_header((0.0,))
        assert len(rows) == 41
        assert json.loads((tmp_path / "summary.json").read_text()) == s

    def test_json_format(self, tmp_path, capsys):
        code, _, _ = _run(capsys, "exits", "--reps", "5", "--epsilon", "0.1", "--format", "json",
                          "--out", str(tmp_path))
        assert code == 0
        recs = json.loads((tmp_path / "records.json").read_text())
        assert len(recs) == 5 and "last_exit_n" in recs[0]

    def test_reproducible(self, capsys):
        runs = [_run(capsys, "exits", "--reps", "30", "--epsilon", "0.1", "--seed", "5")[1]
                for _ in range(2)]
        assert runs[0] == runs[1]

    def test_workers_do_not_change_results(self, tmp_path, capsys):
        outs = []
        for w in ("1", "2"):
            d = tmp_path / w
            _run(capsys, "exits", "--reps", "30", "--epsilon", "0.1", "--workers", w,
                 "--out", str(d))
            outs.append((d / "records.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_check_passes_for_mean(self, capsys):
        code, out, _ = _run(capsys, "exits", "--reps", "400", "--epsilon", "0.05", "--check")
        assert code == 0
        chk = _summary(out)["checks"][0]
        assert chk["target"] == 1.0 and chk["passed"]


class TestOtherCommands:
    def test_constants(self, capsys):
        code, out, _ = _run(capsys, "constants", "--reps", "2000")
        rows = {r["quantity"]: r for r in _summary(out)["rows"]}
        assert code == 0
        assert round(rows["E W_max^2 = 2G"]["closed"], 4) == 1.8319
        assert rows["GC miss mean (sup)"]["closed"] == pytest.approx(math.pi**2 / 12)
        assert round(rows["L1 miss mean"]["closed"], 5) == 0.11667
        assert all(c["passed"] for c in _summary(out)["checks"])

    def test_limits_coarse_grid_is_bridge_corrected(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"grid_points": 4}))
        code, out, _ = _run(capsys, "limits", "--config", str(p), "--reps", "2000", "--check")
        assert code == 0
        assert _summary(out)["passed"] is True

    def test_check_failure_exit_code(self, tmp_path, capsys):
        # a truncated horizon undercounts the misses
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"T": 0.5}))
        code, out, _ = _run(capsys, "exits", "--config", str(p), "--reps", "400", "--check")
        assert code == 2
        assert _summary(out)["passed"] is False

    def test_limits_check_passes(self, capsys):
        code, out, _ = _run(capsys, "limits", "--reps", "2000", "--check")
        assert code == 0
        assert set(_summary(out)["quantiles"]) == {"0.5", "0.9", "0.95", "0.99"}

    def test_compare_mean_median(self, capsys):
        code, out, _ = _run(capsys, "compare", "--reps", "2000", "--check")
        s = _summary(out)
        assert code == 0
        assert abs(s["p_less"] - 0.72) <= 3 * s["p_less_N"]["se"] + 0.02

    def test_gc(self, capsys):
        code, out, _ = _run(capsys, "gc", "--reps", "200", "--epsilon", "0.05", "--check")
        s = _summary(out)
        assert code == 0
        assert {"eps2_mean_misses_sup", "eps2_mean_misses_cvm", "eps2_mean_misses_l1"} <= set(s)

    def test_density_scan_rows(self, tmp_path, capsys):
        code, out, _ = _run(capsys, "density", "--reps", "20", "--scan-c", "--out", str(tmp_path))
        s = _summary(out)
        assert code == 0
        with open(tmp_path / "records.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["a"]) for r in rows] == pytest.approx([0.8 + 0.05 * k for k in range(11)])
        assert round(s["objective_argmin"], 3) == 1.008

    def test_confseq(self, capsys):
        code, out, _ = _run(capsys, "confseq", "--reps", "1000", "--epsilon", "0.1", "--check")
        s = _summary(out)
        assert code == 0
        assert s["m_start"] == 503
        assert s["pointwise_sample_size"] == 385

    def test_verify_tail(self, capsys):
        code, out, _ = _run(capsys, "verify-tail", "--reps", "300", "--check")
        assert code == 0
        assert _summary(out)["violations"] == []


class TestReport:
    def test_timestamp_outside_diffable_body(self):
        rows = [Row(1, "x", "1.0000", 1.0, 0.0, "+/-0.01", True)]
        a = render_report(rows, Settings(), "2020-01-01T00:00:00Z")
        b = render_report(rows, Settings(), "2030-06-30T12:00:00Z")
        assert a != b
        assert diffable_body(a) == diffable_body(b)
        assert a.index("generated") < a.index(BODY_MARKER)

    def test_quick_mode_header(self):
        r = render_report([], Settings(scale=0.1), "t")
        assert "quick mode" in r and "widened" in r
