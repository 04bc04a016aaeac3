import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from ifcamir import expcli
from ifcamir.errors import FormatError, InputError
from ifcamir.expcli import RESULT_COLUMNS, ConfigError, main, parse_config

REPO = Path(__file__).resolve().parents[1]

MINIMAL = {
    "population": {
        "num_clients": 4,
        "num_clusters": 2,
        "minority_fraction": 0.5,
        "samples_per_client": 12,
        "deformation": "synthetic-mean-shift",
        "majority_range": [2, 3],
        "minority_range": [-3, -2],
        "shadow_pool_size": 60,
        "test_size_per_group": 30,
        "synthetic_dim": 6,
        "synthetic_classes": 3,
    },
    "rounds": 2,
    "learning_rate": 0.2,
    "batch_size": 6,
    "local_steps": 1,
    "eval_period": 1,
    "repeats": 2,
    "seed": 3,
}


@pytest.fixture
def config_file(tmp_path):
    def make(overrides=None, text=None):
        data = json.loads(json.dumps(MINIMAL))
        for key, value in (overrides or {}).items():
            if key.startswith("population."):
                data["population"][key.split(".", 1)[1]] = value
            else:
                data[key] = value
        path = tmp_path / f"cfg{len(list(tmp_path.glob('cfg*')))}.json"
        path.write_text(text if text is not None else json.dumps(data, indent=2))
        return path

    return make


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class TestConfig:
    def test_defaults(self):
        cfg = parse_config('{"population": {"deformation": "synthetic-mean-shift"}}')
        assert (cfg.eval_period, cfg.shadow_count, cfg.repeats, cfg.threshold_range) == (5, 3, 5, (0.5, 0.8))
        assert cfg.algorithm == "ifca-mir"

    def test_threshold_range_outside_domain(self):
        text = json.dumps({**MINIMAL, "threshold_range": [0.2, 0.4]}, indent=2)
        with pytest.raises(ConfigError) as err:
            parse_config(text, "exp.json")
        line = next(i for i, l in enumerate(text.splitlines(), 1) if '"threshold_range"' in l)
        assert str(err.value).startswith(f"exp.json:{line}:")
        assert "threshold_range" in str(err.value)

    @pytest.mark.parametrize(
        "change",
        [
            {"rounds": -1},
            {"learning_rate": 0},
            {"algorithm": "fedavg"},
            {"bogus": 1},
            {"alpha_policy": "fixed:2"},
            {"batch_size": 13},
            {"population": {**MINIMAL["population"], "num_clients": 2.5}},
            {"population": {**MINIMAL["population"], "deformation": "rotation"}},
        ],
    )
    def test_invalid(self, change):
        with pytest.raises(ConfigError):
            parse_config(json.dumps({**MINIMAL, **change}))

    def test_bad_json_names_line(self):
        with pytest.raises(ConfigError, match=r"^c.json:3:"):
            parse_config('{\n "rounds": 2,\n ]', "c.json")

    def test_echo_round_trip(self):
        cfg = parse_config(json.dumps(MINIMAL))
        assert parse_config(expcli.config_json(cfg)) == cfg

    def test_bundled_configs_parse(self):
        for path in (REPO / "configs").glob("*.json"):
            cfg = expcli.load_config(path)
            assert expcli.load_config(path) == cfg
            if cfg.population.source:
                assert Path(cfg.population.source.images).is_absolute()

    @given(
        rounds=st.integers(1, 500),
        lr=st.floats(1e-4, 5.0),
        repeats=st.integers(1, 9),
        lo=st.floats(0.5, 1.0),
        width=st.floats(0.0, 0.5),
        policy=st.sampled_from(["fixed:0.3", "uniform:0:1", "threshold:0.2:0.9"]),
    )
    @settings(max_examples=50)
    def test_round_trip_property(self, rounds, lr, repeats, lo, width, policy):
        cfg = parse_config(json.dumps({
            **MINIMAL, "rounds": rounds, "learning_rate": lr, "repeats": repeats,
            "threshold_range": [lo, min(1.0, lo + width)], "alpha_policy": policy,
        }))
        assert parse_config(expcli.config_json(cfg)) == cfg


class TestRun:
    def test_minimal_run(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["run", "--config", str(config_file()), "--out", str(out)]) == 0
        table = rows(out / "results.csv")
        assert len(table) == 2
        assert [r["seed"] for r in table] == ["3", "4"]
        assert all(r["complete"] == "1" and r["rounds_done"] == "2" for r in table)
        for name in ("results.json", "rounds.csv", "config.echo.json"):
            assert (out / name).exists()
        assert len(rows(out / "rounds.csv")) == 2 * 2 * 2
        echo = expcli.parse_config((out / "config.echo.json").read_text())
        assert echo == expcli.load_config(config_file())
        record = json.loads((out / "results.json").read_text())
        assert len(record["rows"]) == 2 and all("wall_seconds" in r for r in record["rows"])

    def test_header_is_stable(self, config_file, tmp_path):
        main(["run", "--config", str(config_file()), "--out", str(tmp_path / "a")])
        raw = (tmp_path / "a" / "results.csv").read_bytes()
        header = raw.split(b"\r\n", 1)[0].decode()
        assert tuple(header.split(",")) == RESULT_COLUMNS
        assert len(set(RESULT_COLUMNS)) == len(RESULT_COLUMNS)

    def test_byte_identical(self, config_file, tmp_path):
        cfg = str(config_file())
        for name, extra in (("a", []), ("b", []), ("c", ["--jobs", "2"])):
            assert main(["run", "--config", cfg, "--out", str(tmp_path / name), *extra]) == 0
        a = (tmp_path / "a" / "results.csv").read_bytes()
        assert a == (tmp_path / "b" / "results.csv").read_bytes()
        assert a == (tmp_path / "c" / "results.csv").read_bytes()
        assert (tmp_path / "a" / "rounds.csv").read_bytes() == (tmp_path / "c" / "rounds.csv").read_bytes()

    def test_seed_flag_and_env(self, config_file, tmp_path, monkeypatch):
        cfg = str(config_file())
        monkeypatch.setenv(expcli.ENV_OUT_DIR, str(tmp_path / "env"))
        monkeypatch.setenv(expcli.ENV_SEED, "11")
        assert main(["run", "--config", cfg]) == 0
        assert [r["seed"] for r in rows(tmp_path / "env" / "results.csv")] == ["11", "12"]
        assert main(["run", "--config", cfg, "--seed", "20", "--out", str(tmp_path / "flag")]) == 0
        assert [r["seed"] for r in rows(tmp_path / "flag" / "results.csv")] == ["20", "21"]
        monkeypatch.setenv(expcli.ENV_SEED, "x")
        assert main(["run", "--config", cfg]) == 2

    def test_missing_out(self, config_file, monkeypatch):
        monkeypatch.delenv(expcli.ENV_OUT_DIR, raising=False)
        assert main(["run", "--config", str(config_file())]) == 2

    def test_invalid_config_exit(self, config_file, tmp_path, capsys):
        path = config_file({"threshold_range": [0.2, 0.4]})
        assert main(["run", "--config", str(path), "--out", str(tmp_path / "x")]) == 2
        assert f"{path}:" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()

    def test_missing_config_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) != 0

    def test_unwritable_output(self, config_file, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["run", "--config", str(config_file()), "--out", str(blocker / "sub")]) == 1

    def test_deadline_marks_incomplete(self, config_file, tmp_path):
        out = tmp_path / "late"
        assert main(["run", "--config", str(config_file()), "--out", str(out), "--max-seconds", "0"]) == 3
        table = rows(out / "results.csv")
        assert len(table) == 2 and all(r["complete"] == "0" for r in table)

    def test_module_entry_point(self, config_file, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "ifcamir", "run", "--config", str(config_file()), "--out", str(tmp_path / "m")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert len(rows(tmp_path / "m" / "results.csv")) == 2


class TestSweep:
    def test_counts(self, config_file, tmp_path):
        out = tmp_path / "sw"
        code = main(["sweep", "--config", str(config_file()), "--axis", "minority-fraction",
                     "--values", "0.25,0.5,0.75", "--out", str(out)])
        assert code == 0
        table = rows(out / "results.csv")
        assert len(table) == 2 * 3 * 2
        keys = [(r["algorithm"], r["axis_value"], r["seed"]) for r in table]
        assert keys == sorted(keys) and len(set(keys)) == len(keys)
        assert {r["axis"] for r in table} == {"minority-fraction"}

    def test_single_value_equals_two_runs(self, config_file, tmp_path):
        out = tmp_path / "one"
        assert main(["sweep", "--config", str(config_file()), "--axis", "minority-fraction",
                     "--values", "0.25", "--out", str(out)]) == 0
        swept = rows(out / "results.csv")
        runs = []
        for alg in ("ifca", "ifca-mir"):
            path = config_file({"algorithm": alg, "population.minority_fraction": 0.25})
            assert main(["run", "--config", str(path), "--out", str(tmp_path / alg)]) == 0
            runs += rows(tmp_path / alg / "results.csv")
        skip = {"run_id", "axis", "axis_value"}
        strip = lambda r: {k: v for k, v in r.items() if k not in skip}
        assert [strip(r) for r in swept] == [strip(r) for r in runs]

    def test_deformation_gap_axis(self):
        cfg = parse_config(json.dumps({**MINIMAL, "population": {**MINIMAL["population"], "deformation": "synthetic-mean-shift"}}))
        point = expcli.apply_axis(cfg, "deformation-gap", 2.0)
        assert point.population.minority_range == (0.0, 2.0)
        assert point.population.majority_range == (2.0, 4.0)

    @pytest.mark.parametrize("values", ["", " , ", "a,b"])
    def test_bad_values(self, config_file, tmp_path, values):
        code = main(["sweep", "--config", str(config_file()), "--axis", "minority-fraction",
                     "--values", values, "--out", str(tmp_path / "bad")])
        assert code == 2

    def test_out_of_domain_value(self, config_file, tmp_path):
        code = main(["sweep", "--config", str(config_file()), "--axis", "minority-fraction",
                     "--values", "1.5", "--out", str(tmp_path / "bad")])
        assert code == 2
        with pytest.raises(InputError):
            expcli.sweep_jobs(expcli.load_config(config_file()), "minority-fraction", [])


def write_rows(path, records, header=RESULT_COLUMNS):
    blank = dict.fromkeys(header, "")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\r\n")
    w.writeheader()
    for rec in records:
        w.writerow({**blank, "complete": "1", "algorithm": "ifca", **rec})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), newline="")


class TestReport:
    def test_mean_and_sample_std(self, tmp_path, capsys):
        write_rows(tmp_path / "results.csv", [{"seed": "0", "acc_overall": "0.70"}, {"seed": "1", "acc_overall": "0.80"}])
        assert main(["report", "--in", str(tmp_path)]) == 0
        summary = rows(tmp_path / "summary.csv")
        assert len(summary) == 1
        assert float(summary[0]["acc_overall_mean"]) == pytest.approx(0.75)
        assert float(summary[0]["acc_overall_std"]) == pytest.approx(0.0707, abs=1e-4)
        assert "0.7500" in capsys.readouterr().out

    def test_real_results_one_group(self, config_file, tmp_path):
        main(["run", "--config", str(config_file()), "--out", str(tmp_path)])
        assert main(["report", "--in", str(tmp_path)]) == 0
        summary = rows(tmp_path / "summary.csv")
        assert len(summary) == 1 and summary[0]["n"] == "2"

    def test_incomplete_rows_skipped(self, tmp_path):
        write_rows(tmp_path / "results.csv", [{"acc_overall": "0.5"}, {"acc_overall": "0.9", "complete": "0"}])
        rows_ = expcli.summarize(tmp_path)
        assert rows_[0].count == 1 and rows_[0].stats["acc_overall"][0] == 0.5

    def test_mixed_schema_names_file(self, tmp_path, capsys):
        write_rows(tmp_path / "a" / "results.csv", [{"acc_overall": "0.7"}])
        bad = tmp_path / "b" / "results.csv"
        write_rows(bad, [{"acc_overall": "0.7"}], header=tuple("extra" if c == "rounds_done" else c for c in RESULT_COLUMNS))
        with pytest.raises(FormatError, match=str(bad)):
            expcli.summarize(tmp_path)
        assert main(["report", "--in", str(tmp_path)]) == 2
        assert str(bad) in capsys.readouterr().err

    def test_missing_directory(self, tmp_path):
        assert main(["report", "--in", str(tmp_path / "none")]) == 2
        assert main(["report", "--in", str(tmp_path)]) == 2

    def test_mean_std_helper(self):
        mean, std = expcli.mean_std([0.7])
        assert mean == 0.7 and std != std
