"""
Test script for the run surface
INI config, tensor dumps, report emission and the command-line entry point
"""

import csv
import json
import struct

import numpy as np
import pytest

from backend.cli import build_parser, main, resolve_config
from backend.config import ENV_OUTPUT_ROOT, RunConfig, load_config, parse_ini
from backend.dump import FORMAT_VERSION, MAGIC, dump_tensors, load_tensors
from backend.errors import ConfigError, DumpFormatError, InvalidArgumentError
from backend.numerics import make_rng, quantize
from backend.pipeline import STAGES
from backend.report import REPORT_JSON, SUMMARY_CSV, TIMINGS_JSON, RunReport, emit_report, load_report


INI = """
[sae]
m_dim = 256
steps = 100

[judge]
m_min = 2

[identify]
curate = false

[run]
seed = 9
"""


def _report():
    return RunReport(
        seed=3,
        config=RunConfig(output_dir="x").to_dict(include_output=False),
        strategy_names={"0": "s0", "1": "s1"},
        selected={
            "0": [{"feature_id": 4, "alpha": 12.0, "success_rate": 0.75}],
            "1": [{"feature_id": 9, "alpha": 15.0, "success_rate": 1.0},
                  {"feature_id": 2, "alpha": 6.0, "success_rate": 0.5}],
        },
        correction={"rates": {"budget_force": 0.2}},
    )


# --- config ---

def test_ini_values_are_typed(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(INI)
    config = load_config(str(path))
    assert config.sae.m_dim == 256 and config.sae.steps == 100
    assert config.judge.m_min == 2
    assert config.identify.curate is False
    assert config.seed == 9
    assert config.sae.k == 8
    assert config.validate() is config


def test_overrides_apply_after_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(INI)
    config = load_config(str(path), ["sae.steps=7", "steering.alpha_start=10.5"])
    assert config.sae.steps == 7
    assert config.steering.alpha_start == 10.5
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["sae.steps"])


def test_unknown_names_are_rejected():
    with pytest.raises(ConfigError) as e:
        RunConfig.from_dict(parse_ini("[sae]\nsteps = 3\nwidth = 4\n"))
    assert "unknown key 'sae.width'" in e.value.problems
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"optimizer": {"lr": 1}})
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["sae.steps=many"])


def test_validate_lists_every_problem():
    config = RunConfig().updated({"sae": {"m_dim": 32, "k": 0}, "identify": {"n": 5, "top_m": 2}})
    with pytest.raises(ConfigError) as e:
        config.validate()
    assert len(e.value.problems) >= 3
    assert any("m_dim" in p for p in e.value.problems)
    assert any("top_m" in p for p in e.value.problems)


def test_output_root_from_environment(monkeypatch):
    monkeypatch.setenv(ENV_OUTPUT_ROOT, "/tmp/elsewhere")
    assert RunConfig().output_dir == "/tmp/elsewhere"
    monkeypatch.delenv(ENV_OUTPUT_ROOT)
    assert RunConfig().output_dir == "runs"


def test_ini_echo_reloads_to_the_same_config(tmp_path):
    config = RunConfig(seed=4, output_dir=str(tmp_path)).with_overrides(["router.steps=12"])
    path = tmp_path / "echo.ini"
    path.write_text(config.to_ini())
    assert load_config(str(path)) == config


# --- tensor dumps ---

def test_dump_round_trip_after_quantization(tmp_path):
    rng = make_rng(0)
    tensors = {"w_enc": rng.standard_normal((512, 64)), "b_enc": rng.standard_normal(512), "k": np.array(8.0)}
    path = str(tmp_path / "sae.saes")
    dump_tensors(path, tensors)
    loaded = load_tensors(path)
    assert list(loaded) == list(tensors)
    for name, tensor in tensors.items():
        assert loaded[name].shape == tensor.shape
        assert np.array_equal(loaded[name], quantize(tensor))
    again = str(tmp_path / "again.saes")
    dump_tensors(again, loaded)
    assert open(path, "rb").read() == open(again, "rb").read()


def test_dump_header_layout(tmp_path):
    path = str(tmp_path / "w.saes")
    dump_tensors(path, {"w": np.zeros((64, 512))})
    data = open(path, "rb").read()
    magic, version, count = struct.unpack_from("<4sHI", data, 0)
    assert (magic, version, count) == (MAGIC, FORMAT_VERSION, 1)
    offset = 10
    (name_len,) = struct.unpack_from("<H", data, offset)
    assert data[offset + 2:offset + 2 + name_len] == b"w"
    offset += 2 + name_len
    rank, = struct.unpack_from("<H", data, offset)
    dims = struct.unpack_from("<2Q", data, offset + 2)
    assert rank == 2 and dims == (64, 512)
    assert len(data) == offset + 2 + 16 + 4 * 64 * 512


def test_malformed_dumps(tmp_path):
    path = str(tmp_path / "t.saes")
    dump_tensors(path, {"a": np.ones((3, 4))})
    data = open(path, "rb").read()
    cases = {
        "truncated": data[:-5],
        "magic": b"NOPE" + data[4:],
        "version": data[:4] + struct.pack("<H", FORMAT_VERSION + 1) + data[6:],
        "trailing": data + b"\x00",
    }
    for name, content in cases.items():
        bad = tmp_path / f"{name}.saes"
        bad.write_bytes(content)
        with pytest.raises(DumpFormatError):
            load_tensors(str(bad))
    with pytest.raises(OSError):
        load_tensors(str(tmp_path / "missing.saes"))
    with pytest.raises(InvalidArgumentError):
        dump_tensors(path, {"": np.ones(2)})


def test_dump_with_overflowing_dims(tmp_path):
    path = tmp_path / "t.saes"
    dump_tensors(str(path), {"a": np.ones((3, 4))})
    data = open(path, "rb").read()
    dims_at = 10 + 2 + 1 + 2
    # 2**62 * 4 wraps to zero in 64-bit arithmetic
    for dims in [(2 ** 62, 4), (2 ** 63, 2 ** 63), (3, 2 ** 40)]:
        bad = tmp_path / "huge.saes"
        bad.write_bytes(data[:dims_at] + struct.pack("<2Q", *dims) + data[dims_at + 16:])
        with pytest.raises(DumpFormatError, match="bytes left"):
            load_tensors(str(bad))


# --- reports ---

def test_emit_report_json_and_csv(tmp_path):
    report = _report()
    report.timings = {"build": 0.25, "sample": 1.5}
    paths = emit_report(report, str(tmp_path))
    assert sorted(p.rsplit("/", 1)[-1] for p in paths) == sorted([REPORT_JSON, SUMMARY_CSV, TIMINGS_JSON])
    assert "timings" not in json.loads((tmp_path / REPORT_JSON).read_text())
    assert json.loads((tmp_path / TIMINGS_JSON).read_text()) == {"build": 0.25, "sample": 1.5}
    assert load_report(str(tmp_path / REPORT_JSON)) == report
    with open(tmp_path / SUMMARY_CSV, newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3
    assert [r["feature_id"] for r in rows] == ["4", "9", "2"]
    assert rows[2]["rank"] == "2"


def test_report_bytes_ignore_timings(tmp_path):
    report = _report()
    emit_report(report, str(tmp_path / "a"))
    report.timings = {"build": 3.0}
    emit_report(report, str(tmp_path / "b"))
    for name in (REPORT_JSON, SUMMARY_CSV):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert load_report(str(tmp_path / "b" / REPORT_JSON)).timings == {"build": 3.0}


def test_emit_report_with_empty_sections(tmp_path):
    report = RunReport(seed=0, config={})
    emit_report(report, str(tmp_path), formats=["json", "csv"])
    data = json.loads((tmp_path / REPORT_JSON).read_text())
    assert data["selected"] == {} and data["correction"] == {}
    assert (tmp_path / SUMMARY_CSV).read_text().strip().count("\n") == 0
    with pytest.raises(InvalidArgumentError):
        emit_report(report, str(tmp_path), formats=["xml"])


def test_load_report_rejects_unknown_fields(tmp_path):
    path = tmp_path / REPORT_JSON
    path.write_text(json.dumps({"seed": 0, "config": {}, "extra": 1}))
    with pytest.raises(InvalidArgumentError):
        load_report(str(path))


# --- command line ---

def test_parser_has_every_stage():
    parser = build_parser()
    for command in list(STAGES) + ["run"]:
        args = parser.parse_args([command, "--seed", "2"])
        assert args.command == command and args.seed == 2
    assert parser.parse_args(["run", "--resume"]).resume


def test_resolve_config_precedence(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(INI)
    args = build_parser().parse_args(
        ["build", "--config", str(path), "--set", "sae.steps=3", "--seed", "1", "--output", str(tmp_path / "o")]
    )
    config = resolve_config(args)
    assert config.sae.steps == 3 and config.sae.m_dim == 256
    assert config.seed == 1 and config.output_dir == str(tmp_path / "o")


def test_main_reports_bad_config(tmp_path, capsys):
    code = main(["build", "--set", "sae.k=0", "--output", str(tmp_path), "--no-progress"])
    assert code == 2
    assert "Invalid configuration" in capsys.readouterr().out


def test_main_runs_build_stage(tmp_path, capsys):
    code = main(["build", "--output", str(tmp_path / "run"), "--no-progress", "--log-level", "WARNING"])
    assert code == 0
    assert "Step 1: build" in capsys.readouterr().out
    assert (tmp_path / "run" / "toylm.json").exists()


def test_main_stage_failure_exits_one(tmp_path, capsys):
    code = main(["rank", "--output", str(tmp_path / "empty"), "--no-progress", "--log-level", "WARNING"])
    assert code == 1
    assert "✗" in capsys.readouterr().out


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
