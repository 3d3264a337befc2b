import json

import pytest

from sdmlink.cli import main
from sdmlink.config import PRESETS


def _toml(d: dict, prefix="") -> str:
    """Minimal TOML writer for nested dicts of scalars and lists."""
    flat = [f"{k} = {json.dumps(v)}" for k, v in d.items() if not isinstance(v, dict)]
    out = "\n".join(flat) + "\n"
    for k, v in d.items():
        if isinstance(v, dict):
            name = f"{prefix}{k}"
            inner = {a: b for a, b in v.items() if not isinstance(b, dict)}
            out += f"[{name}]\n" + "".join(f"{a} = {json.dumps(b)}\n" for a, b in inner.items())
            out += _toml({a: b for a, b in v.items() if isinstance(b, dict)}, prefix=name + ".").lstrip("\n")
    return out


@pytest.fixture
def tiny_file(tmp_path, tiny_raw):
    p = tmp_path / "tiny.toml"
    p.write_text(_toml(tiny_raw))
    return p


def test_presets_lists_all(capsys):
    assert main(["presets"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in PRESETS)


def test_validate_ok(tiny_file, capsys):
    assert main(["validate", str(tiny_file)]) == 0
    assert "ok" in capsys.readouterr().out


def test_validate_reports_all_errors(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("rx_subsets = [7]\n[tx.rrc]\nroll_off = 1.5\n")
    assert main(["validate", str(p)]) == 1
    err = capsys.readouterr().err
    assert "tx.rrc.roll_off" in err


def test_validate_syntax_error(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("sweep = [\n")
    assert main(["validate", str(p)]) == 1
    assert "line" in capsys.readouterr().err


def test_usage_error_is_exit_1():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1


def test_run_then_export(tiny_file, tmp_path, capsys):
    out = tmp_path / "res"
    assert main(["run", str(tiny_file), "--out", str(out), "--seed", "3", "-q", "--dump-matrices"]) == 0
    cfg = json.loads((out / "config.resolved.json").read_text())
    assert cfg["seeds"]["base"] == 3 and cfg["output_dir"] == str(out)
    assert (out / "matrices" / "channel.json").exists()
    assert main(["export", str(out), "--figure", "gmi_vs_power"]) == 0
    assert (out / "gmi_vs_power.csv").exists()
    assert main(["export", str(out), "--figure", "xt_matrix", "--out", str(tmp_path / "fig")]) == 0
    assert (tmp_path / "fig" / "xt_group.csv").exists()
    assert main(["export", str(out), "--figure", "nope"]) == 1
    assert main(["export", str(tmp_path / "missing"), "--figure", "gmi_vs_power"]) == 1


def test_run_with_failures_exits_2(tmp_path, tiny_raw, capsys):
    tiny_raw["eq"]["step_train"] = 0.5
    p = tmp_path / "div.toml"
    p.write_text(_toml(tiny_raw))
    assert main(["run", str(p), "--out", str(tmp_path / "r"), "-q"]) == 2
    assert "failed" in capsys.readouterr().err
    assert (tmp_path / "r" / "failures.json").exists()


def test_run_invalid_config_exits_1(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("n_captures = 0\n")
    assert main(["run", str(p)]) == 1


def test_jobs_must_be_positive(tiny_file):
    assert main(["run", str(tiny_file), "--jobs", "0"]) == 1
