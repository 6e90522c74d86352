import io
import json
import math

import pytest

from fracgo.cli import SCHEMA_VERSION, manifest_for, resolve_config, run
from fracgo.errors import ConfigError

EXPANSION = ["run", "expansion-check", "--grid", "1024", "64", "--taus", "16", "32", "64"]


def _run(argv):
    buf = io.StringIO()
    code = run(argv, stdout=buf)
    return code, buf.getvalue()


# ----------------------------------------------------------------- config


def test_resolve_config_defaults_and_overrides():
    cfg = resolve_config("residual-sweep", {"regime": "high"}, {"M": 2})
    assert cfg["grid"] == [1024, 1024] and cfg["M"] == 2 and cfg["kind"] == "residual-sweep"
    assert resolve_config("stability-exp", {"t_M": "inf"})["t_M"] == math.inf
    assert resolve_config("expansion-check", None, {"box": 8})["box"] == 8.0
    assert resolve_config("expansion-check", {"taus": [16, 32]})["taus"] == [16.0, 32.0]


@pytest.mark.parametrize(
    "kind, file_cfg",
    [
        ("nope", None),
        ("expansion-check", {"M": 3}),
        ("expansion-check", {"s": "half"}),
        ("expansion-check", {"s": 1.5}),
        ("expansion-check", {"schema_version": SCHEMA_VERSION + 1}),
        ("expansion-check", {"kind": "xray-recover"}),
        ("expansion-check", {"taus": [16]}),
        ("expansion-check", {"grid": [64, 64, 64]}),
        ("residual-sweep", {"regime": "medium"}),
    ],
)
def test_resolve_config_rejects(kind, file_cfg):
    with pytest.raises(ConfigError):
        resolve_config(kind, file_cfg)


def test_manifest_hash_is_stable():
    a = manifest_for(resolve_config("expansion-check"))
    b = manifest_for(resolve_config("expansion-check", {"s": 0.5}))
    assert a["sha256"] == b["sha256"]
    assert a["sha256"] != manifest_for(resolve_config("expansion-check", {"s": 0.6}))["sha256"]


def test_config_errors_exit_2(tmp_path):
    assert _run(["run", "nope", "--out", str(tmp_path)])[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, out = _run(["run", "expansion-check", "--config", str(bad), "--out", str(tmp_path)])
    assert code == 2 and "config error" in out
    bad.write_text(json.dumps({"kind": "expansion-check", "bogus": 1}))
    assert _run(["run", "expansion-check", "--config", str(bad), "--out", str(tmp_path)])[0] == 2
    assert _run(["run", "expansion-check", "--grid", "64", "--out", str(tmp_path)])[0] == 2
    assert not list(tmp_path.glob("expansion-check-*"))


# --------------------------------------------------------------------- runs


def test_expansion_run_artifacts(tmp_path):
    code, out = _run(EXPANSION + ["--out", str(tmp_path / "a")])
    assert code == 0 and "gate D1: PASS" in out
    (run_dir,) = (tmp_path / "a").iterdir()
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert run_dir.name == f"expansion-check-{manifest['sha256'][:12]}"
    assert manifest["config"]["taus"] == [16.0, 32.0, 64.0]
    lines = (run_dir / "expansion.csv").read_text().splitlines()
    assert lines[0] == f"# manifest_sha256={manifest['sha256']}"
    assert lines[1] == "tau,D0,D1" and len(lines) == 5
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["manifest_sha256"] == manifest["sha256"]
    # a second run elsewhere reproduces the table byte for byte
    assert _run(EXPANSION + ["--out", str(tmp_path / "b")])[0] == 0
    (other,) = (tmp_path / "b").iterdir()
    assert (other / "expansion.csv").read_bytes() == (run_dir / "expansion.csv").read_bytes()


def test_config_file_equals_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"kind": "expansion-check", "schema_version": 1, "grid": [1024, 64],
                               "taus": [16, 32, 64]}))
    assert _run(["run", "expansion-check", "--config", str(cfg), "--out", str(tmp_path / "f")])[0] == 0
    assert _run(EXPANSION + ["--out", str(tmp_path / "g")])[0] == 0
    assert [p.name for p in (tmp_path / "f").iterdir()] == [p.name for p in (tmp_path / "g").iterdir()]


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("FRACGO_OUTPUT_ROOT", str(tmp_path / "env"))
    assert _run(EXPANSION + ["--figures", "--dat"])[0] == 0
    (run_dir,) = (tmp_path / "env").iterdir()
    assert (run_dir / "expansion.png").read_bytes()[:4] == b"\x89PNG"
    assert (run_dir / "expansion.dat").read_text().startswith("# manifest_sha256=")


def test_resolution_refusal_exits_3(tmp_path):
    code, out = _run(["run", "residual-sweep", "--regime", "const", "--M", "0", "--grid", "512", "64",
                      "--taus", "16", "32", "64", "128", "--no-refine", "--out", str(tmp_path)])
    assert code == 3 and "resolution refused" in out


def test_gate_failure_exits_1(tmp_path):
    # a 16 x 16 grid cannot resolve the phantom to 5%
    code, out = _run(["run", "xray-recover", "--grid-size", "16", "--out", str(tmp_path)])
    assert code == 1
    assert "gate adjoint: PASS" in out and "gate recovery: FAIL" in out


def test_numerical_failure_exits_4(tmp_path):
    code, out = _run(["run", "residual-sweep", "--regime", "const", "--grid", "256", "64",
                      "--taus", "2", "3", "--out", str(tmp_path)])
    assert code == 4 and "numerical failure" in out
