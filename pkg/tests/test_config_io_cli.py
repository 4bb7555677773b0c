import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from biparallel import cli
from biparallel import config as C
from biparallel import io
from biparallel.errors import ParseError, ValidationError

SMALL = """
[geometry]
preset = "log-spiral"
c = 0.3
[physics]
n_blades = 2
omega = 0.2
[discretization]
h = 0.25
m = 3
"""


def test_defaults_validate():
    cfg = C.validate({})
    assert cfg == C.defaults()
    assert C.parse_text(C.dumps(cfg), environ={}) == cfg


def test_bad_value_names_field():
    with pytest.raises(ValidationError) as info:
        C.parse_text("[physics]\nnu = -1\n", environ={})
    assert info.value.field == "physics.nu"


def test_unknown_key_gets_suggestion():
    with pytest.raises(ValidationError) as info:
        C.parse_text("[discretization]\netta = 1e-6\n", environ={})
    assert info.value.suggestion == "discretization.eta"


def test_unknown_choice_lists_options():
    with pytest.raises(ValidationError, match="P2-P1"):
        C.parse_text('[discretization]\nelement = "P3"\n', environ={})


def test_parse_error_location():
    with pytest.raises(ParseError) as info:
        C.parse_text("[physics]\nnu = = 2\n", environ={})
    assert info.value.line == 2 and info.value.column is not None


def test_environment_overrides_file():
    env = {"BIPARALLEL_PHYSICS__NU": "0.25", "BIPARALLEL_DOMAIN__R_RANGE": "[1, 3]", "OTHER": "x"}
    cfg = C.parse_text("[physics]\nnu = 2.0\n", environ=env)
    assert cfg["physics"]["nu"] == 0.25 and cfg["domain"]["r_range"] == [1.0, 3.0]


def test_sampled_preset_requires_path():
    with pytest.raises(ValidationError, match="geometry.path"):
        C.validate({"geometry": {"preset": "sampled"}})


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=6))
def test_csv_float_roundtrip(tmp_path_factory, vals):
    p = tmp_path_factory.mktemp("csv") / "t.csv"
    io.write_csv(p, [f"c{i}" for i in range(len(vals))], [vals])
    header, rows = io.read_csv(p)
    assert rows[0] == vals


def test_vtk_structure(tmp_path):
    pts = np.array([[0, 1], [1, 1], [0, 2.0]])
    io.write_vtk(tmp_path / "a.vtk", pts, [[0, 1, 2]], {"p": [1, 2, 3.0], "u": np.ones((3, 3))})
    lines = (tmp_path / "a.vtk").read_text().splitlines()
    assert lines[0].startswith("# vtk DataFile") and "POINTS 3 double" in lines
    assert "CELLS 1 4" in lines and lines[lines.index("CELL_TYPES 1") + 1] == "5"
    assert "SCALARS p double 1" in lines and "VECTORS u double" in lines


def test_manifest_detects_tampering(tmp_path):
    man = io.Manifest(tmp_path)
    man.add(io.write_json(man.path("a.json"), {"x": np.float64(1.5)}), "data")
    man.write(command="test")
    assert io.verify_manifest(tmp_path) == []
    man.path("a.json").write_text("{}")
    assert io.verify_manifest(tmp_path) == ["a.json"]


def test_geometry_check_passes(capsys):
    assert cli.main(["geometry-check", "--geometry", "log-spiral", "--samples", "5"]) == 0
    assert json.loads(capsys.readouterr().out)["passed"] is True


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[physics]\nnu = -1\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ValidationError" and err["field"] == "physics.nu"


def test_nonconvergence_exit_code(tmp_path, capsys):
    cfgp = tmp_path / "c.toml"
    cfgp.write_text(SMALL)
    code = cli.main(["run", "--config", str(cfgp), "--output-dir", str(tmp_path / "o"), "--max-sweeps", "1"])
    assert code == 3 and json.loads(capsys.readouterr().err)["error"] == "NonConvergence"


@pytest.fixture(scope="module")
def run_dirs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    (base / "c.toml").write_text(SMALL)
    for t in (1, 3):
        assert cli.main(["run", "--config", str(base / "c.toml"), "--threads", str(t),
                         "--output-dir", str(base / f"t{t}")]) == 0
    return base


def test_run_outputs_and_manifest(run_dirs):
    d = run_dirs / "t1"
    names = {e["file"] for e in json.loads((d / "manifest.json").read_text())["files"]}
    assert {"layer_000.csv", "layer_003.vtk", "sweeps.jsonl", "mesh.txt", "diagnostics.json"} <= names
    assert io.verify_manifest(d) == []
    diag = json.loads((d / "diagnostics.json").read_text())
    assert diag["converged"] and diag["J"] > 0


def test_run_output_independent_of_threads(run_dirs):
    for k in range(4):
        a = (run_dirs / "t1" / f"layer_{k:03d}.csv").read_bytes()
        assert a == (run_dirs / "t3" / f"layer_{k:03d}.csv").read_bytes()


def test_pressure_surface_and_average(tmp_path):
    (tmp_path / "c.toml").write_text(SMALL)
    assert cli.main(["pressure-surface", "--config", str(tmp_path / "c.toml"), "--output-dir", str(tmp_path / "p")]) == 0
    header, rows = io.read_csv(tmp_path / "p" / "blade_pressure.csv")
    assert header[3:5] == ["p_minus", "p_plus"] and len(rows) > 0
    assert cli.main(["average", "--config", str(tmp_path / "c.toml"), "--output-dir", str(tmp_path / "a")]) == 0
    assert json.loads((tmp_path / "a" / "averaged.json").read_text())["converged"]
