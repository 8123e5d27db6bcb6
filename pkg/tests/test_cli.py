import csv
import io
import json
import os
import stat

import numpy as np
import pytest
from click.testing import CliRunner

from forge.cli import ConfigError, atomic_write, load_config, main, resolve_target
from forge.nn_core import AffineMap, deserialize_net, net_from_affines, serialize_net

X2_TOML = """
[target]
expr = "x1^2"
d_x = 1

[domain]
lo = [-1.0]
hi = [1.0]

[run]
eps = 0.2
seed = 0
degree = 2

[output]
dir = "{out}"
"""


def run(*args):
    return CliRunner().invoke(main, list(args))


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.fixture(scope="module")
def x2_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("x2")
    cfg = write(d, "run.toml", X2_TOML.format(out="out"))
    res = run("compile", "-c", cfg)
    return d, cfg, res


# --- widths ---------------------------------------------------------------------


@pytest.mark.parametrize("dx, dy, w", [(2, 2, 3), (1, 2, 3), (5, 3, 6), (1, 1, 2), (3, 4, 5)])
def test_widths(dx, dy, w):
    res = run("widths", str(dx), str(dy))
    assert res.exit_code == 0
    first = res.stdout.splitlines()[0]
    assert first.startswith(f"w_min({dx}, {dy}) = {w}")
    assert ("indicator case d_y=d_x+1" in first) == (dy == dx + 1)
    for act in ("ReLU", "ReLU+STEP", "leaky-ReLU", "ReLU+FLOOR"):
        assert act in res.stdout


def test_widths_rejects_zero():
    assert run("widths", "0", "1").exit_code == 2


# --- compile --------------------------------------------------------------------


def test_compile_square(x2_run):
    d, cfg, res = x2_run
    assert res.exit_code == 0, res.output
    assert "ok: end-to-end error" in res.stdout
    report = json.loads((d / "out" / "report.json").read_text())
    assert report["success"] is True
    assert report["end_to_end"] <= 0.2
    assert report["width"] == 2 and report["w_min"] == 2
    assert report["net"]["declared_width"] == 2
    assert set(report["stage_errors"]) == {"poly", "lift", "flow", "splitting", "compile"}
    net = deserialize_net((d / "out" / "net.json").read_text())
    assert net.declared_width == 2 and net.input_dim == 1 and net.output_dim == 1
    assert (d / "out" / "field.json").exists()


def test_artifacts_respect_umask(x2_run):
    d, _, _ = x2_run
    mask = os.umask(0)
    os.umask(mask)
    mode = stat.S_IMODE(os.stat(d / "out" / "net.json").st_mode)
    assert mode == 0o666 & ~mask


def test_verify_reproduces_report(x2_run):
    d, _, _ = x2_run
    report = json.loads((d / "out" / "report.json").read_text())
    res = run("verify", str(d / "out" / "net.json"), "--target", "x1^2", "--dom=-1,1")
    assert res.exit_code == 0, res.output
    lines = dict(line.split() for line in res.stdout.splitlines())
    assert abs(float(lines["sup_error"]) - report["end_to_end"]) <= 1e-12
    assert abs(float(lines["refined_delta"])) < 0.1 * float(lines["sup_error"])


def test_compile_is_deterministic(x2_run, tmp_path):
    d, _, _ = x2_run
    cfg = write(tmp_path, "run.toml", X2_TOML.format(out="out"))
    assert run("compile", "-c", cfg).exit_code == 0
    assert (tmp_path / "out" / "net.json").read_bytes() == (d / "out" / "net.json").read_bytes()
    assert (tmp_path / "out" / "field.json").read_bytes() == (d / "out" / "field.json").read_bytes()

    def strip(path):
        doc = json.loads(path.read_text())
        doc.pop("timings")
        doc.pop("artifacts")
        return doc

    assert strip(tmp_path / "out" / "report.json") == strip(d / "out" / "report.json")


def test_compile_swap_paper_faithful_fails(tmp_path):
    cfg = write(
        tmp_path,
        "swap.toml",
        '[target]\nbuiltin = "swap2"\n[domain]\nlo = [-1.0, -1.0]\nhi = [1.0, 1.0]\n'
        '[run]\neps = 0.3\ndegree = 1\n[lift]\npolicy = "paper_faithful"\n',
    )
    res = run("compile", "-c", cfg)
    assert res.exit_code == 3
    assert "lift verification rejected (det<0)" in res.stderr
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["success"] is False
    assert report["failure"]["stage"] == "lift"
    assert "end_to_end" not in report
    assert not (tmp_path / "out" / "net.json").exists()


def test_compile_infeasible_budget(tmp_path):
    cfg = write(
        tmp_path,
        "tiny.toml",
        '[target]\nexpr = "x1^2"\n[domain]\nlo = [-1.0]\nhi = [1.0]\n[run]\neps = 1e-9\ndegree = 2\n[flow]\nbudget = 2\n',
    )
    res = run("compile", "-c", cfg)
    assert res.exit_code == 3
    assert "BudgetExhausted" in res.stderr
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["failure"]["stage"] == "flow"


@pytest.mark.parametrize(
    "body",
    [
        '[target]\nexpr = "x1^2"\n[domain]\nlo = [-1.0]\nhi = [1.0]\n[run]\neps = -1\n',
        '[target]\nexpr = "x1^2"\n[domain]\nlo = [-1.0]\nhi = [1.0]\n',
        '[target]\nexpr = "x1^2"\n[domain]\nlo = [-1.0]\nhi = [1.0]\n[run]\neps = 0.1\n[flow]\nsteps_per = 3\n',
        '[target]\nexpr = "y^2"\n[domain]\nlo = [-1.0]\nhi = [1.0]\n[run]\neps = 0.1\n',
        '[target]\nexpr = "x1"\nbuiltin = "swap2"\n[domain]\nlo = [-1.0]\nhi = [1.0]\n[run]\neps = 0.1\n',
        '[target]\nexpr = "x1"\n[domain]\nlo = [1.0]\nhi = [-1.0]\n[run]\neps = 0.1\n',
        '[target]\nexpr = "x1"\nd_x = 2\n[domain]\nlo = [-1.0]\nhi = [1.0]\n[run]\neps = 0.1\n',
        "not toml at all [",
    ],
)
def test_compile_config_errors(tmp_path, body):
    cfg = write(tmp_path, "bad.toml", body)
    res = run("compile", "-c", cfg)
    assert res.exit_code == 2, res.output
    assert "config error" in res.stderr


def test_compile_missing_config(tmp_path):
    assert run("compile", "-c", str(tmp_path / "nope.toml")).exit_code == 4


def test_compile_unwritable_output(tmp_path):
    (tmp_path / "blocker").write_text("a file, not a directory")
    cfg = write(
        tmp_path,
        "run.toml",
        '[target]\nbuiltin = "swap2"\n[domain]\nlo = [-1.0, -1.0]\nhi = [1.0, 1.0]\n'
        '[run]\neps = 0.3\ndegree = 1\n[lift]\npolicy = "paper_faithful"\n[output]\ndir = "blocker"\n',
    )
    assert run("compile", "-c", cfg).exit_code == 4


def test_load_config_paths(tmp_path):
    cfg = load_config(write(tmp_path, "r.toml", X2_TOML.format(out="elsewhere")))
    assert cfg.paths()["net"] == str(tmp_path / "elsewhere" / "net.json")
    assert cfg.eps == 0.2 and cfg.seed == 0 and cfg.d_x == 1
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "b.toml", "[target]\n"))


# --- verify --------------------------------------------------------------------


@pytest.fixture
def identity_net(tmp_path):
    p = tmp_path / "ident.json"
    p.write_text(serialize_net(net_from_affines([AffineMap.identity(1)], 2, 0.5)))
    return str(p)


def test_verify_identity(identity_net):
    res = run("verify", identity_net, "--target", "x1", "--dom=-1,1")
    assert res.exit_code == 0
    assert "sup_error 0.0" in res.stdout


def test_verify_dimension_mismatch(identity_net):
    res = run("verify", identity_net, "--target", "swap2")
    assert res.exit_code == 2
    assert "R^1" in res.stderr


def test_verify_io_errors(tmp_path):
    assert run("verify", str(tmp_path / "missing.json"), "--target", "x1").exit_code == 4
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert run("verify", str(bad), "--target", "x1").exit_code == 4


def test_verify_bad_dom(identity_net):
    assert run("verify", identity_net, "--target", "x1", "--dom", "1").exit_code == 2


# --- topo ------------------------------------------------------------------------


def rows_of(text):
    return list(csv.reader(io.StringIO(text)))


def test_topo_four2d():
    res = run("topo", "four2d")
    assert res.exit_code == 0
    rows = rows_of(res.stdout)
    assert rows[0] == ["s", "t", "x", "y"]
    assert len(rows) == 2
    assert float(rows[1][2]) == 0.0 and float(rows[1][3]) == 0.0


def test_topo_four3d():
    rows = rows_of(run("topo", "four3d", "--eps", "0.1").stdout)
    assert rows == [["s", "t", "x", "y", "z"]]


def test_topo_forced_to_file(tmp_path):
    out = tmp_path / "w" / "forced.csv"
    res = run("topo", "forced", "--count", "100", "--seed", "3", "--out", str(out))
    assert res.exit_code == 0
    rows = rows_of(out.read_text())[1:]
    assert len(rows) == 100
    assert all(r[1] == "INTERSECTS" for r in rows)
    again = tmp_path / "again.csv"
    run("topo", "forced", "--count", "100", "--seed", "3", "--out", str(again))
    assert again.read_bytes() == out.read_bytes()


def test_topo_forced_precondition():
    res = run("topo", "forced", "--count", "1", "--amplitude", "2.0", "--eps0", "0.5")
    assert res.exit_code == 3


def test_topo_monotone1():
    res = run("topo", "monotone1", "--count", "50")
    rows = rows_of(res.stdout)[1:]
    assert len(rows) == 51
    assert all(r[3] == "True" for r in rows)
    assert rows[-1][0] == "search"
    assert float(rows[-1][4]) >= 0.499


def test_topo_unknown_demo():
    assert run("topo", "circle").exit_code == 2


# --- helpers ---------------------------------------------------------------------


def test_resolve_target():
    assert resolve_target("builtin:swap2").d_x == 2
    assert resolve_target("sqnorm", 3).d_x == 3
    f = resolve_target("x1 * x2", 2)
    assert f(np.array([2.0, 3.0]))[0] == 6.0


def test_atomic_write_replaces(tmp_path):
    p = tmp_path / "a" / "b.txt"
    atomic_write(p, "one")
    atomic_write(p, "two")
    assert p.read_text() == "two"
    assert [x.name for x in p.parent.iterdir()] == ["b.txt"]
