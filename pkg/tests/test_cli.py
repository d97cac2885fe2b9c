import json
import subprocess
import sys

import pytest

from polykin import cli

SMALL_VERIFY = {"command": "verify-collision", "seed": 3,
                "experiment": {"samples": 2000, "oracle_cases": 200, "transition_cases": 50,
                               "jacobian_cases": 50}}


def write(tmp_path, doc, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return str(path)


@pytest.mark.parametrize("doc", [
    [],
    {"command": "nope"},
    {"command": "verify-collision", "extra": 1},
    {"command": "verify-collision", "seed": -1},
    {"command": "verify-collision", "seed": 1.5},
    {"command": "verify-collision", "experiment": {"samples": "many"}},
    {"command": "verify-collision", "experiment": {"unknown": 1}},
    {"command": "geometry-lab", "experiment": {"pathological": {"bogus": 1}}},
    {"command": "verify-collision", "params": {"d": 2}},
    {"command": "simulate", "params": {"d": 2}},
])
def test_load_config_rejects(doc):
    with pytest.raises(cli.ConfigError):
        cli.load_config(doc)


def test_load_config_fills_defaults():
    cfg = cli.load_config({"command": "verify-collision", "experiment": {"samples": 10}})
    assert cfg["seed"] == 0 and cfg["experiment"]["samples"] == 10
    assert cfg["experiment"]["orders"] == [1, 2, 3]


def test_schema_lists_every_command():
    schema = cli.config_schema()
    consts = {v["properties"]["command"]["const"] for v in schema["oneOf"]}
    assert consts == set(cli.COMMANDS)


def test_exit_codes(tmp_path, capsys):
    assert cli.run(str(tmp_path / "missing.json")) == cli.EXIT_CONFIG
    assert cli.run(write(tmp_path, "{not json")) == cli.EXIT_CONFIG
    assert cli.run(write(tmp_path, {"command": "nope"})) == cli.EXIT_CONFIG
    assert cli.main(["--config", write(tmp_path, SMALL_VERIFY), "--seed", "-4"]) == cli.EXIT_CONFIG
    ok = cli.run(write(tmp_path, SMALL_VERIFY), out=str(tmp_path / "out"), check=True)
    assert ok == cli.EXIT_OK
    assert "PASS momentum" in capsys.readouterr().out
    bad_params = {"command": "simulate", "experiment": {"target_events": 1},
                  "params": {"d": 2, "M": 1, "N": 10, "eps": [0.01], "delta": 1e-4,
                             "R": 2.0, "rho": 4.0, "beta0": 1.0, "mu0": 0.0, "n_trunc": 2,
                             "seed": 0}}
    # a packing radius far too small for ten particles fails at run time
    bad_params["experiment"]["radius"] = 1e-4
    assert cli.run(write(tmp_path, bad_params), out=str(tmp_path / "o2")) == cli.EXIT_RUNTIME


def test_check_flag_reports_failed_threshold(tmp_path):
    doc = {"command": "geometry-lab", "seed": 1,
           "experiment": {"families": ["cylinder"], "samples": 20_000, "points_per_decade": 1}}
    path = write(tmp_path, doc)
    assert cli.run(path, out=str(tmp_path / "a")) == cli.EXIT_OK
    assert cli.run(path, out=str(tmp_path / "b"), check=True) == cli.EXIT_CHECK


def test_outputs_and_manifest(tmp_path):
    out = tmp_path / "out"
    assert cli.run(write(tmp_path, SMALL_VERIFY), out=str(out)) == 0
    names = {p.name for p in out.iterdir()}
    assert {"results.csv", "summary.json", "checks.json", "manifest.json"} <= names
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["wallclock_seconds"] >= 0
    first = (out / "results.csv").read_text().splitlines()[0]
    assert first == f"# config_hash: {manifest['config_hash']}"


def test_reruns_are_byte_identical_across_thread_counts(tmp_path):
    path = write(tmp_path, SMALL_VERIFY)
    cli.run(path, out=str(tmp_path / "a"), threads=1)
    cli.run(path, out=str(tmp_path / "b"), threads=3)
    for name in ("results.csv", "summary.json", "checks.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_changes_hash(tmp_path):
    path = write(tmp_path, SMALL_VERIFY)
    cli.run(path, out=str(tmp_path / "a"))
    cli.run(path, seed=4, out=str(tmp_path / "b"))
    ha = json.loads((tmp_path / "a" / "manifest.json").read_text())["config_hash"]
    hb = json.loads((tmp_path / "b" / "manifest.json").read_text())["config_hash"]
    assert ha != hb


def test_emit_plot_data_groups_and_copies_verbatim(tmp_path):
    a = tmp_path / "a.csv"
    a.write_text("# config_hash: x\nseries,x,y,y_err,extra\n"
                 "s1,0.3,1.00000000000000001,0.1,q\ns2,1,2e-3,,q\ns1,0.1,5,0.2,q\n")
    b = tmp_path / "b.csv"
    b.write_text("series,x,y\ns2,0.5,7\n")
    text = cli.emit_plot_data([str(a), str(b)])
    assert text.splitlines() == ["series,x,y,y_err", "s1,0.1,5,0.2",
                                 "s1,0.3,1.00000000000000001,0.1", "s2,0.5,7,", "s2,1,2e-3,"]
    out = tmp_path / "plot.csv"
    cli.emit_plot_data(str(a), out)
    assert out.read_text().startswith("series,x,y,y_err\n")


def test_emit_plot_data_empty_and_malformed(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("# config_hash: x\n")
    assert cli.emit_plot_data([str(empty)]) == "series,x,y,y_err\n"
    ragged = tmp_path / "r.csv"
    ragged.write_text("series,x,y\ns,1\n")
    with pytest.raises(ValueError):
        cli.emit_plot_data([str(ragged)])
    text = tmp_path / "t.csv"
    text.write_text("series,x,y\ns,one,2\n")
    with pytest.raises(ValueError):
        cli.emit_plot_data([str(text)])
    nocols = tmp_path / "n.csv"
    nocols.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        cli.emit_plot_data([str(nocols)])


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "polykin.cli", "schema"], capture_output=True,
                         text=True, check=True)
    assert json.loads(res.stdout)["title"] == "RunConfig"
    bad = tmp_path / "bad.csv"
    bad.write_text("series,x,y\ns,1\n")
    res = subprocess.run([sys.executable, "-m", "polykin.cli", "plot-data", str(bad)],
                         capture_output=True, text=True)
    assert res.returncode == cli.EXIT_CONFIG
