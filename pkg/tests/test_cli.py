import csv

import pytest

from wflow import cli

FAST = {
    "simulate": ["--set", "sim.T=0.05", "--set", "sim.n=8", "--set", "kernel.dk=0.5"],
    "covariance": ["--set", "sim.n=4", "--set", "kernel.dk=0.5"],
    "invert": ["--set", "invert.levels=2", "--set", "kernel.dk=0.2"],
    "regularize": ["--set", "regularize.s_points=101", "--set", "regularize.eps_min_pow=4"],
    "picard": ["--set", "picard.J=200", "--set", "sim.T=0.1", "--set", "picard.max_iter=2", "--set", "picard.tol=0.5",
               "--set", "kernel.dk=0.5"],
    "peano": ["--set", "sim.T=0.1", "--set", "sim.n=8", "--set", "kernel.dk=0.5"],
    "arratia": ["--set", "sim.T=0.1", "--set", "sim.n=4"],
}


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    import os

    for k in list(os.environ):
        if k.startswith("WFL_"):
            monkeypatch.delenv(k)


def run(scen, out, *extra):
    return cli.main([scen, "--out", str(out), "--paths", "3", *FAST[scen], *extra])


def read(path):
    with open(path) as fh:
        first = fh.readline()
        rows = list(csv.reader(fh))
    return first, rows[0], rows[1:]


@pytest.mark.parametrize("scen", sorted(FAST))
def test_every_scenario_writes_provenance(scen, tmp_path):
    assert run(scen, tmp_path) == 0
    files = sorted(tmp_path.glob("*.csv"))
    assert files
    for f in files:
        first, header, rows = read(f)
        assert first.startswith("# wflow ") and "config_sha256=" in first and "seed=0" in first
        assert all(header) and all(len(r) == len(header) for r in rows)


@pytest.mark.parametrize("scen", ["simulate", "arratia", "picard"])
def test_golden_determinism(scen, tmp_path):
    assert run(scen, tmp_path / "a") == 0
    assert run(scen, tmp_path / "b") == 0
    for f in sorted((tmp_path / "a").glob("*.csv")):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_seed_changes_output(tmp_path):
    run("simulate", tmp_path / "a")
    run("simulate", tmp_path / "b", "--seed", "1")
    a = (tmp_path / "a" / "trajectory.csv").read_text().splitlines()
    b = (tmp_path / "b" / "trajectory.csv").read_text().splitlines()
    assert a[2:] != b[2:]


def test_zero_horizon_emits_initial_rows_only(tmp_path):
    assert run("simulate", tmp_path, "--set", "sim.T=0") == 0
    _, header, rows = read(tmp_path / "trajectory.csv")
    assert header == ["path_id", "t", "u", "y"]
    assert len(rows) == 3 * 8 and {r[1] for r in rows} == {"0.0"}


def test_stride_thins_records(tmp_path):
    run("simulate", tmp_path, "--stride", "5")
    _, _, rows = read(tmp_path / "trajectory.csv")
    assert sorted({float(r[1]) for r in rows}) == pytest.approx([0.0, 0.05])


def test_dump_config_round_trips(tmp_path, capsys):
    assert cli.main(["peano", "--seed", "4", "--set", "peano.eps=1e-5", "--dump-config"]) == 0
    ini = tmp_path / "c.ini"
    ini.write_text(capsys.readouterr().out)
    assert "scenario = peano" in ini.read_text()
    assert cli.main(["run", "--config", str(ini), "--dump-config"]) == 0
    assert capsys.readouterr().out == ini.read_text()


def test_environment_override(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("WFL_RUN__SEED", "17")
    assert cli.main(["arratia", "--dump-config"]) == 0
    assert "seed = 17" in capsys.readouterr().out
    assert cli.main(["arratia", "--seed", "5", "--dump-config"]) == 0
    assert "seed = 5" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["simulate", "--set", "sim.bogus=1"],
    ["simulate", "--set", "nodot=1"],
    ["run"],
    ["simulate", "--paths", "0"],
    ["check", "--only", "Z"],
])
def test_config_errors_exit_2(argv, tmp_path):
    assert cli.main([*argv, "--out", str(tmp_path)] if argv[0] != "check" else argv) == 2


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as e:
        cli.main(["simulate", "--seed", "x"])
    assert e.value.code == 2


def test_numerical_failure_exits_3_with_diagnostic(tmp_path):
    code = cli.main(["simulate", "--out", str(tmp_path), "--paths", "5", "--set", "sim.monotone_repair=reject",
                     "--set", "sim.dt=0.2", "--set", "sim.T=1.0", "--set", "kernel.alpha=1.5"])
    assert code == 3
    _, header, rows = read(tmp_path / "diagnostic.csv")
    assert header == ["error_type", "message"] and rows[0][0] == "MonotonicityViolation"


def test_picard_non_convergence_exits_3(tmp_path):
    code = run("picard", tmp_path, "--set", "picard.tol=0")
    assert code == 3
    _, header, rows = read(tmp_path / "diagnostics.csv")
    assert header == ["iteration", "sup_tv_gap"] and len(rows) == 2


def test_failed_check_exits_4(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "run_checks", lambda keys: False)
    assert run("arratia", tmp_path, "--check") == 4
    monkeypatch.setattr(cli, "run_checks", lambda keys: True)
    assert run("arratia", tmp_path, "--check") == 0
