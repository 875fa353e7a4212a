from typer.testing import CliRunner

from mfg_tracking import __version__
from mfg_tracking.cli import cli
from mfg_tracking.io import read_meta, read_table

runner = CliRunner()


def _config(tmp_path, base: str, **changes) -> str:
    with open(base) as fh:
        lines = fh.read().splitlines()
    lines = [ln for ln in lines if ln.split("=")[0].strip() not in changes]
    lines += [f"{k}={v}" for k, v in changes.items()]
    path = tmp_path / "run.env"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_cli_base():
    res = runner.invoke(cli, "--version")
    assert res.exit_code == 0
    assert res.stdout.strip() == __version__

    res = runner.invoke(cli, "--settings")
    assert res.exit_code == 0


def test_cli_solve(tmp_path, baseline_config):
    out = str(tmp_path / "out")
    res = runner.invoke(cli, ["solve", "-c", baseline_config, "-o", out])
    assert res.exit_code == 0
    uri = f"{out}/f_star.csv"
    rows = read_table(uri)
    assert len(rows) == 21
    assert abs(float(rows[0]["f_star"]) - 1.76827) < 1e-4
    assert abs(float(rows[-1]["f_star"]) - 1.95424) < 1e-4
    meta = read_meta(uri)
    assert meta["command"] == "solve"
    assert meta["extra"]["region"] == "outperforming"
    assert meta["params"]["lambda"] == 0.2

    # same config, same bytes
    again = str(tmp_path / "again")
    res = runner.invoke(cli, ["solve", "-c", baseline_config, "-o", again])
    assert res.exit_code == 0
    with open(uri) as a, open(f"{again}/f_star.csv") as b:
        assert a.read() == b.read()


def test_cli_invalid_input(tmp_path, baseline_config):
    out = str(tmp_path / "out")
    config = _config(tmp_path, baseline_config, **{"lambda": 1.5})
    res = runner.invoke(cli, ["solve", "-c", config, "-o", out])
    assert res.exit_code == 1

    config = _config(tmp_path, baseline_config, gamma=1)
    res = runner.invoke(cli, ["solve", "-c", config, "-o", out])
    assert res.exit_code == 1

    config = _config(tmp_path, baseline_config, sigma_z=0.3)
    res = runner.invoke(cli, ["solve", "-c", config, "-o", out])
    assert res.exit_code == 1


def test_cli_no_convergence(tmp_path, underperforming_config):
    out = str(tmp_path / "out")
    config = _config(tmp_path, underperforming_config, max_iter=1, tol=1e-12)
    res = runner.invoke(cli, ["solve", "-c", config, "-o", out])
    assert res.exit_code == 2


def test_cli_verify(tmp_path, baseline_config):
    out = str(tmp_path / "out")
    res = runner.invoke(cli, ["verify", "-c", baseline_config, "-o", out])
    assert res.exit_code == 0
    rows = read_table(f"{out}/consistency.csv")
    assert len(rows) == 21
    assert read_meta(f"{out}/consistency.csv")["extra"]["passed"] is True

    faulty = str(tmp_path / "faulty")
    res = runner.invoke(
        cli, ["verify", "-c", baseline_config, "-o", faulty, "--perturb", "1.1"]
    )
    assert res.exit_code == 3
    meta = read_meta(f"{faulty}/consistency.csv")
    assert meta["extra"]["passed"] is False
    assert meta["extra"]["perturb"] == 1.1


def test_cli_curve(tmp_path, baseline_config):
    out = str(tmp_path / "out")
    res = runner.invoke(
        cli, ["curve", "-c", baseline_config, "-o", out, "--r-list", "1,0.001"]
    )
    assert res.exit_code == 0
    rows = read_table(f"{out}/x_of_r.csv")
    assert [float(r["r"]) for r in rows] == [0.001, 1.0]
    assert float(rows[0]["x"]) < float(rows[1]["x"])
    assert abs(read_meta(f"{out}/x_of_r.csv")["extra"]["x_hat0"] - 2.0547) < 1e-4


def test_cli_nplayer(tmp_path, baseline_config):
    out = str(tmp_path / "out")
    res = runner.invoke(
        cli,
        [
            "nplayer",
            "-c",
            baseline_config,
            "-o",
            out,
            "--n-list",
            "1,2",
            "--nplayer-paths",
            "50",
        ],
    )
    assert res.exit_code == 0
    rows = read_table(f"{out}/nplayer.csv")
    assert len(rows) == 15
    assert {r["deviation_id"] for r in rows} == {
        "equilibrium",
        "zero",
        "scale_0.5",
        "scale_1.5",
        "scale_2",
    }
    assert len(read_table(f"{out}/agents.csv")) == 3
    summary = read_table(f"{out}/nplayer_summary.csv")
    assert [int(r["n"]) for r in summary] == [1, 2]


def test_cli_sweep(tmp_path, baseline_config):
    out = str(tmp_path / "out")
    res = runner.invoke(
        cli,
        [
            "sweep",
            "-c",
            baseline_config,
            "-o",
            out,
            "--param",
            "lambda",
            "--values",
            "0.2,0.1",
            "--x-list",
            "3",
        ],
    )
    assert res.exit_code == 0
    rows = read_table(f"{out}/sweep.csv")
    assert [float(r["value"]) for r in rows] == [0.1, 0.2]
    assert all(r["region"] == "outperforming" for r in rows)
    assert all(float(r["w"]) == 0 for r in rows)

    res = runner.invoke(
        cli, ["sweep", "-c", baseline_config, "-o", out, "--param", "rho"]
    )
    assert res.exit_code == 1
