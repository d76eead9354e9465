from __future__ import annotations

import csv
import json
import math
import xml.etree.ElementTree as ET

import pytest

from qidpfl.cli import main
from qidpfl.errors import CSVSchemaError
from qidpfl.harness import csv_header, run
from qidpfl.plots import BASE_COLUMNS, emit_plots, read_metrics

from test_strategies import small_config

SVG = "{http://www.w3.org/2000/svg}"

CONFIG_TEXT = """
[dataset]
classes = 4
dim = 5
per_class = 60
separation = 2.5

[partition]
concentration = 0.5
clients = 6

[selection]
exclude_worst = 1

[game]
lam = 0.01
pi = 0.9

[training]
rounds = 6
learning_rate = 0.05

[experiment]
strategies = ["fedavg", "qi_dpfl"]
seeds = [0, 1, 2]
output_dir = "out"
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(CONFIG_TEXT)
    return path


def test_header_layout():
    header = csv_header(3)
    assert header[:10] == list(BASE_COLUMNS)
    assert header[10:] == ["client_0_rho", "client_0_utility", "client_1_rho", "client_1_utility",
                           "client_2_rho", "client_2_utility"]


def test_fan_out_and_summary(tmp_path):
    cfg = small_config(experiment={"strategies": ["fedavg", "qi_dpfl"], "seeds": [0, 1, 2]})
    out = tmp_path / "missing" / "dir"
    report = run(cfg, out)
    assert report.exit_code == 0
    assert sorted(p.name for p in out.glob("*.csv")) == sorted(
        f"{s}_seed{k}.csv" for s in ("fedavg", "qi_dpfl") for k in range(3))
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["cells"]) == 6 and summary["degraded"] is False
    qi = [c for c in summary["cells"] if c["strategy"] == "qi_dpfl"]
    assert all(c["max_client_residual"] <= 1e-6 and c["max_reward_residual"] <= 1e-6 for c in qi)
    assert len(list((out / "plots").glob("*.svg"))) == 3


def test_csv_contents(tmp_path):
    cfg = small_config(experiment={"strategies": ["fedavg", "qi_dpfl"], "seeds": [0]})
    report = run(cfg, tmp_path)
    with (tmp_path / "qi_dpfl_seed0.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == cfg.training.rounds
    cell = next(c for c in report.cells if c.strategy == "qi_dpfl")
    assert float(rows[-1]["server_cost_total"]) == pytest.approx(cell.total_server_cost, rel=1e-12)
    excluded = sorted(set(range(6)) - set(cell.selected))
    assert all(r[f"client_{c}_rho"] == "" for r in rows for c in excluded)
    for r in rows:
        total = sum(float(r[f"client_{c}_rho"]) for c in cell.selected)
        assert float(r["rho_total"]) == pytest.approx(total, rel=1e-12)
    with (tmp_path / "fedavg_seed0.csv").open() as fh:
        plain = list(csv.DictReader(fh))
    assert all(r["rho_total"] == "" and r["client_0_rho"] == "" for r in plain)


def test_rerun_byte_identical(tmp_path):
    cfg = small_config(experiment={"strategies": ["random_select", "fedavg_dp"], "seeds": [0, 1]})
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b", workers=2)
    for p in sorted((tmp_path / "a").glob("*.csv")):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_failed_cell_gives_nonzero_exit(tmp_path):
    cfg = small_config(selection={"exclude_worst": None, "threshold": 0.0},
                       experiment={"strategies": ["fedavg_select"], "seeds": [0]})
    report = run(cfg, tmp_path)
    assert report.exit_code != 0 and report.errors
    assert json.loads((tmp_path / "summary.json").read_text())["errors"]


class TestPlots:
    def _csvs(self, tmp_path, strategies):
        cfg = small_config(game={"pi": 0.9}, experiment={"strategies": strategies, "seeds": [0, 1], "plots": False})
        run(cfg, tmp_path)
        return sorted(tmp_path.glob("*.csv"))

    def test_one_legend_per_strategy(self, tmp_path):
        strategies = ["fedavg", "fedavg_select", "fedavg_dp", "qi_dpfl"]
        paths = emit_plots(self._csvs(tmp_path, strategies), tmp_path / "plots")
        assert [p.name for p in paths] == ["accuracy.svg", "server_cost.svg", "reward.svg"]
        root = ET.parse(paths[0]).getroot()
        legends = root.findall(f"{SVG}g[@class='legend']")
        assert sorted(g.find(f"{SVG}text").text for g in legends) == sorted(strategies)
        assert len(root.findall(f"{SVG}polyline")) == 4

    def test_reward_polyline_increasing(self, tmp_path):
        paths = emit_plots(self._csvs(tmp_path, ["qi_dpfl"]), tmp_path / "plots")
        root = ET.parse(paths[2]).getroot()
        (line,) = root.findall(f"{SVG}polyline")
        ys = [float(p.split(",")[1]) for p in line.get("points").split()]
        # SVG y grows downward, so an increasing reward has decreasing y.
        assert all(b < a for a, b in zip(ys, ys[1:]))

    def test_empty_csv(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(CSVSchemaError):
            emit_plots([path], tmp_path)

    def test_header_only(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text(",".join(BASE_COLUMNS) + "\n")
        with pytest.raises(CSVSchemaError):
            read_metrics(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("round,strategy\n1,fedavg\n")
        with pytest.raises(CSVSchemaError):
            read_metrics(path)

    def test_bad_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        row = ["1", "fedavg", "0", "x"] + ["0"] * 6
        path.write_text(",".join(BASE_COLUMNS) + "\n" + ",".join(row) + "\n")
        with pytest.raises(CSVSchemaError):
            read_metrics(path)


class TestCLI:
    def test_run(self, config_file, capsys):
        assert main(["run", str(config_file)]) == 0
        out = config_file.parent / "out"
        assert len(list(out.glob("*.csv"))) == 6 and (out / "summary.json").exists()
        assert "summary:" in capsys.readouterr().out

    def test_run_seed_and_out_override(self, config_file, tmp_path):
        assert main(["run", str(config_file), "--seed", "7", "--out", str(tmp_path / "o"), "--workers", "2"]) == 0
        assert sorted(p.name for p in (tmp_path / "o").glob("*.csv")) == ["fedavg_seed7.csv", "qi_dpfl_seed7.csv"]

    def test_config_error_exit(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text(CONFIG_TEXT.replace("pi = 0.9", "gamm = 0.9"))
        assert main(["run", str(path)]) == 2
        assert "game.gamm" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["run", str(tmp_path / "none.toml")]) == 2

    def test_plot(self, config_file, tmp_path, capsys):
        main(["run", str(config_file), "--out", str(tmp_path / "r")])
        csvs = [str(p) for p in sorted((tmp_path / "r").glob("*.csv"))]
        assert main(["plot", *csvs, "--out", str(tmp_path / "svg")]) == 0
        assert len(list((tmp_path / "svg").glob("*.svg"))) == 3

    def test_plot_schema_error(self, tmp_path):
        bad = tmp_path / "e.csv"
        bad.write_text("")
        assert main(["plot", str(bad), "--out", str(tmp_path)]) == 1

    def test_verify(self, config_file, capsys):
        assert main(["verify", str(config_file), "--instances", "10"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_log_level_env(self, config_file, monkeypatch):
        monkeypatch.setenv("QIDPFL_LOG_LEVEL", "debug")
        assert main(["verify", str(config_file), "--instances", "2"]) == 0
