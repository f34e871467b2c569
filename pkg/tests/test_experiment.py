import csv
from pathlib import Path

import numpy as np
import pytest

from volsurf import experiment as ex
from volsurf.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_OK, main
from volsurf.exceptions import ConfigError, TrainingDivergenceError
from volsurf.surface_data import load_series
from volsurf.train_eval import mape

TINY = Path(__file__).parent / "data" / "tiny.cfg"


def test_config_parsing_and_defaults():
    cfg = ex.parse_config_text("window = 5  # comment\nplots = yes\nlearning_rate = none\n")
    assert cfg.window == 5 and cfg.plots is True and cfg.learning_rate is None
    assert cfg.training("pinn") == (2000, 256, 0.1)
    assert cfg.training("convtf") == (100, 16, 1e-3)
    assert cfg.training("convlstm") == (100, 32, 1e-3)
    assert cfg.augmented_for("piconvtf") and not cfg.augmented_for("convtf")
    assert ex.parse_config_text(ex.format_config(cfg)) == cfg


@pytest.mark.parametrize("text", [
    "bogus = 1", "window = 1\nwindow = 2", "window = ten", "plots = maybe", "model = lstm",
    "derivative_mode = spectral", "synthetic_shocks = 1:2", "validation_fraction = 1.5", "just words",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        ex.parse_config_text(text)


def test_overrides_and_output_dir(monkeypatch):
    cfg = ex.apply_overrides(ex.ExperimentConfig(), ["epochs=3", "models=convtf,pinn"])
    assert cfg.epochs == 3 and cfg.model_list == ["convtf", "pinn"]
    with pytest.raises(ConfigError):
        ex.apply_overrides(cfg, ["nope=1"])
    monkeypatch.delenv(ex.OUTPUT_DIR_ENV, raising=False)
    assert ex.resolve_output_dir(cfg) == Path("results")
    monkeypatch.setenv(ex.OUTPUT_DIR_ENV, "/tmp/from-env")
    assert ex.resolve_output_dir(cfg) == Path("/tmp/from-env")
    assert ex.resolve_output_dir(cfg, "explicit") == Path("explicit")


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run-all", "--config", str(TINY), "--output-dir", str(out)]) == EXIT_OK
    return out


def test_run_all_outputs(tiny_run):
    with open(tiny_run / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["model"] for r in rows] == list(ex.MODEL_KINDS) + [ex.BASELINE]
    for kind in ex.MODEL_KINDS:
        assert (tiny_run / f"{kind}_checkpoint.json").exists()
        with open(tiny_run / f"{kind}_train_log.csv") as fh:
            log = list(csv.DictReader(fh))
        assert len(log) == 2 and set(log[0]) == {"epoch", "train_loss", "val_mape_pct", "lr"}
    for name in ("daily_vol_mape.svg", "daily_call_mape.svg"):
        assert (tiny_run / name).read_text().lstrip().startswith("<?xml")


def test_persistence_daily_matches_direct_computation(tiny_run):
    cfg = ex.load_config(TINY)
    data = ex.prepare_data(cfg)
    test = [s.target for s in data.dataset.test]
    rows = ex.read_daily_csv(tiny_run / "persistence_daily.csv")
    assert [r.date for r in rows] == data.test_dates
    series = ex.load_data(cfg)
    index = {g.date: i for i, g in enumerate(series)}
    for row, grid in zip(rows, test):
        prev = series[index[grid.date] - 1].values
        assert row.vol_mape_pct == pytest.approx(mape(prev, grid.values), abs=1e-6)


def test_evaluate_from_checkpoint_reproduces_daily(tiny_run, tmp_path):
    out = tmp_path / "eval"
    code = main(["evaluate", "--config", str(TINY), "--checkpoint", str(tiny_run / "convtf_checkpoint.json"),
                 "--output-dir", str(out)])
    assert code == EXIT_OK
    assert (out / "convtf_daily.csv").read_bytes() == (tiny_run / "convtf_daily.csv").read_bytes()


def test_train_subcommand_uses_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(ex.OUTPUT_DIR_ENV, str(tmp_path / "env"))
    assert main(["train", "--config", str(TINY), "--model", "convlstm", "--set", "epochs=1"]) == EXIT_OK
    assert (tmp_path / "env" / "convlstm_checkpoint.json").exists()


def test_generate_and_plot_subcommands(tiny_run, tmp_path):
    series_path = tmp_path / "s.jsonl"
    assert main(["generate-data", "--config", str(TINY), "--out", str(series_path)]) == EXIT_OK
    series = load_series(series_path)
    assert len(series) == 80
    np.testing.assert_array_equal(series[5].values, ex.load_data(ex.load_config(TINY))[5].values)
    svg = tmp_path / "p.svg"
    assert main(["plot", f"a={tiny_run / 'convtf_daily.csv'}", str(tiny_run / "pinn_daily.csv"),
                 "--out", str(svg), "--column", "call_mape_pct"]) == EXIT_OK
    assert svg.exists()


def test_ingest_subcommand(tmp_path):
    quotes = tmp_path / "q.csv"
    lines = ["date,strike,maturity_years,spot,rate,implied_vol"]
    for k in (85.0, 95.0, 100.0, 105.0, 115.0):
        for t in (0.02, 0.4, 0.8, 1.2):
            lines.append(f"2020-01-02,{k},{t},100,0.01,{0.2 + 0.001 * abs(k - 100)}")
    quotes.write_text("\n".join(lines) + "\n")
    out = tmp_path / "s.jsonl"
    assert main(["ingest", "--quotes", str(quotes), "--out", str(out)]) == EXIT_OK
    (grid,) = load_series(out)
    assert grid.values.shape == (20, 20) and np.all((grid.values > 0.19) & (grid.values < 0.22))


def test_exit_codes(tmp_path, monkeypatch, capsys):
    assert main(["run-all", "--config", str(TINY), "--set", "bogus=1"]) == EXIT_CONFIG
    assert main(["run-all", "--config", str(tmp_path / "none.cfg")]) == EXIT_CONFIG
    assert main(["run-all", "--config", str(TINY), "--set", f"data_path={tmp_path / 'none.jsonl'}"]) == EXIT_DATA
    assert main(["run-all", "--config", str(TINY), "--set", "test_start=2030-01-01",
                 "--set", "test_end=2030-02-01", "--output-dir", str(tmp_path)]) == EXIT_DATA

    def diverge(*args, **kwargs):
        raise TrainingDivergenceError("loss became nan at epoch 1")

    monkeypatch.setattr(ex, "fit_estimator", diverge)
    assert main(["train", "--config", str(TINY), "--model", "pinn", "--output-dir", str(tmp_path)]) == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err
