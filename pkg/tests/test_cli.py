import json

import pytest

from momentum_tft import FIXTURE_PRICES, cli
from momentum_tft import metrics as mt
from momentum_tft.market_data import write_price_csv
from momentum_tft.synthetic import random_walk_panel


def run(*argv):
    return cli.main([str(a) for a in argv])


# configuration

def test_variant_parsing_and_tags():
    assert cli.Variant.parse("tft:252:4").tag == "tft_252_4"
    assert cli.Variant.parse({"kind": "lstm_cpd", "window": 378, "heads": 6}).tag == "lstm_cpd_378_6"
    assert cli.Variant.parse("long_only").tag == "long_only"
    for bad in ("tft:300:4", "tft:252:5", "garch", "tft:x"):
        with pytest.raises(cli.ConfigError):
            cli.Variant.parse(bad)


def test_config_file_dotted_keys(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train.learning_rate": 0.01, "train.max_epochs": 3, "model.d_hidden": 8,
                                "model.variants": ["tft:378:6", "momentum"], "cpd.lookback": 126,
                                "walk_forward.first_test_year": 2021, "seed": 5}))
    cfg = cli.load_config(path)
    assert cfg.train.learning_rate == 0.01 and cfg.train.max_epochs == 3
    assert [v.tag for v in cfg.variants] == ["tft_378_6", "momentum"]
    assert (cfg.d_hidden, cfg.cpd_lookback, cfg.first_test_year, cfg.seed) == (8, 126, 2021, 5)
    assert cfg.needs_cpd is False


def test_flags_override_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 5, "threads": 2, "paths.out_dir": "a"}))
    args = cli.build_parser().parse_args(["--config", str(path), "--seed", "9", "train", "--out-dir", "b"])
    cfg = cli.resolve_config(args)
    assert (cfg.seed, cfg.threads, cfg.out_dir, cfg.train.seed) == (9, 2, "b", 9)


@pytest.mark.parametrize("payload", [{"train.learnin_rate": 0.1}, {"cpd.lookback": 50},
                                     {"model.variants": ["tft:252:4"], "model.d_hidden": 30},
                                     {"train.learning_rate": -1.0}, [1, 2]])
def test_config_errors_exit_two(tmp_path, capsys, payload):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(payload))
    assert run("--config", path, "--out-dir", tmp_path, "report") == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_prices_is_config_error(tmp_path):
    assert run("ingest", "--out-dir", tmp_path) == cli.EXIT_CONFIG


def test_data_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("asset_id,ticker,date,close,sector_group\nX,X,2020-01-02,-3,Retail\n")
    assert run("ingest", "--prices", bad, "--out-dir", tmp_path) == cli.EXIT_DATA
    assert "momentum_tft.market_data" in capsys.readouterr().err
    assert run("features", "--out-dir", tmp_path / "empty") == cli.EXIT_DATA


# pipeline on the bundled fixture

@pytest.fixture(scope="module")
def baseline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("baseline")
    common = ["--out-dir", out]
    assert run("ingest", "--prices", FIXTURE_PRICES, *common) == 0
    assert run("features", *common) == 0
    variants = ["--variant", "long_only", "--variant", "momentum"]
    for verb in ("train", "backtest", "report"):
        assert run(verb, *variants, *common) == 0
    return out


def test_report_on_fixture(baseline_run):
    rows = mt.read_report_csv(baseline_run / "report.csv")
    assert {r.strategy for r in rows} == {"long_only", "momentum"}
    assert [r.period for r in rows] == [p for p in ("2020", "2021", "2022", "2023", "Average") for _ in range(2)]
    assert (baseline_run / "cumulative_returns.csv").read_text().startswith("date,strategy,cum_return\n")


def test_stage_outputs_reload(baseline_run):
    assert sorted(p.name for p in baseline_run.iterdir()) == [
        "checkpoints", "cumulative_returns.csv", "daily_returns.csv", "features.csv", "panel.csv",
        "positions_long_only.csv", "positions_momentum.csv", "report.csv"]
    # baselines need no training, so no checkpoints are written
    assert list((baseline_run / "checkpoints").iterdir()) == []


def test_report_is_idempotent(baseline_run):
    before = (baseline_run / "report.csv").read_bytes()
    assert run("report", "--variant", "long_only", "--variant", "momentum", "--out-dir", baseline_run) == 0
    assert (baseline_run / "report.csv").read_bytes() == before


def test_report_rejects_unknown_strategy(baseline_run):
    assert run("report", "--variant", "tft:252:4", "--out-dir", baseline_run) == cli.EXIT_DATA


def test_two_tft_variants_named_by_subscripts(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model.d_hidden": 12, "train.max_epochs": 1, "train.batch_size": 8,
                               "walk_forward.first_test_year": 2022, "walk_forward.last_test_year": 2023}))
    common = ["--config", cfg, "--out-dir", tmp_path]
    assert run("ingest", "--prices", FIXTURE_PRICES, *common) == 0
    assert run("features", *common) == 0
    assert run("train", "--variant", "tft:252:4", "--variant", "tft:252:6", *common) == 0
    assert sorted(p.name for p in tmp_path.glob("positions_*.csv")) == ["positions_tft_252_4.csv",
                                                                        "positions_tft_252_6.csv"]
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == [
        "tft_252_4_split_2022.npz", "tft_252_4_split_2023.npz",
        "tft_252_6_split_2022.npz", "tft_252_6_split_2023.npz"]


def test_cpd_is_byte_identical(tmp_path):
    prices = tmp_path / "prices.csv"
    write_price_csv(random_walk_panel(n_assets=2, start="2021-01-01", end="2021-03-31", seed=2), prices)
    outputs = []
    for name, threads in (("a", 1), ("b", 2)):
        out = tmp_path / name
        assert run("ingest", "--prices", prices, "--out-dir", out) == 0
        assert run("cpd", "--seed", 4, "--threads", threads, "--out-dir", out) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted((out / "cpd_21").iterdir())})
    assert list(outputs[0]) == ["A00.csv", "A01.csv"]
    assert outputs[0] == outputs[1]


def test_module_entry_point():
    import subprocess
    import sys

    done = subprocess.run([sys.executable, "-m", "momentum_tft", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    assert all(v in done.stdout for v in cli.COMMANDS)
