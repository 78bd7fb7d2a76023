import csv
import json
import os

import numpy as np
import pytest

from dctev.cli import main
from dctev.config import ConfigError, RunConfig, load_config, parse_config_text, read_provenance
from dctev.dataio import parse_meter_csv

SMALL = {
    "n_homes": "2", "days": "3", "T": "40", "L": "8", "patch_stride": "4", "D": "8", "H": "2",
    "D_ffn": "8", "n_layers": "1", "M": "3", "epochs": "1", "batch_size": "64", "history_T_values": "20,40",
    "sessions_per_day_rate": "2.0",
}


def small_config_file(directory) -> str:
    path = os.path.join(directory, "small.cfg")
    with open(path, "w") as fh:
        fh.write("# small run\n" + "".join(f"{k} = {v}\n" for k, v in SMALL.items()))
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = small_config_file(d)
    data = str(d / "meter.csv")
    assert main(["synth", "--config", cfg, "--out", data]) == 0
    assert main(["train", "--config", cfg, "--data", data, "--out", str(d / "run")]) == 0
    assert main(["train", "--config", cfg, "--data", data, "--out", str(d / "run"), "--model_kind", "dnn",
                 "--baseline_hidden", "16"]) == 0
    ckpts = [str(d / "run" / "checkpoint_dctev.npz"), str(d / "run" / "checkpoint_dnn.npz")]
    assert main(["evaluate", "--data", data, "--checkpoint", *ckpts, "--out", str(d / "run")]) == 0
    return d


class TestConfig:
    def test_defaults_validate(self):
        cfg = RunConfig().validate()
        assert cfg.model_config().N == 17 and cfg.history_values() == [60, 120, 180]

    def test_parse_text(self):
        vals = parse_config_text("T = 60  # short\nnormalize = false\n\nlearning_rate=1e-2\n")
        assert vals == {"T": 60, "normalize": False, "learning_rate": 0.01}

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            parse_config_text("bogus = 1")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="T"):
            parse_config_text("T = sixty")

    def test_overrides_win(self, tmp_path):
        cfg = load_config(small_config_file(tmp_path), {"D": "16"})
        assert cfg.D == 16 and cfg.T == 40

    def test_text_round_trip(self):
        cfg = RunConfig(T=60, normalize=False, loss_reduction="sum")
        assert RunConfig.from_dict(parse_config_text(cfg.to_text())) == cfg

    @pytest.mark.parametrize("kw", [
        {"T": 181}, {"H": 3}, {"model_kind": "lstm"}, {"train_fraction": 1.0}, {"history_T_values": "60,61"},
        {"val_fraction": 0.6}, {"ev_power_low_kw": 2.0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            RunConfig(**kw).validate()

    def test_bad_history_values_are_listed(self):
        with pytest.raises(ConfigError, match="T=61.*T=62"):
            RunConfig(history_T_values="61,62,180").validate()


class TestArtifacts:
    def test_outputs_exist(self, run_dir):
        run = run_dir / "run"
        for name in ("checkpoint_dctev.npz", "history_dctev.json", "history_dctev.png", "report_dctev.json",
                     "report_dnn.json", "table_per_horizon_dctev.csv", "per_horizon_dctev.png", "table_models.csv"):
            assert (run / name).exists(), name

    def test_provenance_round_trips_for_every_artifact(self, run_dir):
        expected = load_config(small_config_file(run_dir))
        paths = [run_dir / "meter.csv"] + [p for p in (run_dir / "run").iterdir()]
        assert len(paths) >= 10
        for p in paths:
            assert read_provenance(p) == expected or read_provenance(p) == expected.with_overrides(
                {"model_kind": "dnn", "baseline_hidden": "16"}), p.name

    def test_report_keys(self, run_dir):
        doc = json.loads((run_dir / "run" / "report_dctev.json").read_text())
        for k in ("auc", "ap", "f1", "precision", "recall", "acc", "mse", "threshold", "confusion", "per_horizon"):
            assert k in doc
        assert [r["m"] for r in doc["per_horizon"]] == [1, 2, 3]

    def test_models_table(self, run_dir):
        with open(run_dir / "run" / "table_models.csv") as fh:
            rows = list(csv.reader(line for line in fh if not line.startswith("#")))
        assert rows[0] == ["model", "span", "f1", "auc", "ap", "acc", "mse"]
        assert [r[0] for r in rows[1:]] == ["dctev", "dnn"]

    def test_predict_row_count(self, run_dir, tmp_path):
        out = tmp_path / "pred.csv"
        ckpt = str(run_dir / "run" / "checkpoint_dctev.npz")
        assert main(["predict", "--data", str(run_dir / "meter.csv"), "--checkpoint", ckpt, "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
        series = parse_meter_csv(str(run_dir / "meter.csv"))
        n_windows = sum(len(s) - 40 - 3 + 1 for s in series.values())
        assert len(rows) == 3 * n_windows
        assert {r["horizon_min"] for r in rows} == {"1", "2", "3"}
        assert all(0 < float(r["probability"]) < 1 for r in rows)

    def test_predict_unlabeled_input(self, run_dir, tmp_path):
        src = tmp_path / "nolabel.csv"
        with open(run_dir / "meter.csv") as fh, open(src, "w") as out:
            for line in fh:
                if not line.startswith("#"):
                    out.write(",".join(line.rstrip("\n").split(",")[:3]) + "\n")
        pred = tmp_path / "pred.csv"
        ckpt = str(run_dir / "run" / "checkpoint_dctev.npz")
        assert main(["predict", "--data", str(src), "--checkpoint", ckpt, "--out", str(pred)]) == 0
        header = [l for l in open(pred) if not l.startswith("#")][0].strip()
        assert header == "home_id,window_start,horizon_min,probability"

    def test_sweeps(self, run_dir, tmp_path):
        cfg = small_config_file(tmp_path)
        data = str(run_dir / "meter.csv")
        ckpt = str(run_dir / "run" / "checkpoint_dctev.npz")
        assert main(["sweep-threshold", "--data", data, "--checkpoint", ckpt, "--out", str(tmp_path)]) == 0
        assert main(["sweep-history", "--config", cfg, "--data", data, "--out", str(tmp_path)]) == 0
        with open(tmp_path / "history_sweep.csv") as fh:
            rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
        assert [r["T"] for r in rows] == ["20", "40"]
        assert (tmp_path / "threshold_sweep.png").exists() and (tmp_path / "history_sweep.png").exists()


class TestCommands:
    def test_synth_is_byte_deterministic(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for p in (a, b):
            assert main(["synth", "--n_homes", "2", "--days", "1", "--out", str(p)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_gradcheck_command(self, tmp_path):
        out = tmp_path / "g.json"
        assert main(["gradcheck", "--T", "12", "--L", "4", "--patch_stride", "4", "--D", "8", "--H", "2",
                     "--D_ffn", "8", "--n_layers", "1", "--M", "3", "--history_T_values", "12",
                     "--out", str(out)]) == 0
        assert json.loads(out.read_text())["passed"] is True

    def test_bench_attention_command(self, tmp_path, capsys):
        out = tmp_path / "b.json"
        assert main(["bench-attention", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["flops_ratio"] == pytest.approx(112.1, abs=0.05)
        assert read_provenance(out) == RunConfig()

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        assert main(["synth", "--H", "3", "--out", str(tmp_path / "x.csv")]) == 2
        assert "H" in capsys.readouterr().err

    def test_unparsable_value_exits_2(self, tmp_path):
        assert main(["synth", "--days", "many", "--out", str(tmp_path / "x.csv")]) == 2

    def test_unknown_option_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--bogus", "1"])
        assert exc.value.code == 2

    def test_missing_data_exits_nonzero(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 1
        assert "missing.csv" in capsys.readouterr().err

    def test_missing_required_option_exits_2(self):
        assert main(["train"]) == 2

    def test_malformed_csv_exits_1(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("home_id,timestamp,grid_load_kw,ev_load_kw\na,2018-01-01T00:00,x,0\n")
        assert main(["train", "--data", str(bad), "--out", str(tmp_path)]) == 1
        assert "line 2" in capsys.readouterr().err
