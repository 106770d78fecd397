import json
import subprocess
import sys

import numpy as np
import pytest

from mjlab.cli import main
from mjlab.config import ConfigError, ExperimentConfig, config_hash

from conftest import SMALL_RAW, small_config


def small_raw(**overrides):
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in SMALL_RAW.items()}
    for key, value in overrides.items():
        if isinstance(value, dict) and key in raw:
            raw[key].update(value)
        else:
            raw[key] = value
    return raw


@pytest.fixture()
def fast_config_path(tmp_path):
    raw = small_raw(data={"n_per_task": 24, "n_val_per_task": 12},
                    pretrain={"steps": 15}, router={"kmeans_samples": 200})
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


class TestConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            ExperimentConfig.from_dict({"methodd": "mj"})
        with pytest.raises(ConfigError, match="unknown keys"):
            ExperimentConfig.from_dict({"router": {"tua": 1.0}})

    def test_sub_invariants_validated(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"router": {"tau": -1.0}})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"train": {"warmup_ratio": 1.5}})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"method": "hydra"})

    def test_dump_round_trip_is_identity(self):
        cfg = small_config()
        again = ExperimentConfig.from_json(cfg.to_json())
        assert again.to_json() == cfg.to_json()
        assert config_hash(again) == config_hash(cfg)


class TestExitCodes:
    def test_missing_config_names_path(self, capsys):
        code = main(["train", "--config", "missing.json"])
        assert code == 1
        assert "missing.json" in capsys.readouterr().err

    def test_unknown_key_is_validation_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"no_such_section": 1}')
        assert main(["train", "--config", str(bad)]) == 1

    def test_oracle_rank_defaults_to_builtin_example(self, capsys):
        code = main(["oracle", "rank"])
        out = capsys.readouterr().out
        assert code == 0
        assert "rank_mj=2 rank_peft=1" in out

    def test_oracle_soft_and_params(self, capsys):
        assert main(["oracle", "soft", "--quiet"]) == 0
        assert main(["oracle", "params", "--quiet"]) == 0


class TestDumpConfig:
    def test_dump_is_fully_defaulted_and_reproduces(self, tmp_path, capsys):
        assert main(["train", "--dump-config"]) == 0
        dumped = capsys.readouterr().out
        effective = json.loads(dumped)
        assert effective["router"]["tau"] == 1.0
        assert effective["adapter"]["alpha"] == 5.0
        path = tmp_path / "dumped.json"
        path.write_text(dumped)
        assert main(["train", "--config", str(path), "--dump-config"]) == 0
        assert capsys.readouterr().out == dumped


class TestEndToEnd:
    def test_gen_data_idempotent(self, tmp_path, fast_config_path, capsys):
        out = tmp_path / "data"
        assert main(["gen-data", "--config", str(fast_config_path), "--out", str(out), "--quiet"]) == 0
        first = (out / "train.jsonl").read_bytes()
        assert main(["gen-data", "--config", str(fast_config_path), "--out", str(out), "--quiet"]) == 0
        assert (out / "train.jsonl").read_bytes() == first

    def test_train_eval_report_round_trip(self, tmp_path, fast_config_path, capsys):
        out = tmp_path / "runs"
        code = main(["train", "--config", str(fast_config_path), "--seed", "0", "--out", str(out)])
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        run_dir = summary["0"]["run_dir"]

        assert main(["report", "--run-dir", run_dir]) == 0
        report_out = json.loads(capsys.readouterr().out)
        raw_report = json.loads((tmp_path / "runs" / run_dir.split("/")[-1] / "report.json").read_text())
        # accuracy fields propagate byte-for-byte (identical repr)
        assert json.dumps(report_out["per_task_accuracy"]) == json.dumps(raw_report["per_task_accuracy"])
        assert report_out["overall_accuracy"] == raw_report["overall_accuracy"]

        assert main(["eval", "--run-dir", run_dir]) == 0
        eval_out = json.loads(capsys.readouterr().out)
        assert eval_out["per_task_accuracy"] == raw_report["per_task_accuracy"]

    def test_pretrain_then_init_centers_reuses_backbone(self, tmp_path, fast_config_path, capsys):
        out = tmp_path / "stages"
        assert main(["pretrain", "--config", str(fast_config_path), "--out", str(out), "--quiet"]) == 0
        manifest = (out / "backbone" / "manifest.json").read_bytes()
        assert main(["init-centers", "--config", str(fast_config_path), "--out", str(out), "--quiet"]) == 0
        assert (out / "backbone" / "manifest.json").read_bytes() == manifest  # loaded, not rebuilt
        assert (out / "router" / "manifest.json").exists()
        assert any(out.glob("router/centers_layer*.bin"))

    def test_compare_emits_table(self, tmp_path, fast_config_path, capsys):
        out = tmp_path / "compare"
        assert main(["compare", "--config", str(fast_config_path), "--out", str(out), "--quiet"]) == 0
        table = json.loads((out / "shared_vs_specific.json").read_text())
        assert table["parity"] is True
        assert set(table["median_shared"]) == {"0", "1"}

    def test_probe_csv(self, tmp_path, fast_config_path, capsys):
        out = tmp_path / "probe"
        assert main(["probe", "--config", str(fast_config_path), "--out", str(out), "--quiet"]) == 0
        lines = (out / "probe.csv").read_text().splitlines()
        assert lines[0] == "layer,selector,seed,train_acc,val_acc"
        assert len(lines) > 1

    def test_ablate_csv(self, tmp_path, fast_config_path, capsys):
        out = tmp_path / "ablate"
        code = main(["ablate", "tau", "--values", "0.5,1.0", "--config", str(fast_config_path),
                     "--out", str(out), "--quiet"])
        assert code == 0
        lines = (out / "ablation_tau.csv").read_text().splitlines()
        assert lines[0] == "axis,value,seed,task,accuracy,usage_rho_mean"
        assert len(lines) == 1 + 2 * 2  # 2 values x 2 tasks (1 seed)

    def test_ablate_unknown_axis_is_validation_error(self, fast_config_path):
        assert main(["ablate", "momentum", "--values", "1", "--config", str(fast_config_path),
                     "--quiet"]) == 1


class TestConsoleScript:
    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "mjlab.cli", "oracle", "rank", "--quiet"],
            capture_output=True, text=True, timeout=300,
        )
        assert proc.returncode == 0
        assert "rank_mj=2" in proc.stdout
