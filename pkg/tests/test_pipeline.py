"""Config validation, stage orchestration, manifest bookkeeping, CLI codes."""

import json
import os

import numpy as np
import pytest
import yaml

from adaptbench.cli import main as cli_main
from adaptbench.pipeline import (
    ConfigError,
    StageError,
    load_config,
    parse_config,
    run_all,
    run_stage,
)

TINY = {
    "task": {
        "class_count": 4,
        "samples_per_class": 10,
        "image_size": [16, 16, 3],
        "shift_strength": 0.3,
    },
    "source_train": {"epochs": 2, "batch_size": 16},
    "attack": {"kind": "none"},
    "adapt": {"epochs": 1, "batch_size": 16},
    "seed": 2,
}


def _config(tmp_path, **overrides):
    raw = json.loads(json.dumps(TINY))  # deep copy
    for key, value in overrides.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    raw["output_dir"] = str(tmp_path / "run")
    return parse_config(raw)


def _write_yaml(tmp_path, raw):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw))
    return str(path)


class TestConfigParsing:
    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key 'atack'"):
            parse_config({"atack": {}})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="attack.kindd"):
            parse_config({"attack": {"kindd": "uap"}})

    def test_bad_enum_values_rejected(self):
        with pytest.raises(ConfigError, match="attack.kind"):
            parse_config({"attack": {"kind": "ddos"}})
        with pytest.raises(ConfigError, match="defense.kind"):
            parse_config({"defense": {"kind": "magic"}})

    def test_type_errors_rejected(self):
        with pytest.raises(ConfigError, match="source_train.epochs"):
            parse_config({"source_train": {"epochs": "many"}})
        with pytest.raises(ConfigError, match="boolean"):
            parse_config({"defense": {"radius_adjust": "yes"}})

    def test_defaults_fill_missing_blocks(self):
        cfg = parse_config({})
        assert cfg.attack["kind"] == "none"
        assert cfg.defense["kind"] == "none"
        assert cfg.task["class_count"] == 10
        assert cfg.seed == 0

    def test_config_hash_stable_under_key_order(self):
        a = parse_config({"seed": 1, "attack": {"kind": "uap", "xi": 0.05}})
        b = parse_config({"attack": {"xi": 0.05, "kind": "uap"}, "seed": 1})
        assert a.config_hash() == b.config_hash()

    def test_load_config_overrides(self, tmp_path):
        path = _write_yaml(tmp_path, {"seed": 1})
        cfg = load_config(path, seed=9, out=str(tmp_path / "o"))
        assert cfg.seed == 9
        assert cfg.output_dir == str(tmp_path / "o")

    def test_missing_file_is_config_error(self):
        with pytest.raises(ConfigError, match="not found"):
            load_config("/nonexistent/cfg.yaml")


class TestStageOrchestration:
    def test_run_all_skips_inapplicable_stages(self, tmp_path):
        cfg = _config(tmp_path)
        stages = run_all(cfg)
        assert stages == ["train-source", "adapt", "evaluate", "report"]
        assert not os.path.exists(os.path.join(cfg.output_dir, "poison"))

    def test_until_stops_early(self, tmp_path):
        cfg = _config(tmp_path)
        stages = run_all(cfg, until="train-source")
        assert stages == ["train-source"]
        assert not os.path.exists(os.path.join(cfg.output_dir, "adapt"))

    def test_missing_upstream_is_stage_error(self, tmp_path):
        cfg = _config(tmp_path)
        with pytest.raises(StageError, match="train-source"):
            run_stage(cfg, "adapt")

    def test_inapplicable_stage_is_stage_error(self, tmp_path):
        cfg = _config(tmp_path)
        with pytest.raises(StageError, match="does not apply"):
            run_stage(cfg, "poison")

    def test_unknown_stage_is_config_error(self, tmp_path):
        cfg = _config(tmp_path)
        with pytest.raises(ConfigError, match="unknown stage"):
            run_stage(cfg, "transmogrify")

    def test_backdoor_run_produces_expected_artifacts(self, tmp_path):
        cfg = _config(
            tmp_path,
            attack={"kind": "blended", "poison_rate": 0.2},
            defense={"kind": "distill", "kd_epochs": 1, "batch_size": 16, "student_init": "random"},
        )
        stages = run_all(cfg)
        assert stages[0] == "poison"
        out = cfg.output_dir
        for rel in (
            "poison/poison_manifest.json",
            "poison/trigger.npy",
            "train-source/checkpoint/weights.pt",
            "defend/checkpoint/weights.pt",
            "defend/defense_log.jsonl",
            "adapt/checkpoint/weights.pt",
            "evaluate/results.jsonl",
            "report/report.md",
            "report/summary.csv",
            "manifest.json",
        ):
            assert os.path.exists(os.path.join(out, rel)), rel
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert set(manifest["stages"]) == set(stages)
        # Downstream stages record the hashes of what they consumed.
        evaluate_inputs = manifest["stages"]["evaluate"]["inputs"]
        assert any(key.startswith("train-source/") for key in evaluate_inputs)
        assert any(key.startswith("adapt/") for key in evaluate_inputs)

    def test_poison_manifest_contents(self, tmp_path):
        cfg = _config(tmp_path, attack={"kind": "sig", "poison_rate": 0.25})
        run_stage(cfg, "poison")
        manifest = json.load(open(os.path.join(cfg.output_dir, "poison", "poison_manifest.json")))
        assert manifest["mode"] == "sig"
        n_train = len(manifest["poisoned_indices"])
        assert n_train == round(0.25 * 4 * 10 * 0.7)  # train split after 0.3 test

    def test_metric_files_byte_identical_on_rerun(self, tmp_path):
        cfg = _config(tmp_path)
        run_all(cfg, until="evaluate")
        path = os.path.join(cfg.output_dir, "evaluate", "results.jsonl")
        first = open(path, "rb").read()
        run_stage(cfg, "evaluate")
        assert open(path, "rb").read() == first

    def test_conflicting_config_in_same_out_dir_rejected(self, tmp_path):
        cfg = _config(tmp_path)
        run_all(cfg, until="train-source")
        other = _config(tmp_path, seed=99)
        with pytest.raises(StageError, match="different config"):
            run_stage(other, "train-source")

    def test_evaluate_emits_expected_records(self, tmp_path):
        cfg = _config(tmp_path, attack={"kind": "badnets", "poison_rate": 0.2, "patch_size": 3})
        run_all(cfg, until="evaluate")
        from adaptbench.evaluation import read_results

        records = read_results(os.path.join(cfg.output_dir, "evaluate", "results.jsonl"))
        combos = {(r.attack_id, r.adapt_id) for r in records}
        assert combos == {
            ("none", "source-only"),
            ("badnets", "source-only"),
            ("none", "shot"),
            ("badnets", "shot"),
        }
        for r in records:
            if r.attack_id == "badnets":
                assert r.asr is not None and r.attack_acc is not None


class TestCli:
    def test_config_error_exit_2(self, tmp_path, capsys):
        path = _write_yaml(tmp_path, {"task": {"classcount": 3}})
        assert cli_main(["run-all", "--config", path]) == 2
        assert "unknown key" in capsys.readouterr().err

    def test_missing_upstream_exit_1(self, tmp_path, capsys):
        raw = json.loads(json.dumps(TINY))
        raw["output_dir"] = str(tmp_path / "run")
        path = _write_yaml(tmp_path, raw)
        assert cli_main(["evaluate", "--config", path]) == 1

    def test_stage_and_overrides(self, tmp_path, capsys):
        raw = json.loads(json.dumps(TINY))
        path = _write_yaml(tmp_path, raw)
        out = str(tmp_path / "cli-run")
        code = cli_main(
            ["run-all", "--config", path, "--out", out, "--seed", "4", "--stage", "train-source"]
        )
        assert code == 0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert manifest["seed"] == 4
        assert list(manifest["stages"]) == ["train-source"]

    def test_gen_commands_check_attack_kind(self, tmp_path, capsys):
        raw = json.loads(json.dumps(TINY))
        raw["attack"] = {"kind": "uap"}
        path = _write_yaml(tmp_path, raw)
        assert cli_main(["gen-gap", "--config", path]) == 2
        assert "attack.kind" in capsys.readouterr().err
