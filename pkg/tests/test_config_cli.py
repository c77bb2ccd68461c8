import json
import subprocess
import sys

import pytest

from peftbench.cli import main
from peftbench.config import (ConfigError, PRESETS, RunConfig, apply_preset, config_hash, load_config,
                              save_config)
from peftbench.corpus import write_jsonl

from toydata import toy_records

TINY = ["--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ff", "32", "--max-seq-len", "64",
        "--max-source-length", "24", "--max-target-length", "24", "--epochs", "1", "--batch-size", "8"]


# -- config ---------------------------------------------------------------------

def test_defaults_validate_and_round_trip(tmp_path):
    cfg = RunConfig().validate()
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="rank"):
        RunConfig.from_dict({"lora": {"rank": 4}})


def test_validation_errors():
    with pytest.raises(ConfigError, match="method"):
        RunConfig(method="adapter").validate()
    with pytest.raises(ConfigError, match="max_seq_len"):
        RunConfig.from_dict({"train": {"max_source_length": 200}}).validate()
    with pytest.raises(ConfigError, match="prefix block"):
        RunConfig.from_dict({"method": "joint", "prefix": None}).validate()


def test_length_budget_counts_prefix_only_when_used():
    d = {"train": {"max_source_length": 100, "max_target_length": 100}, "model": {"max_seq_len": 210}}
    assert RunConfig.from_dict({**d, "method": "lora"}).validate()
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**d, "method": "joint"}).validate()


def test_hash_stable_and_sensitive():
    a = RunConfig()
    assert config_hash(a) == config_hash(RunConfig.from_dict(a.to_dict()))
    b = RunConfig.from_dict({"output_dir": "elsewhere", "data": {"dataset": "x.jsonl"}})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(RunConfig.from_dict({"lora": {"r": 4}}))


def test_presets_apply():
    for name in PRESETS:
        apply_preset(RunConfig(), name).validate()
    j = apply_preset(RunConfig(), "glm-joint")
    assert j.method == "joint" and j.prefix.pre_seq_len == 128 and j.lora.learning_rate == 1e-4
    assert j.model.max_seq_len >= 128 + 256 + 4 + 128
    with pytest.raises(ConfigError):
        apply_preset(RunConfig(), "nope")


# -- CLI ------------------------------------------------------------------------

@pytest.fixture
def data(tmp_path):
    p = tmp_path / "train.jsonl"
    write_jsonl(toy_records(8), p)
    return p


def test_unknown_flag_exits_1(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--no-such-flag"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 1


def test_missing_config_exits_1_naming_file(tmp_path, capsys):
    missing = tmp_path / "nowhere.json"
    assert main(["train", "--config", str(missing)]) == 1
    assert "nowhere.json" in capsys.readouterr().err


def test_invalid_config_and_missing_dataset_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lora": {"rank": 3}}))
    assert main(["train", "--config", str(bad)]) == 1
    assert main(["train"]) == 1
    assert main(["train", "--method", "magic", "--dataset", "x"]) == 1


def test_runtime_error_exits_2(tmp_path, capsys):
    assert main(["train", "--dataset", str(tmp_path / "absent.jsonl"), "--output-dir", str(tmp_path / "o")]
                + TINY) == 2
    assert "absent.jsonl" in capsys.readouterr().err
    assert main(["eval", "--run", str(tmp_path / "no_run"), "--test", str(tmp_path / "absent.jsonl")]) == 2


def test_overrides_reach_run_config(tmp_path, data):
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(data), "--output-dir", str(out), "--lora-r", "2",
                 "--lora-targets", "attn.wq,ffn.w2", "--seed", "7"] + TINY) == 0
    cfg = json.loads((out / "run_config.json").read_text())
    assert cfg["lora"]["r"] == 2 and cfg["lora"]["targets"] == ["attn.wq", "ffn.w2"]
    assert cfg["model"]["seed"] == cfg["train"]["seed"] == 7
    assert cfg["model"]["d_model"] == 16


def test_config_file_then_flags(tmp_path, data):
    c = tmp_path / "c.json"
    c.write_text(json.dumps({"method": "prefix", "prefix": {"pre_seq_len": 2, "d_prefix": 4}}))
    out = tmp_path / "run"
    assert main(["train", "--config", str(c), "--dataset", str(data), "--output-dir", str(out),
                 "--pre-seq-len", "3"] + TINY) == 0
    cfg = json.loads((out / "run_config.json").read_text())
    assert cfg["method"] == "prefix" and cfg["prefix"]["pre_seq_len"] == 3 and cfg["prefix"]["d_prefix"] == 4


def test_train_eval_merge_report_happy_path(tmp_path, data, capsys):
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(data), "--output-dir", str(out), "--method", "joint",
                 "--pre-seq-len", "2"] + TINY) == 0
    assert main(["eval", "--run", str(out), "--test", str(data), "--label", "joint",
                 "--predictions", str(tmp_path / "p.jsonl")]) == 0
    rep = json.loads((out / "eval_report.json").read_text())
    assert rep["model_label"] == "joint" and 0 <= rep["bleu4"] <= 1
    assert len((tmp_path / "p.jsonl").read_text().splitlines()) == 8
    assert main(["merge", "--run", str(out)]) == 0
    assert main(["eval", "--model", str(out / "merged.ckpt"), "--test", str(data), "--label", "joint",
                 "--out", str(tmp_path / "merged_report.json")]) == 0
    merged = json.loads((tmp_path / "merged_report.json").read_text())
    for k in ("bleu4", "rouge1", "rouge2", "rougeL", "trainable_params", "total_params", "config_hash"):
        assert merged[k] == rep[k], k
    assert main(["report", str(out / "eval_report.json"), "--runs", str(out), "--out",
                 str(tmp_path / "rep")]) == 0
    for name in ("table.txt", "report.tsv", "report.json", "metrics.png", "params.png", "loss.png"):
        assert (tmp_path / "rep" / name).is_file()


def test_report_usage_errors(tmp_path, capsys):
    assert main(["report"]) == 1
    assert main(["report", str(tmp_path / "missing.json")]) == 1


def test_module_entry_point_exit_codes(tmp_path):
    r = subprocess.run([sys.executable, "-m", "peftbench", "train", "--config", str(tmp_path / "x.json")],
                       capture_output=True, text=True)
    assert r.returncode == 1 and "x.json" in r.stderr
    r = subprocess.run([sys.executable, "-m", "peftbench", "report", "--accounting", "--no-figures"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "5.36M" in r.stdout
