import json

import pytest

from cpdg.cli import apply_overrides, config_hash, default_config, main, validate_config

SMALL = [
    "--set", 'data.generator={"num_users": 10, "num_items": 10, "num_events": 300}',
    "--set", "backbone.memory_dim=4", "--set", "backbone.embed_dim=4", "--set", "backbone.time_dim=3",
    "--set", "sampler.eta=3", "--set", "sampler.epsilon=2",
    "--set", "pretrain.epochs=1", "--set", "pretrain.batch_size=30", "--set", "pretrain.checkpoints=3",
    "--set", "finetune.epochs=1", "--set", "finetune.batch_size=30", "--set", 'finetune.mode="eie-mean"',
]


@pytest.fixture(autouse=True)
def run_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("CPDG_RUN_DIR", str(tmp_path / "runs"))
    return tmp_path / "runs"


def test_sample_debug_prints_probabilities(capsys):
    assert main(["sample-debug", "--times", "1,3,5", "--time", "9"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "chrono  [0.2543, 0.3265, 0.4192]"
    assert out[1] == "reverse [0.4192, 0.3265, 0.2543]"


def test_sample_debug_on_graph(capsys):
    assert main(["sample-debug", "--node", "0", "--time", "200", *SMALL]) == 0
    out = capsys.readouterr().out
    assert "temporal-positive" in out and "structural-positive" in out


def test_sample_debug_needs_arguments(capsys):
    assert main(["sample-debug"]) == 2


@pytest.mark.parametrize("sets", [
    ["--set", "loss.gamma=1.0"],
    ["--set", "loss.beta=1.0"],
    ["--set", "sampler.eta=two"],
    ["--set", 'finetune.mode="eie-max"'],
    ["--set", "nosuch.key=1"],
])
def test_bad_config_exits_2(sets, capsys):
    assert main(["pretrain", *sets]) == 2
    assert "config error" in capsys.readouterr().err


def test_config_file_and_hash_stability(tmp_path):
    cfg = apply_overrides(default_config(), ["sampler.eta=7"])
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    back = validate_config(json.loads(path.read_text()))
    assert back == validate_config(cfg)
    assert config_hash(back) == config_hash(validate_config(cfg))
    assert config_hash(back) != config_hash(validate_config(default_config()))


def test_eval_without_model_exits_2(capsys):
    assert main(["eval", *SMALL]) == 2
    assert "finetune" in capsys.readouterr().err


def test_pipeline_end_to_end(run_dir, capsys):
    assert main(["pretrain", *SMALL]) == 0
    pdir = next(run_dir.glob("pretrain-*"))
    for name in ("params.cpar", "final_memory.cmem", "train_log.jsonl", "backbone.json", "COMPLETE"):
        assert (pdir / name).exists(), name
    assert len(list((pdir / "checkpoints").glob("*.cmem"))) == 3
    first = (pdir / "params.cpar").read_bytes()

    assert main(["pretrain", "--force", *SMALL]) == 0
    assert (pdir / "params.cpar").read_bytes() == first

    capsys.readouterr()
    assert main(["finetune", *SMALL]) == 0
    metrics = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert metrics["mode"] == "eie-mean" and 0 <= metrics["auc"] <= 1

    assert main(["eval", *SMALL]) == 0
    again = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert again["auc"] == metrics["auc"]


def test_runtime_failure_exits_1(capsys):
    assert main(["finetune", *SMALL, "--set", 'finetune.task="node-classification"']) == 1


def test_generate_and_ingest(tmp_path, capsys):
    out = tmp_path / "g.ctdg"
    assert main(["generate", str(out), "--seed", "3"]) == 0
    csv = tmp_path / "e.csv"
    csv.write_text("src,dst,timestamp\na,b,1\nb,c,2\n")
    assert main(["ingest", str(csv), str(tmp_path / "e.ctdg")]) == 0
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["events"] == 2
