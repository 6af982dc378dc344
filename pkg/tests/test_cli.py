import json
import subprocess
import sys

import pytest

from bilora.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, resolve, run
from bilora.train import TrainConfig, prepare_finetune, save_checkpoint, train


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


GEN = ["--train", "3", "--val", "1", "--test", "3", "--families", "fam_a,fam_b"]


def test_gen_data_twice_identical(tmp_path):
    for name in ("a", "b"):
        assert run(["gen-data", "--out", str(tmp_path / name), "--seed", "7", *GEN]) == EXIT_OK
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_global_seed_before_subcommand(tmp_path):
    assert run(["--seed", "7", "gen-data", "--out", str(tmp_path / "a"), *GEN]) == EXIT_OK
    assert run(["gen-data", "--out", str(tmp_path / "b"), "--seed", "7", *GEN]) == EXIT_OK
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_finetune_without_base_is_usage_error(tmp_path, capsys):
    code = run(["finetune", "--manifest", "m.jsonl", "--out", str(tmp_path / "x"), "--families", "fam_a"])
    assert code == EXIT_USAGE
    assert "--base" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["nonsense"], ["eval", "--bogus", "1"], [], ["matrix", "--ckpts", "noequals",
                                                                             "--manifest", "m"]])
def test_usage_errors(argv, capsys):
    assert run(argv) == EXIT_USAGE
    captured = capsys.readouterr()
    assert captured.out == "" and captured.err


def test_help_exits_zero(capsys):
    assert run(["matrix", "--help"]) == EXIT_OK
    assert "--degrade" in capsys.readouterr().out


def test_unknown_degradation_is_usage_error(capsys):
    assert run(["eval", "--ckpt", "c", "--manifest", "m", "--family", "f", "--degrade", "sharpen"]) == EXIT_USAGE


def test_runtime_error_exit_code(tmp_path, capsys):
    code = run(["eval", "--ckpt", str(tmp_path / "missing.blra"), "--manifest", str(tmp_path / "m.jsonl"),
                "--family", "fam_a"])
    assert code == EXIT_RUNTIME
    assert "missing.blra" in capsys.readouterr().err


def test_bad_threads_env(monkeypatch, tmp_path):
    monkeypatch.setenv("BILORA_THREADS", "zero")
    assert run(["gen-data", "--out", str(tmp_path / "d"), *GEN]) == EXIT_USAGE


# -- config files


def test_config_merge_and_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 3, "lr": 0.01, "batch-size": 4}))
    _, opts = resolve(["pretrain", "--config", str(cfg), "--manifest", "m", "--out", "o", "--epochs", "5"])
    assert opts["epochs"] == 5 and opts["lr"] == 0.01 and opts["batch_size"] == 4
    assert opts["seed"] == 0


def test_config_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 3, "warmup": 1}))
    assert run(["pretrain", "--config", str(cfg), "--manifest", "m", "--out", "o"]) == EXIT_USAGE
    assert "warmup" in capsys.readouterr().err


def test_invalid_values_rejected_before_side_effects(tmp_path):
    out = tmp_path / "never.blra"
    assert run(["pretrain", "--manifest", "m", "--out", str(out), "--lr", "-1"]) == EXIT_USAGE
    assert not out.exists()


def test_output_may_not_overwrite_input(tmp_path):
    m = tmp_path / "m.jsonl"
    m.write_text("")
    assert run(["pretrain", "--manifest", str(m), "--out", str(m)]) == EXIT_USAGE
    assert m.read_text() == ""


# -- end to end on small checkpoints


@pytest.fixture(scope="module")
def artifacts(mid_manifest, mid_base, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    base = root / "base.blra"
    save_checkpoint(mid_base, base)
    cfg = TrainConfig(stage="finetune", families=("fam_a",), epochs=2)
    adapter = root / "a.blra"
    save_checkpoint(train(prepare_finetune(mid_base, cfg), mid_manifest, cfg), adapter)
    return root, mid_manifest.root / "manifest.jsonl", base, adapter


def test_matrix_two_degradation_blocks(artifacts, capsys):
    root, manifest, _, adapter = artifacts
    before = adapter.read_bytes(), manifest.read_bytes()
    code = run(["matrix", "--ckpts", f"fam_a={adapter}", "--manifest", str(manifest),
                "--degrade", "none,jpeg65", "--json", str(root / "r.json")])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "train_family,test_family,degrade,n,acc,f1"
    degr = [line.split(",")[2] for line in lines[1:]]
    assert degr == ["none"] * 5 + ["jpeg65"] * 5
    assert (adapter.read_bytes(), manifest.read_bytes()) == before

    assert run(["report", "--input", str(root / "r.json"), "--out", str(root / "r.md")]) == EXIT_OK
    md = (root / "r.md").read_text()
    assert "### Degradation: none" in md and "### Degradation: jpeg65" in md


def test_eval_prints_json(artifacts, capsys):
    _, manifest, _, adapter = artifacts
    assert run(["eval", "--ckpt", str(adapter), "--manifest", str(manifest), "--family", "fam_b",
                "--degrade", "blur3", "--degrade-param", "1.5"]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["degrade"] == "blur:1.5" and payload["n"] == 20
    c = payload["confusion"]
    assert c["tp"] + c["fp"] + c["fn"] + c["tn"] == 20


def test_finetune_command(artifacts, capsys):
    root, manifest, base, _ = artifacts
    out = root / "cli_ft.blra"
    code = run(["finetune", "--base", str(base), "--manifest", str(manifest), "--out", str(out),
                "--families", "fam_b", "--epochs", "1", "--rank", "4"])
    assert code == EXIT_OK and out.exists()
    assert "trainable 2048" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bilora", "report"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE and "--input" in proc.stderr
