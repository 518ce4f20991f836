import json

import numpy as np
import pytest

from textvae.cli import EXIT_CODES, main
from textvae.corpus import Vocabulary, save_text
from textvae.model import VaeParams, decode_greedy, load_checkpoint


def write_config(tmp_path, **overrides):
    cfg = {
        "train": {
            "latent_dim": 4, "embed_dim": 8, "hidden_dim": 16,
            "batch_size": 16, "epochs": 1, "warmup_steps": 20,
            "keep_prob": 1.0, "seed": 0,
        },
        "synthetic": {
            "n_templates": 2, "words_per_slot": 5, "length_range": [4, 6],
            "n_train": 80, "n_dev": 16, "n_test": 16, "seed": 11,
        },
        "eval": {"n_samples": 3, "mi_samples": 2, "max_gen_len": 8},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


def test_train_writes_artifacts(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert (out / "checkpoint.bin").exists()
    assert (out / "train_log.jsonl").exists()
    assert (out / "manifest.json").exists()
    assert (out / "vocab.txt").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert "vocab" in manifest["corpus_hashes"]
    records = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert {"epoch", "reconstruction", "kl_raw", "kl_effective", "beta",
            "fraternal_penalty", "total", "wall_time"} <= set(records[-1])


def test_train_lr_zero_checkpoint_equals_init(tmp_path):
    cfg = write_config(tmp_path, train={"lr": 0.0})
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    params, vocab, _ = load_checkpoint(out / "checkpoint.bin")
    rng = np.random.default_rng(0)
    init = VaeParams.init(len(vocab), 8, 16, 4, rng)
    for (n, a), (_, b) in zip(params.named_parameters(), init.named_parameters()):
        assert np.array_equal(a.data, b.data), n


def test_train_deterministic_checkpoint_bytes(tmp_path):
    cfg = write_config(tmp_path, train={"alpha": 0.1, "keep_prob": 0.7})
    out = tmp_path / "run"
    argv = ["train", "--config", str(cfg), "--out-dir", str(out)]
    assert main(argv) == 0
    first_ckpt = (out / "checkpoint.bin").read_bytes()
    first_manifest = (out / "manifest.json").read_bytes()
    assert main(argv) == 0  # identical invocation overwrites in place
    assert (out / "checkpoint.bin").read_bytes() == first_ckpt
    assert (out / "manifest.json").read_bytes() == first_manifest


def test_flag_overrides_win_over_config(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out),
                 "--epochs", "2", "--alpha", "0.2", "--keep-prob", "0.8"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["train"]["epochs"] == 2
    assert manifest["config"]["train"]["alpha"] == 0.2
    assert manifest["config"]["train"]["keep_prob"] == 0.8


def test_bad_config_exit_code(tmp_path):
    cfg = write_config(tmp_path, train={"keep_prob": 2.0})
    code = main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "x")])
    assert code == EXIT_CODES["config"]
    cfg2 = tmp_path / "broken.json"
    cfg2.write_text("{not json", encoding="utf-8")
    assert main(["train", "--config", str(cfg2), "--out-dir", str(tmp_path / "y")]) == EXIT_CODES["config"]


def test_unknown_config_field_named_in_error(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"train": {"learning": 1}}), encoding="utf-8")
    code = main(["train", "--config", str(path), "--out-dir", str(tmp_path / "x")])
    assert code == EXIT_CODES["config"]
    assert "learning" in capsys.readouterr().err


def test_text_corpus_train_and_eval(tmp_path):
    corpus_dir = tmp_path / "corpus"
    corpus_dir.mkdir()
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(12)]
    make = lambda n: [[words[j] for j in rng.integers(0, 12, rng.integers(2, 6))] for _ in range(n)]
    save_text(make(60), corpus_dir / "train.txt")
    save_text(make(10), corpus_dir / "dev.txt")
    save_text(make(10), corpus_dir / "test.txt")

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "train": {"latent_dim": 4, "embed_dim": 8, "hidden_dim": 12, "epochs": 1,
                  "warmup_steps": 10, "keep_prob": 1.0, "seed": 0},
        "eval": {"n_samples": 2, "mi_samples": 2, "max_gen_len": 6},
        "vocab_size": 30,
    }), encoding="utf-8")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--corpus", str(corpus_dir),
                 "--out-dir", str(out)]) == 0
    eval_out = tmp_path / "eval"
    assert main(["eval", "--config", str(cfg), "--corpus", str(corpus_dir),
                 "--checkpoint", str(out / "checkpoint.bin"),
                 "--out-dir", str(eval_out), "--seed", "3"]) == 0
    assert (eval_out / "report.txt").exists()


def test_eval_empty_split_is_data_error(tmp_path):
    cfg = write_config(tmp_path, synthetic={"n_test": 0})
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    code = main(["eval", "--config", str(cfg),
                 "--checkpoint", str(out / "checkpoint.bin")])
    assert code == EXIT_CODES["data"]


def test_eval_vocab_hash_mismatch_refused(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    other_cfg = write_config(tmp_path, synthetic={"words_per_slot": 4})
    code = main(["eval", "--config", str(other_cfg),
                 "--checkpoint", str(out / "checkpoint.bin")])
    assert code == EXIT_CODES["data"]
    assert "vocabulary" in capsys.readouterr().err


def test_eval_deterministic_report(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    e1, e2 = tmp_path / "e1", tmp_path / "e2"
    for e in (e1, e2):
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.bin"),
                     "--out-dir", str(e), "--seed", "5"]) == 0
    assert (e1 / "report.txt").read_bytes() == (e2 / "report.txt").read_bytes()


def test_eval_does_not_mutate_checkpoint(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    before = (out / "checkpoint.bin").read_bytes()
    assert main(["eval", "--config", str(cfg),
                 "--checkpoint", str(out / "checkpoint.bin"), "--seed", "1"]) == 0
    assert (out / "checkpoint.bin").read_bytes() == before


def test_sweep_single_alpha(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(cfg), "--out-dir", str(out), "--alphas", "0"]) == 0
    table = (out / "sweep_table.txt").read_text().splitlines()
    assert len(table) == 2  # header + one row
    assert table[1].startswith("0")


def test_sweep_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    o1, o2 = tmp_path / "s1", tmp_path / "s2"
    for o in (o1, o2):
        assert main(["sweep", "--config", str(cfg), "--out-dir", str(o),
                     "--alphas", "0,0.1"]) == 0
    assert (o1 / "sweep_table.txt").read_text() == (o2 / "sweep_table.txt").read_text()


def test_interpolate_endpoints_and_consistency(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    capsys.readouterr()
    assert main(["interpolate", "--checkpoint", str(out / "checkpoint.bin"),
                 "--steps", "2", "--seed", "9", "--max-len", "8"]) == 0
    lines = capsys.readouterr().out.strip("\n").split("\n")
    assert len(lines) == 2

    # endpoint t=0 must match a standalone greedy decode of z1
    params, vocab, _ = load_checkpoint(out / "checkpoint.bin")
    rng = np.random.default_rng(9)
    z1 = rng.standard_normal(params.latent_dim)
    expected = " ".join(vocab.decode(decode_greedy(z1, 8, params)))
    assert lines[0] == expected


def test_interpolate_deterministic_artifact(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    idir = tmp_path / "interp"
    argv = ["interpolate", "--checkpoint", str(out / "checkpoint.bin"),
            "--steps", "5", "--seed", "4", "--out-dir", str(idir)]
    assert main(argv) == 0
    first_text = (idir / "interpolations.txt").read_bytes()
    first_manifest = (idir / "manifest.json").read_bytes()
    assert main(argv) == 0
    assert (idir / "interpolations.txt").read_bytes() == first_text
    assert (idir / "manifest.json").read_bytes() == first_manifest


def test_interpolate_rejects_one_step(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert main(["interpolate", "--checkpoint", str(out / "checkpoint.bin"),
                 "--steps", "1"]) == EXIT_CODES["config"]


def test_sample_runs(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    capsys.readouterr()
    assert main(["sample", "--checkpoint", str(out / "checkpoint.bin"),
                 "--n", "3", "--seed", "2", "--max-len", "6"]) == 0
    lines = capsys.readouterr().out.strip("\n").split("\n")
    assert len(lines) == 3


def test_selfcheck_passes(capsys):
    assert main(["selfcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert "checks passed" in out


def test_selfcheck_corrupted_backward_fails(capsys):
    assert main(["selfcheck", "--corrupt-backward"]) == 1
    assert "FAIL" in capsys.readouterr().out
