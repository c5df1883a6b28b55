import hashlib
import json
from pathlib import Path

import pytest

from irvuln import cli
from irvuln.corpus import load_dataset

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TOY_MODEL = """
[model]
d_model = 16
n_heads = 2
n_layers = 1
d_ff = 32
max_len = 256
fc_hidden = 16
dropout_rate = 0.0
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipeline")
    (d / "spec.json").write_text(json.dumps({"n_programs": 200, "seed": 0}))
    assert run("gen-corpus", "--spec", d / "spec.json", "--out", d / "raw.jsonl") == 0
    assert run("preprocess", "--in", d / "raw.jsonl", "--out", d / "pre.jsonl") == 0
    assert run("build-vocab", "--in", d / "pre.jsonl", "--out", d / "vocab.txt") == 0
    (d / "run.toml").write_text(f"""
[paths]
dataset = "pre.jsonl"
vocab = "vocab.txt"
checkpoint = "out/model.ckpt"
reports = "out"
{TOY_MODEL}
[train]
learning_rate = 0.05
batch_size = 1
epochs = 60
""")
    before = digest(d / "pre.jsonl")
    assert run("train", "--config", d / "run.toml") == 0
    assert digest(d / "pre.jsonl") == before
    assert run("evaluate", "--checkpoint", d / "out/model.ckpt", "--test", d / "out/test.jsonl",
               "--out", d / "eval.json") == 0
    return d


def test_pipeline_artifacts(pipeline):
    for name in ["raw.jsonl", "pre.jsonl", "vocab.txt", "out/model.ckpt", "out/train_report.json",
                 "out/test.jsonl", "eval.json"]:
        assert (pipeline / name).is_file(), name
    report = json.loads((pipeline / "eval.json").read_text())
    assert report["n_samples"] == 40
    assert report["tp"] + report["fp"] + report["tn"] + report["fn"] == 40
    assert report["accuracy"] >= 0.9
    train_report = json.loads((pipeline / "out/train_report.json").read_text())
    assert len(train_report["epoch_losses"]) == 60


def test_build_vocab_logs_token_count(pipeline, tmp_path, caplog):
    caplog.set_level("INFO", logger="irvuln")
    assert run("build-vocab", "--in", pipeline / "pre.jsonl", "--out", tmp_path / "v.txt") == 0
    n = len((tmp_path / "v.txt").read_text().splitlines()) - 4
    assert f"{n} non-special tokens" in caplog.text
    assert (tmp_path / "v.txt").read_bytes() == (pipeline / "vocab.txt").read_bytes()


def test_predict_benign_and_vulnerable(pipeline, capsys):
    test_set = load_dataset(pipeline / "out/test.jsonl")
    for label in (0, 1):
        program = next(p for p in test_set if p.label == label)
        path = pipeline / f"program{label}.json"
        path.write_text(program.to_json())
        capsys.readouterr()
        assert run("predict", "--checkpoint", pipeline / "out/model.ckpt", "--program", path) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["label"] == label and 0 < out["prob"] < 1


def test_predict_raw_ir_text(pipeline, capsys):
    program = next(p for p in load_dataset(pipeline / "raw.jsonl") if p.label == 0)
    path = pipeline / "benign.ll"
    path.write_text("\n".join(program.lines) + "\n")
    capsys.readouterr()
    assert run("predict", "--checkpoint", pipeline / "out/model.ckpt", "--program", path) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1 and json.loads(out[0])["label"] == 0


def test_gen_corpus_is_byte_identical(pipeline, tmp_path):
    assert run("gen-corpus", "--spec", pipeline / "spec.json", "--out", tmp_path / "again.jsonl") == 0
    assert digest(tmp_path / "again.jsonl") == digest(pipeline / "raw.jsonl")


def test_train_is_byte_identical(pipeline, tmp_path):
    config = f"""
[paths]
dataset = "{pipeline / 'pre.jsonl'}"
checkpoint = "{{}}"
{TOY_MODEL}
[train]
epochs = 2
precision = "double"
"""
    for name in ("a", "b"):
        (tmp_path / f"{name}.toml").write_text(config.replace("{}", str(tmp_path / f"{name}.ckpt")))
        assert run("train", "--config", tmp_path / f"{name}.toml") == 0
    assert digest(tmp_path / "a.ckpt") == digest(tmp_path / "b.ckpt")


def test_grad_check_command(capsys):
    assert run("grad-check", "--config", CONFIGS / "gradcheck.toml") == 0
    assert float(capsys.readouterr().out) <= 1e-4


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert run("train", "--config", tmp_path / "missing.toml") == 2
    assert "usage:" in capsys.readouterr().err


def test_missing_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run("ablate", "--config", "x.toml", "--depths", "a-b", "--repeats", "1", "--out", "o.json")
    assert exc.value.code == 2


def test_config_and_data_errors(pipeline, tmp_path):
    (tmp_path / "bad.toml").write_text("[train]\nlearning_rat = 1\n[corpus]\nn_programs = 10\n")
    assert run("train", "--config", tmp_path / "bad.toml") == 2
    (tmp_path / "broken.jsonl").write_text("{nope\n")
    assert run("preprocess", "--in", tmp_path / "broken.jsonl", "--out", tmp_path / "x.jsonl") == 1
    assert not (tmp_path / "x.jsonl").exists()
    assert run("evaluate", "--checkpoint", pipeline / "out/model.ckpt", "--test", pipeline / "out/test.jsonl",
               "--out", tmp_path / "e.json", "--threshold", "1.5") == 2
    (tmp_path / "garbage.ckpt").write_bytes(b"not a checkpoint")
    assert run("evaluate", "--checkpoint", tmp_path / "garbage.ckpt", "--test", pipeline / "out/test.jsonl",
               "--out", tmp_path / "e.json") == 1


def test_preprocess_max_lines_flag(pipeline, tmp_path):
    assert run("preprocess", "--in", pipeline / "raw.jsonl", "--out", tmp_path / "short.jsonl", "--max-lines", "12") == 0
    kept = load_dataset(tmp_path / "short.jsonl")
    assert kept and all(len(p.lines) < 12 for p in kept)
