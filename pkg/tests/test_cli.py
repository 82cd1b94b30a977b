import json
import subprocess
import sys
from pathlib import Path

import pytest

from ustr.cli import main
from ustr.corpus import DomainSpec, Manifest, make_domain_pair, save_manifest

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    result = json.loads(out.strip().splitlines()[-1]) if code == 0 else None
    return code, result, err


def test_shipped_domains_match_generator():
    src, tgt = make_domain_pair(0)
    assert DomainSpec.load(CONFIGS / "source.json") == src
    assert DomainSpec.load(CONFIGS / "target.json") == tgt


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def data(workdir):
    cfg = {
        "source": str(CONFIGS / "source.json"),
        "target": str(CONFIGS / "target.json"),
        "splits": {"train": ["source", 12, True], "text": ["target", 12, False], "val": ["target", 3, True]},
    }
    (workdir / "gen.json").write_text(json.dumps(cfg))
    assert main(["gen-data", "--config", str(workdir / "gen.json"), "--out", str(workdir / "data"), "--seed", "1"]) == 0
    assert main(["bpe-train", str(workdir / "data/train.jsonl"), str(workdir / "data/text.jsonl"),
                 "--merges", "15", "--out", str(workdir)]) == 0
    (workdir / "model.json").write_text(json.dumps({"model_dim": 8, "predictor_dim": 8, "joint_dim": 8,
                                                    "shared_blocks": 1, "conv_channels": 1}))
    (workdir / "train.json").write_text(json.dumps({"batch_size": 2}))
    return workdir


def _text_flags(d):
    return ["--bpe", d / "bpe.model", "--lexicon", d / "data/lexicon.json", "--inventory", d / "data/inventory.json"]


def test_end_to_end(data, capsys):
    d = data
    code, r, _ = run(capsys, "train-base", "--paired", d / "data/train.jsonl", *_text_flags(d),
                     "--model-config", d / "model.json", "--config", d / "train.json", "--steps", 2, "--out", d / "base")
    assert code == 0 and Path(r["checkpoint"]).exists()
    code, r, _ = run(capsys, "adapt", "--checkpoint", d / "base/base.ckpt", "--paired", d / "data/train.jsonl",
                     "--text", d / "data/text.jsonl", *_text_flags(d), "--config", d / "train.json", "--steps", 2,
                     "--out", d / "ms")
    assert code == 0
    code, r, _ = run(capsys, "train-single", "--paired", d / "data/train.jsonl", "--text", d / "data/text.jsonl",
                     *_text_flags(d), "--model-config", d / "model.json", "--config", d / "train.json",
                     "--steps", 1, "--out", d / "ss")
    assert code == 0
    (d / "lm.json").write_text(json.dumps({"model": {"embed_dim": 4, "hidden_dim": 4}, "train": {"epochs": 1}}))
    code, r, _ = run(capsys, "train-lm", "--bpe", d / "bpe.model", "--text", d / "data/text.jsonl",
                     "--config", d / "lm.json", "--out", d / "lm")
    assert code == 0 and r["train_ppl"] > 1
    code, r, _ = run(capsys, "decode", "--checkpoint", d / "ms/multistep.ckpt", "--manifest", d / "data/val.jsonl",
                     "--bpe", d / "bpe.model", "--beam", 2, "--lambda-ilm", 0.2, "--lambda-elm", 0.1,
                     "--elm", d / "lm/elm.ckpt", "--out", d / "dec")
    assert code == 0 and r["utterances"] == 3
    lines = (d / "dec/decode.jsonl").read_text().splitlines()
    assert {"id", "tokens", "text", "score_am", "score_ilm", "score_elm"} == set(json.loads(lines[0]))
    code, r, _ = run(capsys, "eval", "--checkpoint", d / "ss/singlestep.ckpt", "--manifest", d / "data/val.jsonl",
                     "--bpe", d / "bpe.model")
    assert code == 0 and r["wer"] >= 0 and r["N_ref"] > 0


def test_adapt_rejects_non_base_checkpoint(data, capsys):
    d = data
    if not (d / "ss/singlestep.ckpt").exists():
        pytest.skip("end-to-end test did not run")
    code, _, err = run(capsys, "adapt", "--checkpoint", d / "ss/singlestep.ckpt", "--paired", d / "data/train.jsonl",
                       "--text", d / "data/text.jsonl", *_text_flags(d), "--steps", 1, "--out", d / "bad")
    assert code == 1 and err.startswith("error: stage:")


def test_eval_empty_manifest(data, capsys, tmp_path):
    save_manifest(Manifest([], 16), tmp_path / "empty.jsonl")
    code, _, err = run(capsys, "eval", "--checkpoint", data / "base/base.ckpt", "--manifest", tmp_path / "empty.jsonl",
                       "--bpe", data / "bpe.model")
    assert code != 0
    assert err.strip().splitlines()[-1].startswith("error: ") and "empty.jsonl" in err


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(capsys, "loss-oracle", "--bogus")
    assert code == 2
    assert "usage:" in err and err.strip().splitlines()[-1].startswith("error: usage:")


def test_experiment_needs_config(capsys):
    code, _, err = run(capsys, "experiment")
    assert code == 2 and "needs --config" in err


def test_experiment_bad_config(capsys, tmp_path):
    (tmp_path / "c.json").write_text('{"name": "x"}')
    code, _, err = run(capsys, "experiment", "--config", tmp_path / "c.json")
    assert code == 1 and "error: config:" in err and "seed" in err
    (tmp_path / "d.json").write_text("{not json")
    code, _, err = run(capsys, "experiment", "--config", tmp_path / "d.json")
    assert code == 1 and "error: config:" in err and "d.json" in err


def test_experiment_seed_override(capsys, tmp_path):
    cfg = json.loads((CONFIGS / "tiny.json").read_text())
    cfg.update(stages={}, fusion={}, sweep={}, domains={k: str(CONFIGS / v) for k, v in cfg["domains"].items()})
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, r, _ = run(capsys, "experiment", "--config", tmp_path / "c.json", "--seed", 3, "--out", tmp_path / "o")
    assert code == 0 and Path(r["results"]).exists()


def test_loss_oracle(capsys):
    code, r, _ = run(capsys, "loss-oracle", "--trials", 200)
    assert code == 0 and r["max_abs_diff"] <= 1e-9 and r["max_cut_diff"] <= 1e-9


def test_grad_check(capsys):
    code = main(["grad-check"])
    out, _ = capsys.readouterr()
    assert code == 0
    assert "lattice:" in out and "conformer_block:" in out and "FAIL" not in out


def test_module_entry_point():
    p = subprocess.run([sys.executable, "-m", "ustr.cli", "loss-oracle", "--trials", "5"], capture_output=True, text=True)
    assert p.returncode == 0
    assert json.loads(p.stdout.splitlines()[-1])["max_abs_diff"] <= 1e-9
