import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ustr import harness
from ustr.decode import DecodeResult
from ustr.harness import (
    ExperimentConfig,
    ExperimentError,
    UtteranceErrors,
    WerReport,
    align_counts,
    evaluate,
    read_results,
    run_experiment,
    wer,
)
from ustr.model import UstrModel

from conftest import TOY_EXPERIMENT


def _counts(r):
    return r.S, r.I, r.D


def test_wer_identity():
    r = wer("a b c".split(), "a b c".split())
    assert r.wer == 0 and _counts(r) == (0, 0, 0)


def test_wer_single_substitution():
    r = wer("a b c".split(), "a x c".split())
    assert _counts(r) == (1, 0, 0) and r.wer == pytest.approx(1 / 3)


def test_wer_single_insertion():
    r = wer("a b".split(), "a b c".split())
    assert _counts(r) == (0, 1, 0) and r.wer == 0.5


def test_wer_deletion_and_overflow():
    assert _counts(wer("a b c".split(), "a c".split())) == (0, 0, 1)
    r = wer(["a"], "x y z".split())
    assert r.wer == 3.0 and _counts(r) == (1, 2, 0)


def test_wer_tie_break_prefers_substitution():
    # "a b" vs "b c": two substitutions or one deletion plus one insertion, both cost 2
    assert _counts(wer("a b".split(), "b c".split())) == (2, 0, 0)


def test_wer_empty_reference():
    with pytest.raises(ValueError):
        wer([], ["a"])


words = st.lists(st.sampled_from("abcd"), max_size=8)


@given(words, words)
@settings(max_examples=300, deadline=None)
def test_wer_cost_is_edit_distance_and_symmetric(a, b):
    s1, i1, d1 = align_counts(a, b)
    s2, i2, d2 = align_counts(b, a)
    assert s1 + i1 + d1 == s2 + i2 + d2
    assert len(b) - len(a) == i1 - d1
    assert (s1, i1, d1) == (s2, d2, i2)


@given(st.lists(st.lists(st.sampled_from("abc"), min_size=1, max_size=5), min_size=1, max_size=5))
@settings(max_examples=50, deadline=None)
def test_aggregate_sums_per_utterance(refs):
    items = []
    for k, r in enumerate(refs):
        items += wer(r, r[::-1] + ["z"], f"u{k}").per_utterance
    rep = WerReport.aggregate(items)
    assert (rep.S, rep.I, rep.D, rep.N) == tuple(sum(getattr(u, f) for u in items) for f in "SIDN")
    assert rep.wer >= 0


def test_aggregate_empty():
    with pytest.raises(ValueError):
        WerReport.aggregate([])


# -- evaluation ---------------------------------------------------------------------


def test_evaluate_perfect_decoder(toy, monkeypatch):
    m = toy.corpora.manifests["source_dev"]

    def oracle(model, manifest, fusion, elm=None):
        return {r.id: DecodeResult(r.id, tuple(toy.res.labels(r.transcript)), 0.0, 0.0, 0.0) for r in manifest.records}

    monkeypatch.setattr(harness, "batch_decode", oracle)
    rep = evaluate(None, m, toy.res)
    assert rep.wer == 0 and rep.N == sum(len(r.transcript) for r in m.records)


def test_evaluate_repeatable(toy):
    model = UstrModel.init(toy.model_cfg, 0)
    m = toy.corpora.manifests["source_dev"]
    a, b = evaluate(model, m, toy.res), evaluate(model, m, toy.res)
    assert a == b
    assert a.wer > 0.5  # untrained


def test_evaluate_empty_manifest(toy):
    from ustr.corpus import Manifest

    m = toy.corpora.manifests["source_dev"]
    with pytest.raises(ValueError, match="empty manifest"):
        evaluate(UstrModel.init(toy.model_cfg, 0), Manifest([], m.feature_dim, root=m.root), toy.res)


# -- configuration ----------------------------------------------------------------------


def test_config_requires_seed():
    with pytest.raises(ValueError, match="seed"):
        ExperimentConfig.from_json({"name": "x"})


def test_config_rejects_unknown_keys_and_stages():
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_json({"seed": 0, "colour": 1})
    with pytest.raises(ValueError, match="unknown stages"):
        ExperimentConfig.from_json({"seed": 0, "stages": {"pretrain": {}}})
    with pytest.raises(ValueError, match="needs a base"):
        ExperimentConfig.from_json({"seed": 0, "stages": {"adapt_multistep": {}}})


def test_config_stage_inherits_seed_and_text_rep():
    cfg = ExperimentConfig.from_json({"seed": 9, "text_rep": {"repeat": 3}, "stages": {"base": {"steps": 5}}})
    tc = cfg.train_config("base")
    assert tc.seed == 9 and tc.steps == 5 and tc.text_rep.repeat == 3


def test_config_resolves_relative_paths(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 1, "domains": {"source": "s.json", "target": "t.json"}}))
    cfg = ExperimentConfig.load(tmp_path / "c.json")
    assert cfg.resolve(cfg.domains["source"]) == tmp_path / "s.json"


# -- pipeline ---------------------------------------------------------------------------


TINY_STAGES = {
    "base": {"steps": 2, "batch_size": 2},
    "adapt_multistep": {"steps": 2, "batch_size": 2},
    "singlestep": {"steps": 2, "batch_size": 2},
    "external_lm": {"epochs": 1},
}


def _tiny(**kw):
    return ExperimentConfig.from_json({**TOY_EXPERIMENT, "lm": {"embed_dim": 8, "hidden_dim": 8}, **kw})


def test_random_init_only(tmp_path):
    out = run_experiment(_tiny(), tmp_path / "r")
    rows = read_results(out / "results.csv")
    assert {r["variant"] for r in rows} == {"random-init"}
    assert [r["split"] for r in rows] == ["source_dev", "source_test", "target_val"]
    assert "| random-init |" in (out / "results.md").read_text()


def test_full_pipeline_tables_and_determinism(tmp_path):
    cfg = _tiny(
        stages=TINY_STAGES,
        fusion={"beam": 2, "grid": [0.0, 0.2]},
        sweep={"units": ["grapheme"], "repeats": [3], "train": {"steps": 1, "batch_size": 2}},
    )
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    assert (a / "sweep.csv").read_bytes() == (b / "sweep.csv").read_bytes()
    variants = [r["variant"] for r in read_results(a / "results.csv")][::3]
    assert variants == ["random-init", "base", "multistep", "singlestep", "multistep+beam", "multistep+ilme"]
    for name in ("base.ckpt", "multistep.ckpt", "multistep.deploy.ckpt", "singlestep.ckpt", "elm.ckpt",
                 "bpe.model", "metrics.csv", "fusion_tuning.json", "results.md", "sweep.md"):
        assert (a / name).exists(), name
    tuning = json.loads((a / "fusion_tuning.json").read_text())
    assert len(tuning["grid"]) == 4


def test_stage_failure_names_stage(tmp_path):
    cfg = _tiny(domains={"source": "missing.json", "target": "missing.json"}, base_dir=str(tmp_path))
    with pytest.raises(ExperimentError, match="stage corpus") as err:
        run_experiment(cfg, tmp_path / "r")
    assert err.value.stage == "corpus"


def test_fusion_needs_trained_model(tmp_path):
    with pytest.raises(ExperimentError, match="stage fusion"):
        run_experiment(_tiny(stages={"base": {"steps": 1, "batch_size": 2}}, fusion={"model": "singlestep"}),
                       tmp_path / "r")
