"""WER scoring, evaluation and the end-to-end experiment pipeline."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .corpus import (
    AcousticConfig,
    DomainSpec,
    Manifest,
    build_inventory,
    build_lexicon,
    generate_corpus,
    make_domain_pair,
)
from .decode import FusionConfig, batch_decode
from .model import ExternalLm, LmConfig, UstrConfig, UstrModel
from .textfeat import TextFeaturizer, TextRepConfig, bpe_train
from .training import (
    LmTrainConfig,
    TextResources,
    TrainConfig,
    TrainingError,
    adapt_multistep,
    prepare_samples,
    train_base,
    train_external_lm,
    train_singlestep,
)

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
EVAL_SPLITS = ("source_dev", "source_test", "target_val")
CSV_FIELDS = ("variant", "split", "wer", "S", "I", "D", "N_ref")


class ExperimentError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# WER
# ---------------------------------------------------------------------------


@dataclass
class UtteranceErrors:
    id: str
    S: int
    I: int
    D: int
    N: int


@dataclass
class WerReport:
    S: int
    I: int
    D: int
    N: int
    per_utterance: list[UtteranceErrors] = field(default_factory=list)

    @property
    def errors(self) -> int:
        return self.S + self.I + self.D

    @property
    def wer(self) -> float:
        return self.errors / self.N

    @classmethod
    def aggregate(cls, items: list[UtteranceErrors]) -> "WerReport":
        if not items:
            raise ValueError("cannot aggregate an empty set of utterances")
        return cls(
            sum(u.S for u in items), sum(u.I for u in items), sum(u.D for u in items), sum(u.N for u in items), items
        )


def align_counts(reference, hypothesis) -> tuple[int, int, int]:
    """(S, I, D) from a unit-cost Levenshtein alignment.

    The backtrace prefers substitution (or match), then insertion, then deletion.
    """
    index: dict[str, int] = {}
    ref = np.array([index.setdefault(w, len(index)) for w in reference], dtype=np.int64)
    hyp = np.array([index.setdefault(w, len(index)) for w in hypothesis], dtype=np.int64)
    d = _kernels.edit_table(ref, hyp)
    i, j = len(ref), len(hyp)
    S = I = D = 0
    while i or j:
        if i and j and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif j and d[i, j] == d[i, j - 1] + 1:
            I += 1
            j -= 1
        else:
            D += 1
            i -= 1
    return S, I, D


def wer(reference, hypothesis, utt_id: str = "") -> WerReport:
    reference, hypothesis = list(reference), list(hypothesis)
    if not reference:
        raise ValueError("reference must be non-empty")
    S, I, D = align_counts(reference, hypothesis)
    u = UtteranceErrors(utt_id, S, I, D, len(reference))
    return WerReport(S, I, D, len(reference), [u])


def evaluate(
    model: UstrModel,
    manifest: Manifest,
    res: TextResources,
    fusion: FusionConfig = FusionConfig(),
    elm: ExternalLm | None = None,
) -> WerReport:
    """Decode every utterance and score words against the reference transcripts."""
    if not manifest.records:
        raise ValueError("cannot evaluate an empty manifest")
    results = batch_decode(model, manifest, fusion, elm)
    items = []
    for rec in manifest.records:
        r = wer(rec.transcript, res.words(results[rec.id].tokens), rec.id)
        items.extend(r.per_utterance)
    return WerReport.aggregate(items)


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


DEFAULT_SPLITS = {
    "source_train": 1000,
    "source_dev": 100,
    "source_test": 100,
    "target_text": 1000,
    "target_val": 100,
    "target_dev": 60,
}


@dataclass
class ExperimentConfig:
    """One pipeline: corpus, tokenizers, model, training stages, decoding and an optional sweep.

    ``stages`` maps stage names (base, adapt_multistep, singlestep,
    external_lm) to their training settings; a stage absent from the map is
    skipped. Paths in ``domains`` are resolved against ``base_dir``.
    """

    name: str = "experiment"
    seed: int = 0
    out: str = "runs/experiment"
    domains: dict = field(default_factory=dict)
    domain_pair: dict = field(default_factory=dict)
    inventory: dict = field(default_factory=dict)
    lexicon_lengths: tuple[int, int] = (2, 6)
    acoustic: dict = field(default_factory=dict)
    splits: dict = field(default_factory=lambda: dict(DEFAULT_SPLITS))
    bpe_merges: int = 60
    text_rep: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    lm: dict = field(default_factory=dict)
    decode: dict = field(default_factory=lambda: {"beam": 1})
    fusion: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    base_dir: str = "."

    def __post_init__(self):
        missing = [k for k in DEFAULT_SPLITS if k not in self.splits]
        if missing:
            raise ValueError(f"config splits missing {missing}")
        unknown = set(self.stages) - {"base", "adapt_multistep", "singlestep", "external_lm"}
        if unknown:
            raise ValueError(f"unknown stages {sorted(unknown)}")
        if "adapt_multistep" in self.stages and "base" not in self.stages:
            raise ValueError("adapt_multistep needs a base stage")
        for key in ("source", "target"):
            if self.domains and key not in self.domains:
                raise ValueError(f"domains must name a {key!r} spec file")

    @classmethod
    def from_json(cls, obj: dict, base_dir=".") -> "ExperimentConfig":
        obj = dict(obj)
        if "seed" not in obj:
            raise ValueError("experiment config must set a seed")
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "lexicon_lengths" in obj:
            obj["lexicon_lengths"] = tuple(obj["lexicon_lengths"])
        obj.setdefault("base_dir", str(base_dir))
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        return cls.from_json(obj, base_dir=path.parent)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def train_config(self, stage: str) -> TrainConfig:
        obj = {"seed": self.seed, **self.stages[stage]}
        obj.setdefault("text_rep", self.text_rep)
        return TrainConfig.from_json(obj)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class Corpora:
    manifests: dict[str, Manifest]
    lexicon: object
    inventory: object
    source: DomainSpec
    target: DomainSpec


def build_corpora(cfg: ExperimentConfig, data_dir: Path) -> Corpora:
    if cfg.domains:
        source = DomainSpec.load(cfg.resolve(cfg.domains["source"]))
        target = DomainSpec.load(cfg.resolve(cfg.domains["target"]))
    else:
        source, target = make_domain_pair(seed=cfg.seed, **cfg.domain_pair)
    inv = build_inventory(seed=cfg.seed, **cfg.inventory)
    lexicon = build_lexicon(
        inv, list(source.vocabulary) + list(target.vocabulary), seed=cfg.seed, length_range=cfg.lexicon_lengths
    )
    acoustic = AcousticConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.acoustic.items()})
    plan = [
        ("source_train", source, True, 0),
        ("source_dev", source, True, 1),
        ("source_test", source, True, 2),
        ("target_text", target, False, 3),
        ("target_val", target, True, 4),
        ("target_dev", target, True, 5),
    ]
    manifests = {}
    for name, spec, paired, k in plan:
        seed = int(np.random.SeedSequence([cfg.seed, k]).generate_state(1)[0])
        manifests[name] = generate_corpus(spec, lexicon, inv, int(cfg.splits[name]), paired, acoustic, seed, data_dir, name)
    return Corpora(manifests, lexicon, inv, source, target)


def build_resources(cfg: ExperimentConfig, corpora: Corpora, unit: str | None = None) -> TextResources:
    """BPE over source and target transcripts; text featurizer for ``unit``."""
    m = corpora.manifests
    texts = m["source_train"].transcripts() + m["target_text"].transcripts()
    bpe = bpe_train(texts, cfg.bpe_merges)
    unit = unit or TextRepConfig(**cfg.text_rep).unit
    feat = TextFeaturizer.build(
        unit, transcripts=texts, bpe=bpe, lexicon=corpora.lexicon, phonemes=corpora.inventory.phonemes
    )
    return TextResources(bpe, feat)


def model_config(cfg: ExperimentConfig, corpora: Corpora, res: TextResources) -> UstrConfig:
    obj = {
        "feature_dim": corpora.inventory.dim,
        **cfg.model,
        "text_unit": res.featurizer.unit,
        "text_vocab_size": len(res.featurizer.vocab),
        "output_vocab_size": res.num_labels,
    }
    return UstrConfig.from_json(obj)


def _table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([r["variant"], r["split"], f"{r['wer']:.6f}", r["S"], r["I"], r["D"], r["N_ref"]])
    return buf.getvalue()


def _table_markdown(rows: list[dict], title: str) -> str:
    splits = list(dict.fromkeys(r["split"] for r in rows))
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    cell = {(r["variant"], r["split"]): r["wer"] for r in rows}
    lines = [f"# {title}", "", "| variant | " + " | ".join(splits) + " |", "|---" * (len(splits) + 1) + "|"]
    for v in variants:
        vals = [f"{100 * cell[(v, s)]:.2f}" if (v, s) in cell else "-" for s in splits]
        lines.append(f"| {v} | " + " | ".join(vals) + " |")
    return "\n".join(lines) + "\n\nWER in percent.\n"


def _row(variant: str, split: str, rep: WerReport) -> dict:
    return {"variant": variant, "split": split, "wer": rep.wer, "S": rep.S, "I": rep.I, "D": rep.D, "N_ref": rep.N}


def tune_fusion(model, manifest, res, elm, beam: int, grid=LAMBDA_GRID) -> tuple[FusionConfig, list[dict]]:
    """Grid search over (lambda_ilm, lambda_elm) by dev WER; ties go to the earlier grid point."""
    best, best_wer, trace = None, None, []
    lam_elm_grid = grid if elm is not None else (0.0,)
    for li in grid:
        for le in lam_elm_grid:
            fc = FusionConfig(lambda_ilm=li, lambda_elm=le, beam=beam)
            rep = evaluate(model, manifest, res, fc, elm)
            trace.append({"lambda_ilm": li, "lambda_elm": le, "wer": rep.wer})
            if best_wer is None or rep.wer < best_wer:
                best, best_wer = fc, rep.wer
    return best, trace


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Corpus generation, training stages, evaluation and tables; returns the results directory."""
    out = Path(out_dir or cfg.resolve(cfg.out))
    out.mkdir(parents=True, exist_ok=True)
    data_dir = out / "data"
    stage = "corpus"
    try:
        corpora = build_corpora(cfg, data_dir)
        stage = "tokenizers"
        res = build_resources(cfg, corpora)
        res.bpe.save(out / "bpe.model")
        mcfg = model_config(cfg, corpora, res)
        stage = "samples"
        m = corpora.manifests
        samples = {k: prepare_samples(m[k], res) for k in ("source_train", "target_text")}
        beam = int(cfg.decode.get("beam", 1))
        plain = FusionConfig(beam=beam)
        rows: list[dict] = []
        models: dict[str, UstrModel] = {}
        timings: dict[str, float] = {}  # wall-clock training seconds, kept out of the result tables

        def eval_rows(variant, model, fusion=plain, elm=None):
            for split in EVAL_SPLITS:
                rows.append(_row(variant, split, evaluate(model, m[split], res, fusion, elm)))

        stage = "init"
        init = UstrModel.init(mcfg, cfg.seed)
        eval_rows("random-init", init)

        if "base" in cfg.stages:
            stage = "base"
            tc = cfg.train_config("base")
            base = train_base(UstrModel.init(mcfg, cfg.seed), samples["source_train"], tc, metrics_path=out / "metrics.csv")
            timings["base"] = base.seconds
            base.model.save(out / "base.ckpt", meta={"stage": "base"})
            models["base"] = base.model
            eval_rows("base", base.model)

        if "adapt_multistep" in cfg.stages:
            stage = "adapt_multistep"
            tc = cfg.train_config("adapt_multistep")
            model, _ = UstrModel.load(out / "base.ckpt")
            ms = adapt_multistep(model, samples["source_train"], samples["target_text"], tc, metrics_path=out / "metrics.csv")
            timings["adapt_multistep"] = ms.seconds
            ms.model.save(out / "multistep.ckpt", meta={"stage": "adapt_multistep"})
            ms.model.save(out / "multistep.deploy.ckpt", meta={"stage": "adapt_multistep"}, strip_text_encoder=True)
            models["multistep"] = ms.model
            eval_rows("multistep", ms.model)

        if "singlestep" in cfg.stages:
            stage = "singlestep"
            tc = cfg.train_config("singlestep")
            ss = train_singlestep(
                mcfg, samples["source_train"], samples["target_text"], tc, init_seed=cfg.seed, metrics_path=out / "metrics.csv"
            )
            timings["singlestep"] = ss.seconds
            ss.model.save(out / "singlestep.ckpt", meta={"stage": "singlestep"})
            models["singlestep"] = ss.model
            eval_rows("singlestep", ss.model)

        elm = None
        if "external_lm" in cfg.stages:
            stage = "external_lm"
            lm_cfg = LmConfig(vocab_size=res.num_labels, **cfg.lm)
            lt = LmTrainConfig(**{"seed": cfg.seed, **cfg.stages["external_lm"]})
            elm, history = train_external_lm([s.labels for s in samples["target_text"]], lm_cfg, lt)
            elm.save(out / "elm.ckpt", meta={"history": history})

        if cfg.fusion and models:
            stage = "fusion"
            target = cfg.fusion.get("model", "multistep")
            if target not in models:
                raise ExperimentError(stage, f"fusion model {target!r} was not trained")
            fb = int(cfg.fusion.get("beam", beam))
            grid = tuple(cfg.fusion.get("grid", LAMBDA_GRID))
            best, trace = tune_fusion(models[target], m["target_dev"], res, elm, fb, grid)
            with open(out / "fusion_tuning.json", "w") as fh:
                json.dump({"best": {"lambda_ilm": best.lambda_ilm, "lambda_elm": best.lambda_elm}, "grid": trace}, fh, indent=1)
            eval_rows(f"{target}+beam", models[target], FusionConfig(beam=fb))
            eval_rows(f"{target}+ilme", models[target], best, elm)

        stage = "tables"
        (out / "results.csv").write_text(_table_csv(rows))
        (out / "results.md").write_text(_table_markdown(rows, f"{cfg.name}: WER by model variant and split"))

        if cfg.sweep:
            stage = "sweep"
            run_sweep(cfg, corpora, out)
        (out / "timings.json").write_text(json.dumps(timings, indent=1))
    except ExperimentError:
        raise
    except (TrainingError, ValueError, KeyError, OSError) as exc:
        raise ExperimentError(stage, str(exc)) from exc
    return out


def run_sweep(cfg: ExperimentConfig, corpora: Corpora, out: Path) -> list[dict]:
    """Text-representation grid: unit x repeat, each trained with the configured recipe."""
    sw = cfg.sweep
    units = sw.get("units", ["grapheme", "subword", "phoneme"])
    repeats = sw.get("repeats", [3, 4, 5])
    train = {"seed": cfg.seed, **sw.get("train", {"steps": 20})}
    m = corpora.manifests
    rows = []
    for unit in units:
        res = build_resources(cfg, corpora, unit)
        mcfg = model_config(cfg, corpora, res)
        paired = prepare_samples(m["source_train"], res)
        text = prepare_samples(m["target_text"], res)
        for rep in repeats:
            rep_cfg = {**cfg.text_rep, **train.get("text_rep", {}), "unit": unit, "repeat": rep}
            tc = TrainConfig.from_json({**train, "text_rep": rep_cfg})
            model = train_singlestep(mcfg, paired, text, tc, init_seed=cfg.seed).model
            for split in sw.get("splits", ["target_val"]):
                r = _row(f"{unit}-r{rep}", split, evaluate(model, m[split], res))
                rows.append(r)
    (out / "sweep.csv").write_text(_table_csv(rows))
    (out / "sweep.md").write_text(_table_markdown(rows, f"{cfg.name}: text representation sweep"))
    return rows


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {**r, "wer": float(r["wer"]), "S": int(r["S"]), "I": int(r["I"]), "D": int(r["D"]), "N_ref": int(r["N_ref"])}
            for r in csv.DictReader(fh)
        ]
