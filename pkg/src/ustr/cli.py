"""Command-line entry point: ``ustr <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Failures print one line ``error: <kind>: <message>`` to stderr and exit
nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import (
    AcousticConfig,
    CorpusError,
    DomainSpec,
    Lexicon,
    PhonemeInventory,
    build_inventory,
    build_lexicon,
    generate_corpus,
    load_manifest,
)
from .decode import FusionConfig, batch_decode, write_decodes
from .checks import run_suite
from .harness import ExperimentConfig, ExperimentError, evaluate, run_experiment
from .loss import brute_force_loss, build_lattice
from .model import CheckpointError, ExternalLm, LmConfig, UstrConfig, UstrModel
from .textfeat import BpeModel, TextFeaturizer, bpe_train
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


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise CliError("config", f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CliError("config", f"{path}: invalid JSON at line {exc.lineno}") from exc
    if not isinstance(obj, dict):
        raise CliError("config", f"{path}: top level must be an object")
    return obj


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(path):
    m = load_manifest(path)
    if not m.records:
        raise CliError("data", f"{path}: no utterances")
    return m


def _resources(args) -> TextResources:
    """Output BPE plus the text featurizer named by --unit."""
    bpe = BpeModel.load(args.bpe)
    lexicon = inventory = None
    if args.lexicon:
        lexicon = Lexicon.from_json(_read_json(args.lexicon))
    if args.inventory:
        inventory = PhonemeInventory.from_json(_read_json(args.inventory))
    transcripts = None
    if args.unit == "grapheme":
        transcripts = [bpe.units]
    feat = TextFeaturizer.build(
        args.unit, transcripts=transcripts, bpe=bpe, lexicon=lexicon, phonemes=inventory.phonemes if inventory else None
    )
    return TextResources(bpe, feat)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> dict:
    """Config keys: source, target (domain JSON paths), splits {name: [domain, n, paired]}, inventory, acoustic."""
    cfg = _read_json(args.config)
    out = _out(args)
    base = Path(args.config).parent if args.config else Path(".")
    try:
        domains = {k: DomainSpec.load(base / cfg[k]) for k in ("source", "target")}
    except KeyError as exc:
        raise CliError("config", f"missing key {exc.args[0]!r}") from exc
    inv = build_inventory(seed=args.seed, **cfg.get("inventory", {}))
    vocab = domains["source"].vocabulary + domains["target"].vocabulary
    lexicon = build_lexicon(inv, vocab, seed=args.seed)
    acoustic = AcousticConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.get("acoustic", {}).items()})
    (out / "inventory.json").write_text(json.dumps(inv.to_json()))
    (out / "lexicon.json").write_text(json.dumps(lexicon.to_json(), sort_keys=True))
    written = {}
    for i, (name, (domain, n, paired)) in enumerate(sorted(cfg.get("splits", {}).items())):
        seed = int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
        m = generate_corpus(domains[domain], lexicon, inv, int(n), bool(paired), acoustic, seed, out, name)
        written[name] = len(m)
    return {"out": str(out), "splits": written}


def cmd_bpe_train(args) -> dict:
    texts = []
    for path in args.manifests:
        texts += _manifest(path).transcripts()
    bpe = bpe_train(texts, args.merges)
    path = _out(args) / "bpe.model"
    bpe.save(path)
    return {"model": str(path), "units": len(bpe.units)}


def _train_config(args) -> TrainConfig:
    obj = _read_json(args.config)
    obj["seed"] = args.seed
    if args.steps is not None:
        obj["steps"] = args.steps
    obj.setdefault("text_rep", {})
    obj["text_rep"] = {**obj["text_rep"], "unit": args.unit}
    return TrainConfig.from_json(obj)


def _model_config(args, res: TextResources, feature_dim: int) -> UstrConfig:
    obj = _read_json(args.model_config)
    obj.update(
        feature_dim=feature_dim,
        text_unit=res.featurizer.unit,
        text_vocab_size=len(res.featurizer.vocab),
        output_vocab_size=res.num_labels,
    )
    return UstrConfig.from_json(obj)


def cmd_train_base(args) -> dict:
    res = _resources(args)
    paired = _manifest(args.paired)
    tc = _train_config(args)
    model = UstrModel.init(_model_config(args, res, paired.feature_dim), args.seed)
    out = _out(args)
    r = train_base(model, prepare_samples(paired, res), tc, metrics_path=out / "metrics.csv")
    r.model.save(out / "base.ckpt", meta={"stage": "base"})
    return {"checkpoint": str(out / "base.ckpt"), "final_loss": r.history[-1].loss, "seconds": round(r.seconds, 2)}


def cmd_adapt(args) -> dict:
    res = _resources(args)
    model, meta = UstrModel.load(args.checkpoint)
    if meta.get("stage") != "base":
        raise CliError("stage", f"{args.checkpoint}: expected a base checkpoint, found stage {meta.get('stage')!r}")
    tc = _train_config(args)
    out = _out(args)
    r = adapt_multistep(
        model, prepare_samples(_manifest(args.paired), res), prepare_samples(_manifest(args.text), res), tc,
        metrics_path=out / "metrics.csv",
    )
    r.model.save(out / "multistep.ckpt", meta={"stage": "adapt_multistep"})
    return {"checkpoint": str(out / "multistep.ckpt"), "final_loss": r.history[-1].loss}


def cmd_train_single(args) -> dict:
    res = _resources(args)
    paired = _manifest(args.paired)
    tc = _train_config(args)
    mcfg = _model_config(args, res, paired.feature_dim)
    out = _out(args)
    r = train_singlestep(
        mcfg, prepare_samples(paired, res), prepare_samples(_manifest(args.text), res), tc, init_seed=args.seed,
        metrics_path=out / "metrics.csv",
    )
    r.model.save(out / "singlestep.ckpt", meta={"stage": "singlestep"})
    return {"checkpoint": str(out / "singlestep.ckpt"), "final_loss": r.history[-1].loss}


def cmd_train_lm(args) -> dict:
    bpe = BpeModel.load(args.bpe)
    res = TextResources(bpe, TextFeaturizer.build("subword", bpe=bpe))
    seqs = [res.labels(t) for t in _manifest(args.text).transcripts()]
    obj = _read_json(args.config)
    lm_cfg = LmConfig(vocab_size=res.num_labels, **obj.get("model", {}))
    lm, history = train_external_lm(seqs, lm_cfg, LmTrainConfig(**{**obj.get("train", {}), "seed": args.seed}))
    path = _out(args) / "elm.ckpt"
    lm.save(path, meta={"history": history})
    return {"checkpoint": str(path), "train_ppl": history[-1]["train_ppl"]}


def _fusion(args) -> tuple[FusionConfig, ExternalLm | None]:
    fc = FusionConfig(lambda_ilm=args.lambda_ilm, lambda_elm=args.lambda_elm, beam=args.beam)
    elm = ExternalLm.load(args.elm)[0] if args.elm else None
    return fc, elm


def cmd_decode(args) -> dict:
    bpe = BpeModel.load(args.bpe)
    res = TextResources(bpe, TextFeaturizer.build("subword", bpe=bpe))
    model, _ = UstrModel.load(args.checkpoint)
    fc, elm = _fusion(args)
    results = batch_decode(model, _manifest(args.manifest), fc, elm)
    path = _out(args) / "decode.jsonl"
    write_decodes(results, path, res.words)
    return {"output": str(path), "utterances": len(results)}


def cmd_eval(args) -> dict:
    manifest = _manifest(args.manifest)
    bpe = BpeModel.load(args.bpe)
    res = TextResources(bpe, TextFeaturizer.build("subword", bpe=bpe))
    model, _ = UstrModel.load(args.checkpoint)
    fc, elm = _fusion(args)
    rep = evaluate(model, manifest, res, fc, elm)
    return {"wer": rep.wer, "S": rep.S, "I": rep.I, "D": rep.D, "N_ref": rep.N}


def cmd_experiment(args) -> dict:
    if not args.config:
        raise CliError("usage", "experiment needs --config", code=2)
    try:
        cfg = ExperimentConfig.load(args.config)
    except (ValueError, TypeError) as exc:
        raise CliError("config", f"{args.config}: {exc}") from exc
    cfg.seed = args.seed if args.seed_given else cfg.seed
    out = run_experiment(cfg, args.out)
    return {"results": str(out / "results.csv")}


def cmd_grad_check(args) -> dict:
    report = run_suite(seed=args.seed)
    ok = all(r["ok"] for r in report)
    for r in report:
        print(f"{r['name']}: max_rel_error={r['max_rel_error']:.3e} tol={r['tolerance']:.0e} {'ok' if r['ok'] else 'FAIL'}")
    if not ok:
        raise CliError("gradcheck", "relative error above tolerance")
    return {"checks": len(report)}


def cmd_loss_oracle(args) -> dict:
    rng = np.random.default_rng(args.seed)
    t0 = time.perf_counter()
    worst = worst_cut = 0.0
    for _ in range(args.trials):
        T = int(rng.integers(1, 5))
        U = int(rng.integers(0, 4))
        K = int(rng.integers(2, 6))
        joint = rng.normal(size=(T, U + 1, K)) * 2.0
        labels = rng.integers(1, K, size=U)
        lat = build_lattice(joint, labels)
        worst = max(worst, abs(-lat.total_log_prob - brute_force_loss(joint, labels)))
        worst_cut = max(worst_cut, float(np.abs(lat.frame_cuts() - lat.total_log_prob).max()))
    elapsed = time.perf_counter() - t0
    print(f"max |DP - enumeration| = {worst:.3e} over {args.trials} trials ({elapsed:.2f} s)")
    print(f"max |frame cut - total| = {worst_cut:.3e}")
    if worst > 1e-9 or worst_cut > 1e-9:
        raise CliError("oracle", f"discrepancy {max(worst, worst_cut):.3e} exceeds 1e-9")
    return {"max_abs_diff": worst, "max_cut_diff": worst_cut, "seconds": round(elapsed, 3)}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output directory")


def _text_args(p) -> None:
    p.add_argument("--bpe", required=True, help="BPE model written by bpe-train")
    p.add_argument("--unit", choices=("grapheme", "subword", "phoneme"), default="phoneme")
    p.add_argument("--lexicon", help="lexicon.json (phoneme unit)")
    p.add_argument("--inventory", help="inventory.json (phoneme unit)")


def _fusion_args(p) -> None:
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--lambda-ilm", type=float, default=0.0)
    p.add_argument("--lambda-elm", type=float, default=0.0)
    p.add_argument("--elm", help="external LM checkpoint")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError("usage", message, code=2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ustr", description="Unified speech-text transducer toolkit")
    parser.add_argument("--version", action="version", version=f"ustr {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate synthetic corpora")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("bpe-train", help="learn BPE merges from manifests")
    _common(p)
    p.add_argument("manifests", nargs="+")
    p.add_argument("--merges", type=int, default=60)
    p.set_defaults(func=cmd_bpe_train)

    for name, func, help_ in (
        ("train-base", cmd_train_base, "train the base model on paired data"),
        ("train-single", cmd_train_single, "single-step training from scratch"),
        ("adapt", cmd_adapt, "multi-step text-only adaptation of a base checkpoint"),
    ):
        p = sub.add_parser(name, help=help_)
        _common(p)
        _text_args(p)
        p.add_argument("--paired", required=True, help="paired source manifest")
        if name != "train-base":
            p.add_argument("--text", required=True, help="text-only target manifest")
        if name == "adapt":
            p.add_argument("--checkpoint", required=True)
        else:
            p.add_argument("--model-config", help="model config JSON")
        p.add_argument("--steps", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("train-lm", help="train the external LM on text")
    _common(p)
    p.add_argument("--bpe", required=True)
    p.add_argument("--text", required=True)
    p.set_defaults(func=cmd_train_lm)

    for name, func in (("decode", cmd_decode), ("eval", cmd_eval)):
        p = sub.add_parser(name, help=f"{name} a manifest with a checkpoint")
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--bpe", required=True)
        _fusion_args(p)
        p.set_defaults(func=func)

    p = sub.add_parser("experiment", help="run a full experiment pipeline")
    _common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("grad-check", help="finite-difference checks of the lattice gradient and nn ops")
    _common(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("loss-oracle", help="compare the lattice loss with explicit enumeration")
    _common(p)
    p.add_argument("--trials", type=int, default=200)
    p.set_defaults(func=cmd_loss_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        args.seed_given = args.seed is not None
        if args.seed is None:
            args.seed = 0
        result = args.func(args)
    except CliError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return exc.code
    except ExperimentError as exc:
        print(f"error: experiment: {exc}", file=sys.stderr)
        return 1
    except (CorpusError, CheckpointError, TrainingError, ValueError, KeyError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
