"""Command-line entry points.

Every command reads an optional flat config (``--config``), applies
``--set key=value`` overrides and ``--seed``, and writes its artifacts under
``--out``.  Text reports start with a ``# digest=... seed=...`` header.
"""
from __future__ import annotations

import argparse
import os
import sys
from typing import Sequence

import numpy as np

from . import __version__
from .augment import hard_substitute_batch, write_synthetic
from .cmlm import finetune_cmlm
from .config import ExperimentConfig
from .corpus import (
    TokenizedPair,
    Vocab,
    build_vocab,
    learn_bpe,
    merge_subwords,
    read_parallel,
    read_vocab,
    tokenize_pairs,
    write_merges,
    write_parallel,
    write_vocab,
)
from .errors import ConfigError, DataError, NmtAugError
from .evaluation import bleu, consistency_accuracy, decode_batch, paired_bootstrap
from .model import CmlmModel, NmtModel
from .numcore import default_dtype
from .rng import MASKING, substream
from .serialize import load_cmlm, load_nmt, save_cmlm, save_nmt
from .synthetic import synonym_pair_corpus, synonym_rich_corpus
from .trainer import NmtTrainer

SPLITS = ("train", "valid", "test")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- shared helpers ------------------------------------------------------------------


def _header(cfg: ExperimentConfig) -> str:
    return f"# digest={cfg.digest()} seed={cfg['seed']}\n"


def _metrics(cfg: ExperimentConfig, run) -> str:
    return _header(cfg) + f"# run_digest={run.digest}\n" + "".join(line + "\n" for line in run.metrics_lines())


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _ids_path(data_dir: str, split: str, side: str) -> str:
    return os.path.join(data_dir, f"{split}.{side}.ids")


def _write_ids(path: str, rows: Sequence[Sequence[int]]) -> None:
    _write(path, "".join(" ".join(map(str, r)) + "\n" for r in rows))


def _read_ids(path: str) -> list[list[int]]:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    rows = []
    for n, line in enumerate(lines, 1):
        try:
            rows.append([int(t) for t in line.split()])
        except ValueError:
            raise DataError(f"{path}:{n}: expected integer token ids") from None
    return rows


def _data_dir(cfg: ExperimentConfig) -> str:
    path = cfg["data.dir"]
    if not path:
        raise ConfigError("data.dir is not set (use --data or --set data.dir=...)")
    if not os.path.isdir(path):
        raise DataError(f"data directory {path} does not exist")
    return path


def load_split(data_dir: str, split: str) -> list[TokenizedPair]:
    xs = _read_ids(_ids_path(data_dir, split, "src"))
    ys = _read_ids(_ids_path(data_dir, split, "tgt"))
    if len(xs) != len(ys):
        raise DataError(f"{split}: {len(xs)} source vs {len(ys)} target lines")
    pairs = []
    for n, (x, y) in enumerate(zip(xs, ys), 1):
        try:
            pairs.append(TokenizedPair(x, y))
        except DataError as exc:
            raise DataError(f"{split} line {n}: {exc}") from None
    return pairs


def load_vocab(data_dir: str) -> Vocab:
    return read_vocab(os.path.join(data_dir, "vocab.txt"))


def _precision(cfg: ExperimentConfig):
    name = cfg["train.precision"]
    if name not in ("float32", "float64"):
        raise ConfigError(f"train.precision must be float32 or float64, got {name!r}")
    return default_dtype(np.float32 if name == "float32" else np.float64)


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


# -- commands ---------------------------------------------------------------------------


def cmd_prepare_data(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args)
    sources = {}
    for split in SPLITS:
        src, tgt = cfg[f"data.{split}_src"], cfg[f"data.{split}_tgt"]
        if src and tgt:
            sources[split] = read_parallel(src, tgt)
    if "train" not in sources:
        raise ConfigError("data.train_src and data.train_tgt are required")
    lines = [p.source for p in sources["train"]] + [p.target for p in sources["train"]]
    merges = learn_bpe(lines, cfg["bpe.num_merges"])
    vocab = build_vocab(lines, merges, cfg["bpe.min_freq"])
    write_merges(merges, os.path.join(out, "merges.txt"))
    write_vocab(vocab, os.path.join(out, "vocab.txt"))
    summary = [_header(cfg), f"merges={len(merges)} vocab={len(vocab)}\n"]
    for split, pairs in sources.items():
        tokenized = tokenize_pairs(pairs, merges, vocab)
        _write_ids(_ids_path(out, split, "src"), [p.x for p in tokenized])
        _write_ids(_ids_path(out, split, "tgt"), [p.y for p in tokenized])
        write_parallel(pairs, os.path.join(out, f"{split}.src"), os.path.join(out, f"{split}.tgt"))
        summary.append(f"split={split} pairs={len(pairs)}\n")
    _write(os.path.join(out, "data.info"), "".join(summary))
    return 0


def cmd_train_cmlm(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args)
    data = _data_dir(cfg)
    side = args.side
    mode = args.mode or cfg["cmlm.mode"]
    pairs = load_split(data, "train")
    vocab = load_vocab(data)
    seed = cfg["seed"]
    with _precision(cfg):
        model = CmlmModel(cfg.transformer("cmlm"), len(vocab), side, mode, seed=seed)
        _, curve = finetune_cmlm(
            model,
            pairs,
            side,
            mode,
            cfg["cmlm.eta"],
            cfg["cmlm.steps"],
            cfg["cmlm.batch_size"],
            seed,
            mask_rate=cfg["cmlm.mask_rate"],
        )
    stem = os.path.join(out, f"cmlm.{side}.{mode}")
    save_cmlm(stem + ".ckpt", model, digest=cfg.digest(), metadata={"seed": str(seed)})
    _write(stem + ".loss", _header(cfg) + "".join(f"step={i} loss={v:.6f}\n" for i, v in enumerate(curve, 1)))
    return 0


def _make_trainer(cfg: ExperimentConfig, out: str, progress: bool) -> NmtTrainer:
    data = _data_dir(cfg)
    train = load_split(data, "train")
    vocab = load_vocab(data)
    valid = load_split(data, "valid") if os.path.exists(_ids_path(data, "valid", "src")) else None
    model = NmtModel(cfg.transformer("nmt"), len(vocab), seed=cfg["seed"])
    return NmtTrainer(
        model,
        train,
        cfg.da(),
        cfg.optim(),
        cfg["train.epochs"],
        cfg["seed"],
        valid=valid,
        vocab=vocab,
        out_dir=out,
        on_step=(lambda line: print(line, flush=True)) if progress else None,
    )


def cmd_train_nmt(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args)
    with _precision(cfg):
        trainer = _make_trainer(cfg, out, progress=args.verbose)
        if args.verbose:
            print(f"digest={cfg.digest()} run_digest={trainer.digest}", flush=True)
        if args.resume:
            from .numcore import load_checkpoint

            trainer.restore(load_checkpoint(args.resume))
        run = trainer.run()
    save_nmt(os.path.join(out, "model.ckpt"), trainer.model, digest=cfg.digest(), metadata={"seed": str(cfg["seed"])})
    _write(os.path.join(out, "metrics.txt"), _metrics(cfg, run))
    _write(os.path.join(out, "config.txt"), cfg.to_text())
    return 0


def _evaluate_model(model: NmtModel, pairs: Sequence[TokenizedPair], vocab: Vocab, beam: int, max_len: int):
    hyps = decode_batch(model, [p.x for p in pairs], beam=beam, max_len=max_len)
    words = [merge_subwords(h, vocab) for h in hyps]
    return words, bleu(words, [merge_subwords(p.y, vocab) for p in pairs])


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args)
    data = _data_dir(cfg)
    vocab = load_vocab(data)
    pairs = load_split(data, args.split)
    model, _ = load_nmt(args.checkpoint)
    if model.vocab_size != len(vocab):
        raise DataError(f"checkpoint vocabulary ({model.vocab_size}) differs from {data}/vocab.txt ({len(vocab)})")
    beam = args.beam if args.beam is not None else cfg["eval.beam"]
    words, report = _evaluate_model(model, pairs, vocab, beam, cfg["eval.max_len"])
    stem = os.path.join(out, f"{args.split}.beam{beam}")
    _write(stem + ".hyp", "".join(" ".join(w) + "\n" for w in words))
    _write(stem + ".bleu", _header(cfg) + f"{report}\n" + report.as_record() + "\n")
    print(report)
    return 0


def cmd_consistency_check(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args)
    data = _data_dir(cfg)
    pairs = load_split(data, args.split)
    cmlm = load_cmlm(args.cmlm)
    mask_rate = args.mask_rate if args.mask_rate is not None else cfg["cmlm.mask_rate"]
    report = consistency_accuracy(cmlm, pairs, cmlm.side, mask_rate=mask_rate, seed=cfg["seed"], sample=args.sample)
    stem = os.path.join(out, f"consistency.{cmlm.side}.{cmlm.mode}")
    _write(stem + ".report", _header(cfg) + report.as_record() + "\n")
    dump = ["pair\tside\tposition\tgold\tpredicted\tprobability\n"]
    dump += [f"{i}\t{s}\t{p}\t{g}\t{q}\t{prob:.6f}\n" for i, s, p, g, q, prob in report.predictions]
    _write(stem + ".predictions.tsv", "".join(dump))
    print(report.as_record())
    return 0


def _read_words(path: str) -> list[list[str]]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [line.split() for line in fh.read().splitlines()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def cmd_significance(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args)
    a, b, refs = _read_words(args.hyp_a), _read_words(args.hyp_b), _read_words(args.refs)
    if not len(a) == len(b) == len(refs):
        raise DataError(f"line counts differ: {len(a)}, {len(b)}, {len(refs)}")
    result = paired_bootstrap(a, b, refs, samples=args.samples, seed=cfg["seed"])
    _write(os.path.join(out, "significance.txt"), _header(cfg) + result.as_record() + "\n")
    print(result.as_record())
    return 0


def cmd_sweep_gamma(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args)
    data = _data_dir(cfg)
    vocab = load_vocab(data)
    test = load_split(data, args.split)
    try:
        gammas = [float(g) for g in args.gammas.split(",")]
    except ValueError:
        raise ConfigError(f"--gammas must be a comma-separated list of numbers, got {args.gammas!r}") from None
    if cfg["da.mode"] not in ("soft", "hard"):
        cfg["da.mode"] = "soft"
    rows = ["gamma\tbleu\n"]
    for gamma in gammas:
        trial = cfg.copy()
        trial["da.gamma"] = gamma
        trial_dir = os.path.join(out, f"gamma_{gamma:g}")
        os.makedirs(trial_dir, exist_ok=True)
        with _precision(trial):
            trainer = _make_trainer(trial, trial_dir, progress=False)
            run = trainer.run()
            _, report = _evaluate_model(trainer.model, test, vocab, trial["eval.beam"], trial["eval.max_len"])
        _write(os.path.join(trial_dir, "metrics.txt"), _metrics(trial, run))
        rows.append(f"{gamma:g}\t{report.bleu:.4f}\n")
        print(rows[-1], end="", flush=True)
    _write(os.path.join(out, "gamma_sweep.tsv"), _header(cfg) + "".join(rows))
    return 0


def cmd_augment_hard(cfg: ExperimentConfig, args) -> int:
    """Write one round of hard-substituted pairs with provenance (explicit augmentation)."""
    out = _out_dir(args)
    data = _data_dir(cfg)
    pairs = load_split(data, "train")
    vocab = load_vocab(data)
    cmlm = load_cmlm(args.cmlm)
    rng = substream(cfg["seed"], MASKING, 0)
    new, replaced = hard_substitute_batch(pairs, cmlm.side, cmlm, cfg["da.gamma"], rng, cfg["da.hard_strategy"])
    write_synthetic(
        new,
        range(len(pairs)),
        replaced,
        cmlm.side,
        vocab,
        os.path.join(out, "synthetic.src"),
        os.path.join(out, "synthetic.tgt"),
        os.path.join(out, "synthetic.provenance"),
    )
    return 0


def cmd_make_synthetic(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args)
    seed = cfg["seed"]
    if args.kind == "synonym-pair":
        pairs = synonym_pair_corpus(args.pairs, seed=seed)
        write_parallel(pairs, os.path.join(out, "train.src"), os.path.join(out, "train.tgt"))
    else:
        train, test = synonym_rich_corpus(args.pairs, args.test_pairs, seed=seed)
        write_parallel(train, os.path.join(out, "train.src"), os.path.join(out, "train.tgt"))
        write_parallel(test, os.path.join(out, "test.src"), os.path.join(out, "test.tgt"))
    return 0


# -- parser --------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="K=V", help="override one config key")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--data", help="prepared data directory (sets data.dir)")

    parser = _Parser(prog="nmtaug", description="Soft contextual data augmentation for NMT")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("prepare-data", parents=[common], help="learn BPE and vocabulary, tokenize splits")

    p = sub.add_parser("train-cmlm", parents=[common], help="train a conditional masked LM")
    p.add_argument("--side", choices=("source", "target"), required=True)
    p.add_argument("--mode", choices=("both", "mono"))

    p = sub.add_parser("train-nmt", parents=[common], help="train an NMT model with augmentation")
    p.add_argument("--resume", help="trainer checkpoint to continue from")
    p.add_argument("--verbose", action="store_true", help="print metrics as training runs")

    p = sub.add_parser("evaluate", parents=[common], help="decode a split and score BLEU")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--beam", type=int)

    p = sub.add_parser("consistency-check", parents=[common], help="masked-token accuracy of a CMLM")
    p.add_argument("--cmlm", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--mask-rate", type=float)
    p.add_argument("--sample", action="store_true", help="sample predictions instead of argmax")

    p = sub.add_parser("significance", parents=[common], help="paired bootstrap test between two systems")
    p.add_argument("--hyp-a", required=True)
    p.add_argument("--hyp-b", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--samples", type=int, default=1000)

    p = sub.add_parser("sweep-gamma", parents=[common], help="train and score one NMT model per gamma")
    p.add_argument("--gammas", default="0,0.15,0.25,0.35,0.5")
    p.add_argument("--split", default="test", choices=SPLITS)

    p = sub.add_parser("augment-hard", parents=[common], help="write hard-substituted training pairs")
    p.add_argument("--cmlm", required=True)

    p = sub.add_parser("make-synthetic", parents=[common], help="generate an artificial parallel corpus")
    p.add_argument("--kind", choices=("synonym-pair", "synonym-rich"), default="synonym-rich")
    p.add_argument("--pairs", type=int, default=5000)
    p.add_argument("--test-pairs", type=int, default=500)
    return parser


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-cmlm": cmd_train_cmlm,
    "train-nmt": cmd_train_nmt,
    "evaluate": cmd_evaluate,
    "consistency-check": cmd_consistency_check,
    "significance": cmd_significance,
    "sweep-gamma": cmd_sweep_gamma,
    "augment-hard": cmd_augment_hard,
    "make-synthetic": cmd_make_synthetic,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        cfg.apply_overrides(args.set)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.data:
            cfg["data.dir"] = args.data
        return COMMANDS[args.command](cfg, args)
    except NmtAugError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
