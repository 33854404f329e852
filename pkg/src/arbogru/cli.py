"""Command-line driver: train, eval, predict, gradcheck, params.

Exit codes: 0 success, 1 numerical/quality failure, 2 usage or format
error.  The environment variable ARBO_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .embeddings import (build_vocab, load_glove, load_vocab,
                         random_embeddings, save_vocab)
from .model import VARIANTS, init_params, itemize_parameters
from .training import (SplitCorpora, TrainConfig, TrainingError,
                       build_sentence_graph, evaluate, gradient_check, train)
from .treebank import TreebankError, load_corpus, parse_tree

log = logging.getLogger("arbogru")

GRADCHECK_THRESHOLD = 1e-4

# reference totals for the original 300-dim, 5-class sentiment-treebank
# configuration (vocab 21702, binary branching)
REFERENCE_DIMS = (300, 21702, 5, 2)
REFERENCE_TOTALS = {
    ("treegru", False): 7_323_005,
    ("treegru", True): 7_413_605,
    ("treebigru", False): 8_135_405,
    ("treebigru", True): 8_317_810,
}
# the reference bidirectional counts exceed the implemented update rules by
# 3*d^2 = 270000, consistent with the downward gates also receiving an
# input-term matrix set; the audit surfaces the difference instead of
# guessing at undocumented tensors
DOWNWARD_COUNT_GAP = 270_000


class UsageError(ValueError):
    pass


def main(argv=None) -> int:
    _configure_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (TrainingError, ArithmeticError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def _configure_logging() -> None:
    level = os.environ.get("ARBO_LOG", "WARNING").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arbogru",
        description="Tree-structured GRU sentiment models over constituency trees")
    sub = parser.add_subparsers(dest="command", required=True)

    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train a model and keep the best-dev checkpoint")
    _model_flags(p)
    p.add_argument("--data", required=True,
                   help="directory with train.txt/dev.txt/test.txt treebank files")
    p.add_argument("--glove", default=None,
                   help="pretrained vector file; omitted, embeddings are random")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--task", choices=("fine", "binary"), default="fine",
                   help="label scheme: 5-class or positive/negative")
    p.add_argument("--lr", type=float, default=0.01, help="learning rate")
    p.add_argument("--batch", type=int, default=25, help="minibatch size in sentences")
    p.add_argument("--epochs", type=int, default=40, help="training epochs")
    p.add_argument("--l2", type=float, default=1e-4, help="L2 strength")
    p.add_argument("--dropout", type=float, default=0.5,
                   help="dropout probability on input and classifier layers")
    p.add_argument("--evals-per-epoch", type=int, default=4,
                   help="dev evaluations per epoch")
    p.add_argument("--seed", type=int, default=1, help="random seed")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on worker threads for per-sentence work "
                        "(default: sequential; the interpreter lock makes "
                        "extra threads rarely worthwhile)")
    p.add_argument("--precision", choices=("f32", "f64"), default="f64",
                   help="floating-point width for parameters")
    p.set_defaults(func=run_train)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="evaluate a checkpoint on a corpus split")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="treebank directory")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test",
                   help="which split to score")
    p.add_argument("--task", choices=("fine", "binary"), default="fine",
                   help="label scheme: 5-class or positive/negative")
    p.add_argument("--attention-norm", choices=("softmax", "linear"),
                   default="softmax", help="attention score normalization")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on worker threads (default: sequential)")
    p.set_defaults(func=run_eval)

    p = sub.add_parser("predict", formatter_class=fmt,
                       help="predict root sentiment for treebank-format lines")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--input", required=True,
                   help="file of treebank lines (labels may be dummy 0)")
    p.add_argument("--show-attention", action="store_true",
                   help="also print per-node attention weights")
    p.add_argument("--attention-norm", choices=("softmax", "linear"),
                   default="softmax", help="attention score normalization")
    p.set_defaults(func=run_predict)

    p = sub.add_parser("gradcheck", formatter_class=fmt,
                       help="compare tape gradients against finite differences")
    _model_flags(p)
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--trees", type=int, default=3, help="number of random trees")
    p.set_defaults(func=run_gradcheck)
    p.set_defaults(dim=8)

    p = sub.add_parser("params", formatter_class=fmt,
                       help="itemize trainable parameter counts")
    _model_flags(p)
    p.add_argument("--vocab", type=int, default=21702, help="vocabulary size")
    p.add_argument("--classes", type=int, default=5, help="sentiment classes")
    p.add_argument("--children", type=int, default=2, help="max children per node")
    p.set_defaults(func=run_params)

    return parser


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=VARIANTS, default="treegru",
                   help="network variant")
    p.add_argument("--attention", action="store_true",
                   help="add the structural attention head")
    p.add_argument("--attention-norm", choices=("softmax", "linear"),
                   default="softmax", dest="attention_norm",
                   help="attention score normalization")
    p.add_argument("--dim", type=int, default=300, help="state dimensionality")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise UsageError(message)


# ---------------------------------------------------------------------------
# subcommands

def run_train(args) -> int:
    _require(args.dim > 0, "--dim must be positive")
    _require(args.batch >= 1, "--batch must be at least 1")
    _require(args.epochs >= 1, "--epochs must be at least 1")
    _require(args.lr > 0, "--lr must be positive")
    _require(0.0 <= args.dropout < 1.0, "--dropout must lie in [0, 1)")
    _require(args.l2 >= 0.0, "--l2 must be nonnegative")

    data_dir = Path(args.data)
    paths = {}
    for split in ("train", "dev", "test"):
        candidate = data_dir / f"{split}.txt"
        if split == "test" and not candidate.exists():
            paths[split] = None
            continue
        _require(candidate.exists(), f"missing treebank file {candidate}")
        paths[split] = candidate

    corpora = SplitCorpora(
        train=load_corpus(paths["train"], args.task),
        dev=load_corpus(paths["dev"], args.task),
        test=load_corpus(paths["test"], args.task) if paths["test"] else None,
    )
    vocab = build_vocab(corpora.train)
    dtype = np.float64 if args.precision == "f64" else np.float32
    rng = np.random.default_rng(args.seed)
    if args.glove:
        emb = load_glove(args.glove, vocab, args.dim, rng, dtype)
        log.info("pretrained coverage %.3f over %d words", emb.coverage, vocab.size)
    else:
        emb = random_embeddings(vocab, args.dim, rng, dtype)
        log.warning("no pretrained vectors supplied; "
                    "random embeddings, coverage 0.0")

    classes = corpora.train.class_count
    params = init_params(args.variant, args.dim, vocab, classes, 2, rng,
                         attention=args.attention, embeddings=emb, dtype=dtype)
    config = TrainConfig(
        variant=args.variant, attention=args.attention,
        attention_norm=args.attention_norm, task=args.task, dim=args.dim,
        learning_rate=args.lr, batch_size=args.batch, l2=args.l2,
        dropout=args.dropout, epochs=args.epochs,
        evals_per_epoch=args.evals_per_epoch, seed=args.seed,
        threads=args.threads, precision=args.precision)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train.log", "w", encoding="utf-8") as log_file:
        def emit(line):
            log_file.write(line + "\n")
            log_file.flush()
            log.info("%s", line)

        result = train(config, corpora, params, vocab, log_fn=emit)

    save_checkpoint(out / "checkpoint.bin", result.best_params)
    save_vocab(vocab, out / "vocab.txt")
    manifest = asdict(config)
    manifest["threads"] = config.resolved_threads()
    manifest.update({
        "vocab_size": vocab.size,
        "classes": classes,
        "coverage": emb.coverage,
        "parameters": result.best_params.total_parameters(),
        "best_dev_accuracy": result.best_dev_accuracy,
        "best_step": result.best_step,
    })
    with open(out / "manifest.json", "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")

    print(f"best dev root accuracy {result.best_dev_accuracy:.4f} "
          f"at step {result.best_step}")
    return 0


def _load_model(checkpoint_path):
    params = load_checkpoint(checkpoint_path)
    vocab_path = Path(checkpoint_path).parent / "vocab.txt"
    if not vocab_path.exists():
        raise UsageError(f"missing vocabulary file {vocab_path}")
    vocab = load_vocab(vocab_path)
    if vocab.size != params.vocab_size:
        raise CheckpointError(
            f"vocabulary size {vocab.size} does not match checkpoint "
            f"({params.vocab_size})")
    return params, vocab


def run_eval(args) -> int:
    params, vocab = _load_model(args.checkpoint)
    split_path = Path(args.data) / f"{args.split}.txt"
    _require(split_path.exists(), f"missing treebank file {split_path}")
    corpus = load_corpus(split_path, args.task)
    metrics = evaluate(corpus, params, vocab, attention_norm=args.attention_norm,
                       threads=args.threads or 1)
    print(f"root_accuracy {metrics.root_accuracy:.4f}")
    print(f"node_accuracy {metrics.node_accuracy:.4f}")
    return 0


def run_predict(args) -> int:
    params, vocab = _load_model(args.checkpoint)
    if args.show_attention and not params.attention:
        raise UsageError("--show-attention requires a checkpoint trained "
                         "with --attention")
    failures = 0
    with open(args.input, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                tree = parse_tree(line)
            except TreebankError as err:
                print(f"line {lineno}: {err}", file=sys.stderr)
                failures += 1
                continue
            tape = Tape()
            graph = build_sentence_graph(tape, tree, params, vocab,
                                         attention_norm=args.attention_norm)
            dist = graph.preds.probs[0]
            fields = [str(graph.preds.labels[0]),
                      " ".join(f"{p:.4f}" for p in dist)]
            if args.show_attention:
                weights = tape.value(graph.attn.weights)
                fields.append(" ".join(f"{w:.4f}" for w in weights))
            print("\t".join(fields))
    return 1 if failures else 0


def run_gradcheck(args) -> int:
    _require(args.dim > 0, "--dim must be positive")
    _require(args.trees >= 1, "--trees must be at least 1")
    worst = 0.0
    for i in range(args.trees):
        err = gradient_check(args.variant, args.attention, args.dim,
                             seed=args.seed + i,
                             attention_norm=args.attention_norm)
        worst = max(worst, err)
    ok = worst < GRADCHECK_THRESHOLD
    print(f"{'PASS' if ok else 'FAIL'} max_rel_err={worst:.3e} "
          f"(threshold {GRADCHECK_THRESHOLD:.0e})")
    return 0 if ok else 1


def run_params(args) -> int:
    _require(args.dim > 0, "--dim must be positive")
    _require(args.vocab > 0, "--vocab must be positive")
    _require(args.classes >= 2, "--classes must be at least 2")
    items = itemize_parameters(args.variant, args.dim, args.vocab, args.classes,
                               args.children, args.attention)
    name_w = max(len("reference total"),
                 max(len(name) for name, _, _ in items))
    print(f"{'tensor':<{name_w}}  {'shape':>12}  {'parameters':>12}")
    for name, shape, count in items:
        pretty = "x".join(str(s) for s in shape)
        print(f"{name:<{name_w}}  {pretty:>12}  {count:>12}")
    total = sum(count for _, _, count in items)
    print(f"{'total':<{name_w}}  {'':>12}  {total:>12}")

    key = (args.variant, args.attention)
    if (args.dim, args.vocab, args.classes, args.children) == REFERENCE_DIMS:
        reference = REFERENCE_TOTALS[key]
        print(f"{'reference total':<{name_w}}  {'':>12}  {reference:>12}")
        gap = reference - total
        if gap:
            print(f"{'discrepancy':<{name_w}}  {'':>12}  {gap:>12}")
            print(f"note: the reference counts exceed the implemented update rules "
                  f"by {DOWNWARD_COUNT_GAP} = 3*d^2, consistent with the "
                  f"downward gates also receiving an input-term matrix set; "
                  f"this audit reports the rules as implemented")
        else:
            print("matches the reference total exactly")
    return 0


if __name__ == "__main__":
    sys.exit(main())
