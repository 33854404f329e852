"""Loss assembly, AdaGrad optimization, dropout, and the training loop.

The objective is the summed negative log-likelihood of every supervised
node label in a minibatch plus an L2 penalty (l2/2)*||theta||^2 over the
weight matrices and the embedding rows the batch touched; bias vectors
are exempt.  Optimization is plain AdaGrad.  Training shuffles the
sentences every epoch, evaluates dev root accuracy a fixed number of
times per epoch, and keeps the parameters with the best dev score.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import model as m
from .autodiff import Tape
from .embeddings import Vocabulary, build_vocab
from .treebank import Corpus, LabeledTree, random_tree

log = logging.getLogger("arbogru")

ADAGRAD_EPS = 1e-8
PROB_FLOOR = 1e-12
GRAD_NORM_WARN = 1e3
FD_EPSILON = 1e-5
REL_ERR_FLOOR = 1e-3  # below this magnitude FD noise dominates; compare absolutely

LOG_HEADER = "epoch\tstep\ttrain_loss\tdev_root_acc\twall_seconds"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Complete experiment description; defaults are the reference recipe."""

    variant: str = m.VARIANT_TREEGRU
    attention: bool = False
    attention_norm: str = "softmax"
    task: str = "fine"
    dim: int = 300
    learning_rate: float = 0.01
    batch_size: int = 25
    l2: float = 1e-4
    dropout: float = 0.5
    epochs: int = 40
    evals_per_epoch: int = 4
    seed: int = 1
    max_children: int = 2
    precision: str = "f64"
    threads: Optional[int] = None  # worker cap; None = sequential (see note)

    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def resolved_threads(self) -> int:
        # Per-sentence tape building is pure Python, so the GIL makes
        # thread pools a measured slowdown; stay sequential unless the
        # caller explicitly asks for workers.  Results are identical
        # either way (ordered merge).
        if self.threads is None:
            return 1
        return max(1, min(self.threads, os.cpu_count() or 1))


@dataclass
class SplitCorpora:
    train: Corpus
    dev: Corpus
    test: Optional[Corpus] = None


@dataclass
class Metrics:
    root_accuracy: float
    node_accuracy: float
    loss: float  # mean per-sentence data loss, penalty excluded


@dataclass
class TrainResult:
    best_params: m.ModelParams
    best_dev_accuracy: float
    best_step: int
    final_params: m.ModelParams
    log_lines: list[str]


@dataclass
class OptimizerState:
    """Per-parameter accumulated squared gradients; grows monotonically."""

    accumulators: dict[str, np.ndarray]
    eps: float = ADAGRAD_EPS

    @classmethod
    def for_params(cls, params: m.ModelParams) -> "OptimizerState":
        return cls({name: np.zeros_like(t) for name, t in params.tensors.items()})


@dataclass
class GradTable:
    """Gradients keyed like ModelParams; embedding rows stay sparse."""

    dense: dict[str, np.ndarray] = field(default_factory=dict)
    emb_rows: dict[int, np.ndarray] = field(default_factory=dict)

    def add(self, other: "GradTable") -> None:
        for name, g in other.dense.items():
            held = self.dense.get(name)
            self.dense[name] = g if held is None else held + g
        for row, g in other.emb_rows.items():
            held = self.emb_rows.get(row)
            self.emb_rows[row] = g if held is None else held + g

    def norm(self) -> float:
        total = 0.0
        for g in self.dense.values():
            total += float(np.sum(g * g))
        for g in self.emb_rows.values():
            total += float(np.sum(g * g))
        return math.sqrt(total)


# ---------------------------------------------------------------------------
# dropout

def dropout_mask(size: int, p_drop: float, rng, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout mask: zero with probability p, survivors 1/(1-p)."""
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"dropout probability {p_drop} outside [0, 1)")
    if p_drop == 0.0:
        return np.ones(size, dtype=dtype)
    keep = rng.random(size) >= p_drop
    return keep.astype(dtype) / (1.0 - p_drop)


def apply_dropout(vec: np.ndarray, p_drop: float, rng, training: bool) -> np.ndarray:
    """Inverted dropout on a vector; the identity in evaluation mode."""
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"dropout probability {p_drop} outside [0, 1)")
    if not training or p_drop == 0.0:
        return vec
    return vec * dropout_mask(vec.shape[0], p_drop, rng, vec.dtype)


# ---------------------------------------------------------------------------
# loss

class ClampCounter:
    """Counts gold-label probabilities clamped away from zero."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clamp_counter = ClampCounter()


def compute_loss(distributions, gold_labels, params: Optional[m.ModelParams] = None,
                 l2: float = 0.0, touched_rows=()) -> float:
    """Summed negative log-likelihood of the gold labels, plus the L2 penalty.

    Takes one probability vector per supervised node.  A zero
    probability at a gold label is clamped to 1e-12; clamps are counted
    on ``clamp_counter`` and logged.
    """
    if len(distributions) != len(gold_labels):
        raise ValueError("one distribution per gold label required")
    total = 0.0
    clamped = 0
    for probs, gold in zip(distributions, gold_labels):
        p = float(probs[gold])
        if p < PROB_FLOOR:
            p = PROB_FLOOR
            clamped += 1
        total -= math.log(p)
    if clamped:
        clamp_counter.count += clamped
        log.warning("clamped %d zero gold-label probabilities", clamped)
    if params is not None and l2 > 0.0:
        total += l2_penalty(params, l2, touched_rows)
    return total


def l2_penalty(params: m.ModelParams, l2: float, touched_rows=()) -> float:
    """(l2/2) * squared norm of weight matrices plus touched embedding rows."""
    if l2 <= 0.0:
        return 0.0
    total = 0.0
    for name, t in params.tensors.items():
        if name == "emb" or m.is_bias(name):
            continue
        total += float(np.sum(t * t))
    emb = params.tensors["emb"]
    for row in touched_rows:
        total += float(np.sum(emb[row] * emb[row]))
    return 0.5 * l2 * total


def add_l2_gradients(grads: GradTable, params: m.ModelParams, l2: float) -> None:
    """Add l2 * theta for every weight matrix and touched embedding row."""
    if l2 <= 0.0:
        return
    for name, t in params.tensors.items():
        if name == "emb" or m.is_bias(name):
            continue
        held = grads.dense.get(name)
        grads.dense[name] = l2 * t if held is None else held + l2 * t
    emb = params.tensors["emb"]
    for row in list(grads.emb_rows):
        grads.emb_rows[row] = grads.emb_rows[row] + l2 * emb[row]


# ---------------------------------------------------------------------------
# optimizer

def adagrad_step(params: m.ModelParams, grads: GradTable, opt: OptimizerState,
                 learning_rate: float) -> m.ModelParams:
    """In-place update: acc += g^2; theta -= lr * g / (sqrt(acc) + eps).

    The step aborts (nothing mutated) if any gradient is non-finite.
    """
    for name, g in grads.dense.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    for row, g in grads.emb_rows.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for embedding row {row}")

    for name, g in grads.dense.items():
        acc = opt.accumulators[name]
        acc += g * g
        params.tensors[name] -= learning_rate * g / (np.sqrt(acc) + opt.eps)
    emb_acc = opt.accumulators["emb"]
    emb = params.tensors["emb"]
    for row, g in grads.emb_rows.items():
        emb_acc[row] += g * g
        emb[row] -= learning_rate * g / (np.sqrt(emb_acc[row]) + opt.eps)
    return params


# ---------------------------------------------------------------------------
# per-sentence graphs

@dataclass
class SentenceGraph:
    states: m.NodeStates
    attn: Optional[m.AttentionResult]
    preds: m.NodePredictions
    loss: Optional[ad.ValueRef]  # summed node NLL; None if nothing is supervised


def build_sentence_graph(tape: Tape, tree: LabeledTree, params: m.ModelParams,
                         vocab: Vocabulary, attention_norm: str = "softmax",
                         train_mode: bool = False, dropout: float = 0.0,
                         rng=None) -> SentenceGraph:
    """Forward graph for one sentence: passes, classifiers, and data loss."""
    input_mask = None
    if train_mode and dropout > 0.0:
        if rng is None:
            raise ValueError("dropout requires a random generator")
        dtype = params.dtype

        def input_mask(size, _rng=rng, _p=dropout, _dt=dtype):
            return dropout_mask(size, _p, _rng, _dt)

    states = m.upward_pass(tree, params, tape, vocab, input_mask=input_mask)
    if params.variant == m.VARIANT_TREEBIGRU:
        m.downward_pass(states, params, tape)
    attn = None
    if params.attention:
        attn = m.attention_pool(states, params, tape, norm=attention_norm)
    preds = m.predict_nodes(states, params, tape, attn=attn, feature_mask=input_mask)

    losses = [ad.softmax_cross_entropy(tape, preds.logits[j], node.label)
              for j, node in enumerate(states.index.nodes) if node.supervised]
    loss = None
    if losses:
        loss = losses[0] if len(losses) == 1 else ad.vsum(tape, losses)
    return SentenceGraph(states, attn, preds, loss)


def sentence_gradients(tree: LabeledTree, params: m.ModelParams, vocab: Vocabulary,
                       attention_norm: str = "softmax", train_mode: bool = False,
                       dropout: float = 0.0, rng=None) -> tuple[float, GradTable]:
    """One forward/backward sweep; returns (data loss, gradient table)."""
    tape = Tape()
    graph = build_sentence_graph(tape, tree, params, vocab,
                                 attention_norm=attention_norm,
                                 train_mode=train_mode, dropout=dropout, rng=rng)
    table = GradTable()
    if graph.loss is None:
        return 0.0, table
    loss_value = float(tape.value(graph.loss))
    grads = ad.backward(tape, graph.loss)
    binding = graph.states.binding
    for name, ref in binding.refs.items():
        g = grads[ref.index]
        if g is not None:
            table.dense[name] = g
    for row, ref in binding.emb_rows.items():
        g = grads[ref.index]
        if g is not None:
            table.emb_rows[row] = g
    return loss_value, table


# ---------------------------------------------------------------------------
# training loop

def train(config: TrainConfig, data: SplitCorpora, params: m.ModelParams,
          vocab: Vocabulary,
          log_fn: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Run the full schedule; return the best-dev checkpoint and the log.

    One log line per evaluation, tab separated: epoch, global step, mean
    train loss since the previous evaluation, dev root accuracy, wall
    seconds.  Fixed seeds reproduce everything but the wall clock.
    """
    rng = np.random.default_rng(config.seed)
    opt = OptimizerState.for_params(params)
    sentences = data.train.trees
    if not sentences:
        raise TrainingError("empty training corpus")
    n_batches = math.ceil(len(sentences) / config.batch_size)
    eval_every = max(1, math.ceil(n_batches / config.evals_per_epoch))
    workers = config.resolved_threads()

    lines: list[str] = []

    def emit(line):
        lines.append(line)
        if log_fn is not None:
            log_fn(line)

    best = params.copy()
    best_acc = -1.0
    best_step = 0
    global_step = 0
    losses_since_eval: list[float] = []
    start = time.perf_counter()

    def run_eval(epoch):
        nonlocal best, best_acc, best_step
        metrics = evaluate(data.dev, params, vocab,
                           attention_norm=config.attention_norm, threads=workers)
        if losses_since_eval:
            mean_loss = sum(losses_since_eval) / len(losses_since_eval)
        else:
            mean_loss = float("nan")
        losses_since_eval.clear()
        emit(f"{epoch}\t{global_step}\t{mean_loss:.6f}\t"
             f"{metrics.root_accuracy:.6f}\t{time.perf_counter() - start:.3f}")
        if metrics.root_accuracy > best_acc:
            best_acc = metrics.root_accuracy
            best = params.copy()
            best_step = global_step

    order = np.arange(len(sentences))
    for epoch in range(1, config.epochs + 1):
        rng.shuffle(order)
        evaluated_last = False
        for b in range(n_batches):
            ids = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch_loss = _train_batch(ids, sentences, params, vocab, opt,
                                      config, rng, workers)
            losses_since_eval.append(batch_loss)
            global_step += 1
            evaluated_last = (b + 1) % eval_every == 0
            if evaluated_last:
                run_eval(epoch)
        if not evaluated_last:
            run_eval(epoch)

    return TrainResult(best, best_acc, best_step, params, lines)


def _train_batch(ids, sentences, params, vocab, opt, config, rng, workers) -> float:
    # per-sentence generators are seeded up front so thread scheduling
    # cannot change the dropout masks
    seeds = rng.integers(0, 2 ** 63 - 1, size=len(ids))

    def one(pos):
        idx = int(ids[pos])
        sent_rng = np.random.default_rng(seeds[pos])
        loss, table = sentence_gradients(
            sentences[idx], params, vocab, attention_norm=config.attention_norm,
            train_mode=True, dropout=config.dropout, rng=sent_rng)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at sentence index {idx}")
        return loss, table

    results = _parallel_map(one, range(len(ids)), workers)

    total = GradTable()
    batch_loss = 0.0
    for loss, table in results:
        batch_loss += loss
        total.add(table)
    batch_loss += l2_penalty(params, config.l2, total.emb_rows.keys())
    add_l2_gradients(total, params, config.l2)
    gnorm = total.norm()
    if gnorm > GRAD_NORM_WARN:
        log.warning("gradient norm %.3e exceeds %.0e (no clipping applied)",
                    gnorm, GRAD_NORM_WARN)
    adagrad_step(params, total, opt, config.learning_rate)
    return batch_loss


def _parallel_map(fn, items, workers: int) -> list:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# evaluation

def evaluate(corpus: Corpus, params: m.ModelParams, vocab: Vocabulary,
             attention_norm: str = "softmax", threads: int = 1) -> Metrics:
    """Dropout-free metrics: root accuracy over sentences, node accuracy
    over supervised nodes, mean per-sentence data loss."""
    if corpus.class_count != params.classes:
        raise ValueError(f"corpus has {corpus.class_count} classes, "
                         f"model has {params.classes}")
    if not corpus.trees:
        raise ValueError("cannot evaluate an empty corpus")

    def one(tree):
        tape = Tape()
        graph = build_sentence_graph(tape, tree, params, vocab,
                                     attention_norm=attention_norm)
        nodes = graph.states.index.nodes
        root_ok = int(nodes[0].supervised and graph.preds.labels[0] == nodes[0].label)
        supervised = hits = 0
        for j, node in enumerate(nodes):
            if node.supervised:
                supervised += 1
                hits += int(graph.preds.labels[j] == node.label)
        loss = float(tape.value(graph.loss)) if graph.loss is not None else 0.0
        return root_ok, hits, supervised, loss

    results = _parallel_map(one, corpus.trees, threads)
    n = len(corpus.trees)
    node_total = sum(r[2] for r in results)
    return Metrics(
        root_accuracy=sum(r[0] for r in results) / n,
        node_accuracy=sum(r[1] for r in results) / max(1, node_total),
        loss=sum(r[3] for r in results) / n,
    )


# ---------------------------------------------------------------------------
# gradient checking

_CHECK_TOKENS = ("brisk", "gloomy", "tender", "hollow", "vivid", "flat", "warm")


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERR_FLOOR)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def gradient_check(variant: str, attention: bool, dim: int,
                   tree: Optional[LabeledTree] = None, seed: int = 0,
                   l2: float = 1e-4, attention_norm: str = "softmax") -> float:
    """Compare tape gradients of the full objective against central finite
    differences over every parameter element; returns the max relative error.

    The objective is the sentence data loss plus the L2 penalty, without
    dropout.  Parameters are drawn uniformly (the identity-based init is
    too symmetric to exercise every path).
    """
    if dim > 16:
        raise ValueError("gradient checks are restricted to dim <= 16")
    rng = np.random.default_rng(seed)
    if tree is None:
        tree = random_tree(rng, _CHECK_TOKENS)
    vocab = build_vocab(Corpus([tree], "check", "fine", 5))
    params = m.init_params(variant, dim, vocab, 5, 2, rng, attention=attention)
    for name, t in params.tensors.items():
        params.tensors[name] = rng.uniform(-0.5, 0.5, t.shape)

    tape = Tape()
    graph = build_sentence_graph(tape, tree, params, vocab,
                                 attention_norm=attention_norm)
    binding = graph.states.binding
    touched = sorted(binding.emb_rows.keys())
    base = ad.backward(tape, graph.loss)

    analytic: dict[str, np.ndarray] = {}
    for name, t in params.tensors.items():
        if name == "emb":
            g = np.zeros_like(t)
            for row, ref in binding.emb_rows.items():
                if base[ref.index] is not None:
                    g[row] += base[ref.index]
            for row in touched:
                g[row] += l2 * t[row]
        else:
            ref = binding.refs.get(name)
            if ref is not None and base[ref.index] is not None:
                g = np.array(base[ref.index])
            else:
                g = np.zeros_like(t)
            if not m.is_bias(name):
                g = g + l2 * t
        analytic[name] = g

    def objective() -> float:
        probe = Tape()
        got = build_sentence_graph(probe, tree, params, vocab,
                                   attention_norm=attention_norm)
        return float(probe.value(got.loss)) + l2_penalty(params, l2, touched)

    worst = 0.0
    for name, t in params.tensors.items():
        flat = t.reshape(-1)
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + FD_EPSILON
            hi = objective()
            flat[i] = saved - FD_EPSILON
            lo = objective()
            flat[i] = saved
            fd[i] = (hi - lo) / (2.0 * FD_EPSILON)
        worst = max(worst, max_relative_error(analytic[name].reshape(-1), fd))
    return worst
