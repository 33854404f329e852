"""Shared test helpers: deterministic synthetic corpora and random models.

The synthetic sentences are fully learnable: every word carries a fixed
sentiment score, leaves are labeled with their word's score, and each
internal node is labeled with the rounded mean of its children's
labels.  That keeps capacity/overfitting tests meaningful without
shipping a real treebank.
"""

import numpy as np
import pytest

from arbogru.embeddings import Vocabulary, build_vocab
from arbogru.model import init_params
from arbogru.treebank import Corpus, LabeledTree

WORD_SCORES = {
    "awful": 0, "dreadful": 0, "wretched": 0,
    "bad": 1, "dull": 1, "boring": 1,
    "the": 2, "a": 2, "movie": 2, "film": 2, "plot": 2, "score": 2,
    "good": 3, "solid": 3, "charming": 3,
    "great": 4, "superb": 4, "dazzling": 4,
}
WORDS = sorted(WORD_SCORES)


def synth_tree(rng, max_nodes=15) -> LabeledTree:
    tree, _ = _grow(rng, max_nodes)
    return tree


def _grow(rng, budget):
    if budget <= 2 or rng.random() < 0.35:
        word = WORDS[int(rng.integers(len(WORDS)))]
        return LabeledTree(WORD_SCORES[word], token=word), 1
    if budget >= 5 and rng.random() < 0.85:
        left, used_l = _grow(rng, (budget - 1) // 2)
        right, used_r = _grow(rng, budget - 1 - used_l)
        kids, used = (left, right), used_l + used_r
    else:
        child, used = _grow(rng, budget - 1)
        kids = (child,)
    label = int(np.floor(np.mean([k.label for k in kids]) + 0.5))
    return LabeledTree(label, children=kids), used + 1


def full_binary_tree(rng, depth) -> LabeledTree:
    """Every internal node has exactly two children."""
    if depth == 0:
        word = WORDS[int(rng.integers(len(WORDS)))]
        return LabeledTree(WORD_SCORES[word], token=word)
    kids = (full_binary_tree(rng, depth - 1), full_binary_tree(rng, depth - 1))
    label = int(np.floor(np.mean([k.label for k in kids]) + 0.5))
    return LabeledTree(label, children=kids)


def synth_corpus(n, seed, split="train", max_nodes=15) -> Corpus:
    rng = np.random.default_rng(seed)
    return Corpus([synth_tree(rng, max_nodes) for _ in range(n)],
                  split, "fine", 5)


def synth_vocab() -> Vocabulary:
    """Vocabulary covering every synthetic word."""
    trees = [LabeledTree(WORD_SCORES[w], token=w) for w in WORDS]
    return build_vocab(Corpus(trees, "vocab", "fine", 5))


def random_params(variant, attention, dim, vocab, classes=5, seed=0, scale=0.5):
    """Fully randomized parameters (uniform); good for oracle comparisons."""
    rng = np.random.default_rng(seed)
    params = init_params(variant, dim, vocab, classes, 2, rng, attention=attention)
    for name, tensor in params.tensors.items():
        params.tensors[name] = rng.uniform(-scale, scale, tensor.shape)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
