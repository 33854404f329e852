import math

import numpy as np
import pytest

from arbogru import autodiff as ad
from arbogru.autodiff import Tape
from arbogru.model import TapeBinding, init_params, predict_nodes, upward_pass
from arbogru.training import (GradTable, OptimizerState, SplitCorpora,
                              TrainConfig, TrainingError, adagrad_step,
                              add_l2_gradients, apply_dropout,
                              build_sentence_graph, clamp_counter,
                              compute_loss, dropout_mask, evaluate,
                              gradient_check, l2_penalty, max_relative_error,
                              sentence_gradients, train)
from arbogru.treebank import Corpus, parse_tree, to_binary_task

from conftest import random_params, synth_corpus, synth_tree, synth_vocab

VARIANT_CASES = [("treegru", False), ("treegru", True),
                 ("treebigru", False), ("treebigru", True)]


# ---------------------------------------------------------------------------
# loss

def test_loss_perfect_prediction_is_zero():
    dist = np.array([0.0, 1.0, 0.0])
    assert compute_loss([dist], [1]) == pytest.approx(0.0)


def test_loss_uniform_five_class():
    dist = np.full(5, 0.2)
    assert compute_loss([dist], [3]) == pytest.approx(math.log(5.0))


def test_loss_additive_over_nodes():
    dist = np.full(5, 0.2)
    assert compute_loss([dist, dist], [0, 4]) == pytest.approx(2.0 * math.log(5.0))


def test_loss_clamps_zero_probability():
    clamp_counter.reset()
    dist = np.array([1.0, 0.0])
    value = compute_loss([dist], [1])
    assert value == pytest.approx(-math.log(1e-12))
    assert clamp_counter.count == 1


def test_loss_includes_l2_penalty():
    vocab = synth_vocab()
    params = random_params("treegru", False, 3, vocab, seed=5)
    dist = np.full(5, 0.2)
    bare = compute_loss([dist], [0])
    with_penalty = compute_loss([dist], [0], params=params, l2=0.01,
                                touched_rows=[1, 2])
    assert with_penalty == pytest.approx(bare + l2_penalty(params, 0.01, [1, 2]))


def test_l2_penalty_skips_biases_and_untouched_rows():
    vocab = synth_vocab()
    params = random_params("treegru", False, 3, vocab, seed=6)
    value = l2_penalty(params, 2.0, touched_rows=[0])
    expected = 0.0
    for name, t in params.tensors.items():
        if name == "emb" or name.startswith("b"):
            continue
        expected += np.sum(t * t)
    expected += np.sum(params.tensors["emb"][0] ** 2)
    assert value == pytest.approx(expected)  # l2/2 * 2.0 == 1.0 * sum


# ---------------------------------------------------------------------------
# optimizer

def make_tiny_params():
    vocab = synth_vocab()
    return init_params("treegru", 2, vocab, 5, 2, np.random.default_rng(0))


def test_adagrad_first_step_magnitude():
    params = make_tiny_params()
    opt = OptimizerState.for_params(params)
    g = np.full_like(params.tensors["b_z"], 3.0)
    before = params.tensors["b_z"].copy()
    adagrad_step(params, GradTable(dense={"b_z": g}), opt, learning_rate=0.01)
    step = before - params.tensors["b_z"]
    assert np.allclose(step, 0.01, atol=1e-8)  # g / sqrt(g^2) = sign(g)


def test_adagrad_zero_gradient_is_identity():
    params = make_tiny_params()
    opt = OptimizerState.for_params(params)
    before = params.tensors["U_z"].copy()
    adagrad_step(params, GradTable(dense={"U_z": np.zeros_like(before)}), opt, 0.01)
    assert np.array_equal(params.tensors["U_z"], before)
    assert np.all(opt.accumulators["U_z"] == 0.0)


def test_adagrad_two_step_hand_values():
    params = make_tiny_params()
    opt = OptimizerState.for_params(params)
    name = "b_r"
    g1 = np.full_like(params.tensors[name], 3.0)
    g2 = np.full_like(params.tensors[name], 4.0)
    adagrad_step(params, GradTable(dense={name: g1}), opt, 0.01)
    before = params.tensors[name].copy()
    adagrad_step(params, GradTable(dense={name: g2}), opt, 0.01)
    assert np.allclose(opt.accumulators[name], 25.0)
    assert np.allclose(before - params.tensors[name], 0.01 * 4.0 / 5.0, atol=1e-8)


def test_adagrad_accumulators_monotone():
    params = make_tiny_params()
    opt = OptimizerState.for_params(params)
    rng = np.random.default_rng(1)
    prev = opt.accumulators["U_z"].copy()
    for _ in range(5):
        g = rng.normal(size=params.tensors["U_z"].shape)
        adagrad_step(params, GradTable(dense={"U_z": g}), opt, 0.01)
        assert np.all(opt.accumulators["U_z"] >= prev)
        prev = opt.accumulators["U_z"].copy()


def test_adagrad_sparse_embedding_rows():
    params = make_tiny_params()
    opt = OptimizerState.for_params(params)
    emb_before = params.tensors["emb"].copy()
    g = np.array([1.0, -1.0])
    adagrad_step(params, GradTable(emb_rows={2: g}), opt, 0.01)
    changed = np.where(np.any(params.tensors["emb"] != emb_before, axis=1))[0]
    assert list(changed) == [2]


def test_adagrad_rejects_nonfinite_and_leaves_params_untouched():
    params = make_tiny_params()
    opt = OptimizerState.for_params(params)
    snapshot = {k: v.copy() for k, v in params.tensors.items()}
    bad = GradTable(dense={"U_z": np.full_like(params.tensors["U_z"], np.nan),
                           "b_z": np.ones_like(params.tensors["b_z"])})
    with pytest.raises(TrainingError, match="U_z"):
        adagrad_step(params, bad, opt, 0.01)
    for name, t in params.tensors.items():
        assert np.array_equal(t, snapshot[name])


# ---------------------------------------------------------------------------
# dropout

def test_dropout_zero_probability_identity():
    rng = np.random.default_rng(0)
    vec = rng.normal(size=32)
    assert np.array_equal(apply_dropout(vec, 0.0, rng, training=True), vec)
    assert np.array_equal(apply_dropout(vec, 0.0, rng, training=False), vec)


def test_dropout_eval_mode_identity():
    rng = np.random.default_rng(0)
    vec = rng.normal(size=32)
    assert apply_dropout(vec, 0.9, rng, training=False) is vec


def test_dropout_statistics():
    rng = np.random.default_rng(123)
    vec = np.ones(1_000_000)
    dropped = apply_dropout(vec, 0.5, rng, training=True)
    survivors = dropped[dropped != 0.0]
    assert len(survivors) / len(vec) == pytest.approx(0.5, abs=0.01)
    assert survivors.mean() == pytest.approx(2.0, abs=0.02)


def test_dropout_rejects_bad_probability():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        apply_dropout(np.ones(3), 1.0, rng, training=True)
    with pytest.raises(ValueError):
        dropout_mask(3, -0.1, rng)


# ---------------------------------------------------------------------------
# gradients

def test_l2_only_gradient_matches_fd_exactly():
    # the penalty is quadratic, so central differences are exact
    vocab = synth_vocab()
    params = random_params("treegru", False, 3, vocab, seed=9)
    l2 = 1e-4
    touched = [0, 1]
    eps = 1e-5
    for name in ("U_z", "W_s"):
        t = params.tensors[name]
        analytic = l2 * t
        fd = np.zeros_like(t)
        flat, fdf = t.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            hi = l2_penalty(params, l2, touched)
            flat[i] = saved - eps
            lo = l2_penalty(params, l2, touched)
            flat[i] = saved
            fdf[i] = (hi - lo) / (2 * eps)
        np.testing.assert_allclose(analytic, fd, rtol=1e-8, atol=1e-8)


def test_batch_gradient_equals_sum_of_sentence_gradients():
    # one tape holding two sentences must agree with per-sentence tapes
    vocab = synth_vocab()
    params = random_params("treegru", False, 6, vocab, seed=3)
    rng = np.random.default_rng(9)
    trees = [synth_tree(rng, max_nodes=9), synth_tree(rng, max_nodes=9)]

    summed = GradTable()
    for tree in trees:
        _, table = sentence_gradients(tree, params, vocab)
        summed.add(table)

    tape = Tape()
    binding = TapeBinding(tape, params)
    losses = []
    for tree in trees:
        states = upward_pass(tree, params, tape, vocab, binding=binding)
        preds = predict_nodes(states, params, tape)
        for j, node in enumerate(states.index.nodes):
            if node.supervised:
                losses.append(ad.softmax_cross_entropy(tape, preds.logits[j],
                                                       node.label))
    joint = ad.vsum(tape, losses)
    grads = ad.backward(tape, joint)
    # absent entries mean a zero gradient (e.g. U_r never reaches the loss:
    # leaves do not gate children and internal nodes have zero input vectors)
    for name, ref in binding.refs.items():
        joint_g = grads[ref.index]
        joint_g = np.zeros(ref.shape) if joint_g is None else joint_g
        sent_g = summed.dense.get(name, np.zeros(ref.shape))
        np.testing.assert_allclose(joint_g, sent_g, rtol=0, atol=1e-10)
    for row, ref in binding.emb_rows.items():
        np.testing.assert_allclose(grads[ref.index], summed.emb_rows[row],
                                   rtol=0, atol=1e-10)


@pytest.mark.parametrize("variant,attention", VARIANT_CASES)
def test_gradient_check_all_variants(variant, attention):
    err = gradient_check(variant, attention, dim=8, seed=7)
    assert err < 1e-4


def test_gradient_check_rejects_large_dim():
    with pytest.raises(ValueError):
        gradient_check("treegru", False, dim=64)


def test_max_relative_error_floors_small_values():
    a = np.array([1e-9, 1.0])
    b = np.array([0.0, 1.0])
    assert max_relative_error(a, b) < 1e-5


# ---------------------------------------------------------------------------
# training loop

def tiny_setup(variant="treegru", attention=False, n=12, dim=6, seed=0):
    corpus = synth_corpus(n, seed=seed, max_nodes=11)
    dev = synth_corpus(max(2, n // 3), seed=seed + 1, max_nodes=11)
    vocab = synth_vocab()
    rng = np.random.default_rng(seed)
    params = init_params(variant, dim, vocab, 5, 2, rng, attention=attention)
    return SplitCorpora(corpus, dev), params, vocab


def test_train_is_deterministic():
    config = TrainConfig(variant="treegru", dim=6, batch_size=4, epochs=2,
                         dropout=0.5, seed=11, threads=1)
    runs = []
    for _ in range(2):
        data, params, vocab = tiny_setup(seed=2)
        result = train(config, data, params, vocab)
        runs.append(result)
    strip = lambda lines: ["\t".join(l.split("\t")[:4]) for l in lines]
    assert strip(runs[0].log_lines) == strip(runs[1].log_lines)
    for name in runs[0].final_params.tensors:
        np.testing.assert_array_equal(runs[0].final_params.tensors[name],
                                      runs[1].final_params.tensors[name])
        np.testing.assert_array_equal(runs[0].best_params.tensors[name],
                                      runs[1].best_params.tensors[name])


def test_train_returns_best_dev_checkpoint():
    config = TrainConfig(variant="treegru", dim=6, batch_size=4, epochs=3,
                         dropout=0.3, seed=5, threads=1)
    data, params, vocab = tiny_setup(seed=4)
    result = train(config, data, params, vocab)
    logged = [float(line.split("\t")[3]) for line in result.log_lines]
    assert result.best_dev_accuracy == pytest.approx(max(logged))
    best_eval = evaluate(data.dev, result.best_params, vocab)
    final_eval = evaluate(data.dev, result.final_params, vocab)
    assert best_eval.root_accuracy == pytest.approx(result.best_dev_accuracy)
    assert best_eval.root_accuracy >= final_eval.root_accuracy


def test_train_evaluation_schedule():
    # 12 sentences, batch 4 -> 3 batches; ceil(3/4)=1 -> eval after every batch
    config = TrainConfig(variant="treegru", dim=4, batch_size=4, epochs=2,
                         dropout=0.0, seed=1, threads=1)
    data, params, vocab = tiny_setup(seed=6, dim=4)
    result = train(config, data, params, vocab)
    assert len(result.log_lines) == 6
    steps = [int(line.split("\t")[1]) for line in result.log_lines]
    assert steps == [1, 2, 3, 4, 5, 6]


@pytest.mark.parametrize("variant,attention", VARIANT_CASES)
def test_loss_decreases_over_first_epochs(variant, attention):
    config = TrainConfig(variant=variant, attention=attention, dim=8,
                         learning_rate=0.05, batch_size=6, epochs=5,
                         dropout=0.0, l2=0.0, seed=3, threads=1,
                         evals_per_epoch=1)
    data, params, vocab = tiny_setup(variant, attention, n=12, dim=8, seed=8)
    result = train(config, data, params, vocab)
    losses = [float(line.split("\t")[2]) for line in result.log_lines]
    assert losses[-1] < losses[0]


def test_train_propagates_nonfinite_loss():
    data, params, vocab = tiny_setup(seed=9)
    params.tensors["emb"][:] = np.nan
    config = TrainConfig(variant="treegru", dim=6, batch_size=4, epochs=1,
                         dropout=0.0, seed=1, threads=1)
    with pytest.raises(TrainingError, match="sentence"):
        train(config, data, params, vocab)


def test_threaded_training_matches_sequential():
    config_seq = TrainConfig(variant="treegru", dim=5, batch_size=6, epochs=2,
                             dropout=0.5, seed=13, threads=1)
    config_par = TrainConfig(variant="treegru", dim=5, batch_size=6, epochs=2,
                             dropout=0.5, seed=13, threads=4)
    data1, params1, vocab = tiny_setup(seed=12, dim=5)
    data2, params2, _ = tiny_setup(seed=12, dim=5)
    r1 = train(config_seq, data1, params1, vocab)
    r2 = train(config_par, data2, params2, vocab)
    for name in r1.final_params.tensors:
        np.testing.assert_array_equal(r1.final_params.tensors[name],
                                      r2.final_params.tensors[name])


# ---------------------------------------------------------------------------
# evaluation

def test_evaluate_always_right_class():
    vocab = synth_vocab()
    params = init_params("treegru", 4, vocab, 5, 2, np.random.default_rng(0))
    params.tensors["W_s"][:] = 0.0
    params.tensors["b_s"][:] = 0.0
    params.tensors["b_s"][3] = 5.0  # force every prediction to class 3
    trees = [parse_tree("(3 (2 good) (2 movie))"), parse_tree("(3 nice)")]
    corpus = Corpus(trees, "dev", "fine", 5)
    metrics = evaluate(corpus, params, vocab)
    assert metrics.root_accuracy == 1.0
    node_labels = [2, 2, 3, 3]
    assert metrics.node_accuracy == pytest.approx(
        sum(1 for l in node_labels if l == 3) / len(node_labels))


def test_evaluate_deterministic():
    vocab = synth_vocab()
    params = random_params("treegru", True, 5, vocab, seed=15)
    corpus = synth_corpus(8, seed=3)
    one = evaluate(corpus, params, vocab)
    two = evaluate(corpus, params, vocab)
    assert one == two


def test_evaluate_rejects_class_mismatch():
    vocab = synth_vocab()
    params = init_params("treegru", 4, vocab, 2, 2, np.random.default_rng(0))
    corpus = synth_corpus(3, seed=1)  # fine-grained, 5 classes
    with pytest.raises(ValueError, match="class"):
        evaluate(corpus, params, vocab)


def test_evaluate_binary_task_skips_unsupervised_nodes():
    vocab = synth_vocab()
    params = init_params("treegru", 4, vocab, 2, 2, np.random.default_rng(0))
    fine = Corpus([parse_tree("(4 (2 the) (3 good))")], "dev", "fine", 5)
    binary = to_binary_task(fine)
    metrics = evaluate(binary, params, vocab)
    # 3 nodes, 1 unsupervised: accuracy denominators must use 2 and 1
    assert 0.0 <= metrics.node_accuracy <= 1.0
    assert metrics.root_accuracy in (0.0, 1.0)


def test_eval_mode_ignores_dropout_config():
    # dropout is a training-only concern; evaluation never draws masks
    vocab = synth_vocab()
    params = random_params("treegru", False, 5, vocab, seed=20)
    corpus = synth_corpus(5, seed=5)
    assert evaluate(corpus, params, vocab) == evaluate(corpus, params, vocab)


def test_build_sentence_graph_loss_matches_compute_loss():
    vocab = synth_vocab()
    params = random_params("treegru", False, 5, vocab, seed=21)
    rng = np.random.default_rng(2)
    tree = synth_tree(rng, max_nodes=9)
    tape = Tape()
    graph = build_sentence_graph(tape, tree, params, vocab)
    nodes = graph.states.index.nodes
    dists = [graph.preds.probs[j] for j, n in enumerate(nodes) if n.supervised]
    labels = [n.label for n in nodes if n.supervised]
    assert float(tape.value(graph.loss)) == pytest.approx(
        compute_loss(dists, labels), rel=1e-12)
