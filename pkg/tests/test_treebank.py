import numpy as np
import pytest

from arbogru.treebank import (Corpus, LabeledTree, TreebankError,
                              extract_phrases, iter_nodes, load_corpus,
                              max_arity, node_count, parse_tree, random_tree,
                              serialize_tree, to_binary_task)

from conftest import synth_corpus


def test_parse_two_leaf_tree():
    tree = parse_tree("(3 (2 good) (2 movie))")
    assert tree.label == 3
    assert not tree.is_leaf
    assert [c.token for c in tree.children] == ["good", "movie"]
    assert [c.label for c in tree.children] == [2, 2]


def test_parse_single_leaf():
    tree = parse_tree("(2 hello)")
    assert tree.label == 2
    assert tree.token == "hello"
    assert tree.children == ()


def test_parse_unbalanced():
    with pytest.raises(TreebankError, match="unbalanced"):
        parse_tree("(3 (2 a)")


def test_parse_error_names_offset():
    try:
        parse_tree("(3 (x a))")
    except TreebankError as err:
        assert err.offset == 4
        assert "offset 4" in str(err)
    else:
        pytest.fail("expected a parse error")


@pytest.mark.parametrize("line,fragment", [
    ("(9 hello)", "outside"),
    ("(x hello)", "non-integer"),
    ("(2)", "empty node"),
    ("(2   )", "empty node"),
    ("(2 hi) trailing", "trailing"),
    ("(-1 hi)", "outside"),
    ("", "empty input"),
    ("(2 hi))", "trailing"),
    ("(2 hi extra)", "expected .\\)."),
])
def test_parse_rejects(line, fragment):
    with pytest.raises(TreebankError, match=fragment):
        parse_tree(line)


def test_roundtrip_examples():
    for line in ["(3 (2 good) (2 movie))", "(2 hello)",
                 "(4 (3 (2 a) (3 fine)) (2 film))",
                 "(1 (1 (0 awful)))"]:
        tree = parse_tree(line)
        assert serialize_tree(tree) == line
        assert parse_tree(serialize_tree(tree)) == tree


def test_roundtrip_random_trees():
    rng = np.random.default_rng(7)
    words = ["alpha", "beta", "gamma", "Delta-9", "it's"]
    for _ in range(200):
        tree = random_tree(rng, words, max_nodes=13)
        line = serialize_tree(tree)
        again = parse_tree(line)
        assert again == tree
        assert serialize_tree(again) == line


def test_node_count_matches_open_parens():
    rng = np.random.default_rng(11)
    for _ in range(100):
        tree = random_tree(rng, ["x", "y"], max_nodes=11)
        assert node_count(tree) == serialize_tree(tree).count("(")


def test_whitespace_normalization():
    assert serialize_tree(parse_tree("( 3  (2 good)   (2 movie) )")) == \
        "(3 (2 good) (2 movie))"


def test_extract_phrases_postorder():
    tree = parse_tree("(3 (2 good) (2 movie))")
    assert extract_phrases(tree) == [("good", 2), ("movie", 2), ("good movie", 3)]
    assert extract_phrases(parse_tree("(2 hello)")) == [("hello", 2)]


def test_extract_phrases_counts_nodes():
    tree = parse_tree("(4 (3 (2 a) (3 fine)) (2 film))")
    assert node_count(tree) == 5
    assert len(extract_phrases(tree)) == 5


def test_labeled_tree_token_xor_children():
    with pytest.raises(ValueError):
        LabeledTree(2)
    with pytest.raises(ValueError):
        LabeledTree(2, token="x", children=(LabeledTree(2, token="y"),))


def test_load_corpus(tmp_path):
    path = tmp_path / "train.txt"
    path.write_text("(3 (2 good) (2 movie))\n(2 hello)\n\n(0 (0 awful) (2 plot))\n")
    corpus = load_corpus(path)
    assert len(corpus) == 3
    assert corpus.split_name == "train"
    assert corpus.task == "fine"
    assert corpus.class_count == 5


def test_load_corpus_empty_file(tmp_path):
    path = tmp_path / "dev.txt"
    path.write_text("")
    corpus = load_corpus(path)
    assert corpus.trees == []


def test_load_corpus_reports_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("(2 ok)\n(7 over)\n")
    with pytest.raises(TreebankError, match="line 2"):
        load_corpus(path)


def test_load_corpus_rejects_unknown_task(tmp_path):
    path = tmp_path / "train.txt"
    path.write_text("(2 hi)\n")
    with pytest.raises(ValueError):
        load_corpus(path, task="ternary")


def test_binary_task_drops_neutral_roots():
    lines = ["(3 (2 good) (2 movie))",   # positive root, kept
             "(2 (2 the) (2 film))",     # neutral root, dropped
             "(0 (1 bad) (2 plot))",     # negative root, kept
             "(4 great)"]
    corpus = Corpus([parse_tree(s) for s in lines], "train", "fine", 5)
    binary = to_binary_task(corpus)
    assert len(binary) == 3
    assert binary.task == "binary"
    assert binary.class_count == 2
    assert [t.label for t in binary.trees] == [1, 0, 1]


def test_binary_task_label_mapping_and_structure():
    tree = parse_tree("(4 (1 (0 awful) (2 plot)) (3 good))")
    corpus = Corpus([tree], "train", "fine", 5)
    mapped = to_binary_task(corpus).trees[0]
    # topology preserved exactly
    assert serialize_tree(tree) == "(4 (1 (0 awful) (2 plot)) (3 good))"
    orig_nodes = list(iter_nodes(tree))
    new_nodes = list(iter_nodes(mapped))
    assert len(orig_nodes) == len(new_nodes)
    for before, after in zip(orig_nodes, new_nodes):
        assert before.token == after.token
        assert len(before.children) == len(after.children)
    # labels: root 4->1, internal 1->0, leaf 0->0, internal neutral unsupervised
    assert mapped.label == 1
    assert mapped.children[0].label == 0
    assert mapped.children[0].children[0].label == 0
    assert mapped.children[0].children[1].label is None
    assert not mapped.children[0].children[1].supervised
    assert mapped.children[1].label == 1


def test_binary_task_single_neutral_root_gives_empty_corpus():
    corpus = Corpus([parse_tree("(2 hello)")], "train", "fine", 5)
    assert to_binary_task(corpus).trees == []


def test_binary_task_rejects_binary_input():
    corpus = to_binary_task(Corpus([parse_tree("(4 great)")], "t", "fine", 5))
    with pytest.raises(ValueError, match="already binary"):
        to_binary_task(corpus)


def test_supervised_count_at_most_node_count():
    corpus = synth_corpus(30, seed=3)
    for tree in to_binary_task(corpus).trees:
        nodes = list(iter_nodes(tree))
        assert sum(n.supervised for n in nodes) <= len(nodes)


def test_random_tree_respects_bounds():
    rng = np.random.default_rng(0)
    for _ in range(200):
        tree = random_tree(rng, ["a", "b", "c"], max_nodes=9)
        assert 1 <= node_count(tree) <= 9
        assert max_arity(tree) <= 2
