import numpy as np
import pytest

from egma.errors import EmptyBank, GalleryTooSmall
from egma.evaluator import (
    EvalResult,
    PromptBank,
    classification_metrics,
    mean_max_scores,
    precision_at_k,
    retrieval_p_at_k,
    zero_shot_classify,
)

import oracles


def test_mean_max_matches_oracle():
    rng = np.random.default_rng(0)
    q = [rng.normal(size=(rng.integers(1, 5), 4)) for _ in range(3)]
    g = [rng.normal(size=(rng.integers(1, 5), 4)) for _ in range(4)]
    s = mean_max_scores(q, g)
    for a in range(3):
        for b in range(4):
            np.testing.assert_allclose(s[a, b], oracles.i2t(q[a].tolist(), g[b].tolist()), atol=1e-12)


def test_zero_shot_picks_planted_prompt():
    e = np.eye(4)
    image = [e[[0, 1]]]  # patches point along axes 0 and 1
    bank = PromptBank(["a", "b", "c"], [["x"], ["y"], ["z"]])
    feats = [[e[[2]]], [e[[0]] + e[[1]]], [e[[3]]]]
    preds, _, _ = zero_shot_classify(image, bank, feats)
    assert preds.tolist() == [1]


def test_zero_shot_ties_go_to_first_class():
    bank = PromptBank(["a", "b"], [["x"], ["y"]])
    f = [[np.array([[1.0, 0.0]])], [np.array([[1.0, 0.0]])]]
    preds, _, _ = zero_shot_classify([np.array([[0.0, 1.0]])], bank, f)
    assert preds.tolist() == [0]


def test_zero_shot_prompt_duplication_invariant():
    rng = np.random.default_rng(1)
    imgs = [rng.normal(size=(3, 4)) for _ in range(5)]
    p = [[rng.normal(size=(1, 4)) for _ in range(2)] for _ in range(3)]
    bank = PromptBank(["a", "b", "c"], [["1", "2"]] * 3)
    _, _, s1 = zero_shot_classify(imgs, bank, p)
    dup = [[ps[0], ps[0], ps[1], ps[1]] for ps in p]
    _, _, s2 = zero_shot_classify(imgs, bank, dup)
    np.testing.assert_allclose(s1, s2, atol=1e-15)


def test_perfect_classification():
    acc, f1, per = classification_metrics([0, 1, 2, 1], [0, 1, 2, 1], ["a", "b", "c"])
    assert acc == 1.0 and f1 == 1.0 and per == {"a": 1.0, "b": 1.0, "c": 1.0}


def test_macro_f1_hand_value():
    # class 0: tp 1 fp 1 fn 0 -> 2/3; class 1: tp 0 fp 0 fn 1 -> 0
    acc, f1, _ = classification_metrics([0, 1], [0, 0], ["a", "b"])
    assert acc == 0.5
    np.testing.assert_allclose(f1, (2 / 3 + 0) / 2)


def test_empty_bank():
    with pytest.raises(EmptyBank):
        PromptBank([], [])
    with pytest.raises(EmptyBank):
        PromptBank(["a"], [[]])


def test_precision_at_k_cases():
    assert precision_at_k([[0.9]], [3], [3], k_list=(1,)) == {1: 1.0}
    # ranking 0..4 by score; relevant items sit at ranks 2 and 5
    scores = np.array([[0.9, 0.8, 0.7, 0.6, 0.5]])
    labels = np.array([1, 0, 1, 2, 0])
    assert precision_at_k(scores, [0], labels, k_list=(5,)) == {5: 0.4}
    with pytest.raises(GalleryTooSmall):
        precision_at_k(np.zeros((1, 5)), [0], np.zeros(5))


def test_precision_ties_keep_lower_index():
    scores = np.array([[0.5, 0.5, 0.5]])
    assert precision_at_k(scores, [1], [1, 0, 0], k_list=(1,)) == {1: 1.0}
    assert precision_at_k(scores, [0], [1, 0, 0], k_list=(1,)) == {1: 0.0}


def test_random_embedding_baseline():
    rng = np.random.default_rng(7)
    C, N = 8, 400
    labels = np.arange(N) % C
    q = [rng.normal(size=(2, 8)) for _ in range(N)]
    g = [rng.normal(size=(3, 8)) for _ in range(N)]
    p = retrieval_p_at_k(q, labels, g, labels)
    assert abs(p[1] - 1 / C) < 0.05
    assert set(p) == {1, 5, 10}


def test_eval_csv(tmp_path):
    r = EvalResult(0.5, 0.25, {1: 1.0}, {"a": 0.5})
    r.write_csv(tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines() == [
        "metric,value", "accuracy,0.5", "macro_f1,0.25", "p_at_1,1.0", "f1_a,0.5"]
