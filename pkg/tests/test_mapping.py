import itertools
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

import oracles
from conftest import random_gaze
from egma.contrastive import EmbeddingBundle, clip_loss
from egma.errors import ShapeMismatch
from egma.heatmap import GazeMatrices
from egma.mapping import (
    MappingConfig,
    WeightMatrices,
    alignment_weights,
    cross_map,
    egm_loss,
    row_normalize,
    sparse_binarize,
    total_loss,
)
from egma.contrastive import FineSimPair


def cfg(tau=0.07, rho=0.25):
    return MappingConfig(log_tau=math.log(tau), rho=rho)


def test_sparse_binarize_cases():
    x = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(sparse_binarize(x, 1.0), np.ones((3, 5)))
    np.testing.assert_array_equal(sparse_binarize([[0.9, 0.1, 0.5]], 1 / 3), [[1, 0, 0]])
    np.testing.assert_array_equal(sparse_binarize([[0.4, 0.4, 0.4]], 1 / 3), [[1, 0, 0]])


def test_sparse_binarize_keeps_ceil_count():
    x = np.random.default_rng(1).normal(size=(4, 49))
    np.testing.assert_array_equal(sparse_binarize(x, 0.25).sum(axis=1), np.full(4, 13))
    with pytest.raises(ValueError):
        sparse_binarize(x, 0.0)


def test_row_normalize_cases():
    np.testing.assert_allclose(row_normalize([[2.0, 2.0]]), [[0.5, 0.5]])
    np.testing.assert_allclose(row_normalize([[0.0, 0.0, 0.0]]), [[1 / 3] * 3])
    np.testing.assert_allclose(row_normalize([[1.0, 3.0]]), [[0.25, 0.75]])


def test_weights_without_gaze():
    x_p2s = np.random.default_rng(2).normal(size=(4, 3))
    w = alignment_weights(FineSimPair(x_p2s.T, x_p2s), None, cfg(rho=0.5))
    np.testing.assert_allclose(w.w_i2t, row_normalize(sparse_binarize(x_p2s, 0.5)))
    np.testing.assert_allclose(w.w_t2i, row_normalize(sparse_binarize(x_p2s.T, 0.5)))


def test_weights_gaze_on_one_patch():
    # all-zero similarities leave the lowest index kept by omega; a GS row on patch 2 adds mass there
    x_s2p = np.array([[0.0, 0.0, 0.0, 0.0]])
    gs = np.array([[0.0, 0.0, 1.0, 0.0]])
    w = alignment_weights(FineSimPair(x_s2p, x_s2p.T), GazeMatrices(gs, gs), cfg(rho=0.25))
    np.testing.assert_allclose(w.w_t2i, [[0.5, 0.0, 0.5, 0.0]])


def test_weights_rho_one_no_gaze_are_uniform():
    x = np.random.default_rng(3).normal(size=(2, 5))
    gz = GazeMatrices(np.zeros((2, 5)), np.zeros((2, 5)))
    w = alignment_weights(FineSimPair(x, x.T), gz, cfg(rho=1.0))
    np.testing.assert_allclose(w.w_t2i, np.full((2, 5), 0.2))
    np.testing.assert_allclose(w.w_i2t, np.full((5, 2), 0.5))


def test_cross_map_cases():
    P = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    S = np.array([[3.0, 4.0], [-1.0, 2.0]])
    e = EmbeddingBundle(P, S)
    onehot = WeightMatrices(np.array([[0, 1], [1, 0], [0, 1.0]]), np.array([[0, 0, 1.0], [1, 0, 0]]))
    cp, cs = cross_map(e, onehot)
    np.testing.assert_array_equal(cp, S[[1, 0, 1]])
    np.testing.assert_array_equal(cs, P[[2, 0]])
    uni = WeightMatrices(np.full((3, 2), 0.5), np.full((2, 3), 1 / 3))
    cp, cs = cross_map(e, uni)
    np.testing.assert_allclose(cp, np.tile(S.mean(axis=0), (3, 1)), atol=1e-15)
    with pytest.raises(ShapeMismatch):
        cross_map(e, WeightMatrices(np.ones((2, 2)), np.ones((2, 3))))


def test_cross_map_hand_fixture():
    e = EmbeddingBundle([[1.0, 2.0], [3.0, -1.0]], [[0.5, 1.0], [2.0, 0.0]])
    w = WeightMatrices(np.array([[0.25, 0.75], [0.6, 0.4]]), np.array([[0.1, 0.9], [0.5, 0.5]]))
    cp, cs = cross_map(e, w)
    np.testing.assert_allclose(cp, [oracles.mix(r, e.S.tolist()) for r in w.w_i2t.tolist()], atol=1e-12)
    np.testing.assert_allclose(cs, [oracles.mix(r, e.P.tolist()) for r in w.w_t2i.tolist()], atol=1e-12)


def test_mapping_loss_minimal_at_matching_permutation():
    # one-hot weights that return P itself give the lowest token contrast among row permutations
    P = np.eye(4)[:, :4] + 0.0
    best = clip_loss(P @ P.T, 0.1).sum()
    for perm in itertools.permutations(range(4)):
        assert clip_loss(P[list(perm)] @ P.T, 0.1).sum() >= best - 1e-15


def test_single_token_mapping_is_zero():
    e = EmbeddingBundle([[1.0, 2.0]], [[0.5, -1.0]])
    assert egm_loss([e], [None], cfg()).value == 0.0


def test_egm_matches_independent_implementation(toy_batch):
    batch, gaze = toy_batch
    ref = oracles.egm([(e.P.tolist(), e.S.tolist()) for e in batch],
                      [None if g is None else (g.gs.tolist(), g.gl.tolist()) for g in gaze], 0.07, 0.25)
    np.testing.assert_allclose(egm_loss(batch, gaze, cfg()).value, ref, rtol=1e-10)


def test_total_matches_oracles_on_random_batches():
    rng = np.random.default_rng(9)
    for _ in range(10):
        batch = [EmbeddingBundle(rng.normal(size=(4, 5)), rng.normal(size=(3, 5))) for _ in range(3)]
        gaze = [random_gaze(rng, 3, 4) if rng.random() < 0.7 else None for _ in range(3)]
        lists = [(e.P.tolist(), e.S.tolist()) for e in batch]
        g = [None if x is None else (x.gs.tolist(), x.gl.tolist()) for x in gaze]
        bd = total_loss(batch, gaze, cfg(0.2))
        np.testing.assert_allclose(bd.l_egf, oracles.egf(lists, g, 0.2), rtol=1e-10)
        np.testing.assert_allclose(bd.l_egm, oracles.egm(lists, g, 0.2, 0.25), rtol=1e-10)
        assert bd.total == bd.l_egf + bd.l_egm


def test_gaze_free_equals_zeroed_gaze():
    rng = np.random.default_rng(4)
    batch = [EmbeddingBundle(rng.normal(size=(4, 5)), rng.normal(size=(3, 5))) for _ in range(3)]
    zero = GazeMatrices(np.zeros((3, 4)), np.zeros((3, 4)))
    a = total_loss(batch, [None] * 3, cfg())
    b = total_loss(batch, [zero] * 3, cfg())
    assert abs(a.total - b.total) <= 1e-12


def test_workers_do_not_change_results():
    rng = np.random.default_rng(6)
    batch = [EmbeddingBundle(rng.normal(size=(6, 5)), rng.normal(size=(3, 5))) for _ in range(5)]
    gaze = [random_gaze(rng, 3, 6) for _ in range(5)]
    serial = total_loss(batch, gaze, cfg())
    with ThreadPoolExecutor(4) as ex:
        threaded = total_loss(batch, gaze, cfg(), executor=ex)
    assert serial.total == threaded.total
    for a, b in zip(serial.grads.dP + serial.grads.dS, threaded.grads.dP + threaded.grads.dS):
        np.testing.assert_array_equal(a, b)
    assert serial.grads.dlog_tau == threaded.grads.dlog_tau


def test_rho_validated():
    with pytest.raises(ValueError):
        MappingConfig(rho=1.5)


def test_total_loss_invariant_to_row_scaling():
    rng = np.random.default_rng(12)
    batch = [EmbeddingBundle(rng.normal(size=(4, 5)), rng.normal(size=(3, 5))) for _ in range(3)]
    gaze = [random_gaze(rng, 3, 4) for _ in range(3)]
    scaled = [EmbeddingBundle(e.P * rng.uniform(0.2, 5, size=(4, 1)), e.S * rng.uniform(0.2, 5, size=(3, 1)))
              for e in batch]
    np.testing.assert_allclose(total_loss(scaled, gaze, cfg()).total, total_loss(batch, gaze, cfg()).total,
                               rtol=1e-12)
