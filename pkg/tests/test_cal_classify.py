import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from deop import numcore as nc
from deop.cal import AnchorQueries, CALConfig, HeatmapDecoder, HeatmapSet, heatmap_from_queries
from deop.classify import (ClassEmbeddingTable, ProtocolError, assemble_prediction, assemble_scores,
                           classify_segments, name_embedding, name_seed, pool, training_loss)
from deop.masks import MaskSet
from deop.metrics import SegLabelMap, confusion_and_iou
from deop.proposals import gt_segments, oracle_masks
from deop.synthdata import DatasetSpec, generate_sample
from deop.numcore import ContractError, GradTape, ShapeError, Tensor


def test_query_heatmap_k0_matches_brute_force(rng):
    dec = HeatmapDecoder(CALConfig("query", 0, 3, 2), 4, seed=1)
    dec.params["q"].data[...] = rng.normal(size=(3, 4))
    F_V = rng.normal(size=(4, 4, 4))
    M = rng.random((3, 4, 4))
    got = dec(Tensor(F_V), MaskSet(Tensor(M))).numpy()
    p = {k: v.data for k, v in dec.params.items()}
    ref = oracles.query_heatmaps_k0(p["q"], F_V, M, p, 2)
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_conv_heatmap_matches_brute_force(rng):
    dec = HeatmapDecoder(CALConfig("conv", 2, 3, 2, 3), 4, seed=2)
    F_V = rng.normal(size=(3, 3, 4))
    M = rng.random((2, 3, 3))
    got = dec(Tensor(F_V), MaskSet(Tensor(M))).numpy()
    ref = oracles.conv_heatmaps(F_V, M, 2, {k: v.data for k, v in dec.params.items()})
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_query_heatmap_respects_mask_and_zero_mask_gives_zero(rng):
    q = Tensor(rng.normal(size=(2, 4)))
    F_V = Tensor(rng.normal(size=(3, 3, 4)))
    M = np.zeros((2, 3, 3))
    M[0, 1, 1] = 1.0
    H = heatmap_from_queries(q, F_V, Tensor(M)).data
    assert np.count_nonzero(H[0]) == 1 and not H[1].any()


def test_conv_heatmap_is_spatial_distribution(rng):
    dec = HeatmapDecoder(CALConfig("conv", 1, 3, 2, 5), 4)
    H = dec(Tensor(rng.normal(size=(4, 4, 4))), MaskSet(Tensor(rng.random((3, 4, 4))))).numpy()
    np.testing.assert_allclose(H.sum(axis=(1, 2)), 1.0)
    # all-zero masks feed a constant map: every location gets the same interior score
    H0 = dec(Tensor(rng.normal(size=(4, 4, 4))), MaskSet(Tensor(np.zeros((2, 4, 4))))).numpy()
    np.testing.assert_allclose(H0[0], H0[1])


def test_batch_norm_running_stats_and_eval_mode(rng):
    dec = HeatmapDecoder(CALConfig("conv", 1, 3, 2, 5), 4, seed=0)
    F_V = Tensor(rng.normal(size=(4, 4, 4)))
    M = MaskSet(Tensor(rng.random((2, 4, 4))))
    x = nc.conv2d(nc.scale_rows(nc.stack([F_V] * 2), M.masks), dec.params["cbr0.w"], dec.params["cbr0.b"], pad=1).data
    flat = x.reshape(-1, 5)
    dec(F_V, M)
    np.testing.assert_allclose(dec.bn.mean[0], 0.1 * flat.mean(0))
    np.testing.assert_allclose(dec.bn.var[0], 0.9 + 0.1 * flat.var(0, ddof=1))
    before = [m.copy() for m in dec.bn.mean]
    dec.train(False)
    a = dec(F_V, M).numpy()
    np.testing.assert_array_equal(dec.bn.mean[0], before[0])
    b = dec(F_V, M).numpy()
    np.testing.assert_array_equal(a, b)


def test_cal_config_and_shape_contracts(rng):
    with pytest.raises(ContractError):
        CALConfig("attention")
    with pytest.raises(ContractError):
        CALConfig("conv", 0)
    with pytest.raises(ContractError):
        HeatmapSet(Tensor(-np.ones((1, 2, 2))))
    with pytest.raises(ShapeError):
        AnchorQueries(Tensor(np.zeros(3)))
    dec = HeatmapDecoder(CALConfig("query", 1, 3), 4)
    with pytest.raises(ShapeError):
        dec(Tensor(rng.normal(size=(2, 2, 4))), MaskSet(Tensor(np.ones((2, 2, 2)))))


def test_query_decoder_resizes_masks_to_grid(rng):
    dec = HeatmapDecoder(CALConfig("query", 1, 2), 4)
    H = dec(Tensor(rng.normal(size=(2, 2, 4))), MaskSet(Tensor(np.ones((2, 8, 8))))).numpy()
    assert H.shape == (2, 2, 2)
    np.testing.assert_allclose(H.sum(axis=(1, 2)), 1.0)


@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 10 ** 6))
def test_pool_matches_brute_force(n, d, seed):
    rng = np.random.default_rng(seed)
    F_V = rng.normal(size=(3, 4, d))
    W = rng.random((n, 3, 4))
    got = pool(Tensor(F_V), Tensor(W))
    np.testing.assert_allclose(got.features.data, oracles.pool(F_V, W), atol=1e-10)
    assert not got.degenerate.any()


def test_pool_zero_weights_is_degenerate_and_finite(rng):
    r = pool(Tensor(rng.normal(size=(2, 2, 3))), Tensor(np.zeros((1, 2, 2))))
    assert r.degenerate.all() and np.array_equal(r.features.data, np.zeros((1, 3)))


def test_classify_and_assemble_match_brute_force(rng):
    table = ClassEmbeddingTable(["a", "b", "c", "d"], [True, True, True, False], 5)
    table.offsets.data[:3] = rng.normal(0, 0.1, (3, 5))
    F_I = rng.normal(size=(3, 5))
    r = classify_segments(Tensor(F_I), table, 0.07)
    logits = oracles.cosine_scores(F_I, table.embeddings().data, 0.07)
    np.testing.assert_allclose(r.logits.data, logits, atol=1e-10)
    probs = np.array([oracles.softmax(list(row)) for row in logits])
    np.testing.assert_allclose(r.probs.data, probs, atol=1e-10)
    M = rng.random((3, 4, 4))
    np.testing.assert_allclose(assemble_scores(r.probs, Tensor(M)).data, oracles.assemble(probs, M), atol=1e-10)
    pred = assemble_prediction(r.probs, MaskSet(Tensor(M)))
    np.testing.assert_array_equal(pred.labels, oracles.assemble(probs, M).argmax(0))


def test_seen_subset_softmax(rng):
    table = ClassEmbeddingTable(["a", "b", "c"], [True, False, True], 4)
    r = classify_segments(Tensor(rng.normal(size=(2, 4))), table, 0.5, classes=[0, 2])
    assert not r.probs.data[:, 1].any()
    np.testing.assert_allclose(r.probs.data.sum(1), 1.0)


def test_classify_rejects_bad_inputs(rng):
    table = ClassEmbeddingTable(["a", "b"], [True, True], 4)
    with pytest.raises(ContractError):
        classify_segments(Tensor(rng.normal(size=(1, 4))), table, 0.0)
    with pytest.raises(ShapeError):
        classify_segments(Tensor(rng.normal(size=(1, 3))), table)
    with pytest.raises(ShapeError):
        ClassEmbeddingTable(["a"], [True, False], 4)


def test_name_embedding_is_stable_unit_vector():
    assert name_seed("solid circle") == 17532783690412997839
    v = name_embedding("solid circle", 16)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    np.testing.assert_array_equal(v, name_embedding("solid circle", 16))
    w = name_embedding("striped circle", 16, "words")
    assert np.linalg.norm(w) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        name_embedding("x", 4, "letters")


def test_training_loss_gives_unseen_columns_zero_gradient(rng):
    O = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
    labels = np.array([[0, 0, 2], [2, 255, 0], [0, 2, 2]])
    with GradTape() as tape:
        loss = training_loss(O, labels, [0, 2])
    (g,) = tape.gradient(loss, [O])
    assert np.all(g[[1, 3]] == 0.0)
    assert np.abs(g[[0, 2]]).sum() > 0
    assert np.all(g[:, 1, 1] == 0.0)


def test_training_loss_rejects_unseen_labels(rng):
    with pytest.raises(ProtocolError):
        training_loss(Tensor(rng.normal(size=(3, 2, 2))), np.array([[0, 1], [2, 0]]), [0, 2])
    with pytest.raises(ShapeError):
        training_loss(Tensor(rng.normal(size=(3, 2, 2))), np.zeros((3, 3), dtype=int), [0])


def test_offset_mask_freezes_unseen_rows():
    t = ClassEmbeddingTable(["a", "b", "c"], [True, False, True], 2)
    np.testing.assert_array_equal(t.offset_mask()[:, 0], [True, False, True])
    assert t.seen_ids() == [0, 2] and t.unseen_ids() == [1]


def test_oracle_masks_with_perfect_scores_give_perfect_accuracy():
    _, lab = generate_sample(DatasetSpec(), "val", 3)
    gt = SegLabelMap(lab)
    _, ids = gt_segments(gt)
    M = oracle_masks(gt, 0.0, 8)
    F_C = np.zeros((8, 10))
    F_C[np.arange(len(ids)), ids] = 1.0
    pred = assemble_prediction(Tensor(F_C), M)
    assert confusion_and_iou(pred.labels, gt, range(10)).pacc == 1.0
