import csv
import io

import numpy as np
import pytest
from hypothesis import given, strategies as st
from threadpoolctl import threadpool_limits

from deop import pipeline as pl
from deop.bench import (BenchReport, _median_ms, BenchRow, CostModel, MultiPass, flops_multi_pass, flops_one_pass,
                        masked_crop, plain_encoder_config, time_encoder_only, timed_compare)
from deop.cal import CALConfig
from deop.config import RunConfig
from deop.encoder import EncoderConfig, PromptConfig, SeveranceSpec, ViTEncoder
from deop.masks import MaskSet
from deop.numcore import Tensor
from deop.synthdata import DatasetSpec, generate, load, read_manifest


def plain(L=4, d=32):
    return EncoderConfig(64, 8, d, L, 2, 3, 4, SeveranceSpec.none(L), PromptConfig("off"), True)


def test_plain_encoder_flops_by_hand():
    # 64 tokens, d=32, 2 heads, MLP 128, patches of 8x8x3
    patch = 2 * 64 * 192 * 32 + 64 * 32 + 64 * 32
    ln = 2 * 8 * 64 * 32
    qkv = 2 * 64 * 32 * 96 + 64 * 96
    proj = 2 * 64 * 32 * 32 + 64 * 32
    core = 2 * 64 * 64 * 32 + 2 * 64 * 64 + 4 * 2 * 64 * 64 + 2 * 64 * 64 * 32
    mlp = (2 * 64 * 32 * 128 + 64 * 128) + 8 * 64 * 128 + (2 * 64 * 128 * 32 + 64 * 32)
    residual = 2 * 64 * 32
    block = ln + qkv + proj + core + mlp + residual
    assert block == 2258944
    assert CostModel().encoder(plain()) == patch + 4 * block + 8 * 64 * 32 == 9842688


@given(st.integers(1, 8))
def test_encoder_flops_linear_in_depth(L):
    m = CostModel()
    per_block = m.encoder(plain(2)) - m.encoder(plain(1))
    assert m.encoder(plain(L)) == m.encoder(plain(1)) + (L - 1) * per_block


@given(st.integers(1, 50), st.integers(1, 50))
def test_multi_pass_linear_and_additive(a, b):
    enc = plain()
    assert flops_multi_pass(enc, a) + flops_multi_pass(enc, b) == flops_multi_pass(enc, a + b)
    assert flops_multi_pass(enc, a) == a * CostModel().encoder(enc)


def test_multi_pass_ignores_severance_and_prompts():
    enc = EncoderConfig(64, 8, 32, 4, 2, 3, 4, SeveranceSpec.last_layer(4, "gps", 1.0), PromptConfig("add"), True)
    assert flops_multi_pass(enc, 3) == flops_multi_pass(plain(), 3)
    assert plain_encoder_config(enc) == plain()
    with pytest.raises(ValueError):
        flops_multi_pass(enc, 0)


def test_severance_costs_ordered():
    m = CostModel()
    cfg = plain()
    full = m.block(cfg, 64, "none")
    assert m.block(cfg, 64, "gps", 1.0) < full < m.block(cfg, 64, "gps", 0.5)
    assert m.block(cfg, 64, "gps", 0.0) == full
    assert m.block(cfg, 64, "mps", n_masks=8) > m.block(cfg, 64, "gps", 1.0)


def test_one_pass_terms_sum_and_depend_on_cal():
    enc = plain()
    q = flops_one_pass(enc, CALConfig("query", 1, 8), 8, 10, 16)
    c = flops_one_pass(enc, CALConfig("conv", 1, 8), 8, 10, 16)
    none = flops_one_pass(enc, None, 8, 10, 16)
    for t in (q, c, none):
        assert t["total"] == sum(v for k, v in t.items() if k != "total")
    assert none["cal"] == 0 and q["cal"] > 0 and c["cal"] > q["cal"]
    assert none["masks"] == CostModel().resample(8, 16, 8) > 0
    assert flops_one_pass(enc, None, 8, 10)["masks"] == 0


def test_masked_crop():
    img = np.arange(3 * 8 * 8, dtype=float).reshape(3, 8, 8)
    mask = np.zeros((8, 8))
    mask[2:4, 4:8] = 1
    out = masked_crop(img, mask, 8)
    assert out.shape == (3, 8, 8)
    # the crop is the 2x4 box, stretched to 8x8
    np.testing.assert_allclose(out[:, 0, 0], img[:, 2, 4])
    np.testing.assert_allclose(out[:, -1, -1], img[:, 3, 7])
    mask[2, 4] = 0
    assert masked_crop(img, mask, 8)[0, 0, 0] == 0.0
    np.testing.assert_allclose(masked_crop(img, np.zeros((4, 4)), 8), img)


def test_report_csv_and_text():
    rows = [BenchRow(1, 100, 50, 2.0, 1.0), BenchRow(20, 100, 1000, 2.0, 30.0)]
    rep = BenchReport(rows, 20, 3, {"flops_one.encoder": 90})
    parsed = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert list(parsed[0]) == list(BenchReport.COLUMNS)
    assert [r["n_prime"] for r in parsed] == ["1", "20"]
    assert float(parsed[1]["ratio_flops"]) == 10.0 and float(parsed[1]["ratio_time"]) == 15.0
    text = rep.to_text()
    assert "images = 20" in text and "n20.ratio_time = 15.0000" in text and "flops_one.encoder = 90" in text
    assert rep.row(20).t_multi_ms == 30.0


@pytest.fixture(scope="module")
def small_stream(tmp_path_factory):
    root = generate(DatasetSpec(n_train=1, n_val=6), tmp_path_factory.mktemp("bench"))
    cfg = RunConfig(mode="deop")
    enc = ViTEncoder(cfg.encoder_config(), 0)
    stream = pl.Stream.build(cfg, enc, read_manifest(root))
    stream.decoder.train(False)
    samples = load(root, "val")
    rng = np.random.default_rng(0)
    masks = [MaskSet(Tensor(rng.random((8, 16, 16)))) for _ in samples]
    return stream, samples, masks


def test_timed_compare_rows(small_stream):
    stream, samples, masks = small_stream
    rep = timed_compare(stream, samples, masks, [1, 5, 20], n_images=3, warmup=1)
    assert [r.n_prime for r in rep.rows] == [1, 5, 20]
    assert len(set(r.flops_one for r in rep.rows)) == 1
    assert rep.row(20).ratio_flops >= 10
    assert rep.row(1).t_multi_ms < rep.row(20).t_multi_ms


def test_multipass_shapes(small_stream):
    stream, samples, masks = small_stream
    mp = MultiPass(stream.encoder, stream.table, 0.07, pl.normalize_image)
    probs = mp.classify(samples[0].image.data, masks[0].numpy(), 11)
    assert probs.shape == (11, 10)
    np.testing.assert_allclose(probs.sum(1), 1.0)
    # N' beyond the proposal count cycles through the proposals
    np.testing.assert_allclose(probs[8], probs[0])


def test_single_full_pass_costs_one_encoder_pass(small_stream):
    stream, samples, _ = small_stream
    mp = MultiPass(stream.encoder, stream.table, 0.07, pl.normalize_image)
    images = [s.image.data for s in samples] * 4
    best = None
    for _ in range(3):  # wall-clock noise on a shared CPU: keep the closest of three tries
        enc_ms = time_encoder_only(mp.encoder, images, warmup=3)
        with threadpool_limits(limits=1):
            mp_ms = _median_ms(lambda im: mp.classify(im, None, 1, full=True), images, 3)
        err = abs(mp_ms - enc_ms) / enc_ms
        best = err if best is None else min(best, err)
    assert best < 0.10
