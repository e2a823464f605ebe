import filecmp
import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from deop.classify import name_seed
from deop.synthdata import (DatasetSpec, GenerationError, ParseError, class_histogram, generate,
                            generate_arrays, generate_sample, load, read_manifest, read_pnm, render_scene,
                            shape_mask, texture_pattern, write_pnm)

SMALL = DatasetSpec(n_train=6, n_val=4, seed=3)


def test_default_catalog():
    spec = DatasetSpec()
    cat = spec.catalog()
    assert spec.num_classes == 10 == len(cat)
    assert cat[0].name == "background" and cat[0].seen
    assert [c.name for c in cat if not c.seen] == ["checkered circle", "striped square", "solid triangle"]
    assert len(spec.seen_ids()) == 7


def test_unknown_unseen_class_rejected():
    with pytest.raises(ValueError):
        DatasetSpec(unseen=("dotted hexagon",)).catalog()


def test_default_dataset_golden_digest_and_histograms():
    spec = DatasetSpec()
    tr, va = generate_arrays(spec, "train"), generate_arrays(spec, "val")
    h = hashlib.sha256()
    for img, lab in tr + va:
        h.update(img.tobytes())
        h.update(lab.tobytes())
    assert h.hexdigest() == "3691f84154adc340b1172371b9f2ae41023ae2be0aca57d9503606164a20e64c"
    assert class_histogram([l for _, l in tr], 10).tolist() == [
        650931, 30835, 30290, 0, 36563, 0, 37254, 0, 17622, 15705]
    assert class_histogram([l for _, l in va], 10).tolist() == [
        164808, 2725, 4359, 5732, 4458, 6959, 6109, 4950, 2678, 2022]


@given(st.integers(0, 10 ** 6), st.integers(0, 50))
def test_train_samples_never_contain_unseen(seed, index):
    spec = DatasetSpec(seed=seed)
    _, lab = generate_sample(spec, "train", index)
    assert not np.isin(lab, spec.unseen_ids()).any()


@given(st.integers(0, 10 ** 6), st.integers(0, 50))
def test_val_samples_contain_an_unseen_class(seed, index):
    spec = DatasetSpec(seed=seed)
    img, lab = generate_sample(spec, "val", index)
    assert np.isin(lab, spec.unseen_ids()).any()
    assert img.shape == (64, 64, 3) and img.dtype == np.uint8


def test_same_spec_gives_byte_identical_directories(tmp_path):
    a, b = generate(SMALL, tmp_path / "a"), generate(SMALL, tmp_path / "b")
    cmp = filecmp.dircmp(a, b)
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for split in ("train", "val"):
        _, mismatch, errors = filecmp.cmpfiles(a / split, b / split,
                                               [p.name for p in (a / split).iterdir()], shallow=False)
        assert not mismatch and not errors
    assert sorted(p.name for p in (a / "train").iterdir())[:2] == ["0000.pgm", "0000.ppm"]


def test_manifest_roundtrip(tmp_path):
    root = generate(SMALL, tmp_path / "d")
    m = read_manifest(root)
    assert m.dataset_spec() == SMALL
    assert m.num_classes == SMALL.num_classes
    text = (root / "manifest.txt").read_text().splitlines()
    assert text[0] == "deop-synth 1"
    assert f"class\t3\tcheckered circle\tunseen\t{name_seed('checkered circle')}" in text
    samples = load(root, "val")
    assert len(samples) == 4
    assert samples[0].image.shape == (3, 64, 64)
    assert samples[0].image.data.max() <= 1.0


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path)
    root = generate(DatasetSpec(n_train=1, n_val=1), tmp_path / "d")
    path = root / "manifest.txt"
    path.write_text(path.read_text().replace("classes 10", "classes 11"))
    with pytest.raises(ParseError):
        read_manifest(root)


@given(st.integers(1, 9), st.integers(1, 9), st.booleans(), st.integers(0, 2 ** 32 - 1))
def test_pnm_roundtrip(h, w, color, seed):
    import tempfile
    from pathlib import Path
    arr = np.random.default_rng(seed).integers(0, 256, (h, w, 3) if color else (h, w)).astype(np.uint8)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "x.pnm"
        write_pnm(p, arr)
        head = p.read_bytes()[:2]
        assert head == (b"P6" if color else b"P5")
        np.testing.assert_array_equal(read_pnm(p), arr)


def test_pnm_header_comments_and_errors(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x07\x09")
    np.testing.assert_array_equal(read_pnm(p), [[7, 9]])
    bad = {"magic.ppm": b"P3\n1 1\n255\n", "trunc.ppm": b"P6\n2 2\n255\n\x00\x01",
           "field.pgm": b"P5\nx 1\n255\n\x00", "maxval.pgm": b"P5\n1 1\n65535\n\x00\x00"}
    for name, raw in bad.items():
        (tmp_path / name).write_bytes(raw)
        with pytest.raises(ParseError) as info:
            read_pnm(tmp_path / name)
        assert name in str(info.value)


def test_shapes_and_textures():
    assert shape_mask("square", 5).all()
    c = shape_mask("circle", 10)
    assert c[5, 5] and not c[0, 0]
    t = shape_mask("triangle", 10)
    assert t[9].sum() > t[1].sum()
    assert texture_pattern("solid", 4).all()
    assert 0 < texture_pattern("striped", 8).mean() < 1
    assert 0 < texture_pattern("checkered", 8).mean() < 1
    with pytest.raises(ValueError):
        shape_mask("star", 4)


def test_impossible_scene_raises():
    spec = DatasetSpec(image_size=24, min_size=14, max_size=14)
    with pytest.raises(GenerationError):
        render_scene(np.random.default_rng(0), [1, 2, 4, 6], spec, 0)


def test_shape_gap_keeps_objects_apart():
    spec = DatasetSpec()
    for i in range(20):
        _, lab = generate_sample(spec, "train", i)
        for c in np.unique(lab):
            if c == 0:
                continue
            ys, xs = np.nonzero(lab == c)
            box = lab[max(ys.min() - 3, 0):ys.max() + 4, max(xs.min() - 3, 0):xs.max() + 4]
            assert set(np.unique(box)) <= {0, c}
