import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from oracles import rle_decode_enumerate, rle_encode_scan
from wsseg.datasets import (IGNORE, AugmentationConfig, BinaryMask, SampleRecord, augment, balanced_batches,
                            build_index, decode_rle, encode_rle, load_index, load_mask, read_label_png,
                            write_label_png, write_manifest)
from wsseg.errors import BoundsError, ConfigError, DataError, IoError, ParseError, SchemaError


def masks(max_side=64):
    return st.tuples(st.integers(1, max_side), st.integers(1, max_side)).flatmap(
        lambda hw: hnp.arrays(np.uint8, hw, elements=st.integers(0, 1)))


# -- RLE ---------------------------------------------------------------------

def test_sentinel_decodes_empty():
    m = decode_rle("-1", 4, 4)
    assert m.data.shape == (4, 4) and not m.data.any()


def test_full_2x2():
    m = decode_rle("0 4", 2, 2)
    assert m.data.all()
    assert encode_rle(m) == "0 4"


def test_column_major_positions():
    m = decode_rle("5 3", 4, 4)
    assert np.array_equal(m.data, rle_decode_enumerate("5 3", 4, 4))
    # flat 5, 6, 7 column-major on a 4x4 grid: column 1, rows 1..3
    assert sorted(zip(*np.nonzero(m.data))) == [(1, 1), (2, 1), (3, 1)]


def test_empty_mask_encodes_sentinel():
    assert encode_rle(BinaryMask.from_array(np.zeros((5, 3)))) == "-1"


@pytest.mark.parametrize("bad", ["1 2 3", "a 2", "1 -2", "", "1.5 2"])
def test_malformed_rle(bad):
    with pytest.raises(ParseError):
        decode_rle(bad, 4, 4)


def test_run_out_of_bounds():
    with pytest.raises(BoundsError):
        decode_rle("14 3", 4, 4)


@given(masks())
def test_encode_matches_scan_oracle(arr):
    m = BinaryMask.from_array(arr)
    assert encode_rle(m) == rle_encode_scan(arr)


@given(masks())
def test_rle_roundtrip(arr):
    m = BinaryMask.from_array(arr)
    text = encode_rle(m)
    assert decode_rle(text, *arr.shape) == m
    if text != "-1":
        vals = [int(v) for v in text.split()]
        starts, lens = vals[0::2], vals[1::2]
        assert starts == sorted(starts)
        # maximal: a run never ends where the next begins
        assert all(s + n < t for s, n, t in zip(starts, lens, starts[1:]))


def test_row_major_flag():
    arr = np.zeros((2, 3), np.uint8)
    arr[0, 1] = arr[0, 2] = 1
    m = BinaryMask.from_array(arr)
    assert encode_rle(m, order="C") == "1 2"
    assert decode_rle("1 2", 2, 3, order="C") == m


# -- manifest ----------------------------------------------------------------

def _write(tmp_path, rows, header="id,image_path,labels,mask_rle,split"):
    p = tmp_path / "manifest.csv"
    p.write_text(header + "\n" + "\n".join(rows) + "\n")
    return p


def test_three_row_manifest(tmp_path):
    p = _write(tmp_path, ["a,a.png,pneumo,,train", "b,b.png,,,val", "c,c.png,pneumo,0 3,test"])
    idx = load_index(p, ["pneumo"])
    assert [r.id for r in idx.records] == ["a", "b", "c"]
    assert idx.counts["train"] == {"positive": 1, "negative": 0}
    assert idx.get("c").mask_rle == "0 3"


def test_duplicate_id(tmp_path):
    p = _write(tmp_path, ["a,a.png,,,train", "a,b.png,,,val"])
    with pytest.raises(SchemaError):
        load_index(p, ["x"])


def test_unknown_class(tmp_path):
    p = _write(tmp_path, ["a,a.png,dog,,train"])
    with pytest.raises(SchemaError):
        load_index(p, ["cat"])


def test_missing_manifest(tmp_path):
    with pytest.raises(IoError):
        load_index(tmp_path / "nope.csv", ["x"])


def test_bad_split(tmp_path):
    with pytest.raises(SchemaError):
        load_index(_write(tmp_path, ["a,a.png,,,holdout"]), ["x"])


def test_siim_split_sizes(tmp_path):
    # split sizes of the pneumothorax data: 2379/8296 train, 145/541 val and test
    sizes = {"train": (2379, 8296), "val": (145, 541), "test": (145, 541)}
    rows = []
    for split, (pos, neg) in sizes.items():
        rows += [f"{split}{i},x.png,pneumothorax,,{split}" for i in range(pos)]
        rows += [f"{split}n{i},x.png,,,{split}" for i in range(neg)]
    idx = load_index(_write(tmp_path, rows), ["pneumothorax"])
    assert idx.counts == {s: {"positive": p, "negative": n} for s, (p, n) in sizes.items()}


def test_load_index_pure(tmp_path):
    p = _write(tmp_path, ["a,a.png,x,,train", "b,b.png,,,val"])
    assert load_index(p, ["x"]) == load_index(p, ["x"])


def test_manifest_roundtrip(tmp_path):
    recs = [SampleRecord("a", "a.png", (1, 0), "train", mask_rle="0 2"),
            SampleRecord("b", "b.png", (0, 1), "val", mask_path="m/b.png")]
    idx = build_index(recs, ("p", "q"), root=tmp_path)
    write_manifest(tmp_path / "m.csv", idx)
    again = load_index(tmp_path / "m.csv", ("p", "q"))
    assert again.records == idx.records


def test_mask_size_checked(tmp_path):
    from wsseg.datasets import write_image
    write_image(tmp_path / "a.png", np.zeros((4, 4), np.uint8))
    write_label_png(tmp_path / "ok.png", np.ones((4, 4), np.uint8))
    write_label_png(tmp_path / "bad.png", np.ones((5, 4), np.uint8))
    recs = [SampleRecord("a", "a.png", (1,), "train", mask_rle="0 3"),
            SampleRecord("b", "a.png", (1,), "train", mask_path="ok.png"),
            SampleRecord("c", "a.png", (1,), "train", mask_path="bad.png")]
    idx = build_index(recs, ("x",), root=tmp_path)
    assert load_mask(idx, idx.get("a")).shape == (4, 4)
    assert load_mask(idx, idx.get("b")).shape == (4, 4)
    with pytest.raises(DataError):
        load_mask(idx, idx.get("c"))


def test_label_png_roundtrip(tmp_path):
    lab = np.array([[0, 1, 2], [255, 1, 0]], np.uint8)
    write_label_png(tmp_path / "l.png", lab)
    assert np.array_equal(read_label_png(tmp_path / "l.png"), lab)


# -- balanced batches ---------------------------------------------------------

def _index(n_pos, n_neg):
    recs = [SampleRecord(f"p{i}", "x", (1,), "train") for i in range(n_pos)]
    recs += [SampleRecord(f"n{i}", "x", (0,), "train") for i in range(n_neg)]
    return build_index(recs, ("x",))


def test_quarter_positive_batches():
    idx = _index(25, 100)
    pos = {r.id for r in idx.records if r.is_positive}
    batches = list(balanced_batches(idx, 8, 0.25, seed=7, num_batches=50))
    assert all(sum(i in pos for i in b) == 2 for b in batches)


def test_zero_fraction_only_negatives():
    idx = _index(25, 100)
    for b in balanced_batches(idx, 8, 0.0, seed=1):
        assert all(i.startswith("n") for i in b)


def test_batches_deterministic():
    idx = _index(25, 100)
    a = list(balanced_batches(idx, 8, 0.25, seed=7))
    assert a == list(balanced_batches(idx, 8, 0.25, seed=7))
    assert a != list(balanced_batches(idx, 8, 0.25, seed=8))


def test_missing_class_errors():
    with pytest.raises(DataError):
        next(balanced_batches(_index(0, 10), 4, 0.5, seed=0))
    with pytest.raises(ConfigError):
        next(balanced_batches(_index(3, 10), 1, 0.5, seed=0))


def test_minority_oversampled():
    idx = _index(3, 100)
    seen = [i for b in balanced_batches(idx, 8, 0.5, seed=0, num_batches=10) for i in b if i.startswith("p")]
    assert len(seen) == 40 and set(seen) == {"p0", "p1", "p2"}


@given(st.integers(1, 40), st.integers(1, 40), st.integers(2, 16), st.floats(0, 1), st.integers(0, 2 ** 16))
def test_positive_count_exact(n_pos, n_neg, bs, frac, seed):
    idx = _index(n_pos, n_neg)
    want = int(np.floor(bs * frac + 0.5))
    for b in balanced_batches(idx, bs, frac, seed=seed, num_batches=5):
        assert len(b) == bs
        assert sum(i.startswith("p") for i in b) == want


# -- augmentation ------------------------------------------------------------

def test_identity_config():
    rng = np.random.default_rng(0)
    img = np.random.default_rng(1).integers(0, 256, (20, 24, 3), dtype=np.uint8)
    mask = (img[..., 0] > 128).astype(np.uint8)
    out, m = augment(img, mask, AugmentationConfig.identity(), rng)
    assert np.array_equal(out, img) and np.array_equal(m, mask)


def test_resize_only():
    img = np.random.default_rng(1).integers(0, 256, (20, 20), dtype=np.uint8)
    out, m = augment(img, np.ones((20, 20), np.uint8), AugmentationConfig.identity(), np.random.default_rng(0),
                     size=40)
    assert out.shape == (40, 40) and m.shape == (40, 40) and (m == 1).all()


def test_double_flip():
    cfg = AugmentationConfig((1.0, 1.0), 0.0, 0.0, 0.0, 1.0)
    img = np.random.default_rng(2).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    once, _ = augment(img, None, cfg, np.random.default_rng(0))
    assert np.array_equal(once, img[:, ::-1])
    twice, _ = augment(once, None, cfg, np.random.default_rng(0))
    assert np.array_equal(twice, img)


def test_rotation_label_set():
    cfg = AugmentationConfig((0.8, 1.2), 30.0, 0.5, 0.2, 0.5)
    rng = np.random.default_rng(0)
    mask = np.zeros((32, 32), np.uint8)
    mask[4:12, 4:12] = 1
    mask[20:28, 16:30] = 2
    img = np.zeros((32, 32, 3), np.uint8)
    for _ in range(100):
        _, m = augment(img, mask, cfg, rng)
        assert set(np.unique(m)) <= {0, 1, 2, IGNORE}


@pytest.mark.parametrize("kw", [dict(scale_range=(0.0, 1.0)), dict(rotation_limit=-1.0), dict(blur_prob=1.5),
                                dict(hflip_prob=-0.1)])
def test_bad_augmentation_config(kw):
    with pytest.raises(ConfigError):
        AugmentationConfig(**kw)
