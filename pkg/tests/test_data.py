import io
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from ctsar.data import (
    DatasetError,
    DatasetManifest,
    ImageDecodeError,
    ManifestEntry,
    UnsupportedFormatError,
    decode_and_resize,
    decode_image,
    decode_ppm,
    encode_ppm,
    generate_synthetic_dataset,
    load_dataset,
    load_images,
    resize_bilinear,
    stratified_split,
    val_count,
    write_ppm,
)

TABLE1 = [450, 491, 187, 21]


def fake_manifest(counts):
    entries = [ManifestEntry(f"score{c + 1}/img_{i:04d}.ppm", c) for c, n in enumerate(counts) for i in range(n)]
    return DatasetManifest("mem", entries)


# --- decoding -------------------------------------------------------------------
def test_ppm_binary_round_trip(rng):
    px = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    np.testing.assert_array_equal(decode_ppm(encode_ppm(px)), px)


def test_ppm_ascii_with_comments_and_maxval():
    buf = b"P3\n# a comment\n2 1\n15\n15 0 0  0 15 15\n"
    np.testing.assert_array_equal(decode_ppm(buf), [[[255, 0, 0], [0, 255, 255]]])


def test_png_decodes_through_pillow(tmp_path, rng):
    px = rng.integers(0, 256, (4, 6, 3), dtype=np.uint8)
    Image.fromarray(px).save(tmp_path / "a.png")
    np.testing.assert_array_equal(decode_image(tmp_path / "a.png"), px)


def test_corrupt_and_unsupported_files(tmp_path):
    (tmp_path / "short.ppm").write_bytes(b"P6\n4 4\n255\n\x00\x01")
    (tmp_path / "x.gif").write_bytes(b"GIF89a....")
    (tmp_path / "bad.png").write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    with pytest.raises(ImageDecodeError):
        decode_image(tmp_path / "short.ppm")
    with pytest.raises(UnsupportedFormatError):
        decode_image(tmp_path / "x.gif")
    with pytest.raises(ImageDecodeError):
        decode_image(tmp_path / "bad.png")


# --- resizing -------------------------------------------------------------------
def test_constant_image_stays_constant(tmp_path):
    write_ppm(tmp_path / "c.ppm", np.broadcast_to(np.array([200, 17, 96], np.uint8), (17, 31, 3)))
    out = decode_and_resize(tmp_path / "c.ppm")
    assert out.shape == (3, 224, 224) and out.dtype == np.float32
    for ch, v in enumerate([200, 17, 96]):
        np.testing.assert_allclose(out[ch], np.float32(v / 255), rtol=1e-6)


def test_same_size_is_identity(tmp_path, rng):
    px = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)
    write_ppm(tmp_path / "i.ppm", px)
    np.testing.assert_array_equal(decode_and_resize(tmp_path / "i.ppm"), px.transpose(2, 0, 1).astype(np.float32) / 255)


def test_checkerboard_upscale_by_hand():
    board = np.array([[0.0, 1.0], [1.0, 0.0]])[..., None]
    # half-pixel centres: output i samples (i + 0.5) / 2 - 0.5 -> -0.25, 0.25, 0.75, 1.25,
    # clamped to 0, 0.25, 0.75, 1
    t = [0.0, 0.25, 0.75, 1.0]
    expected = np.empty((4, 4))
    for i, y in enumerate(t):
        for j, x in enumerate(t):
            expected[i, j] = (
                (1 - y) * (1 - x) * board[0, 0, 0] + (1 - y) * x * board[0, 1, 0]
                + y * (1 - x) * board[1, 0, 0] + y * x * board[1, 1, 0]
            )
    np.testing.assert_allclose(resize_bilinear(board, 4, 4)[..., 0], expected, atol=1e-12)
    assert expected[1, 1] == 0.375


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.integers(0, 2**16))
def test_resize_reencode_idempotent(h, w, seed):
    px = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
    resized = resize_bilinear(px.astype(np.float64) / 255, 24, 24)
    assert resized.min() >= 0 and resized.max() <= 1
    again = decode_ppm(encode_ppm(np.round(resized * 255).astype(np.uint8))) / 255
    assert np.abs(again - resized).max() <= 1 / 255


# --- splitting -------------------------------------------------------------------
def test_val_counts_for_farm_counts():
    # round(n * 0.15) half up: 67.5 -> 68, 73.65 -> 74, 28.05 -> 28, 3.15 -> 3
    assert [val_count(n, 0.15) for n in TABLE1] == [68, 74, 28, 3]
    split = stratified_split(fake_manifest(TABLE1), 0.15, seed=0)
    val = split.subset("val")
    assert [sum(e.label == c for e in val) for c in range(4)] == [68, 74, 28, 3]


def test_single_sample_class_stays_in_train():
    split = stratified_split(fake_manifest([5, 1, 4, 2]), 0.15, seed=3)
    assert [e.split for e in split.entries if e.label == 1] == ["train"]
    assert sum(e.label == 3 and e.split == "val" for e in split.entries) == 1


def test_split_is_seeded():
    m = fake_manifest([40, 40, 40, 40])
    first = [e.split for e in stratified_split(m, 0.15, 7).entries]
    assert first == [e.split for e in stratified_split(m, 0.15, 7).entries]
    others = {tuple(e.split for e in stratified_split(m, 0.15, s).entries) for s in range(20)}
    assert len(others) == 20


@settings(deadline=None)
@given(st.lists(st.integers(0, 60), min_size=4, max_size=4), st.floats(0.05, 0.95), st.integers(0, 999))
def test_split_partitions_every_sample(counts, frac, seed):
    m = fake_manifest(counts)
    split = stratified_split(m, frac, seed)
    assert sorted(e.path for e in split.entries) == sorted(e.path for e in m.entries)
    assert all(e.split in ("train", "val") for e in split.entries)
    for c, n in enumerate(counts):
        k = sum(e.label == c and e.split == "val" for e in split.entries)
        if n >= 2:
            assert 1 <= k <= n - 1
            assert abs(k - n * frac) <= 1
        else:
            assert k == 0


# --- dataset loading ------------------------------------------------------------
def _tiny_tree(root, counts):
    px = np.zeros((1, 1, 3), np.uint8)
    for c, n in enumerate(counts):
        d = root / f"score{c + 1}"
        d.mkdir(parents=True)
        for i in range(n):
            write_ppm(d / f"{i:04d}.ppm", px)
    return root


def test_farm_sized_tree(tmp_path):
    m = load_dataset(_tiny_tree(tmp_path, TABLE1))
    assert len(m) == 1149 and m.counts == TABLE1


def test_empty_class_warns(tmp_path):
    with pytest.warns(UserWarning, match="no images"):
        m = load_dataset(_tiny_tree(tmp_path, [2, 2, 1, 0]))
    assert m.counts == [2, 2, 1, 0]


def test_undecodable_file_skipped(tmp_path):
    root = _tiny_tree(tmp_path, [1, 1, 1, 1])
    (root / "score2" / "junk.ppm").write_bytes(b"P6\n9 9\n255\n")
    (root / "score2" / "notes.txt").write_text("ignored")
    with pytest.warns(UserWarning, match="junk.ppm"):
        m = load_dataset(root)
    assert m.counts == [1, 1, 1, 1]


def test_missing_directories(tmp_path):
    with pytest.raises(DatasetError, match="nowhere"):
        load_dataset(tmp_path / "nowhere")
    (tmp_path / "score1").mkdir()
    with pytest.raises(DatasetError, match="score2"):
        load_dataset(tmp_path)


def test_manifest_csv(tmp_path):
    m = stratified_split(load_dataset(_tiny_tree(tmp_path, [2, 1, 1, 3])), 0.5, 0)
    lines = m.to_csv().splitlines()
    assert lines[0] == "path,score,split"
    rows = [l.split(",") for l in lines[1:]]
    assert [r[0] for r in rows] == sorted(r[0] for r in rows)
    assert [int(r[1]) for r in rows] == [1, 1, 2, 3, 4, 4, 4]


# --- synthetic data -------------------------------------------------------------
def test_synthetic_counts(tmp_path):
    root = generate_synthetic_dataset(2, 0, tmp_path)
    assert sorted(p.relative_to(root).parts[0] for p in root.rglob("*.ppm")) == ["score1"] * 2 + ["score2"] * 2 + ["score3"] * 2 + ["score4"] * 2
    m = load_dataset(root)
    assert m.counts == [2, 2, 2, 2]
    images, labels = load_images(m.entries, 32)
    assert images.shape == (8, 3, 32, 32) and images.min() >= 0 and images.max() <= 1
    np.testing.assert_array_equal(labels, [0, 0, 1, 1, 2, 2, 3, 3])


def test_synthetic_is_seeded(tmp_path):
    a = generate_synthetic_dataset(1, 5, tmp_path / "a")
    b = generate_synthetic_dataset(1, 5, tmp_path / "b")
    for p in a.rglob("*.ppm"):
        assert p.read_bytes() == (b / p.relative_to(a)).read_bytes()


def test_synthetic_separable_by_nearest_centroid(tmp_path):
    train_root = generate_synthetic_dataset(10, 1, tmp_path / "train")
    test_root = generate_synthetic_dataset(10, 2, tmp_path / "test")
    xtr, ytr = load_images(load_dataset(train_root).entries, 64)
    xte, yte = load_images(load_dataset(test_root).entries, 64)
    centroids = np.stack([xtr[ytr == c].reshape(10, -1).mean(axis=0) for c in range(4)])
    dist = ((xte.reshape(len(xte), 1, -1) - centroids[None]) ** 2).sum(axis=-1)
    assert (dist.argmin(axis=1) == yte).mean() > 0.9


def test_synthetic_rejects_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(DatasetError):
        generate_synthetic_dataset(1, 0, blocker / "sub")
