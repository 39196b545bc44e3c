from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from microcnn.data import (DataError, LabeledImage, UnsupportedImageError, batch_count,
                           batches, load_directory, normalize, one_hot, read_png,
                           resize_bilinear, split)
from microcnn.tensor import Rng


def write_png(path, pixels):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, np.uint8)).save(path, format="PNG")


def fake_images(per_class, shape=(4, 4, 3)):
    out = []
    for label, n in enumerate(per_class):
        for i in range(n):
            out.append(LabeledImage(np.full(shape, i, np.uint8), label, f"c{label}/{i}.png"))
    return out


# -- resize / normalize --------------------------------------------------------

def test_resize_identity():
    px = (Rng(1).random((64, 64, 3)) * 255).astype(np.uint8)
    assert np.array_equal(resize_bilinear(px, 64, 64), px)


def test_resize_constant():
    px = np.full((2, 2, 3), 77, np.uint8)
    out = resize_bilinear(px, 64, 64)
    assert out.shape == (64, 64, 3) and (out == 77).all()


def test_resize_midpoint_rounds_half_up():
    px = np.array([[[0, 0, 0], [255, 255, 255]]], np.uint8)  # 1 x 2
    out = resize_bilinear(px, 1, 3)
    # the middle column samples exactly halfway: 127.5 -> 128
    assert out[0, :, 0].tolist() == [0, 128, 255]


def test_resize_channels_independent():
    px = (Rng(2).random((5, 7, 3)) * 255).astype(np.uint8)
    out = resize_bilinear(px, 9, 4)
    for c in range(3):
        single = np.repeat(px[:, :, c:c + 1], 3, axis=2)
        assert np.array_equal(resize_bilinear(single, 9, 4)[:, :, 0], out[:, :, c])


def test_normalize_values():
    v = normalize(np.array([0, 51, 255], np.uint8))
    assert v.dtype == np.float32
    assert v.tolist() == pytest.approx([0.0, 0.2, 1.0], abs=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=1, max_size=64))
def test_normalize_range(values):
    v = normalize(np.array(values, np.uint8))
    assert v.min() >= 0 and v.max() <= 1


# -- decoding / directory loading ------------------------------------------------

def test_read_png_rejects_other_formats(tmp_path):
    p = tmp_path / "x.jpg"
    Image.new("RGB", (4, 4)).save(p, format="JPEG")
    with pytest.raises(UnsupportedImageError, match="PNG"):
        read_png(p)
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"not an image")
    with pytest.raises(UnsupportedImageError):
        read_png(junk)


def test_read_png_converts_to_rgb(tmp_path):
    p = tmp_path / "g.png"
    Image.fromarray(np.full((3, 5), 9, np.uint8), mode="L").save(p)
    px = read_png(p)
    assert px.shape == (3, 5, 3) and (px == 9).all()


def test_lexicographic_labels(tmp_path):
    write_png(tmp_path / "b" / "1.png", np.full((3, 3, 3), 200))
    write_png(tmp_path / "a" / "1.png", np.full((3, 3, 3), 10))
    images, names = load_directory(tmp_path)
    assert names == ["a", "b"]
    by_label = {im.label: im for im in images}
    assert by_label[0].source_path.endswith("a/1.png")
    assert by_label[0].pixels.shape == (64, 64, 3) and (by_label[0].pixels == 10).all()


def test_infected_folder_naming_maps_to_zero(tmp_path):
    for name in ("Uninfected", "Parasitized"):
        write_png(tmp_path / name / "x.png", np.zeros((2, 2, 3)))
    assert load_directory(tmp_path)[1] == ["Parasitized", "Uninfected"]


def test_unreadable_files_are_skipped(tmp_path, caplog):
    write_png(tmp_path / "a" / "ok.png", np.zeros((2, 2, 3)))
    (tmp_path / "a" / "bad.png").write_bytes(b"garbage")
    write_png(tmp_path / "b" / "ok.png", np.zeros((2, 2, 3)))
    images, _ = load_directory(tmp_path)
    assert len(images) == 2
    assert "skipped 1" in caplog.text


def test_empty_class_folder_is_named(tmp_path):
    write_png(tmp_path / "a" / "ok.png", np.zeros((2, 2, 3)))
    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError, match="empty"):
        load_directory(tmp_path)


def test_missing_root_and_wrong_folder_count(tmp_path):
    with pytest.raises(DataError, match="nowhere"):
        load_directory(tmp_path / "nowhere")
    for name in "abc":
        write_png(tmp_path / name / "1.png", np.zeros((2, 2, 3)))
    with pytest.raises(DataError, match="exactly 2"):
        load_directory(tmp_path)


def test_loading_is_independent_of_thread_count(tmp_path, monkeypatch):
    r = Rng(3)
    for name in "ab":
        for i in range(6):
            write_png(tmp_path / name / f"{i}.png", (r.random((5, 6, 3)) * 255).astype(np.uint8))
    monkeypatch.setenv("MICROCNN_THREADS", "1")
    one, _ = load_directory(tmp_path)
    monkeypatch.setenv("MICROCNN_THREADS", "4")
    four, _ = load_directory(tmp_path)
    assert [im.source_path for im in one] == [im.source_path for im in four]
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(one, four))


# -- split ------------------------------------------------------------------------

def test_split_counts_10_plus_10():
    parts = split(fake_images([10, 10]), (0.8, 0.1, 0.1), seed=0)
    assert (len(parts.train), len(parts.val), len(parts.test)) == (16, 2, 2)
    for part in (parts.train, parts.val, parts.test):
        counts = Counter(im.label for im in part)
        assert counts[0] == counts[1]


def test_split_is_disjoint_cover_and_seeded():
    images = fake_images([23, 17])
    a = split(images, (0.7, 0.2, 0.1), seed=5)
    b = split(images, (0.7, 0.2, 0.1), seed=5)
    paths = [im.source_path for part in (a.train, a.val, a.test) for im in part]
    assert sorted(paths) == sorted(im.source_path for im in images)
    assert len(set(paths)) == len(paths)
    assert [im.source_path for im in a.train] == [im.source_path for im in b.train]
    c = split(images, (0.7, 0.2, 0.1), seed=6)
    assert [im.source_path for im in a.train] != [im.source_path for im in c.train]


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 200), st.integers(0, 2**63))
def test_split_balance_and_proportions(n, seed):
    parts = split(fake_images([n, n]), (0.8, 0.1, 0.1), seed=seed)
    c = Counter(im.label for im in parts.train)
    assert abs(c[0] - c[1]) <= 1
    assert abs(c[0] - 0.8 * n) <= 1


def test_split_errors():
    with pytest.raises(ValueError):
        split(fake_images([5, 5]), (0.8, 0.1, 0.2))
    with pytest.raises(ValueError):
        split(fake_images([5, 5]), (1.0, 0.0, 0.0))
    with pytest.raises(DataError, match="partition"):
        split(fake_images([3, 10]), (0.8, 0.1, 0.1), class_names=["x", "y"])


# -- batches --------------------------------------------------------------------------

def test_batch_sizes_130():
    images = fake_images([65, 65], shape=(64, 64, 3))
    sizes = [len(b.labels) for b in batches(images, 64)]
    assert sizes == [64, 64, 2]
    assert batch_count(130, 64) == 3


def test_unshuffled_order_and_contents():
    images = fake_images([3, 2], shape=(64, 64, 3))
    (b,) = list(batches(images, 8))
    assert b.labels.tolist() == [0, 0, 0, 1, 1]
    assert b.x.shape == (5, 64, 64, 3) and b.x.dtype == np.float32
    assert np.array_equal(b.y.sum(axis=1), np.ones(5))


def test_shuffle_covers_epoch_and_is_seeded():
    images = fake_images([7, 6], shape=(64, 64, 3))
    run = lambda: [tuple(b.labels) + tuple(b.x[:, 0, 0, 0]) for b in
                   batches(images, 4, shuffle=True, rng=Rng(1))]
    assert run() == run()
    seen = Counter()
    for b in batches(images, 4, shuffle=True, rng=Rng(2)):
        seen.update(zip(b.labels.tolist(), np.round(b.x[:, 0, 0, 0] * 255).astype(int).tolist()))
    assert seen == Counter((im.label, int(im.pixels[0, 0, 0])) for im in images)
    with pytest.raises(ValueError):
        list(batches(images, 4, shuffle=True))


def test_one_hot():
    assert one_hot([0, 1]).tolist() == [[1, 0], [0, 1]]
