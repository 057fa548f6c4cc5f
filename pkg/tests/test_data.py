import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from usod.data import (DatasetError, ImageRecord, LabelImage, NormalizedImage, SaliencyDataset, SkipReport, augment,
                       flip_decision, load_dataset, preprocess, read_label, write_label)
from usod.synthetic import make_synthetic_dataset


def write_rgb(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8)).save(path)
    h, w = arr.shape[:2]
    return ImageRecord(path.stem, path, None, (h, w))


def test_load_dataset_splits(data_root):
    assert len(load_dataset(data_root, "MSRA-B", "train+val")) == 6
    assert len(load_dataset(data_root, "MSRA-B", "test")) == 2
    recs = load_dataset(data_root, "MSRA-B")
    assert [r.id for r in recs] == sorted(r.id for r in recs)
    r = recs[0]
    assert r.source_size == (60, 72) and r.gt.shape == (60, 72)
    assert set(np.unique(r.gt)) <= {0.0, 1.0}


def test_load_dataset_errors_and_empty(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "nope")
    (tmp_path / "E" / "images").mkdir(parents=True)
    assert load_dataset(tmp_path, "E") == []
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "E", "bogus")


def test_unreadable_image_is_skipped(tmp_path):
    make_synthetic_dataset(tmp_path, "D", 2, height=10, width=10)
    (tmp_path / "D" / "images" / "broken.png").write_bytes(b"not a png")
    skip = SkipReport()
    recs = load_dataset(tmp_path, "D", skip_report=skip)
    assert len(recs) == 2 and skip.entries[0][0] == "broken"
    skip.write(tmp_path / "skip.txt")
    assert (tmp_path / "skip.txt").read_text().startswith("broken\t")


def test_missing_split_file_uses_all(tmp_path, caplog):
    make_synthetic_dataset(tmp_path, "D", 3, height=10, width=10)
    with caplog.at_level(logging.WARNING):
        assert len(load_dataset(tmp_path, "D", "train")) == 3
    assert "train.txt" in caplog.text


def test_preprocess_examples(tmp_path):
    rec = write_rgb(tmp_path / "a.png", np.random.default_rng(0).integers(0, 256, (320, 480, 3)))
    assert preprocess(rec, 320).pixels.shape == (320, 320, 3)
    sq = write_rgb(tmp_path / "b.png", np.random.default_rng(1).integers(0, 256, (32, 32, 3)))
    out = preprocess(sq, 32, mean=(0, 0, 0), std=(1, 1, 1))
    np.testing.assert_array_equal(out.pixels, sq.image)
    const = preprocess(sq, 16, mean=(0.5,) * 3, std=(0.25,) * 3, image=np.full((20, 30, 3), 0.5, np.float32))
    assert np.all(const.pixels == 0.0)
    np.testing.assert_allclose(out.denormalize(), sq.image, atol=1e-6)
    with pytest.raises(ValueError):
        preprocess(sq, 16, std=(0, 1, 1))


def test_one_pixel_image_warns(tmp_path, caplog):
    rec = write_rgb(tmp_path / "one.png", np.full((1, 1, 3), 200))
    with caplog.at_level(logging.WARNING):
        assert preprocess(rec, 8).pixels.shape == (8, 8, 3)
    assert "1x1" in caplog.text


def test_flip_mirror_and_involution(tmp_path):
    arr = np.zeros((6, 9, 3), np.uint8)
    arr[2, 3] = 255
    img = preprocess(write_rgb(tmp_path / "f.png", arr), 9, mean=(0,) * 3, std=(1,) * 3)
    lbl = LabelImage("f", (img.pixels[..., 0] > 0.5).astype(np.float32))
    f_img, f_lbl = augment(img, lbl, True)
    np.testing.assert_array_equal(f_img.pixels, img.pixels[:, ::-1])
    cols = np.nonzero(lbl.values.any(axis=0))[0]
    assert np.array_equal(np.nonzero(f_lbl.values.any(axis=0))[0], sorted(8 - cols))
    back, back_lbl = augment(f_img, f_lbl, True)
    np.testing.assert_array_equal(back.pixels, img.pixels)
    np.testing.assert_array_equal(back_lbl.values, lbl.values)
    assert not back.flip_applied and f_img.flip_applied
    same, same_lbl = augment(img, lbl, False)
    assert same is img and same_lbl is lbl


def test_single_bright_column_mirrors(tmp_path):
    arr = np.zeros((4, 10, 3), np.uint8)
    arr[:, 3] = 255
    rec = write_rgb(tmp_path / "c.png", arr)
    img = NormalizedImage(rec.id, rec.image)
    flipped, _ = augment(img, None, True)
    assert np.argmax(flipped.pixels[0, :, 0]) == 10 - 1 - 3


def test_label_io(tmp_path):
    write_label(LabelImage("z", np.zeros((3, 4))), tmp_path)
    write_label(LabelImage("o", np.ones((3, 4))), tmp_path)
    assert set(np.asarray(Image.open(tmp_path / "z.png")).ravel()) == {0}
    assert set(np.asarray(Image.open(tmp_path / "o.png")).ravel()) == {255}
    write_label(LabelImage("p", np.full((2, 2), 0.4)), tmp_path)
    assert np.asarray(Image.open(tmp_path / "p.png"))[0, 0] == 102
    assert read_label(tmp_path / "p.png").values[0, 0] == pytest.approx(0.4, abs=0.002)
    with pytest.raises(ValueError):
        write_label(LabelImage("bad", np.full((2, 2), 1.2)), tmp_path)
    with pytest.raises(ValueError):
        LabelImage("bad", np.zeros((2, 2, 1)))
    with pytest.raises(OSError, match="missing.png"):
        read_label(tmp_path / "missing.png")


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(0, 1)))
def test_label_round_trip_error_bound(tmp_path_factory, values):
    d = tmp_path_factory.mktemp("rt")
    back = read_label(write_label(LabelImage("x", values), d)).values
    # ties such as 0.5 -> 128 sit exactly on the bound; labels are float32
    assert np.max(np.abs(back.astype(np.float64) - values)) <= 1 / 510 + np.finfo(np.float32).eps


def test_flip_decision_is_seeded():
    draws = [flip_decision(0, 1, i) for i in range(200)]
    assert draws == [flip_decision(0, 1, i) for i in range(200)]
    assert 60 < sum(draws) < 140
    assert draws != [flip_decision(0, 2, i) for i in range(200)]


def test_saliency_dataset_items(data_root):
    recs = load_dataset(data_root, "MSRA-B", "train")
    labels = {r.id: np.full((16, 16), 0.25, np.float32) for r in recs}
    labels[recs[0].id][:, :4] = 1.0
    ds = SaliencyDataset(recs, 16, seed=0, flip=True, labels=labels)
    for i in range(len(ds)):
        item = ds[i]
        assert item["image"].shape == (3, 16, 16) and item["label"].shape == (1, 16, 16)
        if i == 0:
            col = item["label"][0, 0].numpy()
            expected = labels[recs[0].id][0][::-1] if item["flip"] else labels[recs[0].id][0]
            np.testing.assert_array_equal(col, expected)
