import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from usod.data import read_label
from usod.olr import (LabelStore, LambdaSchedule, lambda_schedule, load_store, save_store, snapshot,
                      update_labels)


def test_lambda_schedule():
    assert [lambda_schedule(e) for e in (1, 2, 3, 25)] == [1.0, 1.0, 0.4, 0.4]
    with pytest.raises(ValueError):
        lambda_schedule(0)
    with pytest.raises(ValueError):
        LambdaSchedule(value=1.5)


def const_schedule(lam):
    return LambdaSchedule(0, 1.0, lam)


def test_update_examples():
    store = LabelStore.from_labels({"a": np.ones((2, 2))}, const_schedule(0.4))
    out = update_labels(store, {"a": np.zeros((2, 2))})
    np.testing.assert_allclose(out["a"], 0.4, atol=1e-7)
    assert out.epoch == 2 and out.lambdas == (0.4,)
    same = update_labels(store, {"a": np.ones((2, 2))})
    assert np.array_equal(same["a"], store["a"])


def test_identity_at_lambda_one(rng):
    g = rng.random((5, 5))
    store = LabelStore.from_labels({"a": g}, const_schedule(1.0))
    for _ in range(10):
        store = update_labels(store, {"a": rng.random((5, 5))})
    assert np.array_equal(store["a"], g.astype(np.float32))
    assert snapshot(store, "a").epoch_version == 11


def test_closed_form_decay(rng):
    g1 = rng.random((6, 6)).astype(np.float32)
    y = np.full((6, 6), 0.3, np.float32)
    store = LabelStore.from_labels({"a": g1}, const_schedule(0.4))
    for j in range(1, 11):
        np.testing.assert_allclose(np.abs(store["a"] - y), 0.4 ** (j - 1) * np.abs(g1 - y), atol=1e-6)
        store = update_labels(store, {"a": y})


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (4, 4), elements=st.floats(0, 1, width=32)),
       arrays(np.float32, (4, 4), elements=st.floats(0, 1, width=32)), st.floats(0, 1))
def test_update_stays_in_convex_hull(g, y, lam):
    out = update_labels(LabelStore.from_labels({"a": g}, const_schedule(lam)), {"a": y})["a"]
    assert np.all(out >= np.minimum(g, y)) and np.all(out <= np.maximum(g, y))


def test_store_is_immutable_and_snapshots_consistent(rng):
    store = LabelStore.from_labels({"a": rng.random((3, 3))})
    with pytest.raises(ValueError):
        store["a"][0, 0] = 0.0
    with pytest.raises(TypeError):
        store.labels["b"] = np.zeros((3, 3))
    s1, s2 = snapshot(store, "a"), snapshot(store, "a")
    assert s1.values.tobytes() == s2.values.tobytes()
    assert s1.epoch_version == store.epoch == 1
    with pytest.raises(KeyError):
        snapshot(store, "zz")


def test_update_errors():
    store = LabelStore.from_labels({"a": np.zeros((2, 2)), "b": np.zeros((2, 2))})
    with pytest.raises(KeyError):
        update_labels(store, {"a": np.zeros((2, 2))})
    with pytest.raises(KeyError):
        update_labels(store, {"a": np.zeros((2, 2)), "b": np.zeros((2, 2)), "c": np.zeros((2, 2))})
    with pytest.raises(ValueError):
        update_labels(store, {"a": np.zeros((2, 3)), "b": np.zeros((2, 2))})
    with pytest.raises(ValueError):
        LabelStore.from_labels({"a": np.full((2, 2), 1.5)})


def test_save_and_load(tmp_path, rng):
    store = LabelStore.from_labels({"a": rng.random((4, 5)), "b": rng.random((4, 5))}, const_schedule(0.5))
    save_store(store, tmp_path)
    store2 = update_labels(store, {"a": np.zeros((4, 5)), "b": np.ones((4, 5))})
    save_store(store2, tmp_path)
    manifest = (tmp_path / "manifest.txt").read_text()
    assert "lambda_epoch_1=0.5" in manifest and "persisted_epochs=1,2" in manifest
    back = load_store(tmp_path, 2)
    assert back.epoch == 2
    np.testing.assert_allclose(back["a"], store2["a"], atol=1 / 510 + 1e-7)
    assert read_label(tmp_path / "epoch_1" / "a.png").values.shape == (4, 5)
