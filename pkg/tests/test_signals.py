import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concurrence.signals import (
    DatasetError,
    Signal,
    SignalDataset,
    SignalPair,
    extract_segment,
    load_dataset,
    per_channel_standardize,
    save_dataset,
    split_folds,
)


def make_dataset(n, T=50, kx=1, ky=1, seed=0, groups=None):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        g = groups[i] if groups else None
        pairs.append(SignalPair(Signal(rng.normal(size=(kx, T))), Signal(rng.normal(size=(ky, T))),
                                f"p{i}", g))
    return SignalDataset(tuple(pairs))


class TestTypes:
    def test_non_finite_rejected(self):
        v = np.zeros((2, 5))
        v[1, 3] = np.nan
        with pytest.raises(DatasetError, match="channel 1, index 3"):
            Signal(v)

    def test_length_mismatch_names_pair(self):
        with pytest.raises(DatasetError, match="bad"):
            SignalPair(Signal(np.zeros(500)), Signal(np.zeros(499)), "bad")

    def test_channel_counts_must_agree(self):
        a = SignalPair(Signal(np.zeros((1, 5))), Signal(np.zeros((1, 5))), "a")
        b = SignalPair(Signal(np.zeros((2, 5))), Signal(np.zeros((1, 5))), "b")
        with pytest.raises(DatasetError, match="'b'"):
            SignalDataset((a, b))

    def test_duplicate_ids(self):
        a = SignalPair(Signal(np.zeros(5)), Signal(np.zeros(5)), "a")
        with pytest.raises(DatasetError, match="duplicate"):
            SignalDataset((a, a))

    def test_values_read_only(self):
        s = Signal(np.arange(4.0))
        with pytest.raises(ValueError):
            s.values[0, 0] = 1.0


class TestExtractSegment:
    def test_whole_signal(self):
        s = Signal(np.arange(10.0))
        seg = extract_segment(s, 0, 10)
        np.testing.assert_array_equal(seg.values, s.values)

    def test_out_of_range(self):
        with pytest.raises(DatasetError):
            extract_segment(Signal(np.arange(10.0)), 7, 4)

    def test_ramp(self):
        seg = extract_segment(Signal(np.arange(10.0)), 3, 2)
        np.testing.assert_array_equal(seg.values, [[3.0, 4.0]])
        assert (seg.origin_t, seg.width_w) == (3, 2)

    @given(T=st.integers(1, 40), w=st.integers(1, 40))
    def test_tiling(self, T, w):
        if w > T:
            return
        s = Signal(np.arange(float(T)))
        tiles = [extract_segment(s, t, w).values for t in range(0, T - w + 1, w)]
        covered = np.concatenate(tiles, axis=1)
        np.testing.assert_array_equal(covered, s.values[:, : covered.shape[1]])


class TestSplitFolds:
    def test_sizes(self):
        folds = split_folds(make_dataset(8), 4, seed=0)
        assert [len(te) for _, te in folds] == [2, 2, 2, 2]

    def test_groups(self):
        groups = ["s0", "s0", "s1", "s1", "s2", "s2", "s3", "s3"]
        ds = make_dataset(8, groups=groups)
        for tr, te in split_folds(ds, 4, seed=3, by_group=True):
            test_groups = {groups[i] for i in te}
            assert len(test_groups) == 1 and len(te) == 2
            assert not test_groups & {groups[i] for i in tr}

    def test_deterministic(self):
        ds = make_dataset(10)
        a = split_folds(ds, 3, seed=5)
        b = split_folds(ds, 3, seed=5)
        for (a1, a2), (b1, b2) in zip(a, b):
            np.testing.assert_array_equal(a1, b1)
            np.testing.assert_array_equal(a2, b2)

    def test_errors(self):
        with pytest.raises(ValueError):
            split_folds(make_dataset(3), 4, seed=0)
        with pytest.raises(DatasetError):
            split_folds(make_dataset(4), 2, seed=0, by_group=True)

    @given(n=st.integers(2, 30), k=st.integers(2, 6), seed=st.integers(0, 1000))
    @settings(max_examples=30)
    def test_partition(self, n, k, seed):
        if k > n:
            return
        folds = split_folds(make_dataset(n, T=3), k, seed)
        tests = np.concatenate([te for _, te in folds])
        assert sorted(tests.tolist()) == list(range(n))
        for tr, te in folds:
            assert not set(tr) & set(te)
            assert len(tr) + len(te) == n


class TestStandardize:
    def _one(self, values):
        ds = SignalDataset((SignalPair(Signal(values), Signal(values), "a"),))
        return per_channel_standardize(ds).pairs[0].x.values[0]

    def test_analytic(self):
        np.testing.assert_allclose(self._one(np.array([1.0, 2.0, 3.0])),
                                   [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)

    def test_constant(self):
        np.testing.assert_array_equal(self._one(np.array([5.0, 5.0, 5.0])), [0.0, 0.0, 0.0])

    def test_idempotent(self):
        v = self._one(np.random.default_rng(0).normal(size=200))
        np.testing.assert_allclose(self._one(v), v, atol=1e-12)


class TestIO:
    def test_roundtrip(self, tmp_path):
        ds = make_dataset(2, T=500)
        path = save_dataset(ds, tmp_path)
        back = load_dataset(path)
        assert back.N == 2 and back.k_x == back.k_y == 1
        assert back.pairs[0].length == 500
        for a, b in zip(ds.pairs, back.pairs):
            np.testing.assert_array_equal(a.x.values, b.x.values)
            np.testing.assert_array_equal(a.y.values, b.y.values)

    def test_hand_written_manifest(self, tmp_path):
        rng = np.random.default_rng(1)
        entries = []
        for i in range(2):
            for side in "xy":
                np.savetxt(tmp_path / f"{side}{i}.csv", rng.normal(size=(500, 1)), delimiter=",",
                           fmt="%.15g")
            entries.append({"pair_id": f"p{i}", "x_file": f"x{i}.csv", "y_file": f"y{i}.csv"})
        (tmp_path / "m.json").write_text(json.dumps({"version": 1, "pairs": entries}))
        ds = load_dataset(tmp_path / "m.json")
        assert (ds.N, ds.k_x, ds.k_y, ds.pairs[0].length) == (2, 1, 1, 500)

    def test_length_mismatch_on_load(self, tmp_path):
        np.savetxt(tmp_path / "x.csv", np.zeros(500))
        np.savetxt(tmp_path / "y.csv", np.zeros(499))
        (tmp_path / "manifest.json").write_text(json.dumps(
            {"version": 1, "pairs": [{"pair_id": "short", "x_file": "x.csv", "y_file": "y.csv"}]}))
        with pytest.raises(DatasetError, match="short"):
            load_dataset(tmp_path)

    def test_missing_file(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps(
            {"version": 1, "pairs": [{"pair_id": "a", "x_file": "nope.csv", "y_file": "y.csv"}]}))
        with pytest.raises(DatasetError, match="missing file"):
            load_dataset(tmp_path)

    def test_non_finite_on_load(self, tmp_path):
        (tmp_path / "x.csv").write_text("1.0\nnan\n2.0\n")
        (tmp_path / "y.csv").write_text("1.0\n1.0\n2.0\n")
        (tmp_path / "manifest.json").write_text(json.dumps(
            {"version": 1, "pairs": [{"pair_id": "nanpair", "x_file": "x.csv", "y_file": "y.csv"}]}))
        with pytest.raises(DatasetError, match="nanpair.*channel 0, index 1"):
            load_dataset(tmp_path)

    def test_single_pair_layout(self, tmp_path):
        save_dataset(make_dataset(1), tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == [
            "manifest.json", "pair00000_x.csv", "pair00000_y.csv"]

    def test_empty(self, tmp_path):
        path = save_dataset(SignalDataset(()), tmp_path)
        assert json.loads(path.read_text())["pairs"] == []
        assert load_dataset(path).N == 0

    def test_three_channels(self, tmp_path):
        save_dataset(make_dataset(1, kx=3), tmp_path)
        first = (tmp_path / "pair00000_x.csv").read_text().splitlines()[0]
        assert len(first.split(",")) == 3

    def test_precision(self, tmp_path):
        v = np.array([[np.pi * 1e-7, 1 / 3, 123456.789012345678, -2.718281828459045]])
        ds = SignalDataset((SignalPair(Signal(v), Signal(v), "a", "g"),))
        back = load_dataset(save_dataset(ds, tmp_path))
        np.testing.assert_allclose(back.pairs[0].x.values, v, rtol=1e-12)
        assert back.pairs[0].group_id == "g"
