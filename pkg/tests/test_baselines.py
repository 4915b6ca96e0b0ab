import json

import numpy as np
import pytest
from scipy import stats

from concurrence.baselines import (
    METHODS,
    BaselineResult,
    circular_shift,
    conditional_mutual_information,
    dataset_test,
    distance_correlation,
    equal_frequency_bins,
    hsic,
    median_bandwidth,
    mutual_information,
    pearson,
    register_method,
    windowed_cross_correlation,
)
from concurrence.signals import Signal, SignalDataset, SignalPair


def pair_of(x, y, pid="p"):
    return SignalPair(Signal(np.asarray(x, dtype=float)), Signal(np.asarray(y, dtype=float)), pid)


def brute_dcor(x, y):
    """Literal double-centred distance sums over vector samples (rows)."""
    n = len(x)

    def centred(v):
        a = [[float(np.linalg.norm(v[k] - v[l])) for l in range(n)] for k in range(n)]
        row = [sum(a[k]) / n for k in range(n)]
        col = [sum(a[k][l] for k in range(n)) / n for l in range(n)]
        tot = sum(row) / n
        return [[a[k][l] - row[k] - col[l] + tot for l in range(n)] for k in range(n)]

    A, B = centred(x), centred(y)
    dcov = sum(A[k][l] * B[k][l] for k in range(n) for l in range(n)) / n**2
    vx = sum(A[k][l] ** 2 for k in range(n) for l in range(n)) / n**2
    vy = sum(B[k][l] ** 2 for k in range(n) for l in range(n)) / n**2
    return np.sqrt(dcov / np.sqrt(vx * vy))


def brute_hsic(x, y, bx, by):
    """Biased HSIC as the three-term V-statistic sum over kernel entries."""
    n = len(x)
    K = [[np.exp(-np.sum((x[i] - x[j]) ** 2) / (2 * bx * bx)) for j in range(n)] for i in range(n)]
    L = [[np.exp(-np.sum((y[i] - y[j]) ** 2) / (2 * by * by)) for j in range(n)] for i in range(n)]
    t1 = sum(K[i][j] * L[i][j] for i in range(n) for j in range(n)) / n**2
    t2 = sum(K[i][j] * L[q][r] for i in range(n) for j in range(n)
             for q in range(n) for r in range(n)) / n**4
    t3 = sum(K[i][j] * L[i][q] for i in range(n) for j in range(n) for q in range(n)) / n**3
    return t1 + t2 - 2 * t3


class TestPearson:
    def test_identity_and_affine(self):
        x = np.random.default_rng(0).normal(size=100)
        assert pearson(pair_of(x, x)) == pytest.approx(1.0)
        assert pearson(pair_of(x, -2 * x + 3)) == pytest.approx(-1.0)

    def test_independent(self):
        rng = np.random.default_rng(1)
        assert abs(pearson(pair_of(rng.normal(size=10**4), rng.normal(size=10**4)))) <= 0.05

    def test_closed_form(self):
        # x = (1,2,3,4), y = (1,3,2,4): cov = 4/4... r = 0.8 exactly
        assert pearson(pair_of([1, 2, 3, 4], [1, 3, 2, 4])) == pytest.approx(0.8, abs=1e-15)

    def test_flat_signal(self):
        with pytest.warns(RuntimeWarning, match="zero-variance"):
            assert pearson(pair_of(np.ones(10), np.arange(10))) == 0.0

    def test_affine_invariance_of_abs(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=200), rng.normal(size=200) + 0.3 * np.arange(200) / 200
        r = pearson(pair_of(x, y))
        assert abs(pearson(pair_of(3 * x - 1, -0.5 * y + 7))) == pytest.approx(abs(r))


class TestWCC:
    def test_lag_recovery(self):
        # trailing samples leave room for the last window's +5 lag
        x = np.random.default_rng(0).normal(size=850)
        stat = windowed_cross_correlation(pair_of(x, np.roll(x, 5)), window=100, max_lag=10)
        assert stat == pytest.approx(1.0, abs=1e-12)

    def test_reduces_to_pearson(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=300), rng.normal(size=300)
        p = pair_of(x, 0.3 * x + y)
        assert windowed_cross_correlation(p, window=300, max_lag=0) == pytest.approx(abs(pearson(p)))

    def test_invalid(self):
        p = pair_of(np.zeros(50), np.zeros(50))
        with pytest.raises(ValueError):
            windowed_cross_correlation(p, window=60)
        with pytest.raises(ValueError):
            windowed_cross_correlation(p, window=10, max_lag=10)


class TestDistanceCorrelation:
    @pytest.mark.parametrize("seed", range(20))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(10, 51))
        kx, ky = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x, y = rng.normal(size=(kx, n)), rng.normal(size=(ky, n))
        y[0] += x[0] ** 2
        got = distance_correlation(pair_of(x, y))
        assert got == pytest.approx(brute_dcor(x.T, y.T), abs=1e-10)

    def test_identical(self):
        x = np.random.default_rng(0).normal(size=40)
        assert distance_correlation(pair_of(x, x)) == pytest.approx(1.0)

    def test_affine_invariance(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=60), rng.normal(size=60)
        a = distance_correlation(pair_of(x, x * y))
        assert distance_correlation(pair_of(5 * x + 2, -3 * (x * y) + 1)) == pytest.approx(a)

    def test_constant(self):
        assert distance_correlation(pair_of(np.ones(10), np.arange(10))) == 0.0


class TestHSIC:
    @pytest.mark.parametrize("seed", range(20))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(6, 16))
        x, y = rng.normal(size=(2, n)), rng.normal(size=(1, n))
        y[0] += np.sin(x[0])
        bx, by = rng.uniform(0.3, 2.0, size=2)
        got = hsic(pair_of(x, y), bandwidth=(bx, by))
        assert got == pytest.approx(brute_hsic(x.T, y.T, bx, by), abs=1e-10)

    def test_brute_force_median(self):
        rng = np.random.default_rng(99)
        x, y = rng.normal(size=(1, 30)), rng.normal(size=(1, 30))
        bx, by = median_bandwidth(x.T), median_bandwidth(y.T)
        assert hsic(pair_of(x, y)) == pytest.approx(brute_hsic(x.T, y.T, bx, by), abs=1e-10)

    def test_constant_y(self):
        x = np.random.default_rng(0).normal(size=40)
        assert hsic(pair_of(x, np.full(40, 2.0))) == pytest.approx(0.0, abs=1e-15)

    def test_self_dependence_positive(self):
        x = np.random.default_rng(1).normal(size=40)
        assert hsic(pair_of(x, x)) > 0

    def test_scale_invariance_with_median(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=80), rng.normal(size=80)
        y = y + x**2
        assert hsic(pair_of(4 * x, 4 * y)) == pytest.approx(hsic(pair_of(x, y)), rel=1e-12)

    def test_median_bandwidth_fallback(self):
        assert median_bandwidth(np.zeros((5, 1))) == 1.0


class TestInformation:
    def test_equal_frequency_bins(self):
        labels = equal_frequency_bins(np.arange(16.0)[::-1], 8)
        assert np.bincount(labels).tolist() == [2] * 8
        assert labels[0] == 7 and labels[-1] == 0

    def test_ties_share_bin(self):
        labels = equal_frequency_bins(np.array([1.0, 1.0, 1.0, 2.0]), 2)
        assert labels[0] == labels[1] == labels[2]

    def test_mi_bijection(self):
        x = np.random.default_rng(0).normal(size=8000)
        assert mutual_information(pair_of(x, np.exp(x))) == pytest.approx(np.log(8), abs=1e-12)

    def test_mi_independent(self):
        rng = np.random.default_rng(1)
        p = pair_of(rng.uniform(size=10**5), rng.uniform(size=10**5))
        assert mutual_information(p) <= 0.01

    def test_mi_symmetric(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=2000)
        y = x + rng.normal(size=2000)
        assert mutual_information(pair_of(x, y)) == pytest.approx(mutual_information(pair_of(y, x)))

    def test_mi_warns_small_sample(self):
        with pytest.warns(RuntimeWarning, match="biased"):
            mutual_information(pair_of(np.arange(50.0), np.arange(50.0)))

    def test_cmi_independent(self):
        rng = np.random.default_rng(3)
        y = np.cumsum(rng.normal(size=10**5)) * 0.01 + rng.normal(size=10**5)
        assert conditional_mutual_information(pair_of(rng.normal(size=10**5), y)) <= 0.02

    def test_cmi_conditioning_removes_lagged_copy(self):
        y = np.random.default_rng(4).normal(size=5000)
        x = np.roll(y, 1)  # x_t = y_{t-1}
        assert conditional_mutual_information(pair_of(x, y)) == pytest.approx(0.0, abs=1e-12)

    def test_cmi_detects_same_time_dependence(self):
        rng = np.random.default_rng(5)
        y = rng.normal(size=5000)
        assert conditional_mutual_information(pair_of(y + 0.5 * rng.normal(size=5000), y)) > 0.2

    def test_cmi_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            assert conditional_mutual_information(pair_of(rng.normal(size=400),
                                                          rng.normal(size=400)), bins=4) >= 0

    def test_invalid(self):
        p = pair_of(np.arange(400.0), np.arange(400.0))
        with pytest.raises(ValueError):
            mutual_information(p, bins=1)
        with pytest.raises(ValueError):
            conditional_mutual_information(p, lag_depth=0)


def independent_dataset(n, T, seed):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        # autocorrelated signals stress the circular-shift null
        x = np.convolve(rng.normal(size=T), np.ones(10), mode="same")
        y = np.convolve(rng.normal(size=T), np.ones(10), mode="same")
        pairs.append(pair_of(x, y, f"p{i}"))
    return SignalDataset(tuple(pairs))


class TestDatasetTest:
    def test_circular_shift(self):
        p = pair_of(np.arange(5.0), np.arange(5.0))
        np.testing.assert_array_equal(circular_shift(p, 2).y.values, [[3.0, 4.0, 0.0, 1.0, 2.0]])
        np.testing.assert_array_equal(circular_shift(p, 2).x.values, p.x.values)

    def test_dependent_detected(self):
        rng = np.random.default_rng(0)
        pairs = []
        for i in range(5):
            x = rng.normal(size=400)
            pairs.append(pair_of(x, x + rng.normal(size=400), f"p{i}"))
        res = dataset_test(SignalDataset(tuple(pairs)), "pearson", 99, seed=1)
        assert res.p_value == pytest.approx(0.01)
        assert len(res.per_pair_statistic) == 5 and len(res.null) == 99

    def test_null_calibration_pearson(self):
        rejections = sum(
            dataset_test(independent_dataset(10, 1000, s), "pearson", 99, seed=s).p_value <= 0.05
            for s in range(20))
        assert rejections <= 2

    def test_p_values_uniform(self):
        ps = [dataset_test(independent_dataset(5, 500, 100 + s), "pearson", 99, seed=s).p_value
              for s in range(50)]
        assert stats.kstest(ps, "uniform").pvalue > 0.01

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="unknown method"):
            dataset_test(independent_dataset(2, 50, 0), "nope")

    def test_kwargs_and_export(self, tmp_path):
        res = dataset_test(independent_dataset(3, 400, 0), "mi", 19, seed=0, bins=4)
        assert res.params["bins"] == 4
        res.to_json(tmp_path / "r.json")
        back = json.loads((tmp_path / "r.json").read_text())
        assert back["method"] == "mi" and back["p_value"] == res.p_value
        res.to_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "method,pair_index,statistic,p_value" and lines[-1].startswith("mi,all,")

    def test_register_method(self):
        register_method("first_x", lambda pair: float(pair.x.values[0, 0]))
        try:
            res = dataset_test(independent_dataset(2, 100, 0), "first_x", 19)
            assert isinstance(res, BaselineResult)
        finally:
            METHODS.pop("first_x")


@pytest.mark.slow
def test_challenge_suite_detection_band():
    from concurrence.synth import generate_challenge_suite

    suite, _ = generate_challenge_suite(20, 100, T=1000, seed=7)
    hits = {m: sum(dataset_test(ds, m, 99, seed=i).p_value <= 0.05 for i, ds in enumerate(suite))
            for m in ("pearson", "cmi")}
    assert hits["pearson"] <= 6  # at most 30% of the suite
    assert hits["cmi"] > hits["pearson"]
