"""Classical dependence statistics with circular-shift permutation tests.

Each statistic treats the time points of a pair as (dependent) samples of
``(x_t, y_t)``. Scalar measures (Pearson, WCC, MI, CMI) reduce multichannel
signals to their channel mean; distance correlation and HSIC use the full
channel vectors.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
from scipy.spatial.distance import cdist

from .signals import DatasetError, Signal, SignalDataset, SignalPair


def _scalar(signal: Signal) -> np.ndarray:
    return signal.values.mean(axis=0)


def _vectors(signal: Signal) -> np.ndarray:
    return signal.values.T  # (T, K)


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if den == 0:
        return 0.0
    return float(np.dot(a, b) / den)


def pearson(pair: SignalPair) -> float:
    """Sample correlation of the channel-mean series; 0 (with a warning) if either is flat."""
    if pair.length < 2:
        raise DatasetError(f"pair {pair.pair_id!r}: pearson needs T >= 2")
    x, y = _scalar(pair.x), _scalar(pair.y)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        warnings.warn(f"pair {pair.pair_id!r}: zero-variance signal, pearson set to 0",
                      RuntimeWarning)
        return 0.0
    return _corr(x, y)


def windowed_cross_correlation(pair: SignalPair, window: Optional[int] = None,
                               max_lag: Optional[int] = None) -> float:
    """Mean over non-overlapping windows of ``max_lag |corr(x_win, y_win shifted)|``.

    Lags that would run the y window past either end are skipped.
    Defaults: ``window = T // 8``, ``max_lag = window // 4``.
    """
    T = pair.length
    window = max(2, T // 8) if window is None else window
    max_lag = window // 4 if max_lag is None else max_lag
    if not 2 <= window <= T:
        raise ValueError(f"window must be in [2, T={T}], got {window}")
    if not 0 <= max_lag < window:
        raise ValueError(f"max_lag must be in [0, window), got {max_lag}")
    x, y = _scalar(pair.x), _scalar(pair.y)
    best = []
    for s in range(0, T - window + 1, window):
        xw = x[s : s + window]
        vals = [abs(_corr(xw, y[s + lag : s + lag + window]))
                for lag in range(-max_lag, max_lag + 1)
                if 0 <= s + lag and s + lag + window <= T]
        best.append(max(vals))
    return float(np.mean(best))


def _double_center(d: np.ndarray) -> np.ndarray:
    return d - d.mean(axis=0, keepdims=True) - d.mean(axis=1, keepdims=True) + d.mean()


def distance_correlation(pair: SignalPair) -> float:
    """Sample distance correlation (V-statistic) of the channel vectors."""
    if pair.length < 4:
        raise DatasetError(f"pair {pair.pair_id!r}: distance correlation needs T >= 4")
    xv, yv = _vectors(pair.x), _vectors(pair.y)
    A = _double_center(cdist(xv, xv))
    B = _double_center(cdist(yv, yv))
    dcov = np.mean(A * B)
    dvar = np.mean(A * A) * np.mean(B * B)
    if dvar <= 0:
        return 0.0
    return float(np.sqrt(max(dcov, 0.0) / np.sqrt(dvar)))


def median_bandwidth(v: np.ndarray) -> float:
    """Median of the nonzero pairwise Euclidean distances; 1 if there are none."""
    d = cdist(v, v)
    d = d[np.triu_indices_from(d, k=1)]
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def gaussian_gram(v: np.ndarray, bandwidth: float) -> np.ndarray:
    d2 = cdist(v, v, "sqeuclidean")
    return np.exp(-d2 / (2.0 * bandwidth * bandwidth))


def hsic(pair: SignalPair, bandwidth: Union[str, float, tuple] = "median") -> float:
    """Biased HSIC ``trace(K H L H) / n^2`` with Gaussian kernels.

    ``bandwidth`` is ``"median"`` (heuristic on each side), a number used for
    both sides, or an ``(x, y)`` tuple.
    """
    n = pair.length
    if n < 4:
        raise DatasetError(f"pair {pair.pair_id!r}: HSIC needs T >= 4")
    xv, yv = _vectors(pair.x), _vectors(pair.y)
    if bandwidth == "median":
        bx, by = median_bandwidth(xv), median_bandwidth(yv)
    elif isinstance(bandwidth, tuple):
        bx, by = bandwidth
    else:
        bx = by = float(bandwidth)
    K = gaussian_gram(xv, bx)
    L = gaussian_gram(yv, by)
    Kc = _double_center(K)  # H K H
    return float(np.sum(Kc * L) / (n * n))


def equal_frequency_bins(v: np.ndarray, bins: int) -> np.ndarray:
    """Rank-based bin labels in ``0..bins-1`` with (near) equal counts; ties share a rank."""
    order = np.argsort(v, kind="stable")
    sorted_v = v[order]
    ranks = np.empty(len(v), dtype=np.int64)
    # tied values take the rank of their first occurrence
    ranks[order] = np.searchsorted(sorted_v, sorted_v, side="left")
    return (ranks * bins) // len(v)


def _entropy_of_labels(labels: np.ndarray) -> float:
    counts = np.bincount(labels)
    p = counts[counts > 0] / labels.size
    return float(-np.sum(p * np.log(p)))


def _check_bins(bins: int, T: int) -> None:
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if T < 5 * bins * bins:
        warnings.warn(f"T={T} < 5 * bins^2 = {5 * bins * bins}; histogram MI is strongly biased",
                      RuntimeWarning)


def mutual_information(pair: SignalPair, bins: int = 8) -> float:
    """Plug-in MI (nats) on equal-frequency bins of ``x_t`` and ``y_t``."""
    _check_bins(bins, pair.length)
    bx = equal_frequency_bins(_scalar(pair.x), bins)
    by = equal_frequency_bins(_scalar(pair.y), bins)
    mi = _entropy_of_labels(bx) + _entropy_of_labels(by) - _entropy_of_labels(bx * bins + by)
    return max(mi, 0.0)


def conditional_mutual_information(pair: SignalPair, bins: int = 8, lag_depth: int = 1) -> float:
    """Plug-in ``I(x_t ; y_t | y_{t - lag_depth})`` on equal-frequency bins (nats)."""
    if lag_depth < 1:
        raise ValueError(f"lag_depth must be >= 1, got {lag_depth}")
    T = pair.length
    if T <= lag_depth:
        raise DatasetError(f"pair {pair.pair_id!r}: T={T} must exceed lag_depth={lag_depth}")
    _check_bins(bins, T - lag_depth)
    x, y = _scalar(pair.x), _scalar(pair.y)
    bx = equal_frequency_bins(x[lag_depth:], bins)
    by = equal_frequency_bins(y[lag_depth:], bins)
    bz = equal_frequency_bins(y[:-lag_depth], bins)
    h = _entropy_of_labels
    cmi = h(bx * bins + bz) + h(by * bins + bz) - h((bx * bins + by) * bins + bz) - h(bz)
    return max(cmi, 0.0)


METHODS: dict[str, Callable[..., float]] = {
    "pearson": pearson,
    "wcc": windowed_cross_correlation,
    "dc": distance_correlation,
    "hsic": hsic,
    "mi": mutual_information,
    "cmi": conditional_mutual_information,
}


def register_method(name: str, fn: Callable[[SignalPair], float]) -> None:
    """Plug in an external per-pair statistic (e.g. an MGC adapter)."""
    METHODS[name] = fn


@dataclass
class BaselineResult:
    method: str
    per_pair_statistic: list[float]
    dataset_statistic: float
    p_value: float
    params: dict = field(default_factory=dict)
    null: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "pair_index", "statistic", "p_value"])
            for i, s in enumerate(self.per_pair_statistic):
                writer.writerow([self.method, i, repr(s), ""])
            writer.writerow([self.method, "all", repr(self.dataset_statistic), repr(self.p_value)])


def circular_shift(pair: SignalPair, offset: int) -> SignalPair:
    return SignalPair(pair.x, Signal(np.roll(pair.y.values, offset, axis=1)), pair.pair_id,
                      pair.group_id)


def _statistic(method: str, pair: SignalPair, kwargs: dict) -> float:
    fn = METHODS[method]
    if method == "pearson":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return fn(pair, **kwargs)
    return fn(pair, **kwargs)


def dataset_test(dataset: SignalDataset, method: str, n_permutations: int = 99, seed: int = 0,
                 **method_kwargs) -> BaselineResult:
    """Mean per-pair statistic and its circular-shift permutation p-value.

    Every null draw rolls each pair's ``y`` independently by an offset
    uniform in ``[T/4, T - T/4]`` and recomputes the dataset mean. The
    comparison uses absolute values so negative correlations count too.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; available: {sorted(METHODS)}")
    if dataset.N < 2:
        raise DatasetError("dataset_test needs at least 2 pairs")
    rng = np.random.default_rng(seed)
    per_pair = [_statistic(method, p, method_kwargs) for p in dataset.pairs]
    observed = float(np.mean(per_pair))
    null = []
    for _ in range(n_permutations):
        vals = []
        for p in dataset.pairs:
            T = p.length
            lo, hi = int(np.ceil(T / 4)), T - int(np.ceil(T / 4))
            offset = int(rng.integers(lo, hi + 1)) if hi >= lo else T // 2
            vals.append(_statistic(method, circular_shift(p, offset), method_kwargs))
        null.append(float(np.mean(vals)))
    p_value = float((1 + np.sum(np.abs(null) >= abs(observed))) / (1 + n_permutations))
    return BaselineResult(method, [float(v) for v in per_pair], observed, p_value,
                          {"n_permutations": n_permutations, "seed": seed, **method_kwargs},
                          null)
