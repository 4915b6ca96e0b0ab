"""Paired time-series containers, segment cropping, fold splitting and I/O.

Signals are stored channels-first, shape ``(K, T)``. A dataset is a list of
temporally aligned ``(x, y)`` pairs sharing channel counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


class DatasetError(ValueError):
    """Raised when a dataset or one of its files violates the data model."""


@dataclass(frozen=True, eq=False)
class Signal:
    """Multichannel real-valued time series of shape (channels, time)."""

    values: np.ndarray
    channel_names: Optional[tuple[str, ...]] = None
    sample_rate_hz: Optional[float] = None

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[None, :]
        if values.ndim != 2:
            raise DatasetError(f"signal values must be 2-D (K, T), got shape {values.shape}")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise DatasetError(f"signal needs K >= 1 and T >= 1, got shape {values.shape}")
        bad = np.argwhere(~np.isfinite(values))
        if bad.size:
            ch, idx = bad[0]
            raise DatasetError(f"non-finite value at channel {ch}, index {idx}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.channel_names is not None:
            names = tuple(self.channel_names)
            if len(names) != values.shape[0]:
                raise DatasetError(
                    f"{len(names)} channel names given for {values.shape[0]} channels"
                )
            object.__setattr__(self, "channel_names", names)
        if self.sample_rate_hz is not None and not self.sample_rate_hz > 0:
            raise DatasetError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Signal):
            return NotImplemented
        return (
            self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
            and self.channel_names == other.channel_names
            and self.sample_rate_hz == other.sample_rate_hz
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class SignalPair:
    """Two temporally aligned signals; ``group_id`` names the subject if any."""

    x: Signal
    y: Signal
    pair_id: str
    group_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.x.length != self.y.length:
            raise DatasetError(
                f"pair {self.pair_id!r}: length mismatch x.T={self.x.length}, y.T={self.y.length}"
            )

    @property
    def length(self) -> int:
        return self.x.length


@dataclass(frozen=True)
class SignalDataset:
    """Collection of signal pairs with fixed channel counts."""

    pairs: tuple[SignalPair, ...]
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        pairs = tuple(self.pairs)
        object.__setattr__(self, "pairs", pairs)
        ids = [p.pair_id for p in pairs]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate pair_id(s): {dupes}")
        if pairs:
            kx, ky = pairs[0].x.n_channels, pairs[0].y.n_channels
            for p in pairs[1:]:
                if (p.x.n_channels, p.y.n_channels) != (kx, ky):
                    raise DatasetError(
                        f"pair {p.pair_id!r} has channels ({p.x.n_channels}, {p.y.n_channels}), "
                        f"dataset expects ({kx}, {ky})"
                    )

    @property
    def N(self) -> int:
        return len(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def k_x(self) -> int:
        return self.pairs[0].x.n_channels

    @property
    def k_y(self) -> int:
        return self.pairs[0].y.n_channels

    def subset(self, indices: Sequence[int]) -> SignalDataset:
        return SignalDataset(tuple(self.pairs[i] for i in indices), dict(self.metadata))


@dataclass(frozen=True, eq=False)
class Segment:
    """Crop ``values[:, origin_t : origin_t + width_w]`` of a signal."""

    values: np.ndarray
    origin_t: int
    width_w: int

    def __post_init__(self) -> None:
        if self.width_w < 1:
            raise DatasetError(f"segment width must be >= 1, got {self.width_w}")
        if self.origin_t < 0:
            raise DatasetError(f"segment origin must be >= 0, got {self.origin_t}")
        if self.values.shape[-1] != self.width_w:
            raise DatasetError(
                f"segment values have length {self.values.shape[-1]}, width is {self.width_w}"
            )


def extract_segment(signal: Signal, t: int, w: int) -> Segment:
    """Crop columns ``[t, t + w)`` of ``signal``."""
    T = signal.length
    if w < 1 or t < 0 or t > T - w:
        raise DatasetError(f"segment t={t}, w={w} out of range for T={T} (need 0 <= t <= T - w)")
    return Segment(signal.values[:, t : t + w], int(t), int(w))


def split_folds(
    dataset: SignalDataset, k: int, seed: int, by_group: bool = False
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle pairs (or groups) into ``k`` test folds.

    Returns a list of ``(train_indices, test_indices)``; the test sets
    partition ``range(N)``. With ``by_group`` all pairs of one ``group_id``
    land in the same test fold.
    """
    n = dataset.N
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    if by_group:
        missing = [p.pair_id for p in dataset.pairs if p.group_id is None]
        if missing:
            raise DatasetError(f"by_group split requested but pairs lack group_id: {missing[:5]}")
        groups = sorted({p.group_id for p in dataset.pairs})
        if k > len(groups):
            raise ValueError(f"k={k} exceeds number of groups ({len(groups)})")
        order = rng.permutation(len(groups))
        fold_of_group = {groups[g]: i % k for i, g in enumerate(order)}
        fold_of = np.array([fold_of_group[p.group_id] for p in dataset.pairs])
    else:
        if k > n:
            raise ValueError(f"k={k} exceeds number of pairs ({n})")
        fold_of = np.empty(n, dtype=int)
        fold_of[rng.permutation(n)] = np.arange(n) % k
    all_idx = np.arange(n)
    return [(all_idx[fold_of != i], all_idx[fold_of == i]) for i in range(k)]


def _standardize_values(values: np.ndarray) -> np.ndarray:
    mean = values.mean(axis=1, keepdims=True)
    std = values.std(axis=1, keepdims=True)
    centered = values - mean
    out = np.zeros_like(values)
    ok = std[:, 0] > 0
    out[ok] = centered[ok] / std[ok]
    return out


def standardize_signal(signal: Signal) -> Signal:
    return replace(signal, values=_standardize_values(signal.values))


def per_channel_standardize(dataset: SignalDataset) -> SignalDataset:
    """Z-score every channel of every signal over its own time axis.

    Population standard deviation is used; constant channels become zeros.
    """
    pairs = tuple(
        replace(p, x=standardize_signal(p.x), y=standardize_signal(p.y)) for p in dataset.pairs
    )
    return SignalDataset(pairs, dict(dataset.metadata))


# ---------------------------------------------------------------- file format


def _write_csv(path: Path, signal: Signal) -> None:
    # %.17g round-trips float64 exactly
    np.savetxt(path, signal.values.T, delimiter=",", fmt="%.17g")


def _read_csv(path: Path, pair_id: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"pair {pair_id!r}: missing file {path}")
    try:
        data = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"pair {pair_id!r}: cannot parse {path}: {exc}") from exc
    values = data.T
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        ch, idx = bad[0]
        raise DatasetError(f"pair {pair_id!r}: non-finite value at channel {ch}, index {idx}")
    return values


def save_dataset(dataset: SignalDataset, directory: str | Path) -> Path:
    """Write ``manifest.json`` plus one CSV per signal; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, pair in enumerate(dataset.pairs):
        x_file, y_file = f"pair{i:05d}_x.csv", f"pair{i:05d}_y.csv"
        _write_csv(directory / x_file, pair.x)
        _write_csv(directory / y_file, pair.y)
        entry = {"pair_id": pair.pair_id, "x_file": x_file, "y_file": y_file}
        if pair.group_id is not None:
            entry["group_id"] = pair.group_id
        entries.append(entry)
    manifest = {"version": MANIFEST_VERSION, "pairs": entries}
    if dataset.metadata:
        manifest["metadata"] = dataset.metadata
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_dataset(manifest_path: str | Path) -> SignalDataset:
    """Read a dataset written by :func:`save_dataset` (or by hand).

    ``manifest_path`` may be the manifest file or its directory.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')!r}")
    root = manifest_path.parent
    pairs = []
    for entry in manifest["pairs"]:
        pid = entry["pair_id"]
        xv = _read_csv(root / entry["x_file"], pid)
        yv = _read_csv(root / entry["y_file"], pid)
        pairs.append(SignalPair(Signal(xv), Signal(yv), pid, entry.get("group_id")))
    return SignalDataset(tuple(pairs), manifest.get("metadata", {}))
