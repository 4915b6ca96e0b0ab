"""Self-supervised training on aligned vs. misaligned segment pairs."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ConcurrenceModel, EncoderConfig, build_model, check_width
from .nn import AdamState, adam_step
from .signals import DatasetError, Segment, SignalDataset, extract_segment

log = logging.getLogger(__name__)

CONCURRENT = 1
NON_CONCURRENT = 0


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 100
    segments_per_pair: int = 4
    positive_probability: float = 0.5
    learning_rate: float = 1e-4
    validation_fraction: float = 0.2
    early_stopping: bool = False
    patience: int = 10
    min_misalignment_gap: int = 0
    minibatch_size: Optional[int] = None
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.positive_probability < 1.0:
            raise ValueError("positive_probability must be in (0, 1)")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.segments_per_pair < 1:
            raise ValueError("segments_per_pair must be >= 1")
        if self.min_misalignment_gap < 0:
            raise ValueError("min_misalignment_gap must be >= 0")
        if self.minibatch_size is not None and self.minibatch_size < 2:
            raise ValueError("minibatch_size must be >= 2 (batch norm needs two samples)")


@dataclass(frozen=True)
class LabeledSegmentPair:
    seg_x: Segment
    seg_y: Segment
    label: int
    pair_index: int


@dataclass(frozen=True)
class IndexBatch:
    """Sampled crops as index arrays: pair, x origin, y origin, label."""

    pair: np.ndarray
    t_x: np.ndarray
    t_y: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return len(self.label)


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_iteration: Optional[int] = None
    stopped_early: bool = False

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "train_loss", "val_loss"])
            for i, loss in enumerate(self.train_loss):
                val = self.val_loss[i] if i < len(self.val_loss) else ""
                writer.writerow([i + 1, repr(loss), repr(val) if val != "" else ""])


def _check_lengths(dataset: SignalDataset, w: int, gap: int) -> None:
    for p in dataset.pairs:
        if p.length < w + 1 + gap:
            raise DatasetError(
                f"pair {p.pair_id!r}: T={p.length} too short for w={w} "
                f"(need T >= w + 1 + min_misalignment_gap = {w + 1 + gap})"
            )


def _misaligned_origin(t: int, n_starts: int, gap: int, u: float) -> int:
    """Map ``u`` in [0, 1) to a uniform start with ``|t' - t| > gap``."""
    lo, hi = max(0, t - gap), min(n_starts - 1, t + gap)
    n_valid = n_starts - (hi - lo + 1)
    k = int(u * n_valid)
    return k if k < lo else k + (hi - lo + 1)


def sample_indices(dataset: SignalDataset, w: int, segments_per_pair: int,
                   positive_probability: float, rng: np.random.Generator,
                   min_misalignment_gap: int = 0, balanced: bool = False) -> IndexBatch:
    """Draw labeled crop positions, ``segments_per_pair`` per signal pair.

    Positives share one uniform origin; negatives draw ``t'`` uniformly among
    origins with ``|t' - t| > min_misalignment_gap`` (and ``t' != t``). Both
    crops always come from the same pair. Labels are iid Bernoulli draws, or
    with ``balanced`` exactly ``m * positive_probability`` positives per pair
    in shuffled order (a fractional remainder is settled by one coin flip).
    """
    gap = min_misalignment_gap
    _check_lengths(dataset, w, gap)
    m = segments_per_pair
    pairs, tx, ty, labels = [], [], [], []
    for i, p in enumerate(dataset.pairs):
        n_starts = p.length - w + 1
        if balanced:
            k = m * positive_probability
            n_pos = int(k) + int(k > int(k) and rng.random() < k - int(k))
            lab = rng.permutation(m) < n_pos
        else:
            lab = rng.random(m) < positive_probability
        t = rng.integers(0, n_starts, size=m)
        u = rng.random(m)
        t2 = t.copy()
        for j in np.flatnonzero(~lab):
            # re-draw t when no partner origin exists beyond the gap
            while n_starts - (min(n_starts - 1, t[j] + gap) - max(0, t[j] - gap) + 1) < 1:
                t[j] = rng.integers(0, n_starts)
            t2[j] = _misaligned_origin(int(t[j]), n_starts, gap, u[j])
        pairs.append(np.full(m, i))
        tx.append(t)
        ty.append(t2)
        labels.append(lab.astype(int))
    if not pairs:
        empty = np.zeros(0, dtype=int)
        return IndexBatch(empty, empty, empty, empty)
    return IndexBatch(np.concatenate(pairs), np.concatenate(tx), np.concatenate(ty),
                      np.concatenate(labels))


def gather(dataset: SignalDataset, batch: IndexBatch, w: int,
           y_pair: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack crops into ``(n, K_x, w)`` and ``(n, K_y, w)`` arrays.

    ``y_pair`` optionally takes the y crop from a different pair (used to
    build mismatched null pairings).
    """
    y_src = batch.pair if y_pair is None else y_pair
    X = np.stack([dataset.pairs[i].x.values[:, t : t + w] for i, t in zip(batch.pair, batch.t_x)])
    Y = np.stack([dataset.pairs[i].y.values[:, t : t + w] for i, t in zip(y_src, batch.t_y)])
    return X, Y


def sample_batch(dataset: SignalDataset, w: int, cfg: TrainConfig,
                 rng: np.random.Generator) -> list[LabeledSegmentPair]:
    batch = sample_indices(dataset, w, cfg.segments_per_pair, cfg.positive_probability, rng,
                           cfg.min_misalignment_gap)
    out = []
    for i, t, t2, lab in zip(batch.pair, batch.t_x, batch.t_y, batch.label):
        p = dataset.pairs[i]
        out.append(LabeledSegmentPair(extract_segment(p.x, int(t), w),
                                      extract_segment(p.y, int(t2), w), int(lab), int(i)))
    return out


def logistic_loss(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean ``log(1 + exp(-z s))`` with ``z = +1`` for concurrent, ``-1`` otherwise.

    Returns the loss and its gradient with respect to each score.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("logistic_loss needs a nonempty batch")
    z = np.where(np.asarray(labels) == CONCURRENT, 1.0, -1.0)
    margin = z * s
    loss = float(np.mean(np.logaddexp(0.0, -margin)))
    # d/ds log(1 + e^{-zs}) = -z * sigmoid(-zs)
    grad = -z * np.exp(-np.logaddexp(0.0, margin)) / s.size
    return loss, grad


def _split_validation(n: int, fraction: float, rng: np.random.Generator):
    n_val = int(round(n * fraction))
    n_val = min(max(n_val, 1), n - 1) if n >= 2 else 0
    order = rng.permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _minibatches(n: int, size: Optional[int], rng: np.random.Generator) -> list:
    if size is None or size >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    chunks = [order[i : i + size] for i in range(0, n, size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate(chunks[-2:])
        chunks.pop()
    return chunks


def train(dataset: SignalDataset, w: int, encoder_cfg: EncoderConfig,
          train_cfg: TrainConfig) -> tuple[ConcurrenceModel, TrainingHistory]:
    """Fit a model; each iteration is one pass over a freshly sampled batch.

    The batch holds ``segments_per_pair`` crops from every training pair and
    is taken as a single Adam step, or, with ``minibatch_size``, as shuffled
    minibatches with one step each. With ``early_stopping`` a validation
    split of pairs is held out and the best parameters (by validation loss)
    are restored at the end.
    """
    if dataset.N == 0:
        raise DatasetError("cannot train on an empty dataset")
    check_width(encoder_cfg, w)
    _check_lengths(dataset, w, train_cfg.min_misalignment_gap)
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(3)
    init_seed = int(seeds[0].generate_state(1)[0])
    rng = np.random.default_rng(seeds[1])
    model = build_model(encoder_cfg, dataset.k_x, dataset.k_y, w, seed=init_seed)

    train_set, val_set = dataset, None
    if train_cfg.early_stopping and dataset.N >= 2:
        tr_idx, va_idx = _split_validation(dataset.N, train_cfg.validation_fraction,
                                           np.random.default_rng(seeds[2]))
        train_set, val_set = dataset.subset(tr_idx), dataset.subset(va_idx)
    val_X = val_Y = val_labels = None
    if val_set is not None:
        vb = sample_indices(val_set, w, train_cfg.segments_per_pair,
                            train_cfg.positive_probability, np.random.default_rng(seeds[2]),
                            train_cfg.min_misalignment_gap)
        val_X, val_Y = gather(val_set, vb, w)
        val_labels = vb.label

    adam = AdamState(lr=train_cfg.learning_rate)
    history = TrainingHistory()
    best_loss, best_state, since_best = np.inf, None, 0
    for it in range(train_cfg.iterations):
        batch = sample_indices(train_set, w, train_cfg.segments_per_pair,
                               train_cfg.positive_probability, rng,
                               train_cfg.min_misalignment_gap)
        X, Y = gather(train_set, batch, w)
        losses = []
        for idx in _minibatches(len(batch), train_cfg.minibatch_size, rng):
            scores = model.forward(X[idx], Y[idx], training=True, rng=rng)
            loss, dscores = logistic_loss(scores, batch.label[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at iteration {it + 1}")
            model.backward(dscores)
            adam_step([p for _, p in model.named_params()],
                      [g for _, g in model.named_grads()], adam)
            losses.append(loss * len(idx))
        history.train_loss.append(float(sum(losses) / len(batch)))
        if val_X is not None:
            val_loss, _ = logistic_loss(model.predict_scores(val_X, val_Y), val_labels)
            history.val_loss.append(val_loss)
            if val_loss < best_loss:
                best_loss, best_state, since_best = val_loss, model.state_dict(), 0
                history.best_iteration = it + 1
            else:
                since_best += 1
                if since_best >= train_cfg.patience:
                    history.stopped_early = True
                    log.debug("early stop at iteration %d", it + 1)
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history
