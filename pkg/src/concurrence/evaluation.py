"""Held-out accuracy, the concurrence coefficient, CV, PSCS traces and permutation tests."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .model import ConcurrenceModel, EncoderConfig
from .signals import (
    DatasetError,
    Signal,
    SignalDataset,
    SignalPair,
    per_channel_standardize,
    split_folds,
)
from .training import CONCURRENT, TrainConfig, gather, sample_indices, train

EVAL_SEGMENTS_PER_PAIR = 16


def derive_seed(master: int, *keys: int) -> int:
    """Stable child seed for job ``keys`` of a run seeded with ``master``."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def run_jobs(fn: Callable, jobs: Sequence, workers: int = 1) -> list:
    """Map ``fn`` over ``jobs`` in order; ``workers > 1`` uses a process pool."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def coefficient_from_accuracy(accuracy: float) -> tuple[float, float]:
    """``(2 * max(acc, 0.5) - 1, 2 * acc - 1)``."""
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError(f"accuracy must be in [0, 1], got {accuracy}")
    return 2.0 * max(accuracy, 0.5) - 1.0, 2.0 * accuracy - 1.0


@dataclass(frozen=True)
class AccuracyResult:
    accuracy: float
    n_correct: int
    n_total: int
    n_positive: int


def classify(scores: np.ndarray) -> np.ndarray:
    """Concurrent iff ``s > 0``; ties go to non-concurrent."""
    return (np.asarray(scores) > 0).astype(int)


def evaluate_accuracy(model: ConcurrenceModel, dataset: SignalDataset, w: int,
                      segments_per_pair: int = EVAL_SEGMENTS_PER_PAIR, seed: int = 0,
                      min_misalignment_gap: int = 0) -> AccuracyResult:
    """Fraction of aligned/misaligned crops whose sign is right.

    Each pair contributes exactly half aligned crops, so a classifier that
    ignores its input scores exactly 0.5.
    """
    batch = sample_indices(dataset, w, segments_per_pair, 0.5, np.random.default_rng(seed),
                           min_misalignment_gap, balanced=True)
    X, Y = gather(dataset, batch, w)
    pred = classify(model.predict_scores(X, Y))
    correct = int(np.sum(pred == batch.label))
    n = len(batch)
    return AccuracyResult(correct / n, correct, n, int(np.sum(batch.label == CONCURRENT)))


# --------------------------------------------------------------------- reports


@dataclass
class DependenceReport:
    """Dataset-level result; ``coefficient`` derives from the pooled test accuracy."""

    accuracy: float
    coefficient: float
    unclipped_coefficient: float
    n_segments_evaluated: int
    seed: int
    fold_mean_coefficient: Optional[float] = None
    p_value: Optional[float] = None
    per_fold: list[dict] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    @classmethod
    def from_counts(cls, n_correct: int, n_total: int, seed: int, **kwargs) -> DependenceReport:
        acc = n_correct / n_total
        coef, raw = coefficient_from_accuracy(acc)
        return cls(acc, coef, raw, n_total, seed, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path) -> DependenceReport:
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fold", "n_test_pairs", "accuracy", "coefficient",
                             "unclipped_coefficient", "p_value"])
            for f in self.per_fold:
                writer.writerow([f["fold"], f["n_test_pairs"], repr(f["accuracy"]),
                                 repr(f["coefficient"]), repr(f["unclipped_coefficient"]), ""])
            writer.writerow(["all", sum(f["n_test_pairs"] for f in self.per_fold) or "",
                             repr(self.accuracy), repr(self.coefficient),
                             repr(self.unclipped_coefficient),
                             "" if self.p_value is None else repr(self.p_value)])


@dataclass
class PSCSTrace:
    pair_id: str
    origins: list[int]
    scores: list[float]

    def __post_init__(self):
        if len(self.origins) != len(self.scores):
            raise ValueError("origins and scores differ in length")
        if any(b <= a for a, b in zip(self.origins, self.origins[1:])):
            raise ValueError("origins must be strictly increasing")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair_id", "t", "score"])
            for t, s in zip(self.origins, self.scores):
                writer.writerow([self.pair_id, t, repr(s)])


def pscs_trace(model: ConcurrenceModel, pair: SignalPair, w: int, stride: int) -> PSCSTrace:
    """Aligned-segment scores at ``t = 0, stride, 2 * stride, ... <= T - w``."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pair.length < w:
        raise DatasetError(f"pair {pair.pair_id!r}: T={pair.length} shorter than w={w}")
    origins = np.arange(0, pair.length - w + 1, stride)
    X = np.stack([pair.x.values[:, t : t + w] for t in origins])
    Y = np.stack([pair.y.values[:, t : t + w] for t in origins])
    scores = model.predict_scores(X, Y)
    return PSCSTrace(pair.pair_id, [int(t) for t in origins], [float(s) for s in scores])


# --------------------------------------------------------------- cross-validation


@dataclass
class CVResult:
    report: DependenceReport
    models: list[ConcurrenceModel]
    folds: list[tuple[np.ndarray, np.ndarray]]
    dataset: SignalDataset  # as trained on (standardized if requested)


def _fold_job(job):
    dataset, train_idx, test_idx, w, enc_cfg, tr_cfg, eval_seed, eval_spp = job
    if set(train_idx) & set(test_idx):
        raise AssertionError("train and test pairs overlap")
    model, history = train(dataset.subset(train_idx), w, enc_cfg, tr_cfg)
    res = evaluate_accuracy(model, dataset.subset(test_idx), w, eval_spp, eval_seed,
                            tr_cfg.min_misalignment_gap)
    return model, res, history.train_loss[-1]


def run_cv(dataset: SignalDataset, k: int, w: int, encoder_cfg: EncoderConfig,
           train_cfg: TrainConfig, by_group: bool = False,
           eval_segments_per_pair: int = EVAL_SEGMENTS_PER_PAIR, workers: int = 1) -> CVResult:
    """Train one model per fold and score its held-out pairs."""
    if train_cfg.standardize:
        dataset = per_channel_standardize(dataset)
    master = train_cfg.seed
    folds = split_folds(dataset, k, derive_seed(master, 0), by_group=by_group)
    jobs = []
    for i, (tr, te) in enumerate(folds):
        cfg_i = TrainConfig(**{**asdict(train_cfg), "seed": derive_seed(master, 1, i)})
        jobs.append((dataset, tr, te, w, encoder_cfg, cfg_i, derive_seed(master, 2, i),
                     eval_segments_per_pair))
    results = run_jobs(_fold_job, jobs, workers)
    per_fold, n_correct, n_total = [], 0, 0
    for i, ((tr, te), (_, res, last_loss)) in enumerate(zip(folds, results)):
        coef, raw = coefficient_from_accuracy(res.accuracy)
        per_fold.append({"fold": i, "n_test_pairs": int(len(te)), "accuracy": res.accuracy,
                         "coefficient": coef, "unclipped_coefficient": raw,
                         "final_train_loss": last_loss})
        n_correct += res.n_correct
        n_total += res.n_total
    report = DependenceReport.from_counts(
        n_correct, n_total, master,
        fold_mean_coefficient=float(np.mean([f["coefficient"] for f in per_fold])),
        per_fold=per_fold,
        params={"k": k, "w": w, "by_group": by_group, "encoder": asdict(encoder_cfg),
                "train": asdict(train_cfg), "eval_segments_per_pair": eval_segments_per_pair},
    )
    return CVResult(report, [r[0] for r in results], folds, dataset)


def cross_validated_coefficient(dataset: SignalDataset, k: int, w: int,
                                encoder_cfg: EncoderConfig, train_cfg: TrainConfig,
                                by_group: bool = False,
                                eval_segments_per_pair: int = EVAL_SEGMENTS_PER_PAIR,
                                workers: int = 1) -> DependenceReport:
    return run_cv(dataset, k, w, encoder_cfg, train_cfg, by_group,
                  eval_segments_per_pair, workers).report


# ------------------------------------------------------------ permutation test


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise ValueError(f"no derangement of {n} element(s)")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def mismatched_dataset(dataset: SignalDataset, perm: np.ndarray) -> SignalDataset:
    """Pairs ``(x^i, y^perm[i])`` cropped to their common length."""
    pairs = []
    for i, j in enumerate(perm):
        a, b = dataset.pairs[i], dataset.pairs[int(j)]
        T = min(a.length, b.length)
        pairs.append(SignalPair(Signal(a.x.values[:, :T]), Signal(b.y.values[:, :T]),
                                f"{a.pair_id}|{b.pair_id}"))
    return SignalDataset(tuple(pairs))


def null_statistic(models: Sequence[ConcurrenceModel], dataset: SignalDataset,
                   folds: Sequence[tuple[np.ndarray, np.ndarray]], w: int, seed: int,
                   eval_segments_per_pair: int = EVAL_SEGMENTS_PER_PAIR,
                   min_misalignment_gap: int = 0) -> float:
    """Unclipped coefficient of each fold model on deranged test pairs, pooled."""
    rng = np.random.default_rng(seed)
    n_correct = n_total = 0
    for model, (_, te) in zip(models, folds):
        perm = derangement(len(te), rng)
        mixed = mismatched_dataset(dataset.subset(te), perm)
        res = evaluate_accuracy(model, mixed, w, eval_segments_per_pair,
                                int(rng.integers(0, 2**32 - 1)), min_misalignment_gap)
        n_correct += res.n_correct
        n_total += res.n_total
    return coefficient_from_accuracy(n_correct / n_total)[1]


def permutation_p_value(observed: float, null: Iterable[float]) -> float:
    """Add-one estimate ``(1 + #{null >= observed}) / (1 + n)``."""
    null = np.asarray(list(null), dtype=np.float64)
    return float((1 + np.sum(null >= observed)) / (1 + null.size))


@dataclass
class PermutationResult:
    p_value: float
    observed: float
    null: list[float]
    report: DependenceReport


def _null_job(job):
    models, dataset, folds, w, seed, spp, gap = job
    return null_statistic(models, dataset, folds, w, seed, spp, gap)


def permutation_null(cv: CVResult, n_permutations: int, seed: int, workers: int = 1) -> list[float]:
    params = cv.report.params
    w = params["w"]
    spp = params.get("eval_segments_per_pair", EVAL_SEGMENTS_PER_PAIR)
    gap = params.get("train", {}).get("min_misalignment_gap", 0)
    jobs = [(cv.models, cv.dataset, cv.folds, w, derive_seed(seed, 3, r), spp, gap)
            for r in range(n_permutations)]
    return run_jobs(_null_job, jobs, workers)


def permutation_test(dataset: SignalDataset, w: int, encoder_cfg: EncoderConfig,
                     train_cfg: TrainConfig, n_permutations: int = 99, seed: Optional[int] = None,
                     k: int = 4, by_group: bool = False,
                     eval_segments_per_pair: int = EVAL_SEGMENTS_PER_PAIR,
                     workers: int = 1, cv: Optional[CVResult] = None) -> PermutationResult:
    """Significance of the CV coefficient against mismatched-pair re-evaluation.

    The fold models are trained once; each null draw deranges the pairs of
    every test fold (``x^i`` against ``y^pi(i)``, ``pi(i) != i``) and records
    the pooled unclipped coefficient. A precomputed ``cv`` may be supplied.
    """
    if n_permutations < 19:
        raise ValueError(f"n_permutations must be >= 19, got {n_permutations}")
    if dataset.N < 2:
        raise DatasetError("permutation test needs at least 2 pairs")
    if cv is None:
        cv = run_cv(dataset, k, w, encoder_cfg, train_cfg, by_group,
                    eval_segments_per_pair, workers)
    if any(len(te) < 2 for _, te in cv.folds):
        raise DatasetError("every test fold needs at least 2 pairs to mismatch")
    seed = train_cfg.seed if seed is None else seed
    null = permutation_null(cv, n_permutations, seed, workers)
    observed = cv.report.unclipped_coefficient
    p = permutation_p_value(observed, null)
    cv.report.p_value = p
    return PermutationResult(p, observed, null, cv.report)
