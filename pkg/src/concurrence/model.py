"""Segment-pair scoring network.

Two CNN encoders map an ``x`` segment ``(K_x, w)`` and a ``y`` segment
``(K_y, w)`` to feature maps ``F`` and ``G`` of shape ``(K_f, w')``. The score
is a learned bilinear read-out of their cross-covariance,
``s = sum_ij alpha_ij C_ij`` with ``C = F G^T / w'``. Positive scores mean
"aligned in time".
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .nn import (
    BackwardError,
    BatchNorm1d,
    Conv1d,
    Dropout,
    ModelFormatError,
    ReLU,
    SegmentTooShortError,
    Sequential,
    conv_output_length,
    read_params,
    write_params,
)
from .signals import Segment


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder hyperparameters; the defaults are the published architecture."""

    num_blocks: int = 3
    base_channels: int = 512
    first_kernel: int = 5
    later_kernel: int = 3
    first_stride: int = 3
    later_stride: int = 2
    dropout_rate: float = 0.25

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.base_channels % 2 ** (self.num_blocks - 1):
            raise ValueError(
                f"base_channels={self.base_channels} not divisible by 2^(B-1)="
                f"{2 ** (self.num_blocks - 1)}"
            )
        for name in ("first_kernel", "later_kernel", "first_stride", "later_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def block_channels(self, b: int) -> int:
        """Output channels of block ``b`` (1-based)."""
        return self.base_channels // 2 ** (b - 1)

    @property
    def out_channels(self) -> int:
        return self.block_channels(self.num_blocks)

    def kernels_strides(self) -> list[tuple[int, int]]:
        return [(self.first_kernel, self.first_stride)] + [
            (self.later_kernel, self.later_stride)
        ] * (self.num_blocks - 1)

    def output_lengths(self, w: int) -> list[int]:
        """Lengths after each block; a 0 marks an empty output."""
        lengths, L = [], w
        for k, s in self.kernels_strides():
            L = conv_output_length(L, k, s)
            lengths.append(L)
        return lengths

    def output_length(self, w: int) -> int:
        return self.output_lengths(w)[-1]

    def min_width(self) -> int:
        """Smallest segment width whose final feature map is non-empty."""
        L = 1
        for k, s in reversed(self.kernels_strides()):
            L = (L - 1) * s + k
        return L


def check_width(cfg: EncoderConfig, w: int) -> int:
    """Return ``w'`` or raise :class:`SegmentTooShortError` with the minimum ``w``."""
    w_out = cfg.output_length(w)
    if w_out < 1:
        raise SegmentTooShortError(
            f"segment too short: w={w} gives block lengths {cfg.output_lengths(w)}; "
            f"minimum w is {cfg.min_width()}"
        )
    return w_out


def build_encoder(cfg: EncoderConfig, in_channels: int, rng: np.random.Generator) -> Sequential:
    layers = []
    c_in = in_channels
    for b, (k, s) in enumerate(cfg.kernels_strides(), start=1):
        c_out = cfg.block_channels(b)
        layers += [
            BatchNorm1d(c_in),
            Conv1d(c_in, c_out, k, s, rng=rng),
            Dropout(cfg.dropout_rate),
            ReLU(),
        ]
        c_in = c_out
    return Sequential(layers)


def covariance(F: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``F G^T / w'`` for feature maps of shape ``(K, w')`` (or batched ``(n, K, w')``)."""
    if F.shape[-1] != G.shape[-1]:
        raise ValueError(f"feature lengths differ: {F.shape[-1]} vs {G.shape[-1]}")
    return np.matmul(F, np.swapaxes(G, -1, -2)) / F.shape[-1]


class ConcurrenceModel:
    """Encoders ``f`` (for x) and ``g`` (for y) plus the bilinear head ``alpha``."""

    def __init__(self, cfg: EncoderConfig, k_x: int, k_y: int, w: int,
                 f: Sequential, g: Sequential, alpha: np.ndarray):
        self.cfg = cfg
        self.k_x = k_x
        self.k_y = k_y
        self.w = w
        self.w_out = check_width(cfg, w)
        self.f = f
        self.g = g
        self.alpha = alpha
        self.alpha_grad: Optional[np.ndarray] = None
        self._cache = None

    @property
    def k_f(self) -> int:
        return self.cfg.out_channels

    k_g = k_f

    # ---------------------------------------------------------------- forward

    def _check_batch(self, X: np.ndarray, Y: np.ndarray) -> None:
        if X.ndim != 3 or Y.ndim != 3 or X.shape[0] != Y.shape[0]:
            raise ValueError(f"expected batched (n, K, w) inputs, got {X.shape} and {Y.shape}")
        if X.shape[1:] != (self.k_x, self.w):
            raise ValueError(f"x batch shape {X.shape[1:]} != model (K_x, w) = {(self.k_x, self.w)}")
        if Y.shape[1:] != (self.k_y, self.w):
            raise ValueError(f"y batch shape {Y.shape[1:]} != model (K_y, w) = {(self.k_y, self.w)}")

    def features(self, X: np.ndarray, Y: np.ndarray, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, np.ndarray]:
        self._check_batch(X, Y)
        return (self.f.forward(X, training=training, rng=rng),
                self.g.forward(Y, training=training, rng=rng))

    def head(self, F: np.ndarray, G: np.ndarray) -> np.ndarray:
        """Scores from batched feature maps without forming each ``C``."""
        return np.einsum("nit,ij,njt->n", F, self.alpha, G, optimize=True) / F.shape[-1]

    def forward(self, X: np.ndarray, Y: np.ndarray, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Scores for a batch of segment pairs, caching state for :meth:`backward`."""
        F, G = self.features(X, Y, training, rng)
        self._cache = (F, G)
        return self.head(F, G)

    def backward(self, dscores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Fill parameter gradients given ``dLoss/dscore``; returns input gradients."""
        if self._cache is None:
            raise BackwardError("ConcurrenceModel.backward called before forward")
        F, G = self._cache
        wp = F.shape[-1]
        ds = np.asarray(dscores, dtype=np.float64)[:, None, None]
        self.alpha_grad = np.einsum("nit,njt->ij", F * ds, G, optimize=True) / wp
        dF = np.einsum("ij,njt->nit", self.alpha, G * ds, optimize=True) / wp
        dG = np.einsum("ij,nit->njt", self.alpha, F * ds, optimize=True) / wp
        return self.f.backward(dF), self.g.backward(dG)

    def score(self, seg_x: Segment, seg_y: Segment, training: bool = False,
              rng: Optional[np.random.Generator] = None) -> float:
        return float(self.forward(seg_x.values[None], seg_y.values[None], training, rng)[0])

    def predict_scores(self, X: np.ndarray, Y: np.ndarray, chunk: int = 2048) -> np.ndarray:
        """Inference-mode scores in chunks; does not touch training caches."""
        out = []
        for i in range(0, X.shape[0], chunk):
            F, G = self.features(X[i : i + chunk], Y[i : i + chunk])
            out.append(self.head(F, G))
        return np.concatenate(out) if out else np.zeros(0)

    # ------------------------------------------------------------- parameters

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        return ([("f." + k, v) for k, v in self.f.named_params()]
                + [("g." + k, v) for k, v in self.g.named_params()]
                + [("alpha", self.alpha)])

    def named_grads(self) -> list[tuple[str, np.ndarray]]:
        if self.alpha_grad is None:
            raise BackwardError("no gradients: call backward first")
        return ([("f." + k, v) for k, v in self.f.named_grads()]
                + [("g." + k, v) for k, v in self.g.named_grads()]
                + [("alpha", self.alpha_grad)])

    def named_state(self) -> list[tuple[str, np.ndarray]]:
        return ([("f." + k, v) for k, v in self.f.named_state()]
                + [("g." + k, v) for k, v in self.g.named_state()]
                + [("alpha", self.alpha)])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_state()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.f.load_state({k[2:]: v for k, v in state.items() if k.startswith("f.")})
        self.g.load_state({k[2:]: v for k, v in state.items() if k.startswith("g.")})
        self.alpha = np.array(state["alpha"], dtype=np.float64)

    def header(self) -> dict:
        return {"encoder": asdict(self.cfg), "k_x": self.k_x, "k_y": self.k_y, "w": self.w}


def build_model(cfg: EncoderConfig, k_x: int, k_y: int, w: int, seed: int = 0) -> ConcurrenceModel:
    """Fresh model with independent ``f``/``g`` weights and ``alpha = 0``."""
    check_width(cfg, w)
    rng = np.random.default_rng(seed)
    f = build_encoder(cfg, k_x, rng)
    g = build_encoder(cfg, k_y, rng)
    alpha = np.zeros((cfg.out_channels, cfg.out_channels))
    return ConcurrenceModel(cfg, k_x, k_y, w, f, g, alpha)


def encode(encoder: Sequential, segment: Segment, training: bool = False,
           rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Feature map ``(K_f, w')`` of a single segment."""
    return encoder.forward(segment.values[None], training=training, rng=rng)[0]


def save_model(model: ConcurrenceModel, path: str | Path) -> None:
    write_params(path, model.header(), model.named_state())


def load_model(path: str | Path, k_x: Optional[int] = None, k_y: Optional[int] = None,
               w: Optional[int] = None) -> ConcurrenceModel:
    """Read a model file; optional ``k_x``/``k_y``/``w`` are checked against it."""
    header, arrays = read_params(path)
    try:
        cfg = EncoderConfig(**header["encoder"])
        fk_x, fk_y, fw = int(header["k_x"]), int(header["k_y"]), int(header["w"])
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: header lacks model configuration") from exc
    expected = (k_x if k_x is not None else fk_x, k_y if k_y is not None else fk_y,
                w if w is not None else fw)
    if expected != (fk_x, fk_y, fw):
        raise ModelFormatError(
            f"{path}: model was built for (K_x, K_y, w) = {(fk_x, fk_y, fw)}, "
            f"requested {expected}"
        )
    model = build_model(cfg, fk_x, fk_y, fw)
    names = [k for k, _ in model.named_state()]
    missing = [k for k in names if k not in arrays]
    if missing or len(arrays) != len(names):
        raise ModelFormatError(f"{path}: parameter manifest does not match configuration")
    for name, arr in model.named_state():
        if arrays[name].shape != arr.shape:
            raise ModelFormatError(
                f"{path}: {name} has shape {arrays[name].shape}, configuration needs {arr.shape}"
            )
    model.load_state_dict(arrays)
    return model
