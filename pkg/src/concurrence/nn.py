"""Small float64 layer library with hand-written backward passes.

Layer classes work on channels-last ``(batch, length, channels)`` arrays so
that im2col and the batch-norm reductions stay contiguous; the functional
wrappers and :class:`Sequential` take the usual ``(batch, channels, length)``.
Every layer caches what its backward pass needs during ``forward`` and
exposes ``params`` / ``grads`` dictionaries keyed by parameter name.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

MAGIC = b"CNCR"
FORMAT_VERSION = 1


class SegmentTooShortError(ValueError):
    """A convolution received fewer samples than its kernel needs."""


class BackwardError(RuntimeError):
    """``backward`` was called without a cached forward pass."""


class ModelFormatError(ValueError):
    """A parameter file is corrupt, truncated or incompatible."""


def conv_output_length(length: int, kernel_size: int, stride: int) -> int:
    """Length of a valid (unpadded) strided convolution; 0 when it is empty."""
    if length < kernel_size:
        return 0
    return (length - kernel_size) // stride + 1


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self) -> None:
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that must be serialized alongside params."""
        return {}

    def _take_cache(self):
        if self._cache is None:
            raise BackwardError(f"{type(self).__name__}.backward called before a forward pass")
        return self._cache


class Conv1d(Layer):
    """Valid strided cross-correlation; weight shape (out, in, kernel)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if kernel_size < 1 or stride < 1:
            raise ValueError(f"kernel_size and stride must be >= 1, got {kernel_size}, {stride}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = np.sqrt(1.0 / (in_channels * kernel_size))
        self.params["weight"] = rng.uniform(-bound, bound, (out_channels, in_channels, kernel_size))
        self.params["bias"] = np.zeros(out_channels)

    def _flat_weight(self) -> np.ndarray:
        # (out, kernel * in), matching the (kernel, in) order of the windows
        return self.params["weight"].transpose(0, 2, 1).reshape(self.out_channels, -1)

    def forward(self, x, training=False, rng=None):
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape[2] != self.in_channels:
            raise ValueError(f"conv1d expects {self.in_channels} input channels, got {x.shape[2]}")
        L = x.shape[1]
        if L < self.kernel_size:
            raise SegmentTooShortError(
                f"segment too short: conv1d needs length >= {self.kernel_size}, got {L}"
            )
        out_len = conv_output_length(L, self.kernel_size, self.stride)
        b, _, c = x.shape
        s0, s1, s2 = x.strides
        windows = as_strided(x, shape=(b, out_len, self.kernel_size, c),
                             strides=(s0, s1 * self.stride, s1, s2), writeable=False)
        cols = windows.reshape(b * out_len, self.kernel_size * c)
        out = cols @ self._flat_weight().T
        out += self.params["bias"]
        self._cache = (x.shape, cols)
        return out.reshape(b, out_len, self.out_channels)

    def backward(self, grad_out):
        in_shape, cols = self._take_cache()
        b, out_len, _ = grad_out.shape
        g = grad_out.reshape(b * out_len, self.out_channels)
        dw = g.T @ cols
        self.grads["weight"] = dw.reshape(self.out_channels, self.kernel_size,
                                          self.in_channels).transpose(0, 2, 1).copy()
        self.grads["bias"] = g.sum(axis=0)
        dcols = (g @ self._flat_weight()).reshape(b, out_len, self.kernel_size,
                                                        self.in_channels)
        dx = np.zeros(in_shape)
        span = self.stride * (out_len - 1) + 1
        for j in range(self.kernel_size):
            dx[:, j : j + span : self.stride, :] += dcols[:, :, j, :]
        return dx


class BatchNorm1d(Layer):
    """Per-channel normalization over batch and time jointly."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training=False, rng=None):
        if x.shape[2] != self.channels:
            raise ValueError(f"batchnorm expects {self.channels} channels, got {x.shape[2]}")
        flat = x.reshape(-1, self.channels)
        if training:
            m = flat.shape[0]
            if m < 2:
                raise ValueError("batchnorm in training mode needs batch * length >= 2")
            mean = flat.mean(axis=0)
            xc = flat - mean
            var = np.einsum("ij,ij->j", xc, xc) / m
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = xc
            xhat *= inv_std
            mom = self.momentum
            self.running_mean = (1 - mom) * self.running_mean + mom * mean
            # unbiased variance for the running estimate
            self.running_var = (1 - mom) * self.running_var + mom * var * m / (m - 1)
            self._cache = ("train", xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (flat - self.running_mean) * inv_std
            self._cache = ("eval", xhat, inv_std)
        out = xhat * self.params["gamma"]
        out += self.params["beta"]
        return out.reshape(x.shape)

    def backward(self, grad_out):
        mode, xhat, inv_std = self._take_cache()
        g = grad_out.reshape(-1, self.channels)
        self.grads["gamma"] = np.einsum("ij,ij->j", g, xhat)
        self.grads["beta"] = g.sum(axis=0)
        scale = self.params["gamma"] * inv_std
        if mode == "eval":
            return (g * scale).reshape(grad_out.shape)
        m = g.shape[0]
        mean_d = self.grads["beta"] / m
        mean_dx = self.grads["gamma"] / m
        dx = g - mean_d
        dx -= xhat * mean_dx
        dx *= scale
        return dx.reshape(grad_out.shape)


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self._cache = 1.0
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = rng.random(x.shape, dtype=np.float32) >= np.float32(self.rate)
        mask = keep * (1.0 / (1.0 - self.rate))
        self._cache = mask
        return x * mask

    def backward(self, grad_out):
        return grad_out * self._take_cache()


class ReLU(Layer):
    def forward(self, x, training=False, rng=None):
        self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad_out):
        return grad_out * self._take_cache()


class Sequential(Layer):
    """Chain of layers on channels-first input; parameter names carry the layer index.

    Input and output are ``(batch, channels, length)``; the layers themselves
    run channels-last.
    """

    def __init__(self, layers: Iterable[Layer]):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, training=False, rng=None):
        x = np.ascontiguousarray(np.asarray(x, dtype=np.float64).transpose(0, 2, 1))
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x.transpose(0, 2, 1)

    def backward(self, grad_out):
        grad_out = np.ascontiguousarray(grad_out.transpose(0, 2, 1))
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out.transpose(0, 2, 1)

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{i}.{k}", v) for i, layer in enumerate(self.layers)
                for k, v in layer.params.items()]

    def named_grads(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                if k not in layer.grads:
                    raise BackwardError(f"no gradient for layer {i} parameter {k}")
                out.append((f"{i}.{k}", layer.grads[k]))
        return out

    def named_state(self) -> list[tuple[str, np.ndarray]]:
        """Params and buffers, in serialization order."""
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"{i}.{k}", v) for k, v in layer.params.items()]
            out += [(f"{i}.{k}", v) for k, v in layer.buffers().items()]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                layer.params[k] = np.array(state[f"{i}.{k}"], dtype=np.float64)
            for k in layer.buffers():
                setattr(layer, k, np.array(state[f"{i}.{k}"], dtype=np.float64))


# ------------------------------------------------------------------ functional


def _cl(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).transpose(0, 2, 1))


def conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid convolution of ``(B, K, L)`` input with a ``(out, in, kernel)`` weight."""
    layer = Conv1d(weight.shape[1], weight.shape[0], weight.shape[2], stride)
    layer.params["weight"] = np.asarray(weight, dtype=np.float64)
    layer.params["bias"] = np.asarray(bias, dtype=np.float64)
    return layer.forward(_cl(x)).transpose(0, 2, 1)


def batchnorm(x: np.ndarray, layer: BatchNorm1d, training: bool) -> np.ndarray:
    """Apply ``layer`` to ``(B, K, L)`` input (updates running stats when training)."""
    return layer.forward(_cl(x), training=training).transpose(0, 2, 1)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def dropout(x: np.ndarray, rate: float, training: bool, rng=None) -> np.ndarray:
    return Dropout(rate).forward(np.asarray(x, dtype=np.float64), training=training, rng=rng)


# ----------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif [m.shape for m in state.m] != [p.shape for p in params]:
        raise ValueError("Adam moment shapes do not match parameters")
    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -------------------------------------------------------------- serialization


def write_params(path: str | Path, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header, float64 LE data."""
    header = dict(header)
    header["manifest"] = [[name, list(arr.shape)] for name, arr in arrays]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_params(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic bytes {raw[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    if len(raw) < 12 + hlen:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header") from exc
    offset = 12 + hlen
    arrays = {}
    for name, shape in header["manifest"]:
        n = int(np.prod(shape)) * 8
        if offset + n > len(raw):
            raise ModelFormatError(f"{path}: truncated data at {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=offset).reshape(
            shape).astype(np.float64)
        offset += n
    if offset != len(raw):
        raise ModelFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays
