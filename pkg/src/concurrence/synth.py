"""Synthetic paired signals with controlled dependence.

Each signal is an impulse train convolved with a kernel, plus structured
noise (another impulse train through another kernel):

    h_x = xi * c + (1 - xi) * p_x        x = phi * h_x + sigma_nx * n_x
    h_y = xi * c + (1 - xi) * p_y        y = psi * h_y + sigma_ny * n_y

``c``, ``p_x`` and ``p_y`` are independent Bernoulli trains whose rate may
drift linearly in time. ``y`` is finally rolled by a random lag.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .signals import Signal, SignalDataset, SignalPair, save_dataset

KERNEL_FAMILIES = ("ricker", "gauss_d1", "gauss_d2", "morlet_real", "biphasic_haar")
TAIL_CUTOFF = 1e-4
MORLET_OMEGA = 5.0


@dataclass(frozen=True)
class KernelSpec:
    family: str = "ricker"
    scale: float = 6.0

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unsupported kernel family {self.family!r}; choose from {KERNEL_FAMILIES}")
        if not self.scale > 0:
            raise ValueError(f"kernel scale must be positive, got {self.scale}")


def _profile(family: str, t: np.ndarray, s: float) -> np.ndarray:
    u = t / s
    g = np.exp(-0.5 * u * u)
    if family == "ricker":
        return (1.0 - u * u) * g
    if family == "gauss_d1":
        return -u * g
    if family == "gauss_d2":
        return (u * u - 1.0) * g
    if family == "morlet_real":
        return np.cos(MORLET_OMEGA * u) * g
    raise AssertionError(family)


def render_kernel(spec: KernelSpec) -> np.ndarray:
    """Sample a kernel on the integer grid, trim tails below 1e-4 of peak, unit L2 norm."""
    if spec.family == "biphasic_haar":
        n = max(1, int(round(spec.scale)))
        k = np.concatenate([np.ones(n), -np.ones(n)])
        return k / np.linalg.norm(k)
    half = int(np.ceil(12 * spec.scale)) + 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    k = _profile(spec.family, t, spec.scale)
    keep = np.flatnonzero(np.abs(k) >= TAIL_CUTOFF * np.abs(k).max())
    r = int(max(half - keep[0], keep[-1] - half))
    k = k[half - r : half + r + 1]
    return k / np.linalg.norm(k)


def random_kernel(rng: np.random.Generator, scale_range: tuple[float, float]) -> KernelSpec:
    family = KERNEL_FAMILIES[int(rng.integers(len(KERNEL_FAMILIES)))]
    lo, hi = scale_range
    return KernelSpec(family, float(np.exp(rng.uniform(np.log(lo), np.log(hi)))))


@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs for one signal pair.

    Give either ``sigma_nx``/``sigma_ny`` or ``target_snr`` (variance ratio
    of the clean part to the noise part, per signal). Noise kernels default
    to fresh random draws per pair.
    """

    T: int = 1000
    xi: float = 1.0
    impulse_rate: float = 0.02
    rate_slope: float = 0.0
    kernel_x: KernelSpec = field(default_factory=KernelSpec)
    kernel_y: KernelSpec = field(default_factory=KernelSpec)
    sigma_nx: float = 0.0
    sigma_ny: float = 0.0
    target_snr: Optional[float] = None
    noise_kernel_x: Optional[KernelSpec] = None
    noise_kernel_y: Optional[KernelSpec] = None
    noise_scale_range: tuple[float, float] = (1.5, 8.0)
    lag_max: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError(f"xi must be in [0, 1], got {self.xi}")
        if not 0.0 < self.impulse_rate < 1.0:
            raise ValueError(f"impulse_rate must be in (0, 1), got {self.impulse_rate}")
        if self.sigma_nx < 0 or self.sigma_ny < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.target_snr is not None and not self.target_snr > 0:
            raise ValueError("target_snr must be positive")
        if self.lag_max < 0:
            raise ValueError("lag_max must be >= 0")
        if self.T <= self.lag_max:
            raise ValueError(f"T={self.T} must exceed lag_max={self.lag_max}")

    def to_json(self) -> dict:
        return asdict(self)


def bernoulli_train(T: int, rate: float, rate_slope: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Independent impulses with ``P(1 at t) = clip(rate + rate_slope * t, 0, 1)``."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"rate must be in (0, 1), got {rate}")
    p = np.clip(rate + rate_slope * np.arange(T), 0.0, 1.0)
    return (rng.random(T) < p).astype(np.float64)


def mix_impulses(c: np.ndarray, p: np.ndarray, xi: float) -> np.ndarray:
    """Amplitude mix ``xi * c + (1 - xi) * p``."""
    c, p = np.asarray(c, dtype=np.float64), np.asarray(p, dtype=np.float64)
    if c.shape != p.shape:
        raise ValueError(f"impulse trains differ in length: {c.shape} vs {p.shape}")
    return xi * c + (1.0 - xi) * p


def _render(h: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.convolve(h, kernel, mode="same")


def _noise_sigma(clean: np.ndarray, noise: np.ndarray, snr: float) -> float:
    vn = noise.var()
    if vn == 0:
        warnings.warn("noise realization is constant; SNR target cannot be met", RuntimeWarning)
        return 0.0
    return float(np.sqrt(clean.var() / (snr * vn)))


def synthesize_components(cfg: SynthConfig, rng: np.random.Generator) -> dict:
    """All intermediate sequences of one pair (for inspection and tests)."""
    T = cfg.T
    kx, ky = render_kernel(cfg.kernel_x), render_kernel(cfg.kernel_y)
    if T <= max(len(kx), len(ky)):
        raise ValueError(f"T={T} must exceed kernel support ({len(kx)}, {len(ky)})")
    c = bernoulli_train(T, cfg.impulse_rate, cfg.rate_slope, rng)
    px = bernoulli_train(T, cfg.impulse_rate, cfg.rate_slope, rng)
    py = bernoulli_train(T, cfg.impulse_rate, cfg.rate_slope, rng)
    nkx = cfg.noise_kernel_x or random_kernel(rng, cfg.noise_scale_range)
    nky = cfg.noise_kernel_y or random_kernel(rng, cfg.noise_scale_range)
    nx = _render(bernoulli_train(T, cfg.impulse_rate, cfg.rate_slope, rng), render_kernel(nkx))
    ny = _render(bernoulli_train(T, cfg.impulse_rate, cfg.rate_slope, rng), render_kernel(nky))
    clean_x = _render(mix_impulses(c, px, cfg.xi), kx)
    clean_y = _render(mix_impulses(c, py, cfg.xi), ky)
    if cfg.target_snr is not None:
        sx = _noise_sigma(clean_x, nx, cfg.target_snr)
        sy = _noise_sigma(clean_y, ny, cfg.target_snr)
    else:
        sx, sy = cfg.sigma_nx, cfg.sigma_ny
    lag = int(rng.integers(0, cfg.lag_max + 1))
    x = clean_x + sx * nx
    y = np.roll(clean_y + sy * ny, lag)
    return {"c": c, "p_x": px, "p_y": py, "clean_x": clean_x, "clean_y": clean_y,
            "noise_x": sx * nx, "noise_y": sy * ny, "sigma_nx": sx, "sigma_ny": sy,
            "lag": lag, "x": x, "y": y, "noise_kernel_x": nkx, "noise_kernel_y": nky}


def synthesize_pair(cfg: SynthConfig, rng: np.random.Generator, pair_id: str = "pair0") -> SignalPair:
    parts = synthesize_components(cfg, rng)
    return SignalPair(Signal(parts["x"]), Signal(parts["y"]), pair_id)


def synthesize_dataset(cfg: SynthConfig, n_pairs: int, metadata: Optional[dict] = None
                       ) -> SignalDataset:
    rng = np.random.default_rng(cfg.seed)
    pairs = tuple(synthesize_pair(cfg, rng, f"pair{i:04d}") for i in range(n_pairs))
    meta = {"synth": cfg.to_json()}
    meta.update(metadata or {})
    return SignalDataset(pairs, meta)


def _kernel_scale_for_support(support: float) -> float:
    # Gaussian envelope drops to 1e-4 of peak at ~4.29 scales from center
    return support / (2 * np.sqrt(2 * np.log(1 / TAIL_CUTOFF)))


def generate_xi_sweep(xis: Sequence[float], pairs_per_dataset: int, T: int = 1000,
                      w_event_scale: float = 60.0, seed: int = 0,
                      target_snr: Optional[float] = None) -> list[SignalDataset]:
    """One dataset per ``xi`` sharing kernels, so only the dependence changes.

    ``w_event_scale`` is the approximate event (kernel support) length in
    samples. Datasets are noise-free unless ``target_snr`` is given.
    """
    rng = np.random.default_rng(seed)
    scale = _kernel_scale_for_support(w_event_scale)
    fams = ("ricker", "gauss_d1", "gauss_d2", "morlet_real")
    kx = KernelSpec(fams[int(rng.integers(len(fams)))], scale)
    ky = KernelSpec(fams[int(rng.integers(len(fams)))], scale)
    data_seeds = rng.integers(0, 2**31 - 1, size=len(xis))
    out = []
    for xi, ds in zip(xis, data_seeds):
        cfg = SynthConfig(T=T, xi=float(xi), kernel_x=kx, kernel_y=ky,
                          target_snr=target_snr, seed=int(ds))
        out.append(synthesize_dataset(cfg, pairs_per_dataset, {"xi": float(xi)}))
    return out


def challenge_configs(n_datasets: int, T: int = 1000, seed: int = 0,
                      impulse_rate: float = 0.02, lag_max: int = 50,
                      snr_range: tuple[float, float] = (0.5, 2.0),
                      kernel_scale_range: tuple[float, float] = (6.0, 16.0)) -> list[SynthConfig]:
    """Random per-dataset generator settings for the challenge suite.

    SNR is log-uniform in ``snr_range``; signal and noise kernels draw their
    scale from ``kernel_scale_range``.
    """
    if n_datasets < 1:
        raise ValueError("n_datasets must be >= 1")
    rng = np.random.default_rng(seed)
    cfgs = []
    for _ in range(n_datasets):
        xi = float(1.0 - rng.uniform(0.0, 0.9))  # (0.1, 1]
        slope = float(rng.uniform(-0.5, 0.5) * impulse_rate / T)
        kx = random_kernel(rng, kernel_scale_range)
        ky = random_kernel(rng, kernel_scale_range)
        nkx = random_kernel(rng, kernel_scale_range)
        nky = random_kernel(rng, kernel_scale_range)
        snr = float(np.exp(rng.uniform(*np.log(snr_range))))
        cfgs.append(SynthConfig(T=T, xi=xi, impulse_rate=impulse_rate, rate_slope=slope,
                                kernel_x=kx, kernel_y=ky, target_snr=snr,
                                noise_kernel_x=nkx, noise_kernel_y=nky, lag_max=lag_max,
                                seed=int(rng.integers(0, 2**31 - 1))))
    return cfgs


def generate_challenge_suite(n_datasets: int, pairs_per_dataset: int, T: int = 1000,
                             seed: int = 0, **kwargs) -> tuple[list[SignalDataset], dict]:
    """Datasets with random dependence, kernels, drifting rates and lags.

    Returns the datasets and a ground-truth manifest recording every drawn
    parameter, including per-pair lags.
    """
    cfgs = challenge_configs(n_datasets, T, seed, **kwargs)
    datasets, entries = [], []
    for i, cfg in enumerate(cfgs):
        rng = np.random.default_rng(cfg.seed)
        pairs, lags = [], []
        for j in range(pairs_per_dataset):
            parts = synthesize_components(cfg, rng)
            pairs.append(SignalPair(Signal(parts["x"]), Signal(parts["y"]), f"pair{j:04d}"))
            lags.append(parts["lag"])
        entry = {"dataset": f"challenge{i:03d}", "config": cfg.to_json(), "lags": lags}
        entries.append(entry)
        datasets.append(SignalDataset(tuple(pairs), {"xi": cfg.xi, "name": entry["dataset"],
                                                      "synth": cfg.to_json()}))
    manifest = {"version": 1, "seed": seed, "n_datasets": n_datasets,
                "pairs_per_dataset": pairs_per_dataset, "T": T, "datasets": entries}
    return datasets, manifest


def write_suite(datasets: Sequence[SignalDataset], manifest: dict, out_dir: str | Path,
                names: Optional[Sequence[str]] = None) -> Path:
    """Save each dataset to ``out_dir/<name>`` plus ``ground_truth.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, ds in enumerate(datasets):
        name = names[i] if names else ds.metadata.get("name", f"dataset{i:03d}")
        save_dataset(ds, out_dir / name)
    path = out_dir / "ground_truth.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def with_xi(cfg: SynthConfig, xi: float) -> SynthConfig:
    return replace(cfg, xi=xi)
