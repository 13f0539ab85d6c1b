"""Synthetic hyperspectral scenes: patch-wise abundances, smooth spectra, AWGN."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

from .hsi import AbundanceMatrix, EndmemberMatrix, HsiCube
from .seeding import substream

__all__ = [
    "SynthConfig",
    "SynthData",
    "gaussian_kernel",
    "gen_abundances",
    "gen_endmembers",
    "add_awgn",
    "measured_snr",
    "generate",
    "pairwise_sad",
]

MIN_SAD_DEG = 5.0
MAX_DRAWS = 1000


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic scene generator.

    ``side`` of 0 means the classic ``patch**2 x patch**2`` image; any other
    value must be a multiple of ``patch``.  ``filter_size`` of 0 means
    ``patch + 1``.
    """

    patch: int = 10
    gamma: float = 0.8
    R: int = 6
    bands: int = 224
    side: int = 0
    filter_size: int = 0
    filter_variance: float = 2.0
    snr_db: float = 30.0
    endmember_source: str = "procedural"  # or "library"
    library_path: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.patch < 2:
            raise ValueError(f"patch edge must be >= 2, got {self.patch}")
        if not 0.5 < self.gamma <= 1.0:
            raise ValueError(f"dominant fraction must lie in (0.5, 1], got {self.gamma}")
        if self.filter_variance <= 0:
            raise ValueError("filter variance must be positive")
        if self.R < 2:
            raise ValueError("need at least two endmembers")
        if self.image_side % self.patch:
            raise ValueError(f"image side {self.image_side} is not a multiple of patch {self.patch}")
        if self.endmember_source not in ("procedural", "library"):
            raise ValueError(f"unknown endmember source {self.endmember_source!r}")

    @property
    def image_side(self) -> int:
        return self.side or self.patch ** 2

    @property
    def kernel_size(self) -> int:
        return self.filter_size or self.patch + 1


@dataclass(frozen=True)
class SynthData:
    Y: HsiCube
    Y_clean: HsiCube
    E: EndmemberMatrix
    A: AbundanceMatrix


def gaussian_kernel(size: int, variance: float) -> np.ndarray:
    """Unit-sum isotropic Gaussian; even sizes are centred between pixels."""
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * variance))
    k = np.outer(g, g)
    return k / k.sum()


def _smooth(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # zero padding outside the image
    return correlate(plane, kernel, mode="constant", cval=0.0)


def gen_abundances(cfg: SynthConfig, rng=None, smooth: bool = True) -> AbundanceMatrix:
    """Patch-wise two-endmember abundances, smoothed and renormalised.

    With ``smooth=False`` the raw patch map is returned (exactly two
    nonzero fractions ``gamma`` and ``1 - gamma`` per pixel).
    """
    rng = rng if rng is not None else substream(cfg.seed, "data")
    side, a, R = cfg.image_side, cfg.patch, cfg.R
    maps = np.zeros((R, side, side))
    for py in range(side // a):
        for px in range(side // a):
            first, second = rng.choice(R, size=2, replace=False)
            sl = (slice(py * a, (py + 1) * a), slice(px * a, (px + 1) * a))
            maps[(first,) + sl] = cfg.gamma
            maps[(second,) + sl] += 1.0 - cfg.gamma
    if smooth:
        kernel = gaussian_kernel(cfg.kernel_size, cfg.filter_variance)
        maps = np.stack([_smooth(m, kernel) for m in maps])
        maps /= maps.sum(axis=0, keepdims=True)
    return AbundanceMatrix(maps.reshape(R, -1))


def pairwise_sad(E: np.ndarray) -> np.ndarray:
    """Spectral angles (degrees) between every pair of columns."""
    En = E / np.linalg.norm(E, axis=0, keepdims=True)
    return np.degrees(np.arccos(np.clip(En.T @ En, -1.0, 1.0)))


def _procedural_signature(rng, bands: int) -> np.ndarray:
    x = np.linspace(0.0, 1.0, bands)
    s = np.zeros(bands)
    for _ in range(rng.integers(3, 7)):
        centre = rng.uniform(-0.1, 1.1)
        width = rng.uniform(0.03, 0.3)
        s += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((x - centre) / width) ** 2)
    s /= s.max()
    floor = rng.uniform(0.02, 0.2)
    top = rng.uniform(0.5, 0.95)
    return floor + (top - floor) * s


def gen_endmembers(cfg: SynthConfig, rng=None, library: np.ndarray | None = None) -> EndmemberMatrix:
    """Endmember signatures from a library or drawn procedurally.

    Library mode picks ``R`` distinct columns of a ``(P, M)`` signature
    matrix (loaded from ``cfg.library_path`` if ``library`` is not given).
    Procedural mode sums random Gaussian bumps, keeps values in ``[0, 1]``
    and rejects candidates closer than 5 degrees to an accepted one.
    """
    rng = rng if rng is not None else substream(cfg.seed, "endmembers")
    if cfg.endmember_source == "library" or library is not None:
        if library is None:
            from .io import read_library
            library = read_library(cfg.library_path)
        library = np.asarray(library, dtype=np.float64)
        if library.shape[1] < cfg.R:
            raise ValueError(f"library holds {library.shape[1]} signatures, need {cfg.R}")
        if library.shape[1] == cfg.R:
            return EndmemberMatrix(library)
        idx = np.sort(rng.choice(library.shape[1], size=cfg.R, replace=False))
        return EndmemberMatrix(library[:, idx])
    cols: list[np.ndarray] = []
    draws = 0
    while len(cols) < cfg.R:
        draws += 1
        if draws > MAX_DRAWS:
            raise RuntimeError(f"could not draw {cfg.R} signatures {MIN_SAD_DEG} deg apart "
                               f"in {MAX_DRAWS} attempts")
        cand = _procedural_signature(rng, cfg.bands)
        if cols and pairwise_sad(np.column_stack(cols + [cand]))[-1, :-1].min() < MIN_SAD_DEG:
            continue
        cols.append(cand)
    return EndmemberMatrix(np.column_stack(cols))


def add_awgn(Y_clean: HsiCube, snr_db: float, rng=None) -> HsiCube:
    """Add white Gaussian noise with ``sigma^2 = mean(x^2) / 10^(snr/10)``."""
    if math.isinf(snr_db) and snr_db > 0:
        return Y_clean
    rng = rng if rng is not None else np.random.default_rng()
    sigma2 = float(np.mean(Y_clean.data ** 2)) / 10.0 ** (snr_db / 10.0)
    return HsiCube(Y_clean.data + rng.normal(0.0, math.sqrt(sigma2), size=Y_clean.data.shape))


def measured_snr(Y_clean: HsiCube, Y: HsiCube) -> float:
    """Realised SNR in dB of a noisy cube against its clean version."""
    noise = Y.data - Y_clean.data
    p_noise = float(np.mean(noise ** 2))
    if p_noise == 0:
        return math.inf
    return 10.0 * math.log10(float(np.mean(Y_clean.data ** 2)) / p_noise)


def generate(cfg: SynthConfig, library: np.ndarray | None = None) -> SynthData:
    """Full scene: endmembers, abundances, clean cube and noisy cube."""
    E = gen_endmembers(cfg, substream(cfg.seed, "endmembers"), library)
    A = gen_abundances(cfg, substream(cfg.seed, "data"))
    side = cfg.image_side
    Y_clean = HsiCube.from_flat(E.E @ A.A, side, side)
    Y = add_awgn(Y_clean, cfg.snr_db, substream(cfg.seed, "noise"))
    return SynthData(Y, Y_clean, E, A)
