"""Linear mixing model containers and constraint checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "HsiCube",
    "EndmemberMatrix",
    "AbundanceMatrix",
    "Guidance",
    "ConstraintViolation",
    "lmm_forward",
    "validate_constraints",
]

ASC_TOL = 1e-6


def _frozen(arr, ndim: int, what: str) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    if out.ndim != ndim:
        raise ValueError(f"{what} must be {ndim}-D, got shape {out.shape}")
    if min(out.shape) < 1:
        raise ValueError(f"{what} has an empty dimension: {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class HsiCube:
    """Observed reflectances stored band-first as ``(P, N1, N2)``.

    Pixels are flattened row-major: ``n = row * N2 + col``.
    """

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(self.data, 3, "cube"))

    @classmethod
    def from_flat(cls, Y, height: int, width: int) -> "HsiCube":
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim != 2 or Y.shape[1] != height * width:
            raise ValueError(f"cannot reshape {Y.shape} into a {height}x{width} image")
        return cls(Y.reshape(Y.shape[0], height, width))

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @property
    def flat(self) -> np.ndarray:
        """``(P, N)`` view of the cube."""
        return self.data.reshape(self.bands, -1)


@dataclass(frozen=True)
class EndmemberMatrix:
    """Endmember signatures as columns, ``(P, R)``."""

    E: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "E", _frozen(self.E, 2, "endmember matrix"))

    @property
    def bands(self) -> int:
        return self.E.shape[0]

    @property
    def n_endmembers(self) -> int:
        return self.E.shape[1]


@dataclass(frozen=True)
class AbundanceMatrix:
    """Per-pixel fractions, ``(R, N)``; columns should lie on the simplex."""

    A: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _frozen(self.A, 2, "abundance matrix"))

    @property
    def n_endmembers(self) -> int:
        return self.A.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.A.shape[1]

    def as_image(self, height: int, width: int) -> np.ndarray:
        if height * width != self.n_pixels:
            raise ValueError(f"{self.n_pixels} pixels do not fill a {height}x{width} image")
        return self.A.reshape(self.n_endmembers, height, width)


@dataclass(frozen=True)
class Guidance:
    """Baseline ``(E_G, A_G)`` pair anchoring the guidance loss terms."""

    endmembers: EndmemberMatrix
    abundances: AbundanceMatrix

    def __post_init__(self):
        if self.endmembers.n_endmembers != self.abundances.n_endmembers:
            raise ValueError(
                f"guidance has {self.endmembers.n_endmembers} endmembers but "
                f"{self.abundances.n_endmembers} abundance rows")

    @property
    def E(self) -> np.ndarray:
        return self.endmembers.E

    @property
    def A(self) -> np.ndarray:
        return self.abundances.A


def lmm_forward(E, A, height: int | None = None, width: int | None = None) -> HsiCube:
    """Noiseless reconstruction ``E @ A`` returned as a cube.

    ``height``/``width`` default to a single-row image.
    """
    E = E.E if isinstance(E, EndmemberMatrix) else np.asarray(E, dtype=np.float64)
    A = A.A if isinstance(A, AbundanceMatrix) else np.asarray(A, dtype=np.float64)
    if E.shape[1] != A.shape[0]:
        raise ValueError(f"cannot mix E {E.shape} with A {A.shape}")
    n = A.shape[1]
    if height is None and width is None:
        height, width = 1, n
    elif height is None:
        height = n // width
    elif width is None:
        width = n // height
    return HsiCube.from_flat(E @ A, height, width)


@dataclass(frozen=True)
class ConstraintViolation:
    constraint: str  # "ENC", "ANC" or "ASC"
    magnitude: float
    count: int


def validate_constraints(E=None, A=None, tol: float = ASC_TOL) -> list[ConstraintViolation]:
    """List every violated LMM constraint with its worst magnitude.

    An empty list means ``E >= 0``, ``A >= 0`` and unit column sums of ``A``
    all hold to within ``tol``.
    """
    report = []
    if E is not None:
        E = E.E if isinstance(E, EndmemberMatrix) else np.asarray(E, dtype=np.float64)
        neg = -E[E < -tol]
        if neg.size:
            report.append(ConstraintViolation("ENC", float(neg.max()), int(neg.size)))
    if A is not None:
        A = A.A if isinstance(A, AbundanceMatrix) else np.asarray(A, dtype=np.float64)
        neg = -A[A < -tol]
        if neg.size:
            report.append(ConstraintViolation("ANC", float(neg.max()), int(neg.size)))
        dev = np.abs(A.sum(axis=0) - 1.0)
        bad = dev[dev > tol]
        if bad.size:
            report.append(ConstraintViolation("ASC", float(bad.max()), int(bad.size)))
    return report
