"""Abundance RMSE / AAD, endmember SAD and endmember alignment."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .hsi import AbundanceMatrix, EndmemberMatrix

__all__ = ["rmse", "aad", "sad", "align", "sad_matrix", "MetricReport", "evaluate"]

log = logging.getLogger(__name__)

EXHAUSTIVE_MAX_R = 8


def _arr(x) -> np.ndarray:
    if isinstance(x, EndmemberMatrix):
        return x.E
    if isinstance(x, AbundanceMatrix):
        return x.A
    return np.asarray(x, dtype=np.float64)


def _same(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes {a.shape} and {b.shape} differ")


def rmse(A_gt, A_hat) -> float:
    """Per-pixel RMSE over endmembers, averaged over pixels."""
    a, b = _arr(A_gt), _arr(A_hat)
    _same(a, b, "rmse")
    return float(np.mean(np.sqrt(np.mean((a - b) ** 2, axis=0))))


def _unit(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(X, axis=0)
    ok = n > 0
    return X / np.where(ok, n, 1.0), ok


def _angle_between(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Angle in degrees between unit columns, ``2 atan2(|u - v|, |u + v|)``.

    Equal to ``arccos(u . v)`` but well conditioned near 0 and 180 degrees,
    and never outside the domain (so no clamping is needed).
    """
    return np.degrees(2.0 * np.arctan2(np.linalg.norm(U - V, axis=0), np.linalg.norm(U + V, axis=0)))


def _angles(X, Xh) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise angles in degrees and a mask of usable columns."""
    U, ok1 = _unit(X)
    V, ok2 = _unit(Xh)
    ok = ok1 & ok2
    return np.where(ok, _angle_between(U, V), 0.0), ok


def aad(A_gt, A_hat, return_skipped: bool = False):
    """Mean abundance angle distance in degrees; zero-norm pixels are skipped."""
    a, b = _arr(A_gt), _arr(A_hat)
    _same(a, b, "aad")
    ang, ok = _angles(a, b)
    skipped = int((~ok).sum())
    if skipped:
        log.warning("aad: skipped %d zero-norm pixel(s)", skipped)
    value = float(ang[ok].mean()) if ok.any() else float("nan")
    return (value, skipped) if return_skipped else value


def sad(E_gt, E_hat) -> tuple[np.ndarray, float]:
    """Spectral angle (degrees) per endmember and its mean."""
    e, eh = _arr(E_gt), _arr(E_hat)
    _same(e, eh, "sad")
    ang, ok = _angles(e, eh)
    if not ok.all():
        log.warning("sad: %d zero-norm endmember(s) skipped", int((~ok).sum()))
        ang = np.where(ok, ang, np.nan)
    return ang, float(np.nanmean(ang)) if ok.any() else float("nan")


def sad_matrix(E_gt, E_hat) -> np.ndarray:
    """``cost[i, j]`` is the SAD between true endmember ``i`` and estimate ``j``."""
    U, _ = _unit(_arr(E_gt))
    V, _ = _unit(_arr(E_hat))
    R = U.shape[1]
    return _angle_between(np.repeat(U, V.shape[1], axis=1),
                          np.tile(V, (1, R))).reshape(R, V.shape[1])


def align(E_gt, E_hat, A_hat=None):
    """Reorder estimated endmembers (and abundance rows) to minimise total SAD.

    Exhaustive over permutations up to R = 8, Hungarian assignment above.
    Returns ``(E_hat_aligned, A_hat_aligned, perm)``; ``perm[i]`` is the
    estimate matched to true endmember ``i``.
    """
    e, eh = _arr(E_gt), _arr(E_hat)
    if e.shape[1] != eh.shape[1]:
        raise ValueError(f"align: R differs ({e.shape[1]} vs {eh.shape[1]})")
    R = e.shape[1]
    cost = sad_matrix(e, eh)
    if R <= EXHAUSTIVE_MAX_R:
        rows = np.arange(R)
        best, perm = np.inf, tuple(range(R))
        for p in itertools.permutations(range(R)):
            total = cost[rows, p].sum()
            if total < best:
                best, perm = total, p
        perm = np.array(perm)
    else:
        _, perm = linear_sum_assignment(cost)
    Ea = eh[:, perm]
    Aa = None if A_hat is None else _arr(A_hat)[perm, :]
    return Ea, Aa, perm


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    aad: float
    sad_per_endmember: tuple[float, ...]
    sad_mean: float
    aad_skipped: int = 0

    def row(self) -> dict:
        out = {"RMSE": self.rmse, "AAD": self.aad}
        for i, v in enumerate(self.sad_per_endmember):
            out[f"SAD_{i + 1}"] = v
        out["SAD_mean"] = self.sad_mean
        return out


def evaluate(E_gt, A_gt, E_hat, A_hat) -> MetricReport:
    """Align the estimates to the ground truth, then score them."""
    Ea, Aa, _ = align(E_gt, E_hat, A_hat)
    per, mean = sad(E_gt, Ea)
    a, skipped = aad(A_gt, Aa, return_skipped=True)
    return MetricReport(rmse(A_gt, Aa), a, tuple(float(x) for x in per), mean, skipped)
