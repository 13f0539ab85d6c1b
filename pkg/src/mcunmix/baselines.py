"""SiVM endmember extraction and FCLS abundance estimation.

Together they produce the guidance pair ``(E_G, A_G)`` and serve as the
classical comparison method.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .hsi import AbundanceMatrix, EndmemberMatrix, Guidance, HsiCube, validate_constraints

log = logging.getLogger(__name__)

__all__ = [
    "SivmResult",
    "RankCollapseError",
    "sivm_extract",
    "simplex_volume",
    "fcls_solve",
    "make_guidance",
]


class RankCollapseError(ValueError):
    pass


@dataclass(frozen=True)
class SivmResult:
    indices: tuple[int, ...]
    endmembers: EndmemberMatrix


def _flat(Y) -> np.ndarray:
    return Y.flat if isinstance(Y, HsiCube) else np.asarray(Y, dtype=np.float64)


def simplex_volume(vertices: np.ndarray) -> float:
    """Volume (up to the constant ``1/k!``) of the simplex spanned by columns.

    Computed as the square root of the Gram determinant of the edges
    ``v_i - v_0``.
    """
    v = np.asarray(vertices, dtype=np.float64)
    if v.shape[1] < 2:
        return 0.0
    edges = v[:, 1:] - v[:, :1]
    return float(np.sqrt(max(np.linalg.det(edges.T @ edges), 0.0)))


def sivm_extract(Y, R: int, tol: float = 1e-12) -> SivmResult:
    """Greedy simplex volume maximisation.

    The first endmember is the pixel of largest norm.  Each further pick
    maximises the volume of the simplex spanned with the pixels chosen so
    far; since ``vol(S + c) = vol(S) * dist(c, aff(S)) / k``, this is the
    pixel farthest from the affine hull of the current selection.  Ties go
    to the lowest pixel index.
    """
    X = _flat(Y)
    P, N = X.shape
    if R < 2:
        raise ValueError(f"SiVM needs R >= 2, got {R}")
    if R > N:
        raise ValueError(f"cannot pick {R} endmembers from {N} pixels")
    norms = np.einsum("pn,pn->n", X, X)
    chosen = [int(np.argmax(norms))]
    base = X[:, chosen[0]]
    D = X - base[:, None]
    basis = np.zeros((P, 0))
    for it in range(1, R):
        resid = D - basis @ (basis.T @ D)
        dist2 = np.einsum("pn,pn->n", resid, resid)
        dist2[chosen] = -1.0
        best = int(np.argmax(dist2))
        scale = max(1.0, float(norms.max()))
        if dist2[best] <= tol * scale:
            raise RankCollapseError(
                f"SiVM iteration {it}: every remaining pixel lies in the span of the current simplex")
        chosen.append(best)
        q = resid[:, best] / np.sqrt(dist2[best])
        # re-orthogonalise once for stability
        q -= basis @ (basis.T @ q)
        q /= np.linalg.norm(q)
        basis = np.column_stack([basis, q])
    return SivmResult(tuple(chosen), EndmemberMatrix(X[:, chosen]))


def _collinear_columns(E: np.ndarray, tol: float) -> list[int]:
    _, s, vt = np.linalg.svd(E, full_matrices=True)
    rank = int((s > tol * s.max()).sum()) if s.size else 0
    null = vt[rank:]
    return sorted({int(j) for row in null for j in np.flatnonzero(np.abs(row) > 1e-8)})


def fcls_solve(Y, E, delta: float | None = None) -> AbundanceMatrix:
    """Fully constrained least squares, pixel by pixel.

    Each pixel solves the nonnegative least squares problem with the
    sum-to-one row appended::

        min || [delta * E; 1^T] a - [delta * y; 1] ||   s.t. a >= 0

    A small ``delta`` weights the sum-to-one row heavily.  The default is
    ``1e-3`` divided by the mean spectral magnitude of ``E``, so the data
    rows have a magnitude of about ``1e-3`` whatever the reflectance
    scale.  Columns are renormalised to sum to one exactly afterwards.
    """
    X = _flat(Y)
    E = E.E if isinstance(E, EndmemberMatrix) else np.asarray(E, dtype=np.float64)
    if E.shape[0] != X.shape[0]:
        raise ValueError(f"endmembers have {E.shape[0]} bands, data has {X.shape[0]}")
    R = E.shape[1]
    if np.linalg.matrix_rank(E) < R:
        raise np.linalg.LinAlgError(
            f"endmember matrix is rank deficient; collinear columns: {_collinear_columns(E, 1e-10)}")
    if delta is None:
        delta = 1e-3 / float(np.mean(np.abs(E)))
    if delta <= 0:
        raise ValueError("delta must be positive")
    M = np.vstack([delta * E, np.ones((1, R))])
    B = np.vstack([delta * X, np.ones((1, X.shape[1]))])
    A = np.empty((R, X.shape[1]))
    for n in range(X.shape[1]):
        A[:, n], _ = nnls(M, B[:, n], maxiter=50 * R)
    sums = A.sum(axis=0, keepdims=True)
    A = np.where(sums > 0, A / np.where(sums > 0, sums, 1.0), 1.0 / R)
    return AbundanceMatrix(A)


def make_guidance(Y, R: int, tol: float = 1e-6) -> Guidance:
    """SiVM endmembers followed by FCLS abundances.

    Noisy pixels can carry small negative values; the selected endmembers
    are clipped at zero (with a warning) so the guidance satisfies ENC.
    """
    ext = sivm_extract(Y, R)
    E = ext.endmembers.E
    if E.min() < 0:
        log.warning("SiVM endmembers have %d negative entries (min %.3g); clipped to 0",
                    int((E < 0).sum()), float(E.min()))
        E = np.maximum(E, 0.0)
    A = fcls_solve(Y, E)
    issues = validate_constraints(E, A, tol)
    if issues:
        raise ValueError(f"guidance violates constraints: {issues}")
    return Guidance(EndmemberMatrix(E), A)
