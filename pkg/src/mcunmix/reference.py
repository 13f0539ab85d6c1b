"""Literal ADMM solvers for the MatrixConv endmember / abundance problems.

Endmember problem (codes ``gamma`` shaped ``(m, R, P)``)::

    min_G  1/2 ||Y^T - A^T D_E G||_F^2 + lam ||G||_1

Abundance problem (codes shaped ``(m, R, N1, N2)``)::

    min_G  1/2 ||Y - E D_A G||_F^2 + lam ||G||_1   s.t.  G >= 0

Both use the split ``G = Omega`` with the scaled dual ``u``.  The
``Omega``-update is an exact regularised normal-equation solve, the
``G``-update a single proximal-gradient step with step ``1/L``.
"""

from __future__ import annotations

import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, cg

from .hsi import AbundanceMatrix, EndmemberMatrix, HsiCube
from .ndgraph import corr1d, corr2d

__all__ = [
    "ConvDictionary1D",
    "ConvDictionary2D",
    "AdmmState",
    "EEProblem",
    "AEProblem",
    "admm_ee",
    "admm_ae",
    "dense_operator",
    "soft",
    "DENSE_LIMIT",
]

log = logging.getLogger(__name__)

DENSE_LIMIT = 10**6
_DIRECT_MAX = 4096
_POWER_ITERS = 50


def soft(x: np.ndarray, z: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - z, 0.0)


@dataclass(frozen=True)
class ConvDictionary1D:
    """``m`` spectral kernels of odd length ``k``, stored ``(m, k)``."""

    kernels: np.ndarray

    def __post_init__(self):
        d = np.array(self.kernels, dtype=np.float64)
        if d.ndim == 1:
            d = d[None, :]
        if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] % 2 == 0:
            raise ValueError(f"1D dictionary needs (m, odd k) kernels, got {d.shape}")
        object.__setattr__(self, "kernels", d)

    @classmethod
    def delta(cls, k: int = 1) -> "ConvDictionary1D":
        d = np.zeros((1, k))
        d[0, k // 2] = 1.0
        return cls(d)

    @property
    def m(self) -> int:
        return self.kernels.shape[0]

    @property
    def k(self) -> int:
        return self.kernels.shape[1]

    def synthesize(self, gamma: np.ndarray) -> np.ndarray:
        """``(m, R, P)`` codes -> ``(R, P)`` signal (the transposed endmembers)."""
        return corr1d(gamma, self.kernels[None, :, :])[0]

    def adjoint(self, signal: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`synthesize`: ``(R, P)`` -> ``(m, R, P)``."""
        flipped = np.ascontiguousarray(self.kernels[:, None, ::-1])
        return corr1d(signal[None], flipped)


@dataclass(frozen=True)
class ConvDictionary2D:
    """``m`` spatial kernels of odd size ``k x k``, stored ``(m, k, k)``."""

    kernels: np.ndarray

    def __post_init__(self):
        d = np.array(self.kernels, dtype=np.float64)
        if d.ndim == 2:
            d = d[None]
        if d.ndim != 3 or d.shape[1] != d.shape[2] or d.shape[1] % 2 == 0:
            raise ValueError(f"2D dictionary needs (m, k, k) kernels with odd k, got {d.shape}")
        object.__setattr__(self, "kernels", d)

    @classmethod
    def delta(cls, k: int = 1) -> "ConvDictionary2D":
        d = np.zeros((1, k, k))
        d[0, k // 2, k // 2] = 1.0
        return cls(d)

    @property
    def m(self) -> int:
        return self.kernels.shape[0]

    @property
    def k(self) -> int:
        return self.kernels.shape[1]

    def synthesize(self, gamma: np.ndarray) -> np.ndarray:
        """``(m, R, N1, N2)`` codes -> ``(R, N1, N2)`` abundance planes."""
        ker = self.kernels[None]
        return np.stack([corr2d(gamma[:, r], ker)[0] for r in range(gamma.shape[1])])

    def adjoint(self, signal: np.ndarray) -> np.ndarray:
        flipped = np.ascontiguousarray(self.kernels[:, None, ::-1, ::-1])
        return np.stack([corr2d(signal[r][None], flipped) for r in range(signal.shape[0])], axis=1)


def dense_operator(D, target_shape) -> np.ndarray:
    """Explicit matrix of the dictionary's synthesis map.

    ``dense_operator(D, shape) @ gamma.ravel()`` equals
    ``D.synthesize(gamma).ravel()``.  Built by direct index enumeration so
    it can serve as an independent check of the convolution code.

    Parameters
    ----------
    D : ConvDictionary1D or ConvDictionary2D
    target_shape : tuple
        ``(R, P)`` for 1D dictionaries, ``(R, N1, N2)`` for 2D ones.
    """
    target_shape = tuple(int(s) for s in target_shape)
    rows = int(np.prod(target_shape))
    cols = D.m * rows
    if rows * cols > DENSE_LIMIT:
        raise MemoryError(f"dense operator of {rows}x{cols} exceeds {DENSE_LIMIT} entries")
    M = np.zeros((rows, cols))
    c = D.k // 2
    if isinstance(D, ConvDictionary1D):
        if len(target_shape) != 2:
            raise ValueError(f"1D dictionary needs an (R, P) target, got {target_shape}")
        R, P = target_shape
        for r in range(R):
            for p in range(P):
                row = r * P + p
                for i in range(D.m):
                    for t in range(D.k):
                        q = p + t - c
                        if 0 <= q < P:
                            M[row, (i * R + r) * P + q] += D.kernels[i, t]
    elif isinstance(D, ConvDictionary2D):
        if len(target_shape) != 3:
            raise ValueError(f"2D dictionary needs an (R, N1, N2) target, got {target_shape}")
        R, H, W = target_shape
        for r in range(R):
            for y in range(H):
                for x in range(W):
                    row = (r * H + y) * W + x
                    for i in range(D.m):
                        for ty in range(D.k):
                            yy = y + ty - c
                            if not 0 <= yy < H:
                                continue
                            for tx in range(D.k):
                                xx = x + tx - c
                                if 0 <= xx < W:
                                    M[row, ((i * R + r) * H + yy) * W + xx] += D.kernels[i, ty, tx]
    else:
        raise TypeError(f"not a convolutional dictionary: {type(D).__name__}")
    return M


@dataclass
class AdmmState:
    gamma: np.ndarray
    omega: np.ndarray
    u: np.ndarray
    iteration: int = 0
    residuals: list = field(default_factory=list)

    @classmethod
    def zeros(cls, shape) -> "AdmmState":
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape))


# cached SPD factorizations keyed by a digest of the operator inputs
_FACTOR_CACHE: "OrderedDict[str, tuple]" = OrderedDict()
_CACHE_SIZE = 8


def _digest(*arrays, extra=()) -> str:
    h = hashlib.sha1()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    h.update(repr(extra).encode())
    return h.hexdigest()


class _McuProblem:
    """Shared ADMM machinery; subclasses define the forward/adjoint maps."""

    nonneg = False

    def __init__(self, code_shape, rho: float, L: float | None, key: str):
        if rho <= 0:
            raise ValueError(f"rho must be positive, got {rho}")
        self.code_shape = tuple(code_shape)
        self.rho = float(rho)
        self.size = int(np.prod(self.code_shape))
        self._key = key
        self._chol = None
        if self.size <= _DIRECT_MAX:
            self._chol = self._factor()
        self.rhs = self.adjoint(self.target)
        self.L = float(L) if L is not None else self.lipschitz()
        if self.L <= 0:
            raise ValueError(f"L must be positive, got {self.L}")

    # subclasses provide: forward(gamma) -> data-shaped, adjoint(data) -> code-shaped,
    # target (data-shaped), dense_forward() -> matrix
    def normal(self, gamma: np.ndarray) -> np.ndarray:
        return self.adjoint(self.forward(gamma)) + self.rho * gamma

    def _factor(self):
        key = self._key
        if key in _FACTOR_CACHE:
            _FACTOR_CACHE.move_to_end(key)
            return _FACTOR_CACHE[key]
        K = self.dense_forward()
        N = K.T @ K + self.rho * np.eye(self.size)
        try:
            fac = sla.cho_factor(N, lower=True)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("normal matrix is not positive definite") from exc
        _FACTOR_CACHE[key] = fac
        if len(_FACTOR_CACHE) > _CACHE_SIZE:
            _FACTOR_CACHE.popitem(last=False)
        return fac

    def solve_normal(self, b: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        if self._chol is not None:
            return sla.cho_solve(self._chol, b.ravel()).reshape(self.code_shape)
        op = LinearOperator((self.size, self.size), dtype=np.float64,
                            matvec=lambda v: self.normal(v.reshape(self.code_shape)).ravel())
        x, info = cg(op, b.ravel(), x0=None if x0 is None else x0.ravel(),
                     rtol=1e-12, atol=0.0, maxiter=10 * self.size)
        if info > 0:
            log.warning("CG did not converge in the Omega-update (info=%d)", info)
        return x.reshape(self.code_shape)

    def lipschitz(self) -> float:
        """Largest eigenvalue of the regularised normal matrix (power iteration)."""
        v = np.ones(self.code_shape) / np.sqrt(self.size)
        lam = self.rho
        for _ in range(_POWER_ITERS):
            w = self.normal(v)
            lam = float(np.vdot(v, w))
            nrm = np.linalg.norm(w)
            if nrm == 0:
                break
            v = w / nrm
        return max(lam, self.rho)

    def objective(self, gamma: np.ndarray, lam: float) -> float:
        r = self.target - self.forward(gamma)
        return 0.5 * float(np.vdot(r, r)) + lam * float(np.abs(gamma).sum())

    def step(self, state: AdmmState, lam: float) -> AdmmState:
        rho, L = self.rho, self.L
        omega = self.solve_normal(self.rhs + rho * (state.gamma + state.u), state.omega)
        gamma = soft((1.0 - rho / L) * state.gamma + (rho / L) * (omega - state.u), lam / L)
        if self.nonneg:
            gamma = np.maximum(gamma, 0.0)
        u = state.u + (gamma - omega)
        res = float(np.linalg.norm(gamma - omega))
        return AdmmState(gamma, omega, u, state.iteration + 1, state.residuals + [res])

    def run(self, lam: float, iters: int, state: AdmmState | None = None,
            callback=None) -> AdmmState:
        if lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {lam}")
        state = state or AdmmState.zeros(self.code_shape)
        for _ in range(iters):
            state = self.step(state, lam)
            if callback is not None:
                callback(state)
        return state


class EEProblem(_McuProblem):
    """Endmember problem with known abundances ``A`` and dictionary ``D``."""

    def __init__(self, Y: HsiCube, A, D: ConvDictionary1D, rho: float, L: float | None = None):
        Yf = Y.flat if isinstance(Y, HsiCube) else np.asarray(Y, dtype=np.float64)
        self.A = A.A if isinstance(A, AbundanceMatrix) else np.asarray(A, dtype=np.float64)
        if self.A.shape[1] != Yf.shape[1]:
            raise ValueError(f"abundances {self.A.shape} do not match {Yf.shape[1]} pixels")
        self.D = D
        self.R, self.P = self.A.shape[0], Yf.shape[0]
        self.target = Yf.T  # (N, P)
        key = _digest(self.A, D.kernels, extra=("ee", rho, self.P))
        super().__init__((D.m, self.R, self.P), rho, L, key)

    def forward(self, gamma):
        return self.A.T @ self.D.synthesize(gamma)

    def adjoint(self, data):
        return self.D.adjoint(self.A @ data)

    def dense_forward(self):
        Dd = dense_operator(self.D, (self.R, self.P))
        return np.kron(self.A.T, np.eye(self.P)) @ Dd

    def estimate(self, gamma) -> EndmemberMatrix:
        return EndmemberMatrix(np.maximum(self.D.synthesize(gamma), 0.0).T)


class AEProblem(_McuProblem):
    """Abundance problem with known endmembers ``E``; codes kept nonnegative."""

    nonneg = True

    def __init__(self, Y: HsiCube, E, D: ConvDictionary2D, rho: float, L: float | None = None):
        if not isinstance(Y, HsiCube):
            raise TypeError("the abundance problem needs an HsiCube for its spatial layout")
        self.E = E.E if isinstance(E, EndmemberMatrix) else np.asarray(E, dtype=np.float64)
        if self.E.shape[0] != Y.bands:
            raise ValueError(f"endmembers {self.E.shape} do not match {Y.bands} bands")
        self.D = D
        self.R = self.E.shape[1]
        self.H, self.W = Y.height, Y.width
        self.target = Y.flat
        key = _digest(self.E, D.kernels, extra=("ae", rho, self.H, self.W))
        super().__init__((D.m, self.R, self.H, self.W), rho, L, key)

    def forward(self, gamma):
        return self.E @ self.D.synthesize(gamma).reshape(self.R, -1)

    def adjoint(self, data):
        return self.D.adjoint((self.E.T @ data).reshape(self.R, self.H, self.W))

    def dense_forward(self):
        Dd = dense_operator(self.D, (self.R, self.H, self.W))
        return np.kron(self.E, np.eye(self.H * self.W)) @ Dd

    def estimate(self, gamma) -> AbundanceMatrix:
        return AbundanceMatrix(self.D.synthesize(gamma).reshape(self.R, -1))


def admm_ee(Y, A, D: ConvDictionary1D, lam: float, rho: float, L: float | None = None,
            iters: int = 200, callback=None) -> tuple[np.ndarray, EndmemberMatrix]:
    """Solve the MatrixConv endmember problem from an all-zero start.

    Returns the sparse codes ``(m, R, P)`` and the clipped estimate ``E_hat``.
    """
    prob = EEProblem(Y, A, D, rho, L)
    state = prob.run(lam, iters, callback=callback)
    return state.gamma, prob.estimate(state.gamma)


def admm_ae(Y: HsiCube, E, D: ConvDictionary2D, lam: float, rho: float,
            L: float | None = None, iters: int = 200,
            callback=None) -> tuple[np.ndarray, AbundanceMatrix]:
    """Solve the nonnegative MatrixConv abundance problem from an all-zero start."""
    prob = AEProblem(Y, E, D, rho, L)
    state = prob.run(lam, iters, callback=callback)
    return state.gamma, prob.estimate(state.gamma)
