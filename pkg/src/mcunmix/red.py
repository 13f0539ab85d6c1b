"""Regularisation by denoising: NLM denoiser, RED energy and the outer
ADMM loop that trains NBA under RED penalties (NBARED).

The outer loop alternates three steps, starting from ``X = d = 0``:

1. train the network for ``n_inner`` epochs on the composite loss plus
   ``mu/2 ||X - out - d||^2`` for both outputs,
2. one fixed-point sweep ``X <- (alpha f_D(X) + mu (out + d)) / (alpha + mu)``,
3. dual ascent ``d <- d + out - X``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .hsi import Guidance, HsiCube
from .nets import UadipParams, UedipParams, nba_graph
from .training import AugmentedTerms, LossWeights, TrainConfig, TrainResult, _outputs, train_inner

__all__ = [
    "NlmConfig",
    "RedConfig",
    "RedState",
    "OUTER_FIELDS",
    "nlm_denoise",
    "red_value",
    "fixed_point_update",
    "dual_update",
    "nbared_run",
    "NbaredResult",
]

log = logging.getLogger(__name__)

OUTER_FIELDS = ("t", "gap_E", "gap_A", "red_E", "red_A")

Denoiser = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NlmConfig:
    """Non-local means settings.

    ``h_scale`` times the value range of the input gives the filtering
    strength ``h``.  ``weighting`` is "uniform" or "gaussian" (patch
    pixels weighted by a Gaussian of their offset, sigma = patch radius).
    """

    patch_radius: int = 1
    search_radius: int = 5
    h_scale: float = 0.1
    weighting: str = "uniform"

    def __post_init__(self):
        if self.patch_radius < 1 or self.search_radius < 1:
            raise ValueError("NLM radii must be >= 1")
        if not self.h_scale > 0:
            raise ValueError("NLM strength must be positive")
        if self.weighting not in ("uniform", "gaussian"):
            raise ValueError(f"unknown NLM weighting {self.weighting!r}")


def _patch_weights(cfg: NlmConfig) -> np.ndarray:
    r = cfg.patch_radius
    if cfg.weighting == "uniform":
        w = np.ones((2 * r + 1, 2 * r + 1))
    else:
        ax = np.arange(-r, r + 1)
        g = np.exp(-(ax ** 2) / (2.0 * r * r))
        w = np.outer(g, g)
    return w / w.sum()


def nlm_denoise(X: np.ndarray, cfg: NlmConfig = NlmConfig(), h: float | None = None) -> np.ndarray:
    """Channel-wise non-local means on a ``(C, H, W)`` array.

    Each pixel becomes the weighted mean of the pixels in its (clipped)
    search window, with weights ``exp(-d^2 / h^2)`` where ``d^2`` is the
    weighted mean squared difference of the surrounding patches (image
    reflected at the border for patch extraction).  ``h`` defaults to
    ``h_scale`` times the value range of ``X``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected a (C, H, W) array, got shape {X.shape}")
    C, H, W = X.shape
    pr, sr = cfg.patch_radius, cfg.search_radius
    if H < 2 * pr + 1 or W < 2 * pr + 1:
        warnings.warn(f"NLM window {2 * pr + 1} does not fit a {H}x{W} image; input returned",
                      RuntimeWarning, stacklevel=2)
        return X.copy()
    if h is None:
        span = float(X.max() - X.min())
        h = cfg.h_scale * span
    h2 = max(h * h, np.finfo(np.float64).tiny)
    pw = _patch_weights(cfg)
    pad = pr + sr
    Xp = np.pad(X, ((0, 0), (pad, pad), (pad, pad)), mode="symmetric")
    # centre patches region: pixels [-pr, H+pr) x [-pr, W+pr)
    centre = Xp[:, sr:sr + H + 2 * pr, sr:sr + W + 2 * pr]
    num = np.zeros_like(X)
    den = np.zeros_like(X)
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    for dy in range(-sr, sr + 1):
        vy = (rows + dy >= 0) & (rows + dy < H)
        for dx in range(-sr, sr + 1):
            valid = vy & (cols + dx >= 0) & (cols + dx < W)
            if not valid.any():
                continue
            shifted = Xp[:, sr + dy:sr + dy + H + 2 * pr, sr + dx:sr + dx + W + 2 * pr]
            diff2 = (centre - shifted) ** 2
            win = sliding_window_view(diff2, (2 * pr + 1, 2 * pr + 1), axis=(1, 2))
            d2 = np.einsum("chwij,ij->chw", win, pw)
            wgt = np.exp(-d2 / h2) * valid
            # accumulate offsets from the centre value so constants stay exact
            num += wgt * (shifted[:, pr:pr + H, pr:pr + W] - X)
            den += wgt
    return X + num / den


def red_value(X: np.ndarray, f_D: Denoiser, fx: np.ndarray | None = None) -> float:
    """RED energy ``0.5 * <X, X - f_D(X)>`` (Frobenius inner product).

    Pass ``fx`` to reuse an already computed ``f_D(X)``.
    """
    X = np.asarray(X, dtype=np.float64)
    fx = f_D(X) if fx is None else fx
    return 0.5 * float(np.sum(X * (X - fx)))


@dataclass
class RedState:
    """Splitting variables ``X_E (1, P, R)``, ``X_A (R, H, W)`` and their
    scaled duals, with the penalty weights and the outer iteration count.

    ``fx_E``/``fx_A`` cache the denoiser output at the current ``X``.
    """

    X_E: np.ndarray
    X_A: np.ndarray
    d_E: np.ndarray
    d_A: np.ndarray
    mu_E: float
    mu_A: float
    t: int = 0
    fx_E: np.ndarray | None = field(default=None, repr=False)
    fx_A: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not (self.mu_E > 0 and self.mu_A > 0):
            raise ValueError(f"penalty weights must be positive, got mu_E={self.mu_E}, mu_A={self.mu_A}")
        if self.X_E.ndim != 3 or self.X_E.shape[0] != 1:
            raise ValueError(f"X_E must be (1, P, R), got {self.X_E.shape}")
        if self.d_E.shape != self.X_E.shape or self.d_A.shape != self.X_A.shape:
            raise ValueError("dual shapes must match their splitting variables")

    @classmethod
    def zeros(cls, P: int, R: int, H: int, W: int, mu_E: float, mu_A: float) -> "RedState":
        return cls(np.zeros((1, P, R)), np.zeros((R, H, W)), np.zeros((1, P, R)),
                   np.zeros((R, H, W)), mu_E, mu_A)

    def augmented(self) -> AugmentedTerms:
        R = self.X_A.shape[0]
        return AugmentedTerms(self.X_E[0], self.d_E[0], self.X_A.reshape(R, -1),
                              self.d_A.reshape(R, -1), self.mu_E, self.mu_A)


def _as_images(state: RedState, E_hat, A_hat) -> tuple[np.ndarray, np.ndarray]:
    E = np.asarray(E_hat, dtype=np.float64).reshape(state.X_E.shape)
    A = np.asarray(A_hat, dtype=np.float64).reshape(state.X_A.shape)
    return E, A


def fixed_point_update(state: RedState, E_hat, A_hat, alpha4: float, alpha5: float,
                       f_D: Denoiser) -> RedState:
    """One fixed-point sweep on ``X_E`` and ``X_A`` (one denoiser call each).

    ``X <- (alpha f_D(X) + mu (out + d)) / (alpha + mu)``.  ``E_hat`` may be
    ``(P, R)`` or ``(1, P, R)``; ``A_hat`` ``(R, N)`` or ``(R, H, W)``.
    """
    if state.mu_E <= 0 or state.mu_A <= 0:
        raise ValueError("penalty weights must be positive")
    if alpha4 + state.mu_E <= 0 or alpha5 + state.mu_A <= 0:
        raise ValueError("alpha + mu must be positive")
    E, A = _as_images(state, E_hat, A_hat)

    def sweep(X, fx, out, d, alpha, mu):
        if not alpha:
            return out + d
        fx = f_D(X) if fx is None else fx
        return (alpha * fx + mu * (out + d)) / (alpha + mu)

    X_E = sweep(state.X_E, state.fx_E, E, state.d_E, alpha4, state.mu_E)
    X_A = sweep(state.X_A, state.fx_A, A, state.d_A, alpha5, state.mu_A)
    return replace(state, X_E=X_E, X_A=X_A, fx_E=None, fx_A=None)


def dual_update(state: RedState, E_hat, A_hat) -> RedState:
    """``d <- d + out - X`` for both splittings; advances ``t``."""
    E, A = _as_images(state, E_hat, A_hat)
    return replace(state, d_E=state.d_E + (E - state.X_E), d_A=state.d_A + (A - state.X_A),
                   t=state.t + 1)


@dataclass(frozen=True)
class RedConfig:
    mu_E: float = 0.1
    mu_A: float = 0.1
    T: int = 5000
    n_inner: int = 1
    tol: float = 1e-4
    penalties: bool = True
    nlm: NlmConfig = NlmConfig()

    def __post_init__(self):
        if self.penalties and not (self.mu_E > 0 and self.mu_A > 0):
            raise ValueError("mu_E and mu_A must be positive")
        if self.T < 1 or self.n_inner < 0 or self.tol < 0:
            raise ValueError("need T >= 1, n_inner >= 0 and tol >= 0")


@dataclass
class NbaredResult:
    train: TrainResult
    state: RedState | None
    outer: list[dict]
    converged: bool


def nbared_run(Y: HsiCube, guidance: Guidance, theta_E: UedipParams, theta_A: UadipParams,
               w: LossWeights, cfg: TrainConfig, red: RedConfig,
               gt: tuple | None = None, f_D: Denoiser | None = None) -> NbaredResult:
    """Train NBA inside the RED outer loop.

    Runs at most ``red.T`` outer iterations of ``red.n_inner`` epochs each
    and stops early once both the splitting gap ``||E - X_E|| + ||A - X_A||``
    and the change of ``X`` over the last sweep drop below
    ``tol * (||E|| + ||A||)``.  With ``red.penalties`` off this is plain
    NBA training for ``T * n_inner`` epochs.
    """
    if not red.penalties:
        res = train_inner(Y, guidance, theta_E, theta_A, w, cfg, red.T * red.n_inner, gt=gt)
        return NbaredResult(res, None, [], False)
    f_D = f_D or (lambda X: nlm_denoise(X, red.nlm))
    P, R = guidance.E.shape
    box = {"state": RedState.zeros(P, R, Y.height, Y.width, red.mu_E, red.mu_A),
           "done": False}
    outer: list[dict] = []

    def step(E, A) -> bool:
        prev = box["state"]
        s = fixed_point_update(prev, E, A, w.alpha4, w.alpha5, f_D)
        s = dual_update(s, E, A)
        # denoiser output at the new X feeds both the trace and the next sweep
        s.fx_E, s.fx_A = f_D(s.X_E), f_D(s.X_A)
        Ei, Ai = _as_images(s, E, A)
        gap_E = float(np.linalg.norm(Ei - s.X_E))
        gap_A = float(np.linalg.norm(Ai - s.X_A))
        row = {"t": s.t, "gap_E": gap_E, "gap_A": gap_A,
               "red_E": red_value(s.X_E, f_D, s.fx_E), "red_A": red_value(s.X_A, f_D, s.fx_A)}
        outer.append(row)
        if not (math.isfinite(gap_E) and math.isfinite(gap_A)):
            raise FloatingPointError(f"outer iteration {s.t}: non-finite splitting gap")
        box["state"] = s
        # converged once both the splitting gap and the change of X are small
        scale = red.tol * float(np.linalg.norm(Ei) + np.linalg.norm(Ai))
        moved = float(np.linalg.norm(s.X_E - prev.X_E) + np.linalg.norm(s.X_A - prev.X_A))
        return gap_E + gap_A < scale and moved < scale

    if red.n_inner == 0:
        E, A, Yhat, _ = nba_graph(Y, theta_E, theta_A)
        conv = False
        for _ in range(red.T):
            conv = step(E.data, A.data)
            if conv:
                break
        res = TrainResult(theta_E.copy(), theta_A.copy(), None, [], _outputs(Y, E, A, Yhat), 0)
        return NbaredResult(res, box["state"], outer, conv)

    def hook(epoch, E, A):
        if epoch % red.n_inner == 0 and epoch > 0 and not box["done"]:
            box["done"] = step(E, A)
            if box["done"]:
                log.info("outer loop converged at t=%d", box["state"].t)
        return box["state"].augmented(), box["done"]

    res = train_inner(Y, guidance, theta_E, theta_A, w, cfg, red.T * red.n_inner,
                      hook=hook, gt=gt)
    return NbaredResult(res, box["state"], outer, box["done"])
