"""Loss terms, the ADAM optimiser and the full-batch training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ndgraph as ng
from .hsi import AbundanceMatrix, EndmemberMatrix, Guidance, HsiCube
from .metrics import evaluate
from .nets import NbaOutputs, UadipParams, UedipParams, nba_graph

__all__ = [
    "LossWeights",
    "TrainConfig",
    "AugmentedTerms",
    "AdamState",
    "TrainingDiverged",
    "TrainResult",
    "loss_E",
    "loss_A",
    "loss_BU",
    "composite_loss",
    "adam_step",
    "train_inner",
    "TRACE_FIELDS",
]

log = logging.getLogger(__name__)

TRACE_FIELDS = ("epoch", "L_E", "L_A", "L_BU", "total")
METRIC_FIELDS = ("RMSE", "AAD", "SAD")


@dataclass(frozen=True)
class LossWeights:
    """``alpha1..alpha3`` weight L_E, L_A, L_BU; ``alpha4``/``alpha5`` weight
    the RED terms on the endmember and abundance images."""

    alpha1: float = 0.1
    alpha2: float = 0.001
    alpha3: float = 1.0
    alpha4: float = 0.001
    alpha5: float = 0.001

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "alpha4", "alpha5"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.85
    eps: float = 1e-8
    epochs: int = 5000
    trace_every: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("ADAM betas must lie in [0, 1)")
        if self.epochs < 0 or self.trace_every < 1:
            raise ValueError("epochs must be >= 0 and trace_every >= 1")


@dataclass(frozen=True)
class AugmentedTerms:
    """Fixed splitting variables and scaled duals of the outer ADMM loop.

    ``X_E``/``d_E`` have the shape of ``E_hat`` (P, R) and ``X_A``/``d_A``
    that of ``A_hat`` (R, N).
    """

    X_E: np.ndarray
    d_E: np.ndarray
    X_A: np.ndarray
    d_A: np.ndarray
    mu_E: float
    mu_A: float


# ---------------------------------------------------------------- losses

def _node(x) -> ng.Value:
    if isinstance(x, ng.Value):
        return x
    if isinstance(x, HsiCube):
        return ng.const(x.flat)
    if isinstance(x, EndmemberMatrix):
        return ng.const(x.E)
    if isinstance(x, AbundanceMatrix):
        return ng.const(x.A)
    return ng.const(x)


def _finish(v: ng.Value, inputs):
    return v if any(isinstance(x, ng.Value) for x in inputs) else float(v.data)


def _half_sq(Y: ng.Value, Z: ng.Value, what: str) -> ng.Value:
    if Y.shape != Z.shape:
        raise ValueError(f"{what}: data {Y.shape} and reconstruction {Z.shape} differ")
    return ng.scale(ng.sum_squares(Y - Z), 0.5)


def loss_E(Y, E_hat, A_G):
    """``0.5 * ||Y - E_hat A_G||_F^2``; a node if any input is a node, else a float."""
    return _finish(_half_sq(_node(Y), ng.matmul(_node(E_hat), _node(A_G)), "loss_E"), (Y, E_hat))


def loss_A(Y, A_hat, E_G):
    """``0.5 * ||Y - E_G A_hat||_F^2``."""
    return _finish(_half_sq(_node(Y), ng.matmul(_node(E_G), _node(A_hat)), "loss_A"), (Y, A_hat))


def loss_BU(Y, Y_hat):
    """``0.5 * ||Y - Y_hat||_F^2``."""
    return _finish(_half_sq(_node(Y), _node(Y_hat), "loss_BU"), (Y, Y_hat))


def composite_loss(Y, E_hat, A_hat, Y_hat, guidance: Guidance, w: LossWeights,
                   aug: AugmentedTerms | None = None, parts: dict | None = None):
    """Weighted sum of the three losses, plus the augmented-Lagrangian
    penalties ``mu/2 ||X - out - d||^2`` when ``aug`` is given.

    ``parts``, if supplied, receives the unweighted term values.
    """
    for name in ("alpha1", "alpha2", "alpha3"):
        if not math.isfinite(getattr(w, name)):
            raise ValueError(f"{name} is not finite")
    E, A, Yh = _node(E_hat), _node(A_hat), _node(Y_hat)
    Yn = _node(Y)
    le = _half_sq(Yn, ng.matmul(E, ng.const(guidance.A)), "loss_E")
    la = _half_sq(Yn, ng.matmul(ng.const(guidance.E), A), "loss_A")
    lb = _half_sq(Yn, Yh, "loss_BU")
    total = ng.scale(le, w.alpha1) + ng.scale(la, w.alpha2) + ng.scale(lb, w.alpha3)
    if parts is not None:
        parts.update(L_E=float(le.data), L_A=float(la.data), L_BU=float(lb.data))
    if aug is not None:
        pe = ng.scale(ng.sum_squares(ng.const(aug.X_E - aug.d_E) - E), aug.mu_E / 2.0)
        pa = ng.scale(ng.sum_squares(ng.const(aug.X_A - aug.d_A) - A), aug.mu_A / 2.0)
        total = total + pe + pa
        if parts is not None:
            parts.update(P_E=float(pe.data), P_A=float(pa.data))
    if parts is not None:
        parts["total"] = float(total.data)
    return _finish(total, (Y, E_hat, A_hat, Y_hat))


# ---------------------------------------------------------------- ADAM

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.85
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], cfg: TrainConfig | None = None) -> "AdamState":
        cfg = cfg or TrainConfig()
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, 0,
                   {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
              state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected ADAM update, applied in place to ``params``.

    A missing gradient counts as zero.  Raises ``FloatingPointError`` naming
    the first parameter whose gradient is not finite; nothing is modified
    in that case.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {name!r} {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------- loop

class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; ``checkpoint`` holds the last finite parameters."""

    def __init__(self, epoch: int, checkpoint: tuple[UedipParams, UadipParams]):
        super().__init__(f"loss is not finite at epoch {epoch}")
        self.epoch = epoch
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    theta_E: UedipParams
    theta_A: UadipParams
    adam: AdamState
    trace: list[dict]
    outputs: NbaOutputs
    epochs_run: int
    stopped_early: bool = False


# hook(epoch, E_hat, A_hat) -> (aug, stop)
Hook = Callable[[int, np.ndarray, np.ndarray], tuple]


def _outputs(Y: HsiCube, E, A, Yhat) -> NbaOutputs:
    return NbaOutputs(EndmemberMatrix(E.data), AbundanceMatrix(A.data),
                      HsiCube.from_flat(Yhat.data, Y.height, Y.width))


def train_inner(Y: HsiCube, guidance: Guidance, theta_E: UedipParams, theta_A: UadipParams,
                w: LossWeights, cfg: TrainConfig, epochs: int | None = None,
                adam: AdamState | None = None, aug: AugmentedTerms | None = None,
                hook: Hook | None = None, gt: tuple | None = None,
                epoch_offset: int = 0) -> TrainResult:
    """Full-batch training of the NBA parameters.

    Each epoch runs forward, composite loss, backward and one ADAM step.
    The input parameter sets are not modified.

    ``hook``, if given, is called at the start of every epoch with the
    current ``(E_hat, A_hat)`` arrays and returns ``(aug, stop)``: the
    penalty terms for this epoch and whether to stop before updating.  It is
    called once more with the final outputs when the epoch budget runs out.
    ``gt = (E_gt, A_gt)`` adds aligned RMSE/AAD/SAD columns to the trace.
    """
    if guidance is None:
        raise ValueError("training needs guidance (E_G, A_G)")
    epochs = cfg.epochs if epochs is None else epochs
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    thE, thA = theta_E.copy(), theta_A.copy()
    params = {f"uedip/{k}": v for k, v in thE.arrays.items()}
    params.update({f"uadip/{k}": v for k, v in thA.arrays.items()})
    adam = AdamState.for_params(params, cfg) if adam is None else adam
    trace: list[dict] = []
    stopped = False
    run = 0
    for e in range(epochs):
        E, A, Yhat, leaves = nba_graph(Y, thE, thA)
        if hook is not None:
            aug, stop = hook(e, E.data, A.data)
            if stop:
                stopped = True
                return TrainResult(thE, thA, adam, trace, _outputs(Y, E, A, Yhat), run, True)
        parts: dict = {}
        loss = composite_loss(Y, E, A, Yhat, guidance, w, aug, parts)
        if not math.isfinite(parts["total"]):
            raise TrainingDiverged(epoch_offset + e, (thE.copy(), thA.copy()))
        if e % cfg.trace_every == 0:
            row = {"epoch": epoch_offset + e, **{k: parts[k] for k in TRACE_FIELDS[1:]}}
            if gt is not None:
                rep = evaluate(gt[0], gt[1], E.data, A.data)
                row.update(RMSE=rep.rmse, AAD=rep.aad, SAD=rep.sad_mean)
            trace.append(row)
        loss.backward()
        adam_step(params, {k: leaves[k].grad for k in params}, adam)
        run += 1
        if e % 500 == 0:
            log.debug("epoch %d total %.6g", epoch_offset + e, parts["total"])
    E, A, Yhat, _ = nba_graph(Y, thE, thA)
    if hook is not None and epochs > 0:
        hook(epochs, E.data, A.data)
    return TrainResult(thE, thA, adam, trace, _outputs(Y, E, A, Yhat), run, stopped)
