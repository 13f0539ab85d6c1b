"""Unrolled endmember (UEDIP) and abundance (UADIP) networks and their
assembly into the blind-unmixing network (NBA).

Each layer mirrors one ADMM iteration of the MatrixConv solvers::

    B     = shared + s1 * (G + u)
    Omega = F2 * (A2 x (F3 * B))
    G     = Soft_{s2}((1 - s3) G + s3 (Omega - u))
    u     = u + G - Omega

where ``shared = F1 * (A1 x Y^T)`` is computed once.  The abundance
network uses 2D convolutions, a channel mixer ``E2`` and a shifted ReLU
instead of the soft threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgraph as ng
from .hsi import AbundanceMatrix, EndmemberMatrix, HsiCube

__all__ = [
    "UedipParams",
    "UadipParams",
    "NbaOutputs",
    "uedip_forward",
    "uadip_forward",
    "uedip_codes",
    "nba_forward",
    "nba_graph",
    "uedip_graph",
    "uadip_graph",
    "param_count",
]

INIT_SCALARS = {"s1": 1.0, "s2": 0.01, "s3": 0.5}


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Params:
    """Ordered mapping of parameter names to float64 arrays."""

    prefix = ""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, name):
        return self.arrays[name]

    def __eq__(self, other):
        return (type(self) is type(other) and self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays))

    @property
    def n_layers(self) -> int:
        return len({k.split(".")[0] for k in self.arrays if k.startswith("layer")})

    def copy(self):
        return type(self)({k: v.copy() for k, v in self.arrays.items()})

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def leaves(self) -> dict[str, ng.Value]:
        return {k: ng.param(v) for k, v in self.arrays.items()}


class UedipParams(_Params):
    """Parameters of the endmember network.

    Network-level: ``A1 (R, N)``, ``F1 (m, 1, k)``, ``F_out (1, m, k)``.
    Per layer ``j``: ``layer{j}.A2 (R, R)``, ``layer{j}.F2``/``F3 (m, m, k)``
    and scalars ``s1``, ``s2``, ``s3``.
    """

    prefix = "uedip"

    @classmethod
    def init(cls, R: int, N: int, m: int, k: int, n_layers: int, rng) -> "UedipParams":
        if k % 2 == 0:
            raise ng.GraphError(f"kernel size must be odd, got {k}")
        arrays = {
            "A1": _uniform(rng, (R, N), N),
            "F1": _uniform(rng, (m, 1, k), k),
        }
        for j in range(n_layers):
            arrays[f"layer{j}.A2"] = _uniform(rng, (R, R), R)
            arrays[f"layer{j}.F2"] = _uniform(rng, (m, m, k), m * k)
            arrays[f"layer{j}.F3"] = _uniform(rng, (m, m, k), m * k)
            for s, v in INIT_SCALARS.items():
                arrays[f"layer{j}.{s}"] = np.array(v)
        arrays["F_out"] = _uniform(rng, (1, m, k), m * k)
        return cls(arrays)

    @classmethod
    def zeros(cls, R: int, N: int, m: int, k: int, n_layers: int) -> "UedipParams":
        p = cls.init(R, N, m, k, n_layers, np.random.default_rng(0))
        return cls({name: np.zeros_like(v) for name, v in p.arrays.items()})


class UadipParams(_Params):
    """Parameters of the abundance network.

    Network-level: ``E1 (R, P)``, ``U1 (m, R, k, k)``, ``U_out (R, m, k, k)``.
    Per layer: ``E2 (m, m)`` channel mixer, ``U2``/``U3 (m, m, k, k)`` and
    scalars ``v1``, ``v2``, ``v3``.
    """

    prefix = "uadip"

    @classmethod
    def init(cls, R: int, P: int, m: int, k: int, n_layers: int, rng) -> "UadipParams":
        if k % 2 == 0:
            raise ng.GraphError(f"kernel size must be odd, got {k}")
        arrays = {
            "E1": _uniform(rng, (R, P), P),
            "U1": _uniform(rng, (m, R, k, k), R * k * k),
        }
        for j in range(n_layers):
            arrays[f"layer{j}.E2"] = _uniform(rng, (m, m), m)
            arrays[f"layer{j}.U2"] = _uniform(rng, (m, m, k, k), m * k * k)
            arrays[f"layer{j}.U3"] = _uniform(rng, (m, m, k, k), m * k * k)
            for s, v in INIT_SCALARS.items():
                arrays[f"layer{j}.v{s[1]}"] = np.array(v)
        arrays["U_out"] = _uniform(rng, (R, m, k, k), m * k * k)
        return cls(arrays)

    @classmethod
    def zeros(cls, R: int, P: int, m: int, k: int, n_layers: int) -> "UadipParams":
        p = cls.init(R, P, m, k, n_layers, np.random.default_rng(0))
        return cls({name: np.zeros_like(v) for name, v in p.arrays.items()})


def _flat(Y) -> np.ndarray:
    return Y.flat if isinstance(Y, HsiCube) else np.asarray(Y, dtype=np.float64)


def _unrolled(shared, leaves, n_layers, conv, threshold, names, axis, init=None):
    mix_name, out_conv, in_conv, gain, thr, step = names
    gamma = u = None
    if init is not None:
        gamma, u = ng.const(init[0]), ng.const(init[1])
    for j in range(n_layers):
        p = lambda s: leaves[f"layer{j}.{s}"]  # noqa: E731
        B = shared if gamma is None else shared + ng.scale(gamma + u, p(gain))
        omega = conv(ng.mix(p(mix_name), conv(B, p(in_conv)), axis), p(out_conv))
        if gamma is None:
            pre = ng.scale(omega, p(step))
        else:
            pre = gamma + ng.scale(omega - u - gamma, p(step))
        new = threshold(pre, ng.relu(p(thr)))
        u = (new - omega) if u is None else u + new - omega
        gamma = new
    return gamma, u


def uedip_graph(Y, leaves: dict[str, ng.Value], init=None, codes_only: bool = False):
    """Build the endmember network graph; returns ``E_hat`` as a ``(P, R)`` node.

    With ``codes_only`` the final ``(gamma, u)`` code nodes are returned instead.
    """
    Yf = _flat(Y)
    A1 = leaves["A1"]
    if A1.shape[1] != Yf.shape[1]:
        raise ng.GraphError(f"A1 has {A1.shape[1]} columns but the cube has {Yf.shape[1]} pixels")
    R, P = A1.shape[0], Yf.shape[0]
    n_layers = len({k.split(".")[0] for k in leaves if k.startswith("layer")})
    t = ng.matmul(A1, ng.const(Yf.T))
    shared = ng.conv1d(ng.reshape(t, (1, R, P)), leaves["F1"])
    gamma, u = _unrolled(shared, leaves, n_layers, ng.conv1d, ng.soft_threshold,
                         ("A2", "F2", "F3", "s1", "s2", "s3"), axis=1, init=init)
    if gamma is None:  # zero layers: the code stays at its zero start
        gamma = ng.const(np.zeros(shared.shape))
        u = gamma
    if codes_only:
        return gamma, u
    Et = ng.sigmoid(ng.reshape(ng.conv1d(gamma, leaves["F_out"]), (R, P)))
    return ng.transpose(Et)


def uadip_graph(Y: HsiCube, leaves: dict[str, ng.Value]):
    """Build the abundance network graph; returns ``A_hat`` as an ``(R, N)`` node."""
    E1 = leaves["E1"]
    if E1.shape[1] != Y.bands:
        raise ng.GraphError(f"E1 has {E1.shape[1]} columns but the cube has {Y.bands} bands")
    R = E1.shape[0]
    H, W = Y.height, Y.width
    n_layers = len({k.split(".")[0] for k in leaves if k.startswith("layer")})
    t = ng.matmul(E1, ng.const(Y.flat))
    shared = ng.conv2d(ng.reshape(t, (R, H, W)), leaves["U1"])
    gamma, _ = _unrolled(shared, leaves, n_layers, ng.conv2d, ng.shift_relu,
                         ("E2", "U2", "U3", "v1", "v2", "v3"), axis=0)
    if gamma is None:
        gamma = ng.const(np.zeros(shared.shape))
    logits = ng.conv2d(gamma, leaves["U_out"])
    return ng.reshape(ng.softmax(logits, axis=0), (R, H * W))


def uedip_codes(Y, params: UedipParams, init=None) -> tuple[np.ndarray, np.ndarray]:
    """Sparse code and dual ``(gamma, u)`` after the last layer, before the output map."""
    gamma, u = uedip_graph(Y, {k: ng.const(v) for k, v in params.arrays.items()},
                           init=init, codes_only=True)
    return gamma.data.copy(), u.data.copy()


def uedip_forward(Y, params: UedipParams) -> EndmemberMatrix:
    E = uedip_graph(Y, {k: ng.const(v) for k, v in params.arrays.items()})
    return EndmemberMatrix(E.data)


def uadip_forward(Y: HsiCube, params: UadipParams) -> AbundanceMatrix:
    A = uadip_graph(Y, {k: ng.const(v) for k, v in params.arrays.items()})
    return AbundanceMatrix(A.data)


@dataclass(frozen=True)
class NbaOutputs:
    E_hat: EndmemberMatrix
    A_hat: AbundanceMatrix
    Y_hat: HsiCube


def nba_graph(Y: HsiCube, theta_E: UedipParams, theta_A: UadipParams):
    """Differentiable NBA forward pass.

    Returns ``(E_hat, A_hat, Y_hat, leaves)`` where ``leaves`` maps
    ``"uedip/<name>"`` and ``"uadip/<name>"`` to the parameter nodes.
    """
    le, la = theta_E.leaves(), theta_A.leaves()
    if le["A1"].shape[0] != la["E1"].shape[0]:
        raise ng.GraphError(
            f"endmember network uses R={le['A1'].shape[0]}, abundance network R={la['E1'].shape[0]}")
    E = uedip_graph(Y, le)
    A = uadip_graph(Y, la)
    Yhat = ng.matmul(E, A)
    leaves = {f"uedip/{k}": v for k, v in le.items()}
    leaves.update({f"uadip/{k}": v for k, v in la.items()})
    return E, A, Yhat, leaves


def nba_forward(Y: HsiCube, theta_E: UedipParams, theta_A: UadipParams) -> NbaOutputs:
    E, A, Yhat, _ = nba_graph(Y, theta_E, theta_A)
    return NbaOutputs(EndmemberMatrix(E.data), AbundanceMatrix(A.data),
                      HsiCube.from_flat(Yhat.data, Y.height, Y.width))


def param_count(theta_E: UedipParams | None = None, theta_A: UadipParams | None = None) -> int:
    """Number of scalar learnable parameters."""
    return sum(p.count() for p in (theta_E, theta_A) if p is not None)
