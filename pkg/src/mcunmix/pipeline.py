"""End-to-end runs: data loading, guidance, the four unmixing modes and
writing their outputs.  The command-line interface is a thin layer over
these functions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .baselines import make_guidance
from .config import ExperimentConfig
from .hsi import AbundanceMatrix, EndmemberMatrix, Guidance, HsiCube, lmm_forward
from .metrics import MetricReport, evaluate
from .nets import UadipParams, UedipParams, param_count
from .red import OUTER_FIELDS, nbared_run
from .reference import ConvDictionary1D, ConvDictionary2D, admm_ae, admm_ee
from .seeding import substream
from .synth import SynthData, generate, measured_snr
from .training import TRACE_FIELDS, train_inner

__all__ = [
    "MODES",
    "DataBundle",
    "RunOutput",
    "load_data",
    "synth_data",
    "write_synth",
    "guidance_for",
    "init_params",
    "run_mode",
    "write_run",
    "report_row",
]

log = logging.getLogger(__name__)

MODES = ("nba", "nbared", "admm-ref", "baseline")


@dataclass
class DataBundle:
    Y: HsiCube
    E_gt: np.ndarray | None = None
    A_gt: np.ndarray | None = None
    snr_db: float = math.nan

    @property
    def has_gt(self) -> bool:
        return self.E_gt is not None and self.A_gt is not None


@dataclass
class RunOutput:
    mode: str
    E_hat: np.ndarray
    A_hat: np.ndarray
    Y_hat: HsiCube
    guidance: Guidance
    trace: list[dict] = field(default_factory=list)
    outer: list[dict] = field(default_factory=list)
    checkpoint: dict[str, np.ndarray] = field(default_factory=dict)
    n_params: int = 0
    report: MetricReport | None = None
    guidance_report: MetricReport | None = None


# ---------------------------------------------------------------- data

def synth_data(cfg: ExperimentConfig) -> SynthData:
    return generate(cfg.data.synth(cfg.seed))


def write_synth(out_dir, cfg: ExperimentConfig, data: SynthData | None = None) -> SynthData:
    """Generate (unless given) and write a synthetic scene plus its manifest."""
    data = data or synth_data(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_cube(out / "Y.hcub", data.Y)
    io.write_cube(out / "Y_clean.hcub", data.Y_clean)
    io.write_matrix(out / "E_gt.hmat", data.E.E)
    io.write_matrix(out / "A_gt.hmat", data.A.A)
    cfg.save(out / "config.ini")
    manifest = {
        "seed": cfg.seed,
        "config_hash": cfg.digest(),
        "snr_target_db": cfg.data.snr_db,
        "snr_measured_db": measured_snr(data.Y_clean, data.Y),
        "bands": data.Y.bands,
        "height": data.Y.height,
        "width": data.Y.width,
        "R": data.E.n_endmembers,
    }
    io.write_csv(out / "manifest.csv", [{"key": k, "value": v} for k, v in manifest.items()])
    return data


def load_data(cfg: ExperimentConfig, data_dir=None) -> DataBundle:
    """Cube and optional ground truth from ``data_dir``, ``cfg.data.cube_path``
    or, failing both, a freshly generated synthetic scene."""
    if data_dir is not None:
        d = Path(data_dir)
        Y = io.read_cube(d / "Y.hcub")
        E = io.read_matrix(d / "E_gt.hmat") if (d / "E_gt.hmat").exists() else None
        A = io.read_matrix(d / "A_gt.hmat") if (d / "A_gt.hmat").exists() else None
        snr = math.nan
        if (d / "Y_clean.hcub").exists():
            snr = measured_snr(io.read_cube(d / "Y_clean.hcub"), Y)
        return DataBundle(Y, E, A, snr)
    if cfg.data.cube_path:
        return DataBundle(io.read_cube(cfg.data.cube_path))
    s = synth_data(cfg)
    return DataBundle(s.Y, s.E.E, s.A.A, cfg.data.snr_db)


def guidance_for(Y: HsiCube, R: int, cache_dir=None) -> Guidance:
    """SiVM + FCLS guidance, cached as two matrix files when ``cache_dir`` is set."""
    if cache_dir is not None:
        d = Path(cache_dir)
        fe, fa = d / f"guidance_R{R}_E.hmat", d / f"guidance_R{R}_A.hmat"
        if fe.exists() and fa.exists():
            E, A = io.read_matrix(fe), io.read_matrix(fa)
            if E.shape == (Y.bands, R) and A.shape == (R, Y.n_pixels):
                return Guidance(EndmemberMatrix(E), AbundanceMatrix(A))
        g = make_guidance(Y, R)
        try:
            io.write_matrix(fe, g.E)
            io.write_matrix(fa, g.A)
        except OSError as exc:
            log.warning("could not cache guidance: %s", exc)
        return g
    return make_guidance(Y, R)


# ---------------------------------------------------------------- runs

def init_params(cfg: ExperimentConfig, R: int, P: int, N: int) -> tuple[UedipParams, UadipParams]:
    rng = substream(cfg.seed, "init")
    net = cfg.network
    thE = UedipParams.init(R, N, net.m_E, net.k_E, net.J_E, rng)
    thA = UadipParams.init(R, P, net.m_A, net.k_A, net.J_A, rng)
    return thE, thA


def _dictionary_1d(m, k, rng) -> ConvDictionary1D:
    if m == 1 and k == 1:
        return ConvDictionary1D.delta(1)
    ker = rng.normal(size=(m, k))
    ker[0] = 0.0
    ker[0, k // 2] = 1.0
    return ConvDictionary1D(ker / np.linalg.norm(ker, axis=1, keepdims=True))


def _dictionary_2d(m, k, rng) -> ConvDictionary2D:
    if m == 1 and k == 1:
        return ConvDictionary2D.delta(1)
    ker = rng.normal(size=(m, k, k))
    ker[0] = 0.0
    ker[0, k // 2, k // 2] = 1.0
    return ConvDictionary2D(ker / np.linalg.norm(ker.reshape(m, -1), axis=1)[:, None, None])


def _admm_reference(cfg: ExperimentConfig, Y: HsiCube, g: Guidance):
    """Endmembers from the ADMM endmember solver given ``A_G``, then
    abundances from the ADMM abundance solver given those endmembers.
    Abundance columns are rescaled to unit sum for scoring."""
    ref = cfg.reference
    rng = substream(cfg.seed, "init")
    _, E = admm_ee(Y, g.A, _dictionary_1d(ref.m_E, ref.k_E, rng), ref.lam, ref.rho, iters=ref.iters)
    _, A = admm_ae(Y, E, _dictionary_2d(ref.m_A, ref.k_A, rng), ref.lam, ref.rho, iters=ref.iters)
    A = np.maximum(A.A, 0.0)
    s = A.sum(axis=0, keepdims=True)
    A = np.where(s > 0, A / np.where(s > 0, s, 1.0), 1.0 / A.shape[0])
    return E.E, A


def run_mode(cfg: ExperimentConfig, mode: str, data: DataBundle,
             guidance: Guidance | None = None) -> RunOutput:
    """Run one unmixing pipeline and score it when ground truth is present."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    Y = data.Y
    R = data.E_gt.shape[1] if data.E_gt is not None else cfg.data.R
    g = guidance or make_guidance(Y, R)
    gt = (data.E_gt, data.A_gt) if data.has_gt else None
    out_kw: dict = {}
    if mode == "baseline":
        E, A = g.E, g.A
    elif mode == "admm-ref":
        E, A = _admm_reference(cfg, Y, g)
    else:
        thE, thA = init_params(cfg, R, Y.bands, Y.n_pixels)
        if mode == "nba":
            res = train_inner(Y, g, thE, thA, cfg.loss, cfg.training, gt=gt)
            outer = []
        else:
            red = cfg.red.build()
            epochs = cfg.training.epochs
            if red.n_inner and red.T * red.n_inner != epochs:
                log.info("nbared: T * n_inner = %d epochs (training.epochs=%d ignored)",
                         red.T * red.n_inner, epochs)
            r = nbared_run(Y, g, thE, thA, cfg.loss, cfg.training, red, gt=gt)
            res, outer = r.train, r.outer
        E, A = res.outputs.E_hat.E, res.outputs.A_hat.A
        ckpt = {f"uedip/{k}": v for k, v in res.theta_E.arrays.items()}
        ckpt.update({f"uadip/{k}": v for k, v in res.theta_A.arrays.items()})
        out_kw = dict(trace=res.trace, outer=outer, checkpoint=ckpt,
                      n_params=param_count(res.theta_E, res.theta_A))
    Yh = lmm_forward(E, A, Y.height, Y.width)
    out = RunOutput(mode, E, A, Yh, g, **out_kw)
    if gt is not None:
        out.report = evaluate(gt[0], gt[1], E, A)
        out.guidance_report = evaluate(gt[0], gt[1], g.E, g.A)
        log.info("%s: RMSE %.5f AAD %.4f SAD %.4f (guidance RMSE %.5f)", mode, out.report.rmse,
                 out.report.aad, out.report.sad_mean, out.guidance_report.rmse)
    return out


def report_row(method: str, seed: int, snr: float, rep: MetricReport) -> dict:
    return {"method": method, "seed": seed, "SNR": snr, **rep.row()}


def write_run(out_dir, out: RunOutput, cfg: ExperimentConfig, snr: float = math.nan) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    io.write_matrix(d / "E_hat.hmat", out.E_hat)
    io.write_matrix(d / "A_hat.hmat", out.A_hat)
    io.write_cube(d / "Y_hat.hcub", out.Y_hat)
    cfg.save(d / "config.ini")
    if out.trace:
        extra = [k for k in ("RMSE", "AAD", "SAD") if k in out.trace[0]]
        io.write_csv(d / "trace.csv", out.trace, list(TRACE_FIELDS) + extra)
    if out.outer:
        io.write_csv(d / "outer_trace.csv", out.outer, OUTER_FIELDS)
    if out.checkpoint:
        io.write_checkpoint(d / "checkpoint.ckpt", out.checkpoint)
    info = {"mode": out.mode, "seed": cfg.seed, "config_hash": cfg.digest(), "param_count": out.n_params}
    io.write_csv(d / "run.csv", [{"key": k, "value": v} for k, v in info.items()])
    if out.report is not None:
        rows = [report_row(out.mode, cfg.seed, snr, out.report),
                report_row("guidance", cfg.seed, snr, out.guidance_report)]
        io.write_csv(d / "report.csv", rows)
