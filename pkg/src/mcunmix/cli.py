"""Command-line interface: ``mcunmix {synth,run,sweep,eval}``.

Exit codes: 0 success, 1 run error, 2 configuration or usage error.
Set ``MCUNMIX_VERBOSITY`` to 0 (warnings only, default), 1 (info) or
2 (debug).
"""

from __future__ import annotations

import argparse
import itertools
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, ExperimentConfig
from .metrics import evaluate
from .pipeline import (MODES, DataBundle, guidance_for, load_data, report_row, run_mode,
                       synth_data, write_run, write_synth)

__all__ = ["main", "build_parser", "cmd_synth", "cmd_run", "cmd_sweep", "cmd_eval"]

log = logging.getLogger("mcunmix")

VERBOSITY_ENV = "MCUNMIX_VERBOSITY"
EXIT_OK, EXIT_RUN, EXIT_CONFIG = 0, 1, 2
SWEEP_METRICS = ("RMSE", "AAD", "SAD_mean")


def _setup_logging() -> None:
    raw = os.environ.get(VERBOSITY_ENV, "0")
    try:
        level = {0: logging.WARNING, 1: logging.INFO}.get(int(raw), logging.DEBUG)
    except ValueError:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _config(path) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def cmd_synth(cfg: ExperimentConfig, out_dir) -> None:
    data = write_synth(out_dir, cfg)
    log.info("wrote %dx%dx%d cube to %s", data.Y.bands, data.Y.height, data.Y.width, out_dir)


def cmd_run(cfg: ExperimentConfig, mode: str, data_dir, out_dir):
    data = load_data(cfg, data_dir)
    R = data.E_gt.shape[1] if data.E_gt is not None else cfg.data.R
    g = guidance_for(data.Y, R, data_dir)
    out = run_mode(cfg, mode, data, g)
    write_run(out_dir, out, cfg, data.snr_db)
    return out


def _sweep_cells(axis: str, values: list[float]):
    if axis == "snr":
        return [({"SNR": v}, {"data.snr_db": v}) for v in values]
    return [({"alpha1": a1, "alpha2": a2}, {"loss.alpha1": a1, "loss.alpha2": a2})
            for a1, a2 in itertools.product(values, values)]


def cmd_sweep(cfg: ExperimentConfig, axis: str, values: list[float], seeds: list[int],
              out_dir, mode: str = "nba") -> list[dict]:
    """Run every (value, seed) cell; failures are recorded and the sweep goes on.

    Writes ``sweep_cells.csv`` (one row per cell) and ``sweep_summary.csv``
    (mean and standard deviation over seeds for each value).
    """
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis not in ("snr", "alpha"):
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if cfg.data.cube_path:
        raise ConfigError("sweeps generate synthetic data; cube_path must be empty")
    out = Path(out_dir)
    cells, keys = [], []
    for i, (label, change) in enumerate(_sweep_cells(axis, values)):
        keys.append(label)
        for seed in seeds:
            row = {**label, "seed": seed, "status": "ok", "error": ""}
            try:
                c = cfg.replace(seed=seed, **change)
                data = synth_data(c)
                bundle = DataBundle(data.Y, data.E.E, data.A.A, c.data.snr_db)
                res = run_mode(c, mode, bundle)
                write_run(out / f"cell{i:03d}_seed{seed}", res, c, c.data.snr_db)
                row.update(res.report.row())
                row["guidance_RMSE"] = res.guidance_report.rmse
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
                log.error("cell %s seed %d failed: %s", label, seed, exc)
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            cells.append(row)
    label_fields = list(keys[0])
    fields = label_fields + ["seed", "status", "RMSE", "AAD", "SAD_mean", "guidance_RMSE", "error"]
    io.write_csv(out / "sweep_cells.csv", cells, fields)
    summary = []
    for label in keys:
        ok = [c for c in cells if all(c[k] == v for k, v in label.items()) and c["status"] == "ok"]
        row = {**label, "n_ok": len(ok)}
        for m in SWEEP_METRICS:
            vals = np.array([c[m] for c in ok], dtype=float)
            row[f"{m}_mean"] = float(vals.mean()) if vals.size else math.nan
            row[f"{m}_std"] = float(vals.std()) if vals.size else math.nan
        summary.append(row)
    io.write_csv(out / "sweep_summary.csv", summary)
    return cells


def cmd_eval(est_dir, gt_dir, out_path=None, method: str = "estimate"):
    est, gt = Path(est_dir), Path(gt_dir)
    E_hat, A_hat = io.read_matrix(est / "E_hat.hmat"), io.read_matrix(est / "A_hat.hmat")
    E_gt, A_gt = io.read_matrix(gt / "E_gt.hmat"), io.read_matrix(gt / "A_gt.hmat")
    if E_hat.shape != E_gt.shape or A_hat.shape != A_gt.shape:
        raise ValueError(f"estimate shapes {E_hat.shape}, {A_hat.shape} do not match "
                         f"ground truth {E_gt.shape}, {A_gt.shape}")
    rep = evaluate(E_gt, A_gt, E_hat, A_hat)
    io.write_csv(out_path or est / "eval.csv", [report_row(method, -1, math.nan, rep)])
    return rep


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcunmix", description="MatrixConv unmixing experiments")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    r = sub.add_parser("run", help="unmix a cube")
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=MODES, default="nba")
    r.add_argument("--data", help="directory written by 'synth' (default: use the config)")
    r.add_argument("--out", required=True)

    w = sub.add_parser("sweep", help="run a grid of experiments")
    w.add_argument("--config")
    w.add_argument("--axis", choices=("snr", "alpha"), required=True)
    w.add_argument("--values", required=True, help="comma or space separated; 'inf' allowed")
    w.add_argument("--seeds", default="0", help="comma or space separated seeds")
    w.add_argument("--mode", choices=MODES, default="nba")
    w.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score estimates against ground truth")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out")
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "eval":
            rep = cmd_eval(args.est, args.gt, args.out)
            print(f"RMSE {rep.rmse:.6g}  AAD {rep.aad:.6g}  SAD {rep.sad_mean:.6g}")
            return EXIT_OK
        cfg = _config(args.config)
        if getattr(args, "seed", None) is not None:
            cfg = cfg.replace(seed=args.seed)
        if args.command == "synth":
            cmd_synth(cfg, args.out)
        elif args.command == "run":
            out = cmd_run(cfg, args.mode, args.data, args.out)
            if out.report is not None:
                print(f"{args.mode}: RMSE {out.report.rmse:.6g}  AAD {out.report.aad:.6g}  "
                      f"SAD {out.report.sad_mean:.6g}")
        else:
            try:
                values = _floats(args.values)
                seeds = [int(v) for v in args.seeds.replace(",", " ").split()]
            except ValueError as exc:
                raise ConfigError(f"bad sweep values: {exc}") from exc
            cells = cmd_sweep(cfg, args.axis, values, seeds, args.out, args.mode)
            failed = sum(c["status"] != "ok" for c in cells)
            print(f"{len(cells)} cells, {failed} failed")
            return EXIT_RUN if failed else EXIT_OK
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a run error
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
