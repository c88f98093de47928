"""CSV and manifest output with deterministic formatting.

Floats are written with ``repr``-shortest formatting so a rerun with the same
seed produces byte-identical files; empty cells stand for not-applicable.
"""

import csv
import json
import platform

import numpy as np

from . import __version__

ROUND_LOG_HEADER = ("round", "loss", "grad_norm", "seed")
TRACE_HEADER = ("iter", "phase", "f1", "f2", "f3_grad", "f3_tv", "f3_rep", "psnr")
METRICS_HEADER = ("run_id", "method", "psnr", "mse")
AUDIT_HEADER = ("round", "tensor_id", "true_norm", "fake_norm", "l2_gap",
                "regenerations")
THEORY_HEADER = ("N", "K", "min_eig_h11", "min_eig_g11", "bound_residual")


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def write_round_log(path, log):
    write_csv(path, ROUND_LOG_HEADER,
              [(r.round, r.loss, r.grad_norm, r.seed) for r in log])


def write_trace(path, trace):
    write_csv(path, TRACE_HEADER,
              [(r.iteration, r.phase, r.f1, r.f2, r.f3_grad, r.f3_tv, r.f3_rep,
                r.psnr) for r in trace])


def write_metrics(path, rows):
    write_csv(path, METRICS_HEADER, rows)


def write_audit(path, rows):
    write_csv(path, AUDIT_HEADER,
              [(r.round, r.tensor_id, r.true_norm, r.fake_norm, r.l2_gap,
                r.regenerations) for r in rows])


def write_theory(path, rows):
    write_csv(path, THEORY_HEADER, rows)


def write_manifest(path, config):
    from .kernels import ACTIVE_BACKEND
    try:
        import numba
        numba_version = numba.__version__
    except ImportError:
        numba_version = "unavailable"
    manifest = {
        "config_hash": config.config_hash(),
        "run_id": config.run_id(),
        "seed": config.seed,
        "versions": {
            "cafe_lab": __version__,
            "numpy": np.__version__,
            "numba": numba_version,
            "python": platform.python_version(),
        },
        "kernel_backend": ACTIVE_BACKEND,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
