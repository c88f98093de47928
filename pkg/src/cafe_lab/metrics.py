"""Recovery quality metrics: MSE, PSNR, permutation matching.

PSNR uses a peak value of 1.0 for internal data and substitutes 100 dB when
the error is exactly zero, so tables stay finite.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

PSNR_CAP_DB = 100.0


@dataclass
class RecoveryMetrics:
    psnr_db: float
    mse: float
    per_image: list = field(default_factory=list)


def _psnr_from_mse(mse, max_val):
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(max_val * max_val / mse))


def psnr(real, fake, max_val=1.0):
    real = np.asarray(real, dtype=float)
    fake = np.asarray(fake, dtype=float)
    if real.shape != fake.shape:
        raise ShapeError(f"shape mismatch {real.shape} vs {fake.shape}")
    if max_val <= 0:
        raise ShapeError("max_val must be positive")
    err = (real - fake) ** 2
    mse = float(err.mean())
    per = [_psnr_from_mse(float(err[n].mean()), max_val)
           for n in range(real.shape[0])]
    return RecoveryMetrics(_psnr_from_mse(mse, max_val), mse, per)


def match_best_permutation(real, fake, max_val=1.0):
    """Greedy nearest-MSE assignment without replacement.

    Useful for attacks that recover images in arbitrary order; returns
    ``(perm, metrics)`` where ``fake[perm[i]]`` is scored against
    ``real[i]``.  Greedy, not optimal, by design.
    """
    real = np.asarray(real, dtype=float)
    fake = np.asarray(fake, dtype=float)
    if real.shape != fake.shape:
        raise ShapeError(f"shape mismatch {real.shape} vs {fake.shape}")
    n = real.shape[0]
    rf = real.reshape(n, -1)
    ff = fake.reshape(n, -1)
    cost = ((rf[:, None, :] - ff[None, :, :]) ** 2).mean(axis=2)
    perm = np.full(n, -1)
    open_cost = cost.copy()
    for _ in range(n):
        i, j = np.unravel_index(np.argmin(open_cost), open_cost.shape)
        perm[i] = j
        open_cost[i, :] = np.inf
        open_cost[:, j] = np.inf
    return perm, psnr(real, fake[perm], max_val)
