"""Gradient-upload defenses: sorted-Gaussian fake gradients and a DP baseline.

The fake-gradients defense draws a pool of Gaussian surrogate gradients, sorts
each one descending, finds the pool member nearest (concatenated L2) to the
true gradient rearranged by descending magnitude, and then clamps every true
entry to the magnitude of its rank-paired surrogate entry.  Large and small
entries therefore keep their positions and signs, but the fine structure an
inversion attack needs is destroyed.  Clamping uses the surrogate magnitude:
for non-negative surrogate entries this is exactly
``min(psi, max(g, -psi))``, and it keeps the clamp sign-preserving on the
negative tail of the sorted pool rows.

The DP baseline clips the report to a global L2 norm and adds Gaussian noise
with the standard mechanism scale ``clip * sqrt(2 ln(1.25/delta)) / eps``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RegenerationError


@dataclass
class DefenseConfig:
    nu: int = 32                 # pool size
    sigma2: float = 1.1          # surrogate entry variance
    tau: float = 100.0           # L2 acceptance threshold
    max_regenerations: int = 20

    def __post_init__(self):
        if self.nu < 1:
            raise ConfigError("pool size must be >= 1")
        if self.sigma2 <= 0:
            raise ConfigError("sigma2 must be positive")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")


@dataclass
class DPConfig:
    clip_norm: float = 3.0
    epsilon: float = 1.0
    delta: float = 1e-5

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ConfigError("clip norm must be positive")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


def gen_fake_pool(shape, nu, sigma2, rng):
    """nu surrogate gradients for one parameter tensor, each a flat row
    sorted in descending order; entries are i.i.d. N(0, sigma2) before the
    sort."""
    size = int(np.prod(shape))
    pool = rng.normal(0.0, np.sqrt(sigma2), size=(nu, size))
    pool[:] = -np.sort(-pool, axis=1)
    return pool


def _gen_pools(shapes, nu, sigma2, rng):
    return {key: gen_fake_pool(shape, nu, sigma2, rng)
            for key, shape in shapes.items()}


def fake_project(true_grads, pools, tau, config, rng):
    """Project a gradient report onto the nearest sorted surrogate.

    ``true_grads`` maps parameter id -> tensor; ``pools`` maps parameter
    id -> (nu, size) sorted rows.  The pool is regenerated while no member
    comes within ``tau`` of the magnitude-ordered true gradient; exceeding
    ``config.max_regenerations`` raises :class:`RegenerationError`.
    Returns ``(fake_grads, info)`` with per-tensor audit data.
    """
    keys = list(true_grads)
    flats = {k: true_grads[k].ravel() for k in keys}
    orders = {k: np.argsort(-np.abs(flats[k]), kind="stable") for k in keys}
    sorted_true = {k: flats[k][orders[k]] for k in keys}

    regenerations = 0
    while True:
        dist2 = np.zeros(next(iter(pools.values())).shape[0])
        for k in keys:
            dist2 += ((pools[k] - sorted_true[k][None, :]) ** 2).sum(axis=1)
        best = int(np.argmin(dist2))
        best_dist = float(np.sqrt(dist2[best]))
        if best_dist <= tau:
            break
        regenerations += 1
        if regenerations > config.max_regenerations:
            raise RegenerationError(
                f"no surrogate within tau={tau} after "
                f"{config.max_regenerations} pool regenerations "
                f"(nearest was {best_dist:.3g}); raise tau or sigma2")
        pools = _gen_pools({k: true_grads[k].shape for k in keys},
                           config.nu, config.sigma2, rng)

    fake = {}
    for k in keys:
        bound = np.abs(pools[k][best])
        clamped = np.minimum(bound, np.maximum(sorted_true[k], -bound))
        out = np.empty_like(flats[k])
        out[orders[k]] = clamped
        fake[k] = out.reshape(true_grads[k].shape)
    info = {"distance": best_dist, "regenerations": regenerations}
    return fake, info


def dp_perturb(true_grads, dp, rng):
    """Clip the concatenated gradient to ``clip_norm`` and add Gaussian noise
    scaled by the standard mechanism formula."""
    total = np.sqrt(sum(float((g ** 2).sum()) for g in true_grads.values()))
    scale = min(1.0, dp.clip_norm / total) if total > 0 else 1.0
    sigma = dp.clip_norm * np.sqrt(2.0 * np.log(1.25 / dp.delta)) / dp.epsilon
    return {k: g * scale + rng.normal(0.0, sigma, size=g.shape)
            for k, g in true_grads.items()}


@dataclass
class AuditRow:
    round: int
    tensor_id: str
    true_norm: float
    fake_norm: float
    l2_gap: float
    regenerations: int


class FakeGradients:
    """Per-round defense hook for :class:`cafe_lab.protocol.Simulation`."""

    def __init__(self, config, seed):
        self.config = config
        self.rng = np.random.default_rng(seed)

    def apply(self, report):
        shapes = {k: g.shape for k, g in report.params.items()}
        pools = _gen_pools(shapes, self.config.nu, self.config.sigma2, self.rng)
        fake, info = fake_project(report.params, pools, self.config.tau,
                                  self.config, self.rng)
        audit = [AuditRow(report.round_index, k,
                          float(np.linalg.norm(report.params[k])),
                          float(np.linalg.norm(fake[k])),
                          float(np.linalg.norm(fake[k] - report.params[k])),
                          info["regenerations"])
                 for k in report.params]
        report.params = fake
        report.du = None
        report.dx = None
        return report, audit


class GaussianDP:
    def __init__(self, config, seed):
        self.config = config
        self.rng = np.random.default_rng(seed)

    def apply(self, report):
        noisy = dp_perturb(report.params, self.config, self.rng)
        audit = [AuditRow(report.round_index, k,
                          float(np.linalg.norm(report.params[k])),
                          float(np.linalg.norm(noisy[k])),
                          float(np.linalg.norm(noisy[k] - report.params[k])), 0)
                 for k in report.params]
        report.params = noisy
        report.du = None
        report.dx = None
        return report, audit


def defended_round(sim, mask=None):
    """Run one round through the simulation's configured defense."""
    return sim.run_round(mask)
