"""Numeric checks of the recovery theory: Hessian blocks of the two
least-squares objectives, their spectra, and the recovery-precision bound.

For masks drawn uniformly over all C(N, K) index vectors the expected Hessian
of the step-1 objective is block diagonal with identical N x N blocks
``H11``: diagonal 2K/N, off-diagonal 2K(K-1)/(N(N-1)).  For 1 < K < N the
block equals ``2K(K-1)/(N(N-1))`` times a matrix with diagonal (N-1)/(K-1)
and unit off-diagonals, whose eigenvalues are (N-1)/(K-1) - 1 with
multiplicity N-1 and (N-1)/(K-1) + N - 1.  The step-2 block is the Hadamard
product ``H11 (.) V V^T``, positive definite whenever V has full row rank
(Schur product theorem).

The claimed closed form for the expected step-1 objective,
``F1(V) = (K/N) ||V - V*||_F^2``, drops the off-diagonal mask correlation:
the exact expectation is

    F1(V) = (K/N - b) ||E||_F^2 + b ||column sums of E||^2,
    b = K(K-1)/(N(N-1)),  E = V - V*,

which reduces to the claimed form only for K = 1 or when the error's
column-sum norm happens to equal its Frobenius norm (e.g. a single nonzero
row).  ``f1_exact_identity_check`` reports the residual versus the claimed
form (enumerating every mask); ``f1_expectation_exact`` gives the corrected
value.  Both are exercised in the tests.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .protocol import enumerate_masks, sample_batch_mask


@dataclass
class HessianBlock:
    matrix: np.ndarray
    provenance: str            # "h11" | "g11"
    n: int
    k: int
    hypothesis_ok: bool = None

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.matrix)[0])


@dataclass
class BoundInputs:
    lambda_theta: float        # bound on ||grad_Theta1 L(D)||_F^2
    lambda_v: float            # bound on ||V^-1||_F^2
    lambda_star: float         # bound on ||(V*)^-1||_F^2
    phi1: float
    phi2: float

    def __post_init__(self):
        for name in ("lambda_theta", "lambda_v", "lambda_star", "phi1", "phi2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


def build_h11(n, k):
    """Exact expected Hessian block of the step-1 objective."""
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= K <= N, got K={k}, N={n}")
    diag = 2.0 * k / n
    off = 2.0 * k * (k - 1) / (n * (n - 1)) if n > 1 else diag
    mat = np.full((n, n), off)
    np.fill_diagonal(mat, diag)
    return HessianBlock(mat, "h11", n, k)


def h11_analytic_spectrum(n, k):
    """Eigenvalues of H11, ascending: the bracketed-matrix spectrum
    {(N-1)/(K-1) - 1 (x N-1), (N-1)/(K-1) + N - 1} times the prefactor
    2K(K-1)/(N(N-1)).  K = 1 gives (2K/N) I; K = N gives a rank-one block."""
    if k == 1:
        return np.full(n, 2.0 / n)
    pref = 2.0 * k * (k - 1) / (n * (n - 1))
    bulk = (n - 1) / (k - 1) - 1.0
    top = (n - 1) / (k - 1) + n - 1.0
    return np.array([pref * bulk] * (n - 1) + [pref * top])


def h11_eigvals(n, k):
    """(analytic spectrum, numeric spectrum), both ascending."""
    block = build_h11(n, k)
    numeric = np.linalg.eigvalsh(block.matrix)
    return np.sort(h11_analytic_spectrum(n, k)), numeric


def mc_h11_entries(n, k, draws, rng):
    """Monte-Carlo estimate of 2 E[s_p s_r] with standard errors."""
    acc = np.zeros((n, n))
    acc2 = np.zeros((n, n))
    for _ in range(draws):
        s = sample_batch_mask(n, k, rng).bits.astype(float)
        prod = np.outer(s, s)
        acc += prod
        acc2 += prod * prod
    mean = acc / draws
    var = acc2 / draws - mean ** 2
    se = np.sqrt(np.maximum(var, 0.0) / draws)
    return 2.0 * mean, 2.0 * se


def build_g11(v, n, k):
    """Expected step-2 Hessian block: H11 Hadamard V V^T, with the
    full-row-rank hypothesis flag."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != n:
        raise ConfigError(f"V has {v.shape[0]} rows, expected N={n}")
    h11 = build_h11(n, k)
    mat = h11.matrix * (v @ v.T)
    ok = v.shape[1] > n and np.linalg.matrix_rank(v) == n
    return HessianBlock(mat, "g11", n, k, hypothesis_ok=bool(ok))


def recovery_bound(inputs, n, k):
    """Right-hand side of the representation-recovery precision bound."""
    if k < 1:
        raise ConfigError("K must be >= 1")
    return 2.0 * (n / k) * (inputs.lambda_theta * inputs.lambda_v
                            * inputs.lambda_star * inputs.phi1
                            + inputs.lambda_v * inputs.phi2)


def f1_mean_over_masks(v, v_star, k, cap=10 ** 6):
    e = np.asarray(v) - np.asarray(v_star)
    n = e.shape[0]
    masks = enumerate_masks(n, k, cap)
    total = 0.0
    for mask in masks:
        r = e.T @ mask.bits
        total += float(r @ r)
    return total / len(masks)


def f1_expectation_exact(v, v_star, n, k):
    """Exact closed form of the expected step-1 objective."""
    e = np.asarray(v) - np.asarray(v_star)
    b = k * (k - 1) / (n * (n - 1)) if n > 1 else 0.0
    col = e.sum(axis=0)
    return (k / n - b) * float((e * e).sum()) + b * float(col @ col)


def f1_exact_identity_check(v, v_star, n, k, cap=10 ** 6):
    """Residual between the enumerated mean of the step-1 objective and the
    claimed closed form (K/N) ||V - V*||_F^2.

    The claim holds only in the special cases noted in the module docstring;
    the corrected form is :func:`f1_expectation_exact`.
    """
    if not 1 <= k < n:
        raise ConfigError(f"need 1 <= K < N, got K={k}, N={n}")
    e = np.asarray(v) - np.asarray(v_star)
    mean = f1_mean_over_masks(v, v_star, k, cap)
    claimed = (k / n) * float((e * e).sum())
    return abs(mean - claimed)


def theory_grid(n_max=12, rng=None):
    """Rows (N, K, min eig H11, min eig G11, corrected-identity residual)
    for every 1 < K <= N <= n_max; G11 uses a seeded random full-rank V with
    d2 = N + 2."""
    rng = np.random.default_rng(0) if rng is None else rng
    rows = []
    for n in range(2, n_max + 1):
        for k in range(2, n + 1):
            h11 = build_h11(n, k)
            v = rng.normal(size=(n, n + 2))
            g11 = build_g11(v, n, k)
            v_star = rng.normal(size=(n, 3))
            v_try = v_star + rng.normal(size=v_star.shape)
            residual = abs(f1_mean_over_masks(v_try, v_star, k)
                           - f1_expectation_exact(v_try, v_star, n, k))
            rows.append((n, k, h11.min_eigenvalue(), g11.min_eigenvalue(),
                         residual))
    return rows
