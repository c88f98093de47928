"""Three-step batch-data recovery from aggregated VFL gradients.

Step 1 recovers the per-sample gradients of the loss w.r.t. the first FC
outputs (an N x d2 matrix ``V``) from the observed bias gradients: each round
the bias gradient equals ``V*^T s`` for the round's index vector ``s``, so
``V`` is fit by SGD on ``||V^T s - grad_b1||^2``.  Step 2 recovers the
internal representations ``H`` from the first FC weight gradients, which are
``sum_n s[n] h_n v_n^T``.  Step 3 recovers the raw inputs by matching full
parameter gradients, regularized by a truncated total-variation norm and by
distance to the recovered representations.

Scaling convention: row n of the ground truth ``V*`` is ``(1/K) dL_n/du_n``,
so ``V*^T s`` reproduces the observed bias gradient exactly for every mask of
popcount K (and ``V* = (N/K)`` times the full-dataset per-sample gradient
matrix that carries a 1/N normalization).  Both identities are asserted in
the tests.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (ConfigError, DegenerateRecoveryWarning,
                     HypothesisViolationWarning)
from .metrics import psnr
from .model import (LabeledBatch, backward_full, forward_representation,
                    gradmatch_input_grads, representation_input_grads,
                    softmax, softmax_vjp)


@dataclass
class AttackHyper:
    alpha: float = 1e-2
    beta: float = 1e-4
    gamma: float = 1e-3
    xi: float = 10.0            # TV truncation threshold
    lr1: float = 0.0            # 0 -> auto: 1/(2K)
    lr2: float = 0.0            # 0 -> auto from the spectrum of V
    lr3: float = 0.1
    iters: int = 5000           # per-phase budget (nested) / total (single loop)
    switch1: float = 1e-9
    switch2: float = 5e-9
    phase_cap: int = 0          # single loop: max rounds in phases 1-2 (0 -> iters//3)
    max_halvings: int = 20
    backtracking: bool = True

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.xi < 0:
            raise ConfigError("xi must be non-negative")
        if self.lr3 <= 0:
            raise ConfigError("lr3 must be positive")


@dataclass
class StopCriteria:
    phi1: float = 1e-10
    phi2: float = 1e-10

    def __post_init__(self):
        if self.phi1 <= 0 or self.phi2 <= 0:
            raise ConfigError("stopping thresholds must be positive")


@dataclass
class TraceRow:
    iteration: int
    phase: str
    f1: float = None
    f2: float = None
    f3_grad: float = None
    f3_tv: float = None
    f3_rep: float = None
    psnr: float = None


@dataclass
class AttackState:
    v: np.ndarray                    # (N, d2)
    h_hat: np.ndarray                # (N, d1)
    fake_data: np.ndarray            # (N, *sample shape), clamped to [0, 1]
    fake_label_logits: np.ndarray    # (N, C)
    trace: list = field(default_factory=list)
    rounds_used: int = 0
    rounds_to_target: int = None

    @property
    def fake_labels(self):
        return softmax(self.fake_label_logits)


def init_attack_state(n, d1, d2, sample_shape, n_classes, rng):
    """Everything i.i.d. uniform on [0, 1) from the run seed."""
    return AttackState(
        v=rng.random((n, d2)),
        h_hat=rng.random((n, d1)),
        fake_data=rng.random((n,) + tuple(sample_shape)),
        fake_label_logits=rng.random((n, n_classes)),
    )


# ---------------------------------------------------------------------------
# step 1

def step1_objective(v, mask, grad_b1):
    r = v.T @ mask.bits - grad_b1
    return float(r @ r)


def step1_update(v, mask, grad_b1, lr1):
    """One SGD step on the per-round objective; untouched rows stay bit
    identical because the objective's gradient vanishes off the mask."""
    if mask.k == mask.n:
        warnings.warn(
            "batch covers every sample (K = N): the per-row decomposition is "
            "not unique, only the row sum is determined",
            DegenerateRecoveryWarning, stacklevel=2)
    r = v.T @ mask.bits - grad_b1
    out = v.copy()
    sel = mask.indices()
    out[sel] -= lr1 * 2.0 * r
    return out


def auto_lr1(k):
    # exact per-round projection step for the quadratic in the selected rows
    return 1.0 / (2.0 * k)


# ---------------------------------------------------------------------------
# step 2

def step2_hypothesis_ok(v_star, n, d2, warn=True):
    ok = n < d2 and np.linalg.matrix_rank(v_star) == n
    if not ok and warn:
        warnings.warn(
            f"recovery guarantee hypothesis violated (need N < d2 and "
            f"rank(V) = N; got N={n}, d2={d2}, rank={np.linalg.matrix_rank(v_star)})",
            HypothesisViolationWarning, stacklevel=2)
    return ok


def step2_objective(h_hat, v_star, mask, grad_theta1):
    sel = mask.indices()
    r = h_hat[sel].T @ v_star[sel] - grad_theta1
    return float((r * r).sum())


def step2_update(h_hat, v_star, mask, grad_theta1, lr2):
    sel = mask.indices()
    r = h_hat[sel].T @ v_star[sel] - grad_theta1
    out = h_hat.copy()
    out[sel] -= lr2 * 2.0 * (r @ v_star[sel].T).T
    return out


def auto_lr2(v_star):
    smax = np.linalg.norm(v_star, 2)
    if smax == 0.0:
        return 1.0
    return 0.5 / (smax * smax)


# ---------------------------------------------------------------------------
# step 3

def tv_truncated(images, xi):
    """Anisotropic total variation of an image stack, reported as 0 while it
    stays below the threshold ``xi``."""
    val = kernels.tv_value(np.ascontiguousarray(images, dtype=float))
    return 0.0 if val < xi else val


@dataclass
class Step3Terms:
    total: float
    grad_term: float
    tv_term: float
    rep_term: float


def _matching_cotangents(alpha, real_grads):
    def fn(report):
        return {k: 2.0 * alpha * (report.params[k] - real_grads[k])
                for k in real_grads}
    return fn


def step3_objective(params, fake_data, fake_label_logits, h_hat_star, mask,
                    report, hyper):
    """Weighted sum of gradient-matching, truncated-TV and representation
    terms for the round's batch; each term reported separately."""
    sel = mask.indices()
    xb = fake_data[sel]
    yb = softmax(fake_label_logits[sel])
    fake_rep = backward_full(params, LabeledBatch(xb, yb))
    grad_term = hyper.alpha * sum(
        float(((fake_rep.params[k] - report.params[k]) ** 2).sum())
        for k in report.params)
    tv_term = hyper.beta * tv_truncated(xb, hyper.xi)
    h_tilde = forward_representation(params, xb)
    rep_term = hyper.gamma * float(((h_hat_star[sel] - h_tilde) ** 2).sum())
    return Step3Terms(grad_term + tv_term + rep_term, grad_term, tv_term, rep_term)


def step3_grads(params, fake_data, fake_label_logits, h_hat_star, mask,
                report, hyper):
    """Gradients of the step-3 objective w.r.t. the selected fake inputs and
    their label logits, plus the objective terms at the current point."""
    sel = mask.indices()
    xb = fake_data[sel]
    logits = fake_label_logits[sel]
    yb = softmax(logits)
    batch = LabeledBatch(xb, yb)
    if hyper.alpha > 0:
        dx, ybar, fake_rep = gradmatch_input_grads(
            params, batch, _matching_cotangents(hyper.alpha, report.params))
        dlogits = softmax_vjp(yb, ybar)
    else:
        fake_rep = backward_full(params, batch)
        dx = np.zeros_like(xb)
        dlogits = np.zeros_like(logits)
    grad_term = hyper.alpha * sum(
        float(((fake_rep.params[k] - report.params[k]) ** 2).sum())
        for k in report.params)
    tv_val = kernels.tv_value(np.ascontiguousarray(xb))
    if tv_val < hyper.xi:
        tv_term = 0.0
    else:
        tv_term = hyper.beta * tv_val
        if hyper.beta > 0:
            dx = dx + hyper.beta * kernels.tv_grad(np.ascontiguousarray(xb))
    h_tilde = forward_representation(params, xb)
    rep_term = hyper.gamma * float(((h_hat_star[sel] - h_tilde) ** 2).sum())
    if hyper.gamma > 0:
        hbar = 2.0 * hyper.gamma * (h_tilde - h_hat_star[sel])
        dx = dx + representation_input_grads(params, xb, hbar)
    terms = Step3Terms(grad_term + tv_term + rep_term, grad_term, tv_term, rep_term)
    return dx, dlogits, terms


def step3_apply(state, params, mask, report, hyper):
    """One descent step on the fake batch with optional backtracking halving;
    fake inputs are clamped to [0, 1] after the update.  Returns the
    objective terms at the accepted point's predecessor."""
    sel = mask.indices()
    dx, dlogits, terms = step3_grads(params, state.fake_data,
                                     state.fake_label_logits, state.h_hat,
                                     mask, report, hyper)
    lr = hyper.lr3
    for _ in range(hyper.max_halvings + 1):
        new_x = state.fake_data.copy()
        new_logits = state.fake_label_logits.copy()
        new_x[sel] = np.clip(new_x[sel] - lr * dx, 0.0, 1.0)
        new_logits[sel] -= lr * dlogits
        if not hyper.backtracking:
            state.fake_data, state.fake_label_logits = new_x, new_logits
            return terms
        after = step3_objective(params, new_x, new_logits, state.h_hat, mask,
                                report, hyper)
        if after.total <= terms.total:
            state.fake_data, state.fake_label_logits = new_x, new_logits
            return terms
        lr *= 0.5
    return terms  # no step size achieved descent this round; skip the update


# ---------------------------------------------------------------------------
# runners

def _resolved_lrs(hyper, k, v):
    lr1 = hyper.lr1 if hyper.lr1 > 0 else auto_lr1(k)
    lr2 = hyper.lr2 if hyper.lr2 > 0 else auto_lr2(v)
    return lr1, lr2


def _psnr_now(sim, state):
    return psnr(sim.dataset.images, np.clip(state.fake_data, 0.0, 1.0)).psnr_db


def run_nested(sim, hyper, stop, psnr_target=None):
    """Phase-sequential recovery: fit V for a full budget, then H, then the
    data.  ``stop`` thresholds allow a phase to end early once a sliding
    window of per-round objectives stays below phi1/phi2."""
    params = sim.params
    n, d2, d1 = sim.dataset.n, params.d2, params.d1
    rng = np.random.default_rng(sim.seed + 0x5EED)
    state = init_attack_state(n, d1, d2, sim.dataset.images.shape[1:],
                              params.n_classes, rng)
    window = max(8, min(64, 2 * n))
    it = 0

    recent = []
    for _ in range(hyper.iters):
        mask, report = sim.run_round()
        f1 = step1_objective(state.v, mask, report.params["fc1.bias"])
        lr1, _ = _resolved_lrs(hyper, mask.k, state.v)
        state.v = step1_update(state.v, mask, report.params["fc1.bias"], lr1)
        it += 1
        state.trace.append(TraceRow(it, "step1", f1=f1))
        recent.append(f1)
        if len(recent) >= window and max(recent[-window:]) < stop.phi1:
            break

    step2_hypothesis_ok(state.v, n, d2)
    recent = []
    for _ in range(hyper.iters):
        mask, report = sim.run_round()
        f2 = step2_objective(state.h_hat, state.v, mask, report.params["fc1.weight"])
        _, lr2 = _resolved_lrs(hyper, mask.k, state.v)
        state.h_hat = step2_update(state.h_hat, state.v, mask,
                                   report.params["fc1.weight"], lr2)
        it += 1
        state.trace.append(TraceRow(it, "step2", f2=f2))
        recent.append(f2)
        if len(recent) >= window and max(recent[-window:]) < stop.phi2:
            break

    for _ in range(hyper.iters):
        mask, report = sim.run_round()
        terms = step3_apply(state, sim.params, mask, report, hyper)
        it += 1
        score = _psnr_now(sim, state)
        state.trace.append(TraceRow(it, "step3", f3_grad=terms.grad_term,
                                    f3_tv=terms.tv_term, f3_rep=terms.rep_term,
                                    psnr=score))
        if psnr_target is not None and score >= psnr_target:
            state.rounds_to_target = it
            break
    state.rounds_used = it
    return state


def run_single_loop(sim, hyper, stop, psnr_target=None):
    """Interleaved recovery: every round refines V, then (once the step-1
    round objective has dropped below ``switch1``) also refines H, then (once
    the step-2 round objective has dropped below ``switch2``) also updates
    the fake data.  The gates are latched; a phase cap opens them anyway so a
    drifting model cannot stall the early steps forever."""
    params = sim.params
    n, d2, d1 = sim.dataset.n, params.d2, params.d1
    rng = np.random.default_rng(sim.seed + 0x5EED)
    state = init_attack_state(n, d1, d2, sim.dataset.images.shape[1:],
                              params.n_classes, rng)
    cap = hyper.phase_cap if hyper.phase_cap > 0 else max(1, hyper.iters // 3)
    gate2 = False
    gate3 = False
    waited = 0
    warned = False
    for it in range(1, hyper.iters + 1):
        mask, report = sim.run_round()
        lr1, lr2 = _resolved_lrs(hyper, mask.k, state.v)
        f1 = step1_objective(state.v, mask, report.params["fc1.bias"])
        state.v = step1_update(state.v, mask, report.params["fc1.bias"], lr1)
        row = TraceRow(it, "step1", f1=f1)
        if not gate2:
            waited += 1
            if f1 < hyper.switch1 or waited >= cap:
                gate2, waited = True, 0
        if gate2:
            if not warned:
                step2_hypothesis_ok(state.v, n, d2)
                warned = True
            f2 = step2_objective(state.h_hat, state.v, mask,
                                 report.params["fc1.weight"])
            state.h_hat = step2_update(state.h_hat, state.v, mask,
                                       report.params["fc1.weight"], lr2)
            row.phase, row.f2 = "step2", f2
            if not gate3:
                waited += 1
                if f2 < hyper.switch2 or waited >= cap:
                    gate3 = True
        if gate3:
            terms = step3_apply(state, sim.params, mask, report, hyper)
            score = _psnr_now(sim, state)
            row.phase = "step3"
            row.f3_grad, row.f3_tv, row.f3_rep = (terms.grad_term,
                                                  terms.tv_term, terms.rep_term)
            row.psnr = score
            state.trace.append(row)
            state.rounds_used = it
            if psnr_target is not None and score >= psnr_target:
                state.rounds_to_target = it
                return state
            continue
        state.trace.append(row)
        state.rounds_used = it
    return state
