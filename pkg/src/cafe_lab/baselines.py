"""Comparison attacks: gradient matching without the staged recovery.

Each baseline swaps the data-recovery objective while keeping the same
index-aligned optimization loop as the staged attack's final step:

* ``dlg``    — squared L2 distance between fake and real gradients;
* ``cosine`` — one minus cosine similarity over the flattened gradient
  concatenation, plus a plain TV penalty on the fake images;
* ``sapag``  — per-tensor Gaussian-kernel distance.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .attack import TraceRow, init_attack_state, _psnr_now
from .errors import ConfigError, ShapeError
from .model import (LabeledBatch, backward_full, gradmatch_input_grads,
                    softmax, softmax_vjp)


@dataclass
class BaselineKind:
    name: str                     # dlg | cosine | sapag
    beta_tv: float = 1e-4         # cosine only
    kernel_width: float = 0.0     # sapag; 0 -> per-round median heuristic

    def __post_init__(self):
        if self.name not in ("dlg", "cosine", "sapag"):
            raise ConfigError(f"unknown baseline {self.name!r}")
        if self.name == "sapag" and self.kernel_width < 0:
            raise ConfigError("kernel width must be positive")


def _check_keys(fake_grads, real_grads):
    if set(fake_grads) != set(real_grads):
        raise ShapeError("fake and real gradient reports disagree on keys")


def dlg_objective(fake_grads, real_grads):
    _check_keys(fake_grads, real_grads)
    return sum(float(((fake_grads[k] - real_grads[k]) ** 2).sum())
               for k in real_grads)


def cosine_objective(fake_grads, real_grads, fake_images, beta_tv):
    _check_keys(fake_grads, real_grads)
    flat_r = np.concatenate([real_grads[k].ravel() for k in sorted(real_grads)])
    flat_f = np.concatenate([fake_grads[k].ravel() for k in sorted(fake_grads)])
    nr = np.linalg.norm(flat_r)
    nf = np.linalg.norm(flat_f)
    if nr == 0.0:
        raise ShapeError("real gradient vector is zero")
    cos_part = 1.0 if nf == 0.0 else 1.0 - float(flat_r @ flat_f) / (nr * nf)
    tv = kernels.tv_value(np.ascontiguousarray(fake_images, dtype=float))
    return cos_part + beta_tv * tv


def sapag_objective(fake_grads, real_grads, kernel_width):
    _check_keys(fake_grads, real_grads)
    if kernel_width <= 0:
        raise ConfigError("kernel width must be positive")
    total = 0.0
    for k in real_grads:
        d2 = float(((fake_grads[k] - real_grads[k]) ** 2).sum())
        total += 1.0 - np.exp(-d2 / kernel_width)
    return float(total)


def median_kernel_width(real_grads):
    norms = [float((g ** 2).sum()) for g in real_grads.values()]
    width = float(np.median(norms))
    return width if width > 0 else 1.0


# cotangent factories: d(objective)/d(fake gradient) per tensor

def _dlg_cotangents(real_grads):
    def fn(report):
        return {k: 2.0 * (report.params[k] - real_grads[k]) for k in real_grads}
    return fn


def _cosine_cotangents(real_grads):
    keys = sorted(real_grads)
    flat_r = np.concatenate([real_grads[k].ravel() for k in keys])
    nr = np.linalg.norm(flat_r)

    def fn(report):
        flat_f = np.concatenate([report.params[k].ravel() for k in keys])
        nf = np.linalg.norm(flat_f)
        if nf == 0.0 or nr == 0.0:
            flat = np.zeros_like(flat_f)
        else:
            cos = float(flat_r @ flat_f) / (nr * nf)
            flat = cos * flat_f / (nf * nf) - flat_r / (nr * nf)
        out = {}
        at = 0
        for k in keys:
            size = real_grads[k].size
            out[k] = flat[at:at + size].reshape(real_grads[k].shape)
            at += size
        return out
    return fn


def _sapag_cotangents(real_grads, width):
    def fn(report):
        out = {}
        for k in real_grads:
            delta = report.params[k] - real_grads[k]
            d2 = float((delta ** 2).sum())
            out[k] = np.exp(-d2 / width) * (2.0 / width) * delta
        return out
    return fn


def baseline_objective(kind, fake_grads, real_grads, fake_images):
    if kind.name == "dlg":
        return dlg_objective(fake_grads, real_grads)
    if kind.name == "cosine":
        return cosine_objective(fake_grads, real_grads, fake_images, kind.beta_tv)
    width = kind.kernel_width if kind.kernel_width > 0 \
        else median_kernel_width(real_grads)
    return sapag_objective(fake_grads, real_grads, width)


def run_baseline(sim, kind, hyper, psnr_target=None):
    """Index-aligned gradient-matching loop over the configured objective."""
    params = sim.params
    n = sim.dataset.n
    rng = np.random.default_rng(sim.seed + 0x5EED)
    state = init_attack_state(n, params.d1, params.d2,
                              sim.dataset.images.shape[1:], params.n_classes, rng)
    for it in range(1, hyper.iters + 1):
        mask, report = sim.run_round()
        sel = mask.indices()
        xb = state.fake_data[sel]
        logits = state.fake_label_logits[sel]
        yb = softmax(logits)
        batch = LabeledBatch(xb, yb)
        if kind.name == "dlg":
            cot = _dlg_cotangents(report.params)
        elif kind.name == "cosine":
            cot = _cosine_cotangents(report.params)
        else:
            width = kind.kernel_width if kind.kernel_width > 0 \
                else median_kernel_width(report.params)
            cot = _sapag_cotangents(report.params, width)
        dx, ybar, fake_rep = gradmatch_input_grads(params, batch, cot)
        dlogits = softmax_vjp(yb, ybar)
        if kind.name == "cosine" and kind.beta_tv > 0:
            dx = dx + kind.beta_tv * kernels.tv_grad(np.ascontiguousarray(xb))
        obj = baseline_objective(kind, fake_rep.params, report.params, xb)
        lr = hyper.lr3
        accepted = False
        for _ in range(hyper.max_halvings + 1):
            new_x = state.fake_data.copy()
            new_logits = state.fake_label_logits.copy()
            new_x[sel] = np.clip(new_x[sel] - lr * dx, 0.0, 1.0)
            new_logits[sel] -= lr * dlogits
            if not hyper.backtracking:
                accepted = True
            else:
                fb = LabeledBatch(new_x[sel], softmax(new_logits[sel]))
                trial = backward_full(params, fb)
                after = baseline_objective(kind, trial.params, report.params,
                                           new_x[sel])
                accepted = after <= obj
            if accepted:
                state.fake_data, state.fake_label_logits = new_x, new_logits
                break
            lr *= 0.5
        score = _psnr_now(sim, state)
        state.trace.append(TraceRow(it, kind.name, f3_grad=obj, psnr=score))
        state.rounds_used = it
        if psnr_target is not None and score >= psnr_target:
            state.rounds_to_target = it
            break
    return state
