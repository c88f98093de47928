import numpy as np
import pytest

from cafe_lab.attack import AttackHyper, step3_objective
from cafe_lab.baselines import (BaselineKind, cosine_objective, dlg_objective,
                                median_kernel_width, run_baseline,
                                sapag_objective)
from cafe_lab.errors import ConfigError, ShapeError
from cafe_lab.model import LabeledBatch, backward_full
from cafe_lab.protocol import sample_batch_mask

from conftest import make_desk_sim

rng = np.random.default_rng(0)


def random_report(seed=0):
    gen = np.random.default_rng(seed)
    return {"a.weight": gen.normal(size=(3, 2)), "b.bias": gen.normal(size=4)}


def test_dlg_identity_and_zero():
    real = random_report()
    assert dlg_objective(real, real) == 0.0
    zeros = {k: np.zeros_like(v) for k, v in real.items()}
    expected = sum(float((v ** 2).sum()) for v in real.values())
    assert dlg_objective(zeros, real) == pytest.approx(expected)


def test_dlg_hand_summed():
    real = random_report(1)
    fake = random_report(2)
    manual = sum(((fake[k] - real[k]) ** 2).sum() for k in real)
    assert dlg_objective(fake, real) == pytest.approx(float(manual))


def test_dlg_key_mismatch():
    real = random_report()
    fake = {"a.weight": real["a.weight"]}
    with pytest.raises(ShapeError):
        dlg_objective(fake, real)


def test_cosine_identity_antipodal_and_random():
    real = random_report(3)
    imgs = rng.random((2, 4, 4))
    from cafe_lab import kernels
    tv = kernels.tv_value(imgs)
    same = cosine_objective(real, real, imgs, 0.5)
    assert same == pytest.approx(0.5 * tv, rel=1e-12)
    anti = {k: -v for k, v in real.items()}
    assert cosine_objective(anti, real, imgs, 0.5) == pytest.approx(
        2.0 + 0.5 * tv, rel=1e-12)
    fake = random_report(4)
    fr = np.concatenate([real[k].ravel() for k in sorted(real)])
    ff = np.concatenate([fake[k].ravel() for k in sorted(fake)])
    manual = 1 - float(fr @ ff) / (np.linalg.norm(fr) * np.linalg.norm(ff))
    assert cosine_objective(fake, real, imgs, 0.0) == pytest.approx(manual)


def test_cosine_zero_fake_convention():
    real = random_report(5)
    zeros = {k: np.zeros_like(v) for k, v in real.items()}
    assert cosine_objective(zeros, real, np.zeros((1, 2, 2)), 0.0) == 1.0


def test_sapag_values():
    real = random_report(6)
    assert sapag_objective(real, real, 1.0) == 0.0
    # one tensor at squared distance w gives 1 - e^-1, the other at 0
    fake = {k: v.copy() for k, v in real.items()}
    fake["b.bias"] = real["b.bias"] + np.array([1.0, 0.0, 0.0, 0.0])
    assert sapag_objective(fake, real, 1.0) == pytest.approx(1 - np.exp(-1))


def test_sapag_width_sweep_monotone_to_zero():
    real = random_report(7)
    fake = random_report(8)
    widths = [0.5, 1.0, 4.0, 16.0, 64.0, 256.0]
    values = [sapag_objective(fake, real, w) for w in widths]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 0.1


def test_sapag_saturates_as_width_vanishes():
    real = random_report(9)
    fake = random_report(10)
    assert sapag_objective(fake, real, 1e-12) == pytest.approx(len(real))


def test_median_kernel_width():
    real = {"a": np.array([1.0, 0.0]), "b": np.array([2.0]), "c": np.array([3.0])}
    assert median_kernel_width(real) == pytest.approx(4.0)


def test_dlg_equals_staged_matching_term_at_unit_alpha():
    # the staged attack's first term with alpha = 1 is exactly the DLG
    # objective: assert the two code paths agree on random fake data
    sim = make_desk_sim(n=6, k=3, d2=16)
    mask = sim.sample_mask()
    sel = mask.indices()
    report = backward_full(sim.params,
                           LabeledBatch(sim.dataset.images[sel],
                                        sim.dataset.labels[sel]))
    gen = np.random.default_rng(3)
    fake = gen.random((6, 8, 8))
    logits = gen.normal(size=(6, 4))
    hyper = AttackHyper(alpha=1.0, beta=0.0, gamma=0.0, xi=0.0, lr3=1.0)
    h_star = np.zeros((6, sim.params.d1))
    terms = step3_objective(sim.params, fake, logits, h_star, mask, report,
                            hyper)
    from cafe_lab.model import softmax
    fake_rep = backward_full(sim.params,
                             LabeledBatch(fake[sel], softmax(logits[sel])))
    assert terms.total == pytest.approx(
        dlg_objective(fake_rep.params, report.params), rel=1e-12)


def test_baseline_kind_validation():
    with pytest.raises(ConfigError):
        BaselineKind("unknown")


def test_single_image_dlg_recovers():
    sim = make_desk_sim(n=1, k=1)
    hyper = AttackHyper(iters=1500, lr3=200.0)
    state = run_baseline(sim, BaselineKind("dlg"), hyper, psnr_target=25.0)
    best = max(r.psnr for r in state.trace if r.psnr is not None)
    assert best >= 25.0


@pytest.mark.parametrize("name", ["cosine", "sapag"])
def test_baseline_runners_make_progress(name):
    sim = make_desk_sim(n=4, k=2, d2=16)
    hyper = AttackHyper(iters=150, lr3=10.0)
    state = run_baseline(sim, BaselineKind(name), hyper)
    first = next(r.f3_grad for r in state.trace if r.f3_grad is not None)
    last = [r.f3_grad for r in state.trace if r.f3_grad is not None][-1]
    assert last <= first


def test_sapag_tiny_width_makes_no_progress():
    sim = make_desk_sim(n=4, k=2, d2=16)
    hyper = AttackHyper(iters=40, lr3=10.0, backtracking=False)
    state = run_baseline(sim, BaselineKind("sapag", kernel_width=1e-15), hyper)
    objs = [r.f3_grad for r in state.trace if r.f3_grad is not None]
    n_tensors = len(backward_full(
        sim.params, LabeledBatch(sim.dataset.images[:2],
                                 sim.dataset.labels[:2])).params)
    assert objs[0] == pytest.approx(n_tensors)
    assert objs[-1] == pytest.approx(n_tensors)
