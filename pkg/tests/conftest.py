import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cafe_lab.datasets import synthetic_blobs
from cafe_lab.model import (LabeledBatch, LayerSpec, backward_full, init_model,
                            loss_batch)
from cafe_lab.protocol import Simulation, TrainConfig, partition_dataset

settings.register_profile(
    "ci", derandomize=True, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def make_desk_sim(seed=1, m=2, k=4, extractor="identity", d2=32, n=16,
                  lr=0.0, optimizer="sgd", dynamic=False, defense=None,
                  n_classes=4, shape=(8, 8)):
    images, labels = synthetic_blobs(n, shape[0], shape[1], n_classes, seed=seed)
    scheme = "even" if extractor == "identity" else "blocks"
    ds = partition_dataset(images, labels, m, scheme)
    if extractor == "identity":
        specs = [LayerSpec("identity")]
    else:
        specs = [LayerSpec("conv2d", channels=4, kernel=2, stride=1)]
    params = init_model(ds.partition, specs, d2=d2, n_classes=n_classes,
                        seed=seed + 100, init_scale=1.0)
    cfg = TrainConfig(optimizer=optimizer, lr=lr, batch_size=k,
                      attack_while_training=dynamic)
    return Simulation(ds, params, cfg, seed=seed, defense=defense)


def true_v_star(params, images, labels, k):
    """Ground-truth per-sample first-FC output gradients, 1/K scaled."""
    rows = []
    for i in range(images.shape[0]):
        rep = backward_full(params, LabeledBatch(images[i:i + 1], labels[i:i + 1]),
                            k_scale=1)
        rows.append(rep.du[0] / k)
    return np.stack(rows)


def finite_diff_param_grads(params, batch, h=1e-6):
    out = {}
    for key, arr in params.param_items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            lp = loss_batch(params, batch)
            arr[idx] = old - h
            lm = loss_batch(params, batch)
            arr[idx] = old
            g[idx] = (lp - lm) / (2 * h)
            it.iternext()
        out[key] = g
    return out


def max_rel_err(a, b, floor=1e-8):
    denom = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / denom)
