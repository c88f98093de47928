"""Deterministic simulation of the vertical FL training loop.

The server picks the batch index vector each round and broadcasts it to all
workers (index alignment), workers compute gradients on their feature slices,
and the server aggregates.  Workers are simulated in process: the server
assembles the full internal representation itself, which is equivalent for an
honest-but-curious server that already sees every aggregated gradient.
Aggregation iterates workers in fixed index order so replays are bit
identical.
"""

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, EnumerationCapError, ShapeError
from .model import LabeledBatch, backward_full
from .partition import make_partition

ENUMERATION_CAP = 10 ** 6


@dataclass
class PartitionedDataset:
    images: np.ndarray          # (N, *sample shape)
    labels: np.ndarray          # (N,) int class ids
    partition: object

    @property
    def n(self):
        return self.images.shape[0]

    @property
    def m(self):
        return self.partition.n_workers

    def worker_views(self):
        """Per-worker feature slices of every sample."""
        return self.partition.split(self.images)


def partition_dataset(images, labels, m, scheme="even"):
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels)
    if images.shape[0] != labels.shape[0]:
        raise ShapeError("images and labels disagree on sample count")
    part = make_partition(images.shape[1:], m, scheme)
    return PartitionedDataset(images, labels, part)


@dataclass(frozen=True)
class BatchMask:
    bits: np.ndarray            # (N,) 0/1
    k: int

    def __post_init__(self):
        if int(self.bits.sum()) != self.k:
            raise ShapeError(f"mask popcount {int(self.bits.sum())} != K={self.k}")

    @property
    def n(self):
        return self.bits.shape[0]

    def indices(self):
        return np.flatnonzero(self.bits)


def sample_batch_mask(n, k, rng):
    """Uniform draw over all C(n, k) binary index vectors with k ones."""
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= K <= N, got K={k}, N={n}")
    bits = np.zeros(n, dtype=np.int8)
    bits[rng.choice(n, size=k, replace=False)] = 1
    return BatchMask(bits, k)


def enumerate_masks(n, k, cap=ENUMERATION_CAP):
    """All masks in lexicographic index order; errors if C(n, k) exceeds cap."""
    count = math.comb(n, k)
    if count > cap:
        raise EnumerationCapError(
            f"C({n},{k}) = {count} exceeds enumeration cap {cap}")
    masks = []
    for combo in itertools.combinations(range(n), k):
        bits = np.zeros(n, dtype=np.int8)
        bits[list(combo)] = 1
        masks.append(BatchMask(bits, k))
    return masks


@dataclass
class TrainConfig:
    optimizer: str = "sgd"      # sgd | adam
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rounds: int = 1
    batch_size: int = 1
    attack_while_training: bool = False   # update params each round when True

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.rounds < 1:
            raise ConfigError("need at least one round")


class AdamState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.param_items()}
        self.v = {k: np.zeros_like(v) for k, v in params.param_items()}
        self.t = 0

    def step(self, params, grads, cfg):
        self.t += 1
        bias1 = 1.0 - cfg.beta1 ** self.t
        bias2 = 1.0 - cfg.beta2 ** self.t
        new = params.copy()
        for key, arr in new.param_items():
            g = grads[key]
            self.m[key] = cfg.beta1 * self.m[key] + (1 - cfg.beta1) * g
            self.v[key] = cfg.beta2 * self.v[key] + (1 - cfg.beta2) * g * g
            arr -= cfg.lr * (self.m[key] / bias1) / (np.sqrt(self.v[key] / bias2) + cfg.eps)
        return new


def run_round(params, dataset, mask, config, adam_state=None):
    """One aggregation round: assemble the masked batch, compute gradients,
    optionally apply the configured optimizer.

    Returns (report, params, adam_state).  With ``attack_while_training``
    off the parameters are returned unchanged.
    """
    if mask.n != dataset.n:
        raise ShapeError(f"mask length {mask.n} != dataset size {dataset.n}")
    sel = mask.indices()
    batch = LabeledBatch(dataset.images[sel], dataset.labels[sel])
    report = backward_full(params, batch)
    if not config.attack_while_training or config.lr == 0.0:
        return report, params, adam_state
    if config.optimizer == "sgd":
        return report, params.apply_gradients(report.params, config.lr), adam_state
    if config.optimizer == "adam":
        if adam_state is None:
            adam_state = AdamState(params)
        return report, adam_state.step(params, report.params, config), adam_state
    raise ConfigError(f"unknown optimizer {config.optimizer!r}")


@dataclass
class RoundLogRow:
    round: int
    loss: float
    grad_norm: float
    seed: int


class Simulation:
    """Single-owner handle on one VFL run: dataset, parameters, round RNG.

    A defense object (see :mod:`cafe_lab.defense`) may be attached; it
    transforms each report before the server (and any attacker) sees it.
    """

    def __init__(self, dataset, params, config, seed, defense=None):
        self.dataset = dataset
        self.params = params
        self.config = config
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.defense = defense
        self.adam_state = None
        self.round_index = 0
        self.log = []
        self.audit = []

    def sample_mask(self):
        return sample_batch_mask(self.dataset.n, self.config.batch_size, self.rng)

    def run_round(self, mask=None):
        if mask is None:
            mask = self.sample_mask()
        dynamic = self.config.attack_while_training and self.config.lr > 0.0
        if self.defense is None:
            report, self.params, self.adam_state = run_round(
                self.params, self.dataset, mask, self.config, self.adam_state)
        else:
            frozen = replace(self.config, attack_while_training=False)
            report, _, _ = run_round(self.params, self.dataset, mask, frozen)
            report.round_index = self.round_index
            report, audit_rows = self.defense.apply(report)
            self.audit.extend(audit_rows)
            if dynamic:
                # the optimizer consumes what was uploaded, not the truth
                if self.config.optimizer == "sgd":
                    self.params = self.params.apply_gradients(
                        report.params, self.config.lr)
                elif self.config.optimizer == "adam":
                    if self.adam_state is None:
                        self.adam_state = AdamState(self.params)
                    self.params = self.adam_state.step(
                        self.params, report.params, self.config)
                else:
                    raise ConfigError(f"unknown optimizer {self.config.optimizer!r}")
        report.round_index = self.round_index
        self.log.append(RoundLogRow(self.round_index, report.loss,
                                    report.grad_norm(), self.seed))
        self.round_index += 1
        return mask, report
