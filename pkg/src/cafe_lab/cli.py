"""Command line front end.

    cafe-lab train         --config cfg.toml | --preset NAME [--seed N] [--out DIR]
    cafe-lab attack        --config cfg.toml | --preset NAME [--seed N] [--out DIR]
    cafe-lab verify-theory --config cfg.toml | --preset theory-grid [--out DIR]
    cafe-lab sweep         --config cfg.toml [--axis NAME] [--out DIR]

Every run writes a manifest with the config hash and seed; identical
invocations produce byte-identical metrics CSVs.  ``CAFE_LAB_THREADS`` caps
sweep parallelism.  Structured failures print a one-line JSON error record to
stderr and exit with status 2.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from copy import deepcopy
from pathlib import Path

import numpy as np

from .attack import AttackHyper, StopCriteria, run_nested, run_single_loop
from .baselines import BaselineKind, run_baseline
from .config import load_config, load_preset
from .dataio import load_idx_dataset, save_png_grid
from .datasets import synthetic_blobs
from .defense import DefenseConfig, DPConfig, FakeGradients, GaussianDP
from .errors import CafeLabError, ConfigError
from .metrics import psnr
from .model import LayerSpec, init_model
from .protocol import Simulation, TrainConfig, partition_dataset
from .reporting import (write_audit, write_manifest, write_metrics,
                        write_round_log, write_theory, write_trace)
from .theory import theory_grid


def build_dataset(cfg):
    d = cfg.dataset
    if d.kind == "synthetic":
        return synthetic_blobs(d.n, d.height, d.width, d.classes, seed=cfg.seed)
    images, labels = load_idx_dataset(d.images_path, d.labels_path, take=d.n)
    if int(labels.max()) >= d.classes:
        raise ConfigError(
            f"dataset has label {int(labels.max())} but classes = {d.classes}")
    return images, labels


def extractor_specs(cfg):
    if cfg.model.extractor == "identity":
        return [LayerSpec("identity")]
    return [LayerSpec("conv2d", channels=cfg.model.conv_channels,
                      kernel=cfg.model.conv_kernel, stride=cfg.model.conv_stride)]


def build_defense(cfg):
    d = cfg.defense
    if d.kind == "none":
        return None
    if d.kind == "fake":
        conf = DefenseConfig(nu=d.nu, sigma2=d.sigma2, tau=d.tau,
                             max_regenerations=d.max_regenerations)
        return FakeGradients(conf, seed=cfg.seed + 0xFA4E)
    conf = DPConfig(clip_norm=d.clip_norm, epsilon=d.epsilon)
    return GaussianDP(conf, seed=cfg.seed + 0xFA4E)


def build_sim(cfg, dynamic=None):
    images, labels = build_dataset(cfg)
    ds = partition_dataset(images, labels, cfg.partition.workers,
                           cfg.partition.scheme)
    params = init_model(ds.partition, extractor_specs(cfg), d2=cfg.model.d2,
                        n_classes=cfg.dataset.classes, seed=cfg.seed + 100,
                        init_scale=cfg.model.init_scale)
    t = cfg.train
    train_cfg = TrainConfig(
        optimizer=t.optimizer, lr=t.lr, rounds=t.rounds,
        batch_size=t.batch_size,
        attack_while_training=t.attack_while_training
        if dynamic is None else dynamic)
    return Simulation(ds, params, train_cfg, seed=cfg.seed,
                      defense=build_defense(cfg))


def attack_hyper(cfg):
    a = cfg.attack
    return AttackHyper(alpha=a.alpha, beta=a.beta, gamma=a.gamma, xi=a.xi,
                       lr1=a.lr1, lr2=a.lr2, lr3=a.lr3, iters=a.iters,
                       switch1=a.switch1, switch2=a.switch2)


def run_attack_method(cfg, sim):
    hyper = attack_hyper(cfg)
    stop = StopCriteria(phi1=cfg.attack.phi1, phi2=cfg.attack.phi2)
    target = cfg.attack.psnr_target if cfg.attack.psnr_target > 0 else None
    method = cfg.attack.method
    if method == "cafe-nested":
        return run_nested(sim, hyper, stop, psnr_target=target)
    if method == "cafe-single":
        return run_single_loop(sim, hyper, stop, psnr_target=target)
    kind = BaselineKind(method, beta_tv=cfg.attack.beta_tv,
                        kernel_width=cfg.attack.kernel_width)
    return run_baseline(sim, kind, hyper, psnr_target=target)


def cmd_train(cfg, out):
    sim = build_sim(cfg, dynamic=True)
    for _ in range(cfg.train.rounds):
        sim.run_round()
    write_round_log(out / "rounds.csv", sim.log)
    if sim.audit:
        write_audit(out / "audit.csv", sim.audit)
    write_manifest(out / "manifest.json", cfg)
    print(f"trained {cfg.train.rounds} rounds; final loss "
          f"{sim.log[-1].loss:.6f}; wrote {out / 'rounds.csv'}")
    return 0


def cmd_attack(cfg, out):
    sim = build_sim(cfg)
    state = run_attack_method(cfg, sim)
    recovered = np.clip(state.fake_data, 0.0, 1.0)
    metrics = psnr(sim.dataset.images, recovered)
    cols = min(8, sim.dataset.n)
    save_png_grid(sim.dataset.images, cols, out / "real.png")
    save_png_grid(recovered, cols, out / "recovered.png")
    write_trace(out / "trace.csv", state.trace)
    write_metrics(out / "metrics.csv",
                  [(cfg.run_id(), cfg.attack.method, metrics.psnr_db,
                    metrics.mse)])
    write_round_log(out / "rounds.csv", sim.log)
    if sim.audit:
        write_audit(out / "audit.csv", sim.audit)
    write_manifest(out / "manifest.json", cfg)
    print(f"{cfg.attack.method}: psnr {metrics.psnr_db:.2f} dB over "
          f"{state.rounds_used} rounds; wrote {out / 'metrics.csv'}")
    return 0


def cmd_verify_theory(cfg, out):
    rows = theory_grid(cfg.theory.n_max)
    write_theory(out / "theory.csv", rows)
    write_manifest(out / "manifest.json", cfg)
    min_h11 = min(r[2] for r in rows)
    min_g11 = min(r[3] for r in rows)
    worst = max(r[4] for r in rows)
    print(f"theory grid N<=: {cfg.theory.n_max}; min eig H11 {min_h11:.6f}; "
          f"min eig G11 {min_g11:.6f}; worst identity residual {worst:.3e}; "
          f"wrote {out / 'theory.csv'}")
    return 0


_SWEEP_AXES = ("K", "alpha", "beta", "gamma", "xi", "M", "lr")


def _point_config(cfg, axis, value):
    pt = deepcopy(cfg)
    if axis == "K":
        pt.train.batch_size = int(value)
    elif axis == "M":
        pt.partition.workers = int(value)
    elif axis == "lr":
        pt.attack.lr3 = float(value)
    else:
        setattr(pt.attack, axis, float(value))
    return pt


def _sweep_point(args):
    cfg, axis, value = args
    sim = build_sim(cfg)
    state = run_attack_method(cfg, sim)
    metrics = psnr(sim.dataset.images, np.clip(state.fake_data, 0.0, 1.0))
    return (cfg.run_id(), f"{cfg.attack.method}[{axis}={value:g}]",
            metrics.psnr_db, metrics.mse)


def cmd_sweep(cfg, out, axis=None):
    axis = axis or cfg.sweep.axis
    if axis not in _SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {', '.join(_SWEEP_AXES)}")
    points = [(_point_config(cfg, axis, v), axis, float(v))
              for v in cfg.sweep.values]
    workers = int(os.environ.get("CAFE_LAB_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, points))
    else:
        rows = [_sweep_point(p) for p in points]
    write_metrics(out / "sweep.csv", rows)
    write_manifest(out / "manifest.json", cfg)
    for row in rows:
        print(f"{row[1]}: psnr {row[2]:.2f} dB")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def make_parser():
    parser = argparse.ArgumentParser(
        prog="cafe-lab",
        description="vertical FL gradient-leakage laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "attack", "verify-theory", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--preset", help="named built-in config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        if name == "sweep":
            p.add_argument("--axis", help="sweep axis "
                           f"({', '.join(_SWEEP_AXES)})")
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        if args.config and args.preset:
            raise ConfigError("pass either --config or --preset, not both")
        if args.config:
            cfg = load_config(args.config)
        elif args.preset:
            cfg = load_preset(args.preset)
        else:
            raise ConfigError("one of --config or --preset is required")
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "attack":
            return cmd_attack(cfg, out)
        if args.command == "verify-theory":
            return cmd_verify_theory(cfg, out)
        return cmd_sweep(cfg, out, axis=getattr(args, "axis", None))
    except CafeLabError as exc:
        print(json.dumps(exc.record()), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
