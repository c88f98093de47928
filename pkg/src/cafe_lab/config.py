"""Experiment configuration: TOML files, shipped presets, validation."""

import hashlib
import importlib.resources
import json
import warnings
from dataclasses import asdict, dataclass, field

try:
    import tomllib
except ModuleNotFoundError:          # Python 3.10
    import tomli as tomllib

from .errors import ConfigError, ConfigWarning

PRESETS = ("desk-cafe", "desk-dlg", "desk-defense", "theory-grid")
ATTACK_METHODS = ("cafe-nested", "cafe-single", "dlg", "cosine", "sapag")


@dataclass
class DatasetSection:
    kind: str = "synthetic"          # synthetic | idx
    n: int = 16
    height: int = 8
    width: int = 8
    classes: int = 4
    images_path: str = ""
    labels_path: str = ""


@dataclass
class PartitionSection:
    workers: int = 2
    scheme: str = "even"


@dataclass
class ModelSection:
    extractor: str = "identity"      # identity | conv
    conv_channels: int = 4
    conv_kernel: int = 2
    conv_stride: int = 1
    d2: int = 32
    init_scale: float = 1.0


@dataclass
class TrainSection:
    optimizer: str = "sgd"
    lr: float = 0.0
    rounds: int = 2000
    batch_size: int = 4
    attack_while_training: bool = False


@dataclass
class AttackSection:
    method: str = "cafe-single"
    iters: int = 5000
    lr1: float = 0.0                 # 0 -> auto
    lr2: float = 0.0                 # 0 -> auto
    lr3: float = 20.0
    alpha: float = 1e-2
    beta: float = 1e-4
    gamma: float = 1e-3
    xi: float = 60.0
    switch1: float = 1e-9
    switch2: float = 5e-9
    phi1: float = 1e-12
    phi2: float = 1e-12
    psnr_target: float = 0.0         # 0 -> run the full budget
    beta_tv: float = 1e-4            # cosine baseline
    kernel_width: float = 0.0        # sapag; 0 -> median heuristic


@dataclass
class DefenseSection:
    kind: str = "none"               # none | fake | dp
    nu: int = 32
    sigma2: float = 5e-4
    tau: float = 8.0
    max_regenerations: int = 20
    clip_norm: float = 3.0
    epsilon: float = 1.0


@dataclass
class TheorySection:
    n_max: int = 12


@dataclass
class SweepSection:
    axis: str = "K"
    values: list = field(default_factory=lambda: [2, 4, 8])


@dataclass
class ExperimentConfig:
    seed: int = 1
    dataset: DatasetSection = field(default_factory=DatasetSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    theory: TheorySection = field(default_factory=TheorySection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def validate(self):
        if self.dataset.kind not in ("synthetic", "idx"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        if self.train.batch_size > self.dataset.n:
            raise ConfigError(
                f"batch size {self.train.batch_size} exceeds dataset size "
                f"{self.dataset.n}")
        if self.attack.method not in ATTACK_METHODS:
            raise ConfigError(f"unknown attack method {self.attack.method!r}")
        if self.defense.kind not in ("none", "fake", "dp"):
            raise ConfigError(f"unknown defense kind {self.defense.kind!r}")
        if self.model.extractor not in ("identity", "conv"):
            raise ConfigError(f"unknown extractor {self.model.extractor!r}")
        if self.model.d2 <= self.dataset.n:
            warnings.warn(
                f"d2 = {self.model.d2} <= N = {self.dataset.n}: representation "
                "recovery is outside the guaranteed regime", ConfigWarning,
                stacklevel=2)
        return self

    def canonical(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def run_id(self):
        return f"{self.config_hash()[:12]}-s{self.seed}"


_SECTIONS = {
    "dataset": DatasetSection,
    "partition": PartitionSection,
    "model": ModelSection,
    "train": TrainSection,
    "attack": AttackSection,
    "defense": DefenseSection,
    "theory": TheorySection,
    "sweep": SweepSection,
}


def config_from_dict(raw):
    cfg = ExperimentConfig()
    known = set(_SECTIONS) | {"seed"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config section or key {key!r}")
    if "seed" in raw:
        cfg.seed = int(raw["seed"])
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a table")
        target = getattr(cfg, name)
        for k, v in section.items():
            if not hasattr(target, k):
                raise ConfigError(f"unknown key {k!r} in section {name!r}")
            setattr(target, k, type(getattr(cls(), k))(v)
                    if not isinstance(getattr(cls(), k), list) else list(v))
    return cfg


def load_config(path):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def load_preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    ref = importlib.resources.files("cafe_lab").joinpath(f"presets/{name}.toml")
    with ref.open("rb") as fh:
        return config_from_dict(tomllib.load(fh))
