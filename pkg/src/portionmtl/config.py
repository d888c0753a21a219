"""Experiment configuration: a YAML file with every key defaulted."""

import os
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from portionmtl.layers import BackboneSpec
from portionmtl.multitask import MODES, ModelSpec, TrainConfig

CONFIG_ENV = "PORTIONMTL_CONFIG"

# Full-scale values of the original setup, for reference next to the
# desk-scale defaults used here.
FULL_SCALE_VALUES = {
    "train.epochs": 100,
    "train.base_lr": 0.1,
    "train.lr_drop_epochs": [30, 60, 90],
    "train.lr_drop_factor": 0.1,
    "train.weight_decay": 1e-4,
    "train.batch_size": 32,
    "train.lambda_c": 1.0,
    "train.lambda_r": 1.0,
    "train.lambda_ps": 1.0,
    "model.backbone.feature_dim": 512,
    "model.backbone.input_size": 224,
    "data.n_classes": 21,
    "eval.mccr_constant": 1.0,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    path: str = "data/synthetic"
    n_classes: int = 21
    per_class: int = 100
    image_size: int = 32
    test_fraction: float = 0.2
    target_per_class: object = None  # None -> per_class
    augment_first: bool = False


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (8, 16, 32)
    kernel_size: int = 3
    pool_size: int = 2
    feature_dim: int = 64
    norm_epsilon: float = 1e-5
    bn_momentum: float = 0.1
    ln_placement: str = "pre_concat"
    bn_position: str = "after_ln"
    detach_classifier_features: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "sps_cdfa_ln_bn"
    seed: int = 0
    output_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mccr_constant: float = 1.0
    ablation_modes: tuple = MODES
    ablation_seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; valid modes: {', '.join(MODES)}")
        bad = [m for m in self.ablation_modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown ablation modes {bad}; valid modes: {', '.join(MODES)}")
        object.__setattr__(self, "ablation_modes", tuple(self.ablation_modes))
        object.__setattr__(self, "ablation_seeds", tuple(int(s) for s in self.ablation_seeds))
        # the train section always follows the top-level seed
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))

    def model_spec(self, mode=None):
        m = self.model
        backbone = BackboneSpec(self.data.image_size, 3, m.channels, m.kernel_size, m.pool_size, m.feature_dim)
        return ModelSpec(mode or self.mode, self.data.n_classes, backbone, m.norm_epsilon, m.bn_momentum,
                         m.ln_placement, m.bn_position, m.detach_classifier_features)

    def with_overrides(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        d = asdict(self)
        d["model"]["channels"] = list(self.model.channels)
        d["train"]["lr_drop_epochs"] = list(self.train.lr_drop_epochs)
        d["ablation_modes"] = list(self.ablation_modes)
        d["ablation_seeds"] = list(self.ablation_seeds)
        del d["train"]["seed"]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        _check_keys(cls, d, "")
        sections = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig}
        kw = {}
        for key, val in d.items():
            if key in sections:
                sub = dict(val or {})
                _check_keys(sections[key], sub, key + ".")
                if key == "train":
                    sub.setdefault("seed", d.get("seed", 0))
                try:
                    kw[key] = sections[key](**sub)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{key}: {exc}") from None
            else:
                kw[key] = val
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _check_keys(cls, d, prefix):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def parse_config(text):
    try:
        return ExperimentConfig.from_dict(yaml.safe_load(text))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None


def load_config(path=None):
    """Load ``path``, else ``$PORTIONMTL_CONFIG``, else all defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return ExperimentConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
