"""Experiment configuration stored as TOML.

Every section maps onto a dataclass; unknown keys are rejected so a typo in
a preset fails loudly instead of silently falling back to a default.
"""
import hashlib
import sys
from dataclasses import asdict, dataclass, field, fields

import tomli_w

from ..detectors import DetectorConfig
from ..errors import ConfigError
from ..grpo import GrpoConfig
from ..numkit import Rng
from ..synthworld import WorldSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1
SEED_STREAMS = ("world", "pretrain", "detectors", "sft", "stage1", "stage2", "arena")


@dataclass
class GeneratorConfig:
    hidden: tuple = (64, 64, 64)
    num_steps: int = 20
    eta: float = 0.7
    n_train: int = 20000
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    caption_dropout: float = 0.3


@dataclass
class DetectorDataConfig:
    """Detector hyperparameters plus the data they are fit on."""

    n_real: int = 8000
    n_generated: int = 8000
    short_prompt_fraction: float = 0.5
    train: DetectorConfig = field(default_factory=DetectorConfig)


@dataclass
class PolicyConfig:
    emb_dim: int = 16
    hidden: tuple = (64,)
    temperature: float = 1.0
    sft_corpus: int = 4000
    sft_epochs: int = 3
    sft_lr: float = 1e-2
    sft_batch_size: int = 64


@dataclass
class BenchConfig:
    n_per_class: int = 200
    num_battles: int = 3000
    battles_per_pair: int = None
    rewrite_fraction: float = 0.5


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    world: WorldSpec = field(default_factory=WorldSpec)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    detectors: DetectorDataConfig = field(default_factory=DetectorDataConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    stage1: GrpoConfig = field(default_factory=GrpoConfig.stage1)
    stage2: GrpoConfig = field(default_factory=GrpoConfig.stage2)
    bench: BenchConfig = field(default_factory=BenchConfig)
    schema_version: int = SCHEMA_VERSION

    def stream(self, name):
        """Independent RNG for one pipeline phase."""
        if name not in SEED_STREAMS:
            raise ConfigError(f"unknown seed stream {name!r}")
        return Rng(self.seed).child(name)

    def to_dict(self):
        d = {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "world": self.world.to_dict(),
            "generator": _plain(asdict(self.generator)),
            "detectors": _plain(asdict(self.detectors)),
            "policy": _plain(asdict(self.policy)),
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "bench": _plain(asdict(self.bench)),
        }
        return _drop_none(d)

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())

    def digest(self):
        return hashlib.sha256(self.to_toml().encode()).hexdigest()


def _plain(d):
    return {k: (list(v) if isinstance(v, tuple) else _plain(v) if isinstance(v, dict) else v) for k, v in d.items()}


def _drop_none(d):
    return {k: _drop_none(v) if isinstance(v, dict) else v for k, v in d.items() if v is not None}


def _build(cls, data, section):
    if not isinstance(data, dict):
        raise ConfigError(f"[{section}] must be a table")
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    kw = {}
    for k, v in data.items():
        if isinstance(v, list) and k != "style_scales":
            v = tuple(v)
        kw[k] = v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def config_from_dict(d):
    d = dict(d)
    version = d.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kw = {k: d[k] for k in ("seed", "out_dir") if k in d}
    if "world" in d:
        w = dict(d["world"])
        if "style_scales" in w:
            w["style_scales"] = tuple(tuple(s) for s in w["style_scales"])
        kw["world"] = _build(WorldSpec, w, "world")
    if "generator" in d:
        kw["generator"] = _build(GeneratorConfig, d["generator"], "generator")
    if "detectors" in d:
        det = dict(d["detectors"])
        train = _build(DetectorConfig, det.pop("train", {}), "detectors.train")
        kw["detectors"] = _build(DetectorDataConfig, {**det, "train": train}, "detectors")
    if "policy" in d:
        kw["policy"] = _build(PolicyConfig, d["policy"], "policy")
    if "stage1" in d:
        kw["stage1"] = _build(GrpoConfig, {**GrpoConfig.stage1().to_dict(), **d["stage1"]}, "stage1")
    if "stage2" in d:
        kw["stage2"] = _build(GrpoConfig, {**GrpoConfig.stage2().to_dict(), **d["stage2"]}, "stage2")
    if "bench" in d:
        kw["bench"] = _build(BenchConfig, d["bench"], "bench")
    cfg = ExperimentConfig(**kw)
    validate(cfg)
    return cfg


def validate(cfg):
    g = cfg.generator
    if g.num_steps < 2 or g.eta < 0 or not 0.0 <= g.caption_dropout <= 1.0:
        raise ConfigError("generator needs num_steps >= 2, eta >= 0 and caption_dropout in [0, 1]")
    if min(g.n_train, g.epochs, g.batch_size, cfg.detectors.n_real, cfg.detectors.n_generated) < 1:
        raise ConfigError("sample counts, epochs and batch sizes must be >= 1")
    if cfg.stage2.window >= g.num_steps:
        raise ConfigError("stage2.window must be smaller than generator.num_steps")
    if cfg.bench.n_per_class < 1:
        raise ConfigError("bench.n_per_class must be >= 1")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")


def load_config(path=None, overrides=None):
    """Read a TOML config (defaults if ``path`` is None) and apply dotted ``overrides``."""
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML in {path}: {exc}") from None
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return config_from_dict(data)


def save_config(cfg, path):
    with open(path, "w") as fh:
        fh.write(cfg.to_toml())
