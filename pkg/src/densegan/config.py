"""Run configuration: one YAML document merged with command-line overrides.

Layout::

    seed: 0
    eta: 0.9
    threshold_policy: youden
    out_dir: runs/example
    deterministic: true
    aggregate: null            # max | mean to pool patch scores per image
    generator: {input_size: 64, depth: 3, base_channels: 16}
    discriminator: {depth: 4, base_channels: 16}
    train: {batch_size: 16, max_epochs: 20, weights: {adversarial: 1, contextual: 40, latent: 1}}
    patch: {patch_size: 64}
    data: {protocol: normal-only, root: /data/mvtec/carpet}

``discriminator.input_size``/``input_channels`` and ``patch.patch_size``
default to the generator's. A relative ``out_dir`` is resolved under the
directory named by ``DENSEGAN_OUTPUT_ROOT`` when that variable is set.
"""

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import PatchSpec
from .discriminator import DiscriminatorConfig
from .errors import ConfigurationError
from .evaluation import _parse_policy
from .generator import GeneratorConfig
from .training import TrainConfig

OUTPUT_ROOT_ENV = "DENSEGAN_OUTPUT_ROOT"
PROTOCOLS = ("one-vs-all", "normal-only", "roi-masked", "synthetic")


@dataclass(frozen=True)
class DataConfig:
    root: Optional[str] = None
    protocol: str = "normal-only"
    normal_class: Optional[str] = None
    normal_dir: str = "good"
    subset: Optional[int] = None
    patchify: bool = False
    train_manifest: Optional[str] = None
    test_manifest: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    patch: PatchSpec = field(default_factory=PatchSpec)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    eta: float = 0.9
    threshold_policy: str = "youden"
    out_dir: str = "runs/default"
    deterministic: bool = True
    aggregate: Optional[str] = None

    @property
    def output_dir(self):
        out = Path(self.out_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    @property
    def train_manifest(self):
        return Path(self.data.train_manifest or self.output_dir / "manifests" / "train.tsv")

    @property
    def test_manifest(self):
        return Path(self.data.test_manifest or self.output_dir / "manifests" / "test.tsv")

    def to_dict(self):
        t = self.train.to_dict()
        for k in ("seed", "eta"):
            t.pop(k)
        t["betas"] = list(t["betas"])
        return {
            "seed": self.seed, "eta": self.eta, "threshold_policy": self.threshold_policy,
            "out_dir": self.out_dir, "deterministic": self.deterministic, "aggregate": self.aggregate,
            "generator": self.generator.to_dict(), "discriminator": self.discriminator.to_dict(),
            "train": t, "patch": dataclasses.asdict(self.patch), "data": dataclasses.asdict(self.data),
        }

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _section(cls, name, values, extra=()):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigurationError(f"{name}: expected a mapping, got {type(values).__name__}")
    known = {f.name for f in dataclasses.fields(cls)} - set(extra)
    for key in values:
        if key not in known:
            hint = " (set it at the top level)" if key in extra else ""
            raise ConfigurationError(f"{name}.{key}: unknown field{hint}")
    return values


def _build(cls, name, values, **fixed):
    try:
        obj = cls(**values, **fixed)
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except ConfigurationError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{name}: {exc}") from None


TOP_LEVEL = {"seed", "eta", "threshold_policy", "out_dir", "deterministic", "aggregate",
             "generator", "discriminator", "train", "patch", "data"}


def build_run_config(raw=None, overrides=None, data_overrides=None):
    """Validate a nested dict into a :class:`RunConfig`.

    ``overrides`` (top-level keys plus ``max_epochs``) and ``data_overrides``
    (keys of the ``data`` section) win over ``raw``; ``None`` values are ignored.
    """
    raw = dict(raw or {})
    data_set = {k: v for k, v in (data_overrides or {}).items() if v is not None}
    if data_set:
        raw["data"] = {**(raw.get("data") or {}), **data_set}
    for key, value in (overrides or {}).items():
        if value is not None:
            if key == "max_epochs":
                raw["train"] = {**(raw.get("train") or {}), "max_epochs": value}
            else:
                raw[key] = value
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigurationError(f"{key}: unknown field")

    g_raw = _section(GeneratorConfig, "generator", raw.get("generator"))
    gen = _build(GeneratorConfig, "generator", g_raw)
    d_raw = dict(_section(DiscriminatorConfig, "discriminator", raw.get("discriminator")))
    d_raw.setdefault("input_size", gen.input_size)
    d_raw.setdefault("input_channels", gen.input_channels)
    disc = _build(DiscriminatorConfig, "discriminator", d_raw)
    if (disc.input_size, disc.input_channels) != (gen.input_size, gen.input_channels):
        raise ConfigurationError("discriminator.input_size: must match generator.input_size and input_channels")

    seed = raw.get("seed", 0)
    eta = raw.get("eta", 0.9)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigurationError(f"seed: expected a non-negative integer, got {seed!r}")
    if not isinstance(eta, (int, float)) or not 0.0 <= eta <= 1.0:
        raise ConfigurationError(f"eta: must lie in [0, 1], got {eta!r}")
    t_raw = _section(TrainConfig, "train", raw.get("train"), extra=("seed", "eta"))
    train = _build(TrainConfig, "train", t_raw, seed=seed, eta=float(eta))

    p_raw = dict(_section(PatchSpec, "patch", raw.get("patch")))
    p_raw.setdefault("patch_size", gen.input_size)
    patch = _build(PatchSpec, "patch", p_raw)
    data = _build(DataConfig, "data", _section(DataConfig, "data", raw.get("data")))
    if data.protocol not in PROTOCOLS:
        raise ConfigurationError(f"data.protocol: expected one of {PROTOCOLS}, got {data.protocol!r}")
    if data.patchify and patch.patch_size != gen.input_size:
        raise ConfigurationError("patch.patch_size: must equal generator.input_size when data.patchify is set")
    if data.subset is not None and data.subset < 1:
        raise ConfigurationError("data.subset: must be positive")

    aggregate = raw.get("aggregate")
    if aggregate not in (None, "max", "mean"):
        raise ConfigurationError(f"aggregate: expected null, max or mean, got {aggregate!r}")
    policy = raw.get("threshold_policy", "youden")
    try:
        _parse_policy(policy)
    except (ConfigurationError, ValueError) as exc:
        raise ConfigurationError(f"threshold_policy: {exc}") from None
    return RunConfig(gen, disc, train, patch, data, seed, float(eta), policy, str(raw.get("out_dir", "runs/default")),
                     bool(raw.get("deterministic", True)), aggregate)


def load_run_config(path=None, overrides=None, data_overrides=None):
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    return build_run_config(raw, overrides, data_overrides)
