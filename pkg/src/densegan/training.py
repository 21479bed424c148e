"""Adversarial training loop, checkpoints and metric logging.

Each step updates D once and then G once. During the D update the
generator runs in eval mode (its spectral state is frozen) and during the G
update the discriminator does, so every spectrally-normalized weight
advances exactly one power iteration per update of its own network.
"""

import csv
import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .discriminator import DiscriminatorConfig, build_discriminator
from .errors import CheckpointError, ConfigurationError, NonFiniteError
from .evaluation import roc_auc, score_dataset
from .generator import GeneratorConfig, build_generator
from .layers import SNConv2d
from .objectives import (LossWeights, adversarial_loss, contextual_loss, latent_loss,
                         total_loss)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "densegan-checkpoint"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("epoch", "l_adv", "l_con", "l_lat", "total", "d_loss", "val_auc")
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 8e-3
    batch_size: int = 64
    max_epochs: int = 20
    weights: LossWeights = LossWeights()
    seed: int = 0
    betas: tuple = (0.5, 0.999)
    generator_loss: str = "non_saturating"
    grad_clip: Optional[float] = None
    augment: bool = False
    eta: float = 0.9
    validation_fraction: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.generator_loss not in ("non_saturating", "minimax"):
            raise ConfigurationError(f"unknown generator_loss {self.generator_loss!r}")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self):
        return asdict(self)


def config_hash(gen_cfg, disc_cfg, train_cfg):
    """Stable hash of everything that defines a run except its length."""
    t = train_cfg.to_dict()
    t.pop("max_epochs")
    blob = json.dumps({"generator": gen_cfg.to_dict(), "discriminator": disc_cfg.to_dict(), "train": t},
                      sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def set_deterministic(seed, enabled=True):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.use_deterministic_algorithms(enabled)


@dataclass
class TrainState:
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    config: TrainConfig
    epoch: int = 0
    history: list = field(default_factory=list)

    @property
    def config_hash(self):
        return config_hash(self.generator.config, self.discriminator.config, self.config)


def build_state(gen_cfg, disc_cfg, train_cfg):
    if (gen_cfg.input_size, gen_cfg.input_channels) != (disc_cfg.input_size, disc_cfg.input_channels):
        raise ConfigurationError("generator and discriminator disagree on input size or channels")
    dtype = train_cfg.torch_dtype
    g = build_generator(gen_cfg, seed=train_cfg.seed).to(dtype)
    d = build_discriminator(disc_cfg, seed=train_cfg.seed + 1).to(dtype)
    opt_g = torch.optim.Adam(g.parameters(), lr=train_cfg.learning_rate, betas=train_cfg.betas)
    opt_d = torch.optim.Adam(d.parameters(), lr=train_cfg.learning_rate, betas=train_cfg.betas)
    return TrainState(g, d, opt_g, opt_d, train_cfg)


def _finite(value, term):
    if not torch.isfinite(value).all():
        raise NonFiniteError(term, f"non-finite {term} loss; aborting")


def spectral_sigmas(module):
    return {name: float(m.sigma) for name, m in module.named_modules()
            if isinstance(m, SNConv2d) and m.spectral_norm}


def train_step(state, batch):
    """One D update followed by one G update on ``batch``.

    Returns ``(LossBundle, d_loss)`` with float-valued tensors.
    """
    g, d, cfg = state.generator, state.discriminator, state.config
    x = batch.to(next(g.parameters()).dtype)
    n = len(x)

    # discriminator
    g.eval()
    d.train()
    with torch.no_grad():
        x_fake = g(x)
    out = d(torch.cat([x, x_fake]))
    d_loss, _ = adversarial_loss(out.p_real[:n], out.p_real[n:])
    _finite(d_loss, "d_loss")
    state.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(d.parameters(), cfg.grad_clip)
    state.opt_d.step()
    for name, s in spectral_sigmas(d).items():
        if not (math.isfinite(s) and s > 0):
            raise NonFiniteError(f"discriminator sigma {name}")

    # generator
    g.train()
    d.eval()
    x_hat = g(x)
    out = d(torch.cat([x, x_hat]))
    _, g_adv = adversarial_loss(out.p_real[:n], out.p_real[n:], cfg.generator_loss)
    l_con = contextual_loss(x, x_hat)
    l_lat = latent_loss(out.features[:n].detach(), out.features[n:])
    bundle = total_loss(g_adv, l_con, l_lat, cfg.weights)
    for term in ("l_adv", "l_con", "l_lat", "total"):
        _finite(getattr(bundle, term), term)
    state.opt_g.zero_grad(set_to_none=True)
    bundle.total.backward()
    # the G step must leave D untouched
    state.opt_d.zero_grad(set_to_none=True)
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(g.parameters(), cfg.grad_clip)
    state.opt_g.step()
    d.train()

    detach = lambda t: t.detach()
    return replace(bundle, **{k: detach(getattr(bundle, k)) for k in ("l_adv", "l_con", "l_lat", "total")}), d_loss.detach()


def validation_split(test_set, fraction=0.1, seed=0):
    """Seeded, stratified slice of the test set with both labels present."""
    labels = np.asarray(test_set.labels)
    rng = np.random.default_rng(seed)
    picked = []
    for value in (0, 1):
        idx = np.flatnonzero(labels == value)
        if idx.size == 0:
            continue
        k = max(1, int(round(fraction * idx.size)))
        picked.extend(rng.choice(idx, size=k, replace=False).tolist())
    return test_set.subset(sorted(picked))


def epoch_batches(n, batch_size, seed, epoch):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[k:k + batch_size] for k in range(0, n, batch_size)]


def train(gen_cfg, disc_cfg, train_cfg, train_set, val_set=None, out_dir=None, resume=None,
          on_epoch=None):
    """Train for ``train_cfg.max_epochs`` epochs.

    ``val_set`` (an :class:`~densegan.data.ImageSet` with labels) is scored
    after every epoch. With ``out_dir``, ``last.ckpt``, ``best.ckpt`` and the
    append-only ``metrics.csv`` are written there. ``resume`` is a checkpoint
    path to continue from. Returns the final :class:`TrainState`.
    """
    if len(train_set) == 0:
        raise ConfigurationError("training set is empty")
    if np.asarray(train_set.labels).any():
        raise ConfigurationError("training set contains anomalous samples")
    state = build_state(gen_cfg, disc_cfg, train_cfg)
    if resume is not None:
        restore(state, load_checkpoint(resume, expected_hash=state.config_hash))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    best = max((h["val_auc"] for h in state.history if h["val_auc"] is not None), default=-1.0)
    rng = np.random.default_rng(train_cfg.seed)
    while state.epoch < train_cfg.max_epochs:
        epoch = state.epoch + 1
        sums = dict.fromkeys(("l_adv", "l_con", "l_lat", "total", "d_loss"), 0.0)
        batches = epoch_batches(len(train_set), train_cfg.batch_size, train_cfg.seed, epoch)
        for idx in batches:
            x = train_set.images[idx]
            if train_cfg.augment:
                flip = torch.from_numpy(rng.random(len(x)) < 0.5)
                x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            bundle, d_loss = train_step(state, x)
            for k, v in bundle.as_floats().items():
                sums[k] += v
            sums["d_loss"] += float(d_loss)
        row = {"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}, "val_auc": None}
        if val_set is not None:
            vec = score_dataset(state.generator, state.discriminator, val_set, train_cfg.eta)
            row["val_auc"] = float(roc_auc(vec.normalized, vec.labels)[0])
        state.epoch = epoch
        state.history.append(row)
        log.info("epoch %d: %s", epoch, row)
        if out is not None:
            append_metrics(out / "metrics.csv", row)
            save_checkpoint(state, out / "last.ckpt")
            if row["val_auc"] is not None and row["val_auc"] > best:
                best = row["val_auc"]
                save_checkpoint(state, out / "best.ckpt")
        if on_epoch is not None:
            on_epoch(state, row)
    return state


def append_metrics(path, row):
    new = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new:
            w.writeheader()
        w.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k])
                    for k in METRIC_FIELDS})


# --- checkpoints -----------------------------------------------------------------

@dataclass
class Checkpoint:
    metadata: dict
    arrays: dict

    @property
    def epoch(self):
        return self.metadata["epoch"]

    @property
    def config_hash(self):
        return self.metadata["config_hash"]


def _optimizer_arrays(opt, prefix):
    sd = opt.state_dict()
    arrays = {}
    for pid, pstate in sd["state"].items():
        for key, value in pstate.items():
            arrays[f"{prefix}/{pid}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    return arrays, sd["param_groups"]


def checkpoint_of(state):
    arrays = {}
    for prefix, module in (("generator", state.generator), ("discriminator", state.discriminator)):
        for k, v in module.state_dict().items():
            arrays[f"{prefix}/{k}"] = v.detach().cpu().numpy()
    opt_g, groups_g = _optimizer_arrays(state.opt_g, "opt_g")
    opt_d, groups_d = _optimizer_arrays(state.opt_d, "opt_d")
    arrays.update(opt_g)
    arrays.update(opt_d)
    metadata = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": state.config_hash,
        "epoch": state.epoch,
        "history": state.history,
        "generator_config": state.generator.config.to_dict(),
        "discriminator_config": state.discriminator.config.to_dict(),
        "train_config": state.config.to_dict(),
        "optimizer_param_groups": {"opt_g": groups_g, "opt_d": groups_d},
    }
    return Checkpoint(metadata, arrays)


def write_checkpoint(ckpt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("metadata.json", _ZIP_DATE),
                    json.dumps(ckpt.metadata, sort_keys=True, indent=1, default=list))
        for name in sorted(ckpt.arrays):
            buf = io.BytesIO()
            np.save(buf, np.asarray(ckpt.arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"arrays/{name}.npy", _ZIP_DATE), buf.getvalue())
    tmp.replace(path)
    return path


def save_checkpoint(state, path):
    return write_checkpoint(checkpoint_of(state), path)


def load_checkpoint(path, expected_hash=None):
    try:
        with zipfile.ZipFile(path) as zf:
            metadata = json.loads(zf.read("metadata.json"))
            arrays = {}
            for name in zf.namelist():
                if name.startswith("arrays/") and name.endswith(".npy"):
                    arrays[name[len("arrays/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(name)),
                                                                        allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, EOFError, ValueError, OSError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if metadata.get("format") != CHECKPOINT_FORMAT or metadata.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} is not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT}")
    if expected_hash is not None and metadata["config_hash"] != expected_hash:
        raise CheckpointError(
            f"checkpoint config hash {metadata['config_hash']} does not match run config {expected_hash}")
    return Checkpoint(metadata, arrays)


def _restore_optimizer(opt, ckpt, prefix):
    state = {}
    for name, arr in ckpt.arrays.items():
        head, _, rest = name.partition("/")
        if head != prefix:
            continue
        pid, key = rest.split("/", 1)
        state.setdefault(int(pid), {})[key] = torch.from_numpy(arr.copy())
    groups = ckpt.metadata["optimizer_param_groups"][prefix]
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})


def restore(state, ckpt):
    """Load a :class:`Checkpoint` into an existing state built from the same config."""
    if ckpt.config_hash != state.config_hash:
        raise CheckpointError(f"checkpoint config hash {ckpt.config_hash} != {state.config_hash}")
    for prefix, module in (("generator", state.generator), ("discriminator", state.discriminator)):
        sd = {k[len(prefix) + 1:]: torch.from_numpy(v.copy()) for k, v in ckpt.arrays.items()
              if k.startswith(prefix + "/")}
        module.load_state_dict(sd)
    _restore_optimizer(state.opt_g, ckpt, "opt_g")
    _restore_optimizer(state.opt_d, ckpt, "opt_d")
    state.epoch = ckpt.epoch
    state.history = [dict(h) for h in ckpt.metadata["history"]]
    return state


def configs_from_checkpoint(ckpt):
    m = ckpt.metadata
    return (GeneratorConfig(**m["generator_config"]), DiscriminatorConfig(**m["discriminator_config"]),
            TrainConfig(**m["train_config"]))


def load_model(path):
    """Rebuild a :class:`TrainState` (models + optimizers) from a checkpoint file."""
    ckpt = load_checkpoint(path)
    state = build_state(*configs_from_checkpoint(ckpt))
    return restore(state, ckpt)
