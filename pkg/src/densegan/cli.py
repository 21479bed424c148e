"""``densegan`` command line: prepare, train, eval, score, print-config.

Exit codes: 0 success, 2 invalid configuration or input, 3 training diverged,
4 I/O failure (unreadable images, checkpoints or unwritable outputs).
"""

import argparse
import collections
import logging
import sys
from pathlib import Path

from . import data as D
from .config import PROTOCOLS, load_run_config
from .data import ImageSet, read_manifest
from .errors import (BatchLoadError, CheckpointError, ConfigurationError, MetricError, NonFiniteError,
                     WiringError)
from .evaluation import ETA_SWEEP, emit_report, evaluate, score_dataset, write_scores
from .synthetic import texture_dataset
from .training import (build_state, configs_from_checkpoint, load_checkpoint, restore, set_deterministic,
                       train, validation_split)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _add_common(p):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out-dir", dest="out_dir", help="override the output directory")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="use deterministic kernels (default: on)")


def build_parser():
    parser = argparse.ArgumentParser(prog="densegan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="scan a dataset and write train/test manifests")
    _add_common(p)
    p.add_argument("--root", help="dataset root (overrides data.root)")
    p.add_argument("--protocol", choices=PROTOCOLS, help="overrides data.protocol")
    p.add_argument("--normal-class", dest="normal_class", help="normal class for one-vs-all")
    p.add_argument("--subset", type=int, help="seeded cap on records per split and label")

    p = sub.add_parser("train", help="train a model on the train manifest")
    _add_common(p)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--eta", type=float, help="score weight used for validation AUC")
    p.add_argument("--resume", help="checkpoint to continue from")

    for name, text in (("eval", "score the test manifest and write reports"),
                       ("score", "write per-sample anomaly scores for a manifest")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.add_argument("--checkpoint", help="default: <out>/train/best.ckpt, else last.ckpt")
        p.add_argument("--manifest", help="default: the configured test manifest")
        p.add_argument("--eta", type=float)
        if name == "eval":
            p.add_argument("--threshold-policy", dest="threshold_policy",
                           help="youden or fixed:<quantile of normal scores>")
            p.add_argument("--eta-sweep", dest="eta_sweep", nargs="?", const="default",
                           help="comma-separated eta values (default 0.1..0.9); one report each")

    p = sub.add_parser("print-config", help="print the merged effective configuration")
    _add_common(p)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--threshold-policy", dest="threshold_policy")
    return parser


def _run_config(args):
    overrides = {k: getattr(args, k, None) for k in
                 ("seed", "eta", "max_epochs", "threshold_policy", "out_dir", "deterministic")}
    data = {k: getattr(args, k, None) for k in ("root", "protocol", "normal_class", "subset")}
    return load_run_config(args.config, overrides, data)


def _require(path, field):
    if not Path(path).exists():
        raise ConfigurationError(f"{field}: {path} does not exist")
    return Path(path)


def _split_stats(manifest):
    counts = collections.Counter((r.label, r.class_tag or "-") for r in manifest.records)
    return ", ".join(f"{label}/{tag}: {n}" for (label, tag), n in sorted(counts.items())) or "empty"


# --- commands ---------------------------------------------------------------------

def cmd_prepare(cfg):
    dc = cfg.data
    if dc.protocol != "synthetic":
        if dc.root is None:
            raise ConfigurationError("data.root: required for protocol " + dc.protocol)
        _require(dc.root, "data.root")
    if dc.protocol == "one-vs-all" and not dc.normal_class:
        raise ConfigurationError("data.normal_class: required for one-vs-all")
    out = cfg.output_dir

    if dc.protocol == "one-vs-all":
        train, test = D.scan_one_vs_all(dc.root, dc.normal_class)
    elif dc.protocol in ("normal-only", "roi-masked"):
        train, test = D.scan_normal_only(dc.root, dc.normal_dir, use_masks=dc.protocol == "roi-masked")
    else:
        train, test = _write_synthetic(cfg, out / "data")
    if dc.protocol == "roi-masked":
        test.validate_masks()

    if dc.subset is not None:
        train = D.DatasetManifest(D.seeded_subset(train.records, dc.subset, cfg.seed), "train")
        test = D.DatasetManifest(
            [r for label in D.LABELS for r in D.seeded_subset(
                [r for r in test.records if r.label == label], dc.subset, cfg.seed)], "test")
    if dc.patchify:
        train = D.patchify_manifest(train, cfg.patch, out / "patches" / "train", cfg.generator.input_channels)
        test = D.patchify_manifest(test, cfg.patch, out / "patches" / "test", cfg.generator.input_channels)

    D.write_manifest(train, out / "manifests" / "train.tsv")
    D.write_manifest(test, out / "manifests" / "test.tsv")
    print(f"train ({len(train)}): {_split_stats(train)}")
    print(f"test ({len(test)}): {_split_stats(test)}")
    print(f"manifests written to {out / 'manifests'}")


def _write_synthetic(cfg, out):
    n = cfg.data.subset
    kw = {} if n is None else {"n_train": n, "n_test_normal": n, "n_test_defect": n}
    train_set, test_set = texture_dataset(size=cfg.generator.input_size,
                                          channels=cfg.generator.input_channels, seed=cfg.seed, **kw)
    records = {"train": [], "test": []}
    for split, ds in (("train", train_set), ("test", test_set)):
        for img, label, tag, sid in zip(ds.images.numpy(), ds.labels, ds.class_tags, ds.ids):
            path = out / split / f"{sid}.png"
            D.save_image(img, path)
            records[split].append(D.Record(str(path), D.ANOMALOUS if label else D.NORMAL, None,
                                           "texture" if split == "train" else tag))
    return D.DatasetManifest(records["train"], "train"), D.DatasetManifest(records["test"], "test")


def _load_set(manifest_path, cfg, split="test"):
    manifest = read_manifest(manifest_path, split, check_masks=True)
    if len(manifest) == 0:
        raise ConfigurationError(f"{manifest_path}: manifest is empty")
    dtype = cfg.train.torch_dtype
    return ImageSet.from_manifest(manifest, cfg.generator.input_size, cfg.generator.input_channels, dtype)


def cmd_train(cfg, resume=None):
    train_path = _require(cfg.train_manifest, "data.train_manifest")
    test_path = cfg.test_manifest if cfg.test_manifest.exists() else None
    if resume is not None:
        _require(resume, "--resume")
    out = cfg.output_dir / "train"
    set_deterministic(cfg.seed, cfg.deterministic)
    train_set = _load_set(train_path, cfg, "train")
    val_set = None
    if test_path is not None and cfg.train.validation_fraction > 0:
        test_set = _load_set(test_path, cfg)
        if len(set(test_set.labels.tolist())) == 2:
            val_set = validation_split(test_set, cfg.train.validation_fraction, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    state = train(cfg.generator, cfg.discriminator, cfg.train, train_set, val_set, out_dir=out, resume=resume)
    last = state.history[-1]
    print(f"trained {state.epoch} epoch(s); final total loss {last['total']:.4f}, "
          f"validation AUC {last['val_auc'] if last['val_auc'] is not None else 'n/a'}")
    print(f"checkpoints in {out}")


def _checkpoint_path(cfg, given):
    if given:
        return _require(given, "--checkpoint")
    for name in ("best.ckpt", "last.ckpt"):
        p = cfg.output_dir / "train" / name
        if p.exists():
            return p
    raise ConfigurationError(f"--checkpoint: no checkpoint found under {cfg.output_dir / 'train'}")


def _model_for(cfg, ckpt_path):
    ckpt = load_checkpoint(ckpt_path)
    gen_cfg, disc_cfg, train_cfg = configs_from_checkpoint(ckpt)
    if (gen_cfg.input_size, gen_cfg.input_channels) != (cfg.generator.input_size, cfg.generator.input_channels):
        raise ConfigurationError(
            f"generator.input_size: checkpoint expects {gen_cfg.input_channels}x{gen_cfg.input_size}, "
            f"configuration has {cfg.generator.input_channels}x{cfg.generator.input_size}")
    state = restore(build_state(gen_cfg, disc_cfg, train_cfg), ckpt)
    return state.generator, state.discriminator


def _eta_values(spec, default):
    if spec is None:
        return [default]
    if spec == "default":
        return list(ETA_SWEEP)
    try:
        values = [float(v) for v in spec.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"--eta-sweep: cannot parse {spec!r}") from None
    if not values or any(not 0 <= v <= 1 for v in values):
        raise ConfigurationError(f"--eta-sweep: values must lie in [0, 1], got {spec!r}")
    return values


def cmd_eval(cfg, checkpoint=None, manifest=None, eta_sweep=None):
    etas = _eta_values(eta_sweep, cfg.eta)
    ckpt = _checkpoint_path(cfg, checkpoint)
    test_path = _require(manifest or cfg.test_manifest, "data.test_manifest")
    set_deterministic(cfg.seed, cfg.deterministic)
    g, d = _model_for(cfg, ckpt)
    test_set = _load_set(test_path, cfg)
    out = cfg.output_dir / "eval"
    for eta in etas:
        vector = score_dataset(g, d, test_set, eta, aggregate=cfg.aggregate)
        report = evaluate(vector, cfg.threshold_policy)
        target = out if eta_sweep is None else out / f"eta_{eta:g}"
        emit_report(report, target, vector)
        print(f"eta={eta:g}  AUC={report.auc:.4f}  recall={report.recall:.4f}  "
              f"threshold={report.threshold:.4f} ({report.threshold_policy})")
        for tag, r in report.per_class_recall.items():
            print(f"    recall[{tag}] = {r:.4f}")
    print(f"reports in {out}")


def cmd_score(cfg, checkpoint=None, manifest=None):
    ckpt = _checkpoint_path(cfg, checkpoint)
    path = _require(manifest or cfg.test_manifest, "data.test_manifest")
    set_deterministic(cfg.seed, cfg.deterministic)
    g, d = _model_for(cfg, ckpt)
    vector = score_dataset(g, d, _load_set(path, cfg), cfg.eta, aggregate=cfg.aggregate)
    out = cfg.output_dir / "scores"
    out.mkdir(parents=True, exist_ok=True)
    write_scores(vector, out / "scores.csv")
    print(f"{len(vector)} scores written to {out / 'scores.csv'}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        if args.command == "print-config":
            sys.stdout.write(cfg.to_yaml())
        elif args.command == "prepare":
            cmd_prepare(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.manifest, args.eta_sweep)
        else:
            cmd_score(cfg, args.checkpoint, args.manifest)
    except NonFiniteError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, MetricError, WiringError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, BatchLoadError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
