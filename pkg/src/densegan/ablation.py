"""Attention and spectral-norm ablations on a fixed train/test pair.

Each variant differs from the full model in a single flag; everything else
(seed, data order, schedule) is shared, so AUC deltas isolate that flag.
"""

import dataclasses
import json
from pathlib import Path

from .errors import NonFiniteError
from .evaluation import evaluate, score_dataset
from .training import train

VARIANTS = ("full", "no_attention", "no_spectral_norm")


def variant_configs(gen_cfg, disc_cfg, name):
    if name == "full":
        return gen_cfg, disc_cfg
    if name == "no_attention":
        return gen_cfg, dataclasses.replace(disc_cfg, attention=False)
    if name == "no_spectral_norm":
        return (dataclasses.replace(gen_cfg, spectral_norm=False),
                dataclasses.replace(disc_cfg, spectral_norm=False))
    raise ValueError(f"unknown ablation variant {name!r}; choose from {VARIANTS}")


def run_ablation(gen_cfg, disc_cfg, train_cfg, train_set, test_set, variants=VARIANTS, out_dir=None,
                 reuse=None):
    """Train and evaluate every variant; returns a JSON-ready dict.

    ``reuse`` maps a variant name to an already trained ``TrainState`` so a
    run made elsewhere (e.g. the full smoke model) is not repeated. The
    ``delta_auc`` of a variant is its AUC minus the full model's. A variant
    whose training diverges is recorded with ``"diverged"`` and no AUC
    instead of aborting the whole comparison.
    """
    reuse = reuse or {}
    results = {}
    for name in variants:
        g, d = variant_configs(gen_cfg, disc_cfg, name)
        state = reuse.get(name)
        if state is None:
            try:
                state = train(g, d, train_cfg, train_set,
                              out_dir=None if out_dir is None else Path(out_dir) / name)
            except NonFiniteError as exc:
                results[name] = {"auc": None, "recall": None, "diverged": str(exc)}
                continue
        report = evaluate(score_dataset(state.generator, state.discriminator, test_set, train_cfg.eta))
        results[name] = {"auc": report.auc, "recall": report.recall, "history": state.history}
    if "full" in results:
        base = results["full"]["auc"]
        for r in results.values():
            r["delta_auc"] = None if r["auc"] is None or base is None else r["auc"] - base
    summary = {"eta": train_cfg.eta, "variants": results}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
