"""Desk-scale baseline / RS / forward-only comparison on synthetic worlds, cached on disk.

Run ``python tests/desk.py`` to fill the cache ahead of the acceptance suite. Results are keyed by a hash
of the experiment settings and the package sources, and each (seed, variant) is stored as soon as it
finishes so an interrupted run resumes where it stopped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import torch

import protolang
from protolang.backbone import BackboneConfig, PretrainSchedule, encode
from protolang.data import build_vocabulary, tokenize_descriptions
from protolang.experiments import (ExperimentInputs, Variant, desk_decoder_config, desk_train_config,
                                   pretrain_backbone, run_variant)
from protolang.language import generate_description
from protolang.training import load_checkpoint, model_from_checkpoint
from protolang.worlds import RELATION_KEYWORD, generate_benchmark

log = logging.getLogger("desk")

SETTINGS = {
    "n_base": 30, "n_val": 10, "n_novel": 10, "images_per_class": 50, "resolution": 32, "data_seed": 0,
    "seeds": [0, 1, 2], "eval_tasks": 600, "lam": 20.0, "epochs": 60, "episodes_per_epoch": 100,
    "tau_init": 10.0, "pretrain_epochs": 100,
}
VARIANTS = ("baseline", "rs", "forward_only")
# modules that cannot change training or evaluation numbers
PRESENTATION_MODULES = {"__init__.py", "cli.py", "config.py", "plotting.py", "report.py"}
CACHE_ROOT = Path(os.environ.get("PROTOLANG_DESK_CACHE", Path(__file__).resolve().parents[1] / ".desk_cache"))


def cache_dir(settings=None) -> Path:
    settings = settings or SETTINGS
    h = hashlib.sha256(json.dumps(settings, sort_keys=True).encode())
    for src in sorted(Path(protolang.__file__).parent.glob("*.py")):
        if src.name in PRESENTATION_MODULES:
            continue
        h.update(src.name.encode() + src.read_bytes())
    return CACHE_ROOT / h.hexdigest()[:16]


def _variants(seed: int, s: dict) -> dict[str, Variant]:
    train = desk_train_config(lam=s["lam"], epochs=s["epochs"], episodes_per_epoch=s["episodes_per_epoch"],
                              tau_init=s["tau_init"], seed=seed)
    dec = desk_decoder_config()
    return {
        "baseline": Variant("baseline", replace(train, lam=0.0, aux="none"), None),
        "rs": Variant("rs", replace(train, aux="language"), replace(dec, bidirectional=True)),
        "forward_only": Variant("forward_only", replace(train, aux="language"), replace(dec, bidirectional=False)),
    }


def relation_token_rate(checkpoint_path, bench, split: str = "base") -> float:
    """Share of greedy descriptions (one per class, from the class-mean embedding) naming the class relation."""
    model, vocab = model_from_checkpoint(load_checkpoint(checkpoint_path))
    hits, classes = 0, bench.dataset.classes(split)
    with torch.no_grad():
        for c in classes:
            emb = encode(bench.dataset.take(bench.dataset.indices_of(c)), model.backbone)
            text = generate_description(emb.mean(dim=0), model.decoder, vocab=vocab).raw_text
            hits += RELATION_KEYWORD[bench.specs[c].relation] in text.split()
    return hits / len(classes)


def run(settings=None, seeds=None) -> dict:
    """Return ``{variant: {seed: result}}``, computing and caching whatever is missing."""
    s = settings or SETTINGS
    out = cache_dir(s)
    out.mkdir(parents=True, exist_ok=True)
    (out / "settings.json").write_text(json.dumps(s, indent=1) + "\n")
    results: dict[str, dict[int, dict]] = {v: {} for v in VARIANTS}
    bench = None
    for seed in seeds if seeds is not None else s["seeds"]:
        todo = [v for v in VARIANTS if not (out / f"{v}_seed{seed}.json").exists()]
        if todo:
            if bench is None:
                bench = generate_benchmark(s["n_base"], s["n_val"], s["n_novel"], s["images_per_class"],
                                           s["data_seed"], resolution=s["resolution"])
                base = {c: d for c, d in bench.descriptions.items() if bench.dataset.split_of[c] == "base"}
                vocab = build_vocabulary(base)
                descs = tokenize_descriptions(bench.descriptions, vocab)
            bcfg = BackboneConfig(resolution=s["resolution"])
            t0 = time.time()
            state, _ = pretrain_backbone(bench.dataset, bcfg, PretrainSchedule(epochs=s["pretrain_epochs"]), seed)
            log.info("seed %d pretrained in %.0fs", seed, time.time() - t0)
            inputs = ExperimentInputs(bench.dataset, descs, vocab, bcfg, state)
            variants = _variants(seed, s)
            for v in todo:
                t0 = time.time()
                report = run_variant(variants[v], inputs, s["eval_tasks"], out_dir=out / "runs")
                res = {"variant": v, "seed": seed, "mean": report.mean, "ci95": report.ci95,
                       "accuracies": report.accuracies, "best_epoch": report.extra.get("best_epoch"),
                       "val_accuracy": report.loss_curves.get("val_accuracy"), "seconds": time.time() - t0}
                if v != "baseline":
                    ckpt = out / "runs" / f"{v}_seed{seed}" / f"{v}.pt"
                    res["relation_token_rate"] = relation_token_rate(ckpt, bench)
                (out / f"{v}_seed{seed}.json").write_text(json.dumps(res) + "\n")
                log.info("%s seed %d: %.2f%% (%.0fs)", v, seed, 100 * report.mean, res["seconds"])
        for v in VARIANTS:
            results[v][seed] = json.loads((out / f"{v}_seed{seed}.json").read_text())
    return results


def cached(settings=None) -> bool:
    s = settings or SETTINGS
    out = cache_dir(s)
    return all((out / f"{v}_seed{seed}.json").exists() for v in VARIANTS for seed in s["seeds"])


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    res = run()
    for v in VARIANTS:
        accs = [100 * res[v][sd]["mean"] for sd in SETTINGS["seeds"]]
        print(v, " ".join(f"{a:.2f}" for a in accs), f"mean {sum(accs) / len(accs):.2f}")
    sys.exit(0)
