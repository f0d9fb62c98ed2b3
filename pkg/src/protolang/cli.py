"""Command-line entry point: ``protolang <command> ...``.

Exit codes: 0 success, 2 configuration/usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .backbone import BackboneConfig, encode
from .data import (build_vocabulary, detokenize, load_dataset, save_dataset, tokenize_descriptions, Vocabulary)
from .errors import ConfigurationError, EpisodeError
from .experiments import (ExperimentInputs, Variant, pretrain_backbone, random_word_table, run_ablation,
                          run_variant, ABLATION_KINDS)
from .language import build_decoder_stack, generate_description, load_word_vectors
from .report import emit_report
from .training import (MetricsReport, evaluate, load_checkpoint, model_from_checkpoint, save_checkpoint,
                       stream_seeds, train_episodic)
from .worlds import generate_benchmark

log = logging.getLogger("protolang")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(f"{self.prog}: {message}")


def _default_seed() -> int:
    env = os.environ.get("PROTOLANG_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigurationError(f"PROTOLANG_SEED must be an integer, got {env!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="protolang", description="Few-shot classification with class-level description decoding.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, out=True):
        sp.add_argument("--config", help="INI file with [train]/[backbone]/[decoder]/[pretrain]/[data] sections")
        sp.add_argument("--seed", type=int, default=None, help="defaults to $PROTOLANG_SEED or 0")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen-data", help="generate a synthetic shapes-in-relations dataset")
    common(g, data=False)
    for flag in ("--n-base", "--n-val", "--n-novel", "--images-per-class", "--n-descriptions", "--resolution"):
        g.add_argument(flag, type=int)

    pt = sub.add_parser("pretrain", help="supervised pretraining on base classes")
    common(pt)
    pt.add_argument("--arch", choices=["conv4", "resnet12", "resnet18"])
    pt.add_argument("--epochs", type=int)

    def train_flags(sp):
        sp.add_argument("--pretrained", help="checkpoint from `pretrain`")
        sp.add_argument("--no-pretrain", action="store_true", help="start episodic training from random init")
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--descs-per-class", type=int)
        sp.add_argument("--decoder-layers", type=int)
        sp.add_argument("--loss-norm", choices=["per-description", "paper-sum"])
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--episodes-per-epoch", type=int)
        sp.add_argument("--word-vectors", help="text file of `token v1 ... vN` rows")

    t = sub.add_parser("train", help="episodic training with the language branch")
    common(t)
    train_flags(t)
    t.add_argument("--no-language", action="store_true")
    t.add_argument("--forward-only", action="store_true")

    e = sub.add_parser("evaluate", help="few-shot evaluation of a checkpoint")
    common(e, out=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out")
    e.add_argument("--split", default="novel", choices=["base", "val", "novel"])
    e.add_argument("--n-tasks", type=int, default=600)
    e.add_argument("--n-way", type=int, default=5)
    e.add_argument("--k-shot", type=int, default=1)
    e.add_argument("--q-per-class", type=int, default=15)

    a = sub.add_parser("ablate", help="run an ablation family and emit its report")
    common(a)
    train_flags(a)
    a.add_argument("--kind", required=True, choices=ABLATION_KINDS)
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--n-tasks", type=int, default=600)

    d = sub.add_parser("describe", help="generate a class-level description from a trained checkpoint")
    common(d, out=False)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--class-id", type=int, required=True)
    d.add_argument("--max-len", type=int, default=30)

    r = sub.add_parser("report", help="aggregate saved run reports into tables and plots")
    r.add_argument("--runs", nargs="+", required=True, help="report JSON files or directories")
    r.add_argument("--out", required=True)
    r.add_argument("--title")
    return p


# --- helpers ----------------------------------------------------------------------

def _resolve(args) -> cfgmod.RunConfig:
    seed = args.seed if getattr(args, "seed", None) is not None else _default_seed()
    run = cfgmod.RunConfig(args.command, out=getattr(args, "out", None), data=getattr(args, "data", None), seed=seed)
    explicit = {}
    if getattr(args, "config", None):
        explicit = cfgmod.read_overrides(args.config)
        cfgmod.apply_overrides(run, explicit)
    run.train = dataclasses.replace(run.train, seed=seed)
    gen = {k: getattr(args, k) for k in ("n_base", "n_val", "n_novel", "images_per_class", "n_descriptions",
                                          "resolution") if getattr(args, k, None) is not None}
    run.generate = dataclasses.replace(run.generate, **gen)
    tr = {}
    for flag, key in (("lam", "lam"), ("descs_per_class", "descs_per_class"), ("loss_norm", "loss_norm"),
                      ("epochs", "epochs"), ("episodes_per_epoch", "episodes_per_epoch")):
        if args.command in ("train", "ablate") and getattr(args, flag, None) is not None:
            tr[key] = getattr(args, flag)
    if getattr(args, "no_language", False):
        tr["aux"] = "none"
    run.train = dataclasses.replace(run.train, **tr)
    if getattr(args, "decoder_layers", None) is not None:
        run.decoder = dataclasses.replace(run.decoder, layers=args.decoder_layers)
    if getattr(args, "forward_only", False):
        run.decoder = dataclasses.replace(run.decoder, bidirectional=False)
    if args.command == "pretrain":
        if args.arch:
            run.backbone = dataclasses.replace(run.backbone, architecture=args.arch)
        if args.epochs is not None:
            run.pretrain = dataclasses.replace(run.pretrain, epochs=args.epochs)
    run.options["lam_explicit"] = getattr(args, "lam", None) is not None or "lam" in explicit.get("train", {})
    return run


def _load_data(run):
    dataset, raw = load_dataset(run.data)
    manifest = Path(run.data) / "manifest.json"
    meta = json.loads(manifest.read_text()) if manifest.exists() else {}
    run.backbone = dataclasses.replace(run.backbone, resolution=dataset.image_shape[0], channels=dataset.image_shape[2])
    if not run.options.get("lam_explicit") and meta.get("generator") == "synthetic-worlds":
        run.train = dataclasses.replace(run.train, lam=20.0)
    return dataset, raw


def _vocab_and_descs(dataset, raw, max_len):
    base = {c: raw[c] for c in dataset.classes("base") if c in raw and len(raw[c])}
    if not base:
        return None, None
    vocab = build_vocabulary(base)
    return vocab, tokenize_descriptions({c: raw[c] for c in dataset.classes() if c in raw}, vocab, max_len)


def _pretrained_state(run, args, dataset, out):
    if getattr(args, "pretrained", None):
        ckpt = load_checkpoint(args.pretrained)
        if BackboneConfig(**ckpt["backbone_config"]) != run.backbone:
            raise ConfigurationError("pretrained backbone config does not match the dataset/backbone settings")
        return ckpt["state"]["backbone"]
    if getattr(args, "no_pretrain", False):
        return None
    state, _ = pretrain_backbone(dataset, run.backbone, run.pretrain, run.seed, out_dir=out)
    return state


def _word_table(args, vocab, dim, seed):
    if getattr(args, "word_vectors", None):
        table, found = load_word_vectors(args.word_vectors, vocab, dim, seed)
        log.info("word vectors: %d/%d vocabulary tokens found", found, len(vocab) - 4)
        return table, True
    return random_word_table(vocab, dim, seed), False


# --- commands -----------------------------------------------------------------------

def cmd_gen_data(run, args):
    out = Path(run.out)
    cfgmod.write_config(run, out / "config.ini")
    g = run.generate
    bench = generate_benchmark(g.n_base, g.n_val, g.n_novel, g.images_per_class, run.seed, g.n_descriptions,
                               g.resolution)
    save_dataset(out, bench.dataset, {c: d.texts for c, d in bench.descriptions.items()})
    (out / "manifest.json").write_text(json.dumps(bench.manifest, indent=1) + "\n")
    print(f"wrote {len(bench.dataset)} images in {len(bench.specs)} classes to {out}")


def cmd_pretrain(run, args):
    out = Path(run.out)
    dataset, _ = _load_data(run)
    cfgmod.write_config(run, out / "config.ini")
    _, curve = pretrain_backbone(dataset, run.backbone, run.pretrain, run.seed, out_dir=out)
    (out / "pretrain_curve.csv").write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)))
    print(f"pretrained {run.backbone.architecture}: loss {curve[0]:.4f} -> {curve[-1]:.4f}; {out / 'pretrained.pt'}")


def cmd_train(run, args):
    out = Path(run.out)
    dataset, raw = _load_data(run)
    cfgmod.write_config(run, out / "config.ini")
    vocab, descs = _vocab_and_descs(dataset, raw, run.decoder.max_len)
    if vocab is not None:
        vocab.save(out / "vocab.txt")
    state = _pretrained_state(run, args, dataset, out)
    seeds = stream_seeds(run.train.seed)
    from .backbone import Backbone

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seeds["init"])
        backbone = Backbone(run.backbone)
    if state is not None:
        backbone.load_state_dict(state)
    decoder = None
    if run.train.aux == "language":
        if vocab is None:
            raise ConfigurationError("dataset has no base-class descriptions; use --no-language")
        table, from_file = _word_table(args, vocab, run.decoder.word_dim, seeds["init"])
        decoder = build_decoder_stack(len(vocab), backbone.embedding_dim, run.decoder, seed=seeds["init"],
                                      word_vectors=table if from_file else None)
    ckpt, report = train_episodic(run.train, backbone, dataset, descs, decoder, vocab, name="train", out_dir=out)
    print(f"best val accuracy {100 * report.extra['best_val_accuracy']:.2f}% at epoch {report.extra['best_epoch']};"
          f" checkpoint {out / 'train.pt'}")


def cmd_evaluate(run, args):
    dataset, _ = _load_data(run)
    if args.out:
        cfgmod.write_config(run, Path(args.out) / "config.ini")
    report = evaluate(args.checkpoint, dataset, args.split, args.n_tasks, args.n_way, args.k_shot,
                      args.q_per_class, seed=run.seed, name=Path(args.checkpoint).stem)
    print(report.summary())
    if args.out:
        report.save(args.out, "evaluate")
        emit_report([report], args.out)


def cmd_ablate(run, args):
    out = Path(run.out)
    dataset, raw = _load_data(run)
    cfgmod.write_config(run, out / "config.ini")
    vocab, descs = _vocab_and_descs(dataset, raw, run.decoder.max_len)
    if vocab is None:
        raise ConfigurationError("ablations need base-class descriptions")
    vocab.save(out / "vocab.txt")
    seeds = args.seeds if args.seeds else [run.seed]

    def inputs_for(seed):
        r = dataclasses.replace(run, seed=seed)
        state = _pretrained_state(r, args, dataset, out / f"pretrain_seed{seed}")
        if state is None:
            from .backbone import Backbone

            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(stream_seeds(seed)["init"])
                state = Backbone(run.backbone).state_dict()
        table, from_file = _word_table(args, vocab, run.decoder.word_dim, stream_seeds(seed)["init"])
        return ExperimentInputs(dataset, descs, vocab, run.backbone, state, table, from_file)

    reports = run_ablation(args.kind, run.train, run.decoder, inputs_for, seeds, args.n_tasks, out_dir=out)
    paths = emit_report(reports, out, title=f"ablation: {args.kind}")
    print(paths["table"].read_text(), end="")


def cmd_describe(run, args):
    dataset, _ = _load_data(run)
    model, vocab = model_from_checkpoint(load_checkpoint(args.checkpoint))
    if model.decoder is None:
        raise ConfigurationError("checkpoint has no language branch")
    if args.class_id not in dataset.split_of:
        raise ConfigurationError(f"unknown class id {args.class_id}")
    emb = encode(dataset.take(dataset.indices_of(args.class_id)), model.backbone)
    seq = generate_description(emb.mean(dim=0), model.decoder, args.max_len, vocab)
    print(f"class {args.class_id} ({dataset.class_names[args.class_id]}): {seq.raw_text}")


def cmd_report(run, args):
    files = []
    for p in map(Path, args.runs):
        files += sorted(p.rglob("*.json")) if p.is_dir() else [p]
    reports = []
    for f in files:
        d = json.loads(f.read_text())
        if isinstance(d, dict) and "accuracies" in d and d["accuracies"]:
            reports.append(MetricsReport.from_dict(d))
    paths = emit_report(reports, args.out, args.title)
    print(paths["table"].read_text(), end="")


COMMAND_FUNCS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train, "evaluate": cmd_evaluate,
                 "ablate": cmd_ablate, "describe": cmd_describe, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        run = _resolve(args)
        COMMAND_FUNCS[args.command](run, args)
    except (ConfigurationError, EpisodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        log.debug("run failed", exc_info=True)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
