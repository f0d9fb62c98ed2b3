"""Pretraining helpers, ablation variants and the desk-scale comparison runs."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, BackboneConfig, ClassifierHead, PretrainSchedule, pretrain
from .data import ClassDescriptionSet, Vocabulary
from .errors import ConfigurationError
from .language import DecoderConfig, build_decoder_stack
from .training import (FewShotModel, MetricsReport, RotationAux, TrainConfig, WordEmbeddingAux, evaluate,
                       make_checkpoint, save_checkpoint, stream_seeds, train_episodic)

log = logging.getLogger(__name__)

ABLATION_KINDS = ("baseline", "forward_only", "word_embedding_aux", "rotation_aux", "desc_count_sweep", "layer_sweep")
DESC_COUNTS = (1, 2, 5, 10, 15, 20, 25)
LAYER_COUNTS = (1, 2, 3, 4, 5)


def desk_decoder_config(**overrides) -> DecoderConfig:
    """Decoder width used for CPU-scale runs on synthetic worlds."""
    return replace(DecoderConfig(hidden=64, heads=4, feed_forward=256), **overrides)


def desk_train_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(lam=20.0, epochs=60, episodes_per_epoch=100), **overrides)


@dataclass
class ExperimentInputs:
    dataset: object
    descriptions: dict[int, ClassDescriptionSet]
    vocab: Vocabulary
    backbone_config: BackboneConfig
    pretrained: dict  # backbone state dict
    word_table: np.ndarray | None = None
    word_table_from_file: bool = False


@dataclass
class Variant:
    name: str
    train: TrainConfig
    decoder: DecoderConfig | None
    sweep: dict = field(default_factory=dict)


def pretrain_backbone(dataset, config: BackboneConfig, schedule: PretrainSchedule, seed: int,
                      out_dir=None) -> tuple[dict, list[float]]:
    """Fresh backbone (seeded) pretrained on the base split; returns its state dict and loss curve."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stream_seeds(seed)["init"])
        backbone = Backbone(config)
        base = dataset.subset("base")
        head = ClassifierHead(backbone.embedding_dim, len(base.classes()))
    curve = pretrain(backbone, head, base, schedule, seed=seed)
    state = copy.deepcopy(backbone.state_dict())
    if out_dir is not None:
        ckpt = make_checkpoint(FewShotModel(backbone), pretrain_curve=curve, schedule=schedule.to_dict(), seed=seed)
        save_checkpoint(ckpt, Path(out_dir) / "pretrained.pt")
    return state, curve


def random_word_table(vocab: Vocabulary, dim: int, seed: int) -> np.ndarray:
    """Stand-in word vectors N(0, 0.02^2) when no pretrained vector file is supplied."""
    return np.random.default_rng(seed).normal(0.0, 0.02, size=(len(vocab), dim)).astype(np.float32)


def ablation_variants(kind: str, train: TrainConfig, decoder: DecoderConfig) -> list[Variant]:
    if kind not in ABLATION_KINDS:
        raise ConfigurationError(f"unknown ablation kind {kind!r}; choose from {', '.join(ABLATION_KINDS)}")
    if kind == "baseline":
        return [Variant("baseline", replace(train, lam=0.0, aux="none"), None)]
    if kind == "forward_only":
        return [Variant("bidirectional", replace(train, aux="language"), replace(decoder, bidirectional=True)),
                Variant("forward_only", replace(train, aux="language"), replace(decoder, bidirectional=False))]
    if kind == "word_embedding_aux":
        return [Variant("word_embedding_aux", replace(train, aux="word_embedding"), None)]
    if kind == "rotation_aux":
        return [Variant("rotation_aux", replace(train, aux="rotation"), None)]
    if kind == "desc_count_sweep":
        return [Variant(f"descs_{n}", replace(train, aux="language", descs_per_class=n), decoder,
                        {"param": "descs_per_class", "value": n}) for n in DESC_COUNTS]
    return [Variant(f"layers_{n}", replace(train, aux="language"), replace(decoder, layers=n),
                    {"param": "decoder_layers", "value": n}) for n in LAYER_COUNTS]


def run_variant(variant: Variant, inputs: ExperimentInputs, eval_tasks: int = 600, eval_seed: int | None = None,
                out_dir=None) -> MetricsReport:
    """Train one variant from the shared pretrained backbone and evaluate it on the novel split."""
    cfg = variant.train
    seeds = stream_seeds(cfg.seed)
    backbone = Backbone(inputs.backbone_config)
    backbone.load_state_dict(inputs.pretrained)
    d = backbone.embedding_dim
    decoder, aux_head = None, None
    if cfg.aux == "language":
        if variant.decoder is None:
            raise ConfigurationError(f"variant {variant.name} uses the language branch but has no decoder config")
        table = inputs.word_table if inputs.word_table_from_file else None
        decoder = build_decoder_stack(len(inputs.vocab), d, variant.decoder, seed=seeds["init"], word_vectors=table)
    elif cfg.aux in ("word_embedding", "rotation"):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seeds["init"])
            if cfg.aux == "word_embedding":
                aux_head = WordEmbeddingAux(d, inputs.word_table.shape[1])
            else:
                aux_head = RotationAux(d)
    run_dir = Path(out_dir) / f"{variant.name}_seed{cfg.seed}" if out_dir is not None else None
    ckpt, train_report = train_episodic(cfg, backbone, inputs.dataset, inputs.descriptions, decoder, inputs.vocab,
                                        aux_head, inputs.word_table, name=variant.name, out_dir=run_dir)
    report = evaluate(ckpt, inputs.dataset, "novel", eval_tasks, cfg.n_way, cfg.k_shot, cfg.q_per_class,
                      seed=cfg.seed if eval_seed is None else eval_seed, name=variant.name)
    report.loss_curves = {k: v for k, v in train_report.loss_curves.items() if k != "steps"}
    report.config = train_report.config
    if variant.decoder is not None:
        report.config["decoder"] = variant.decoder.to_dict()
    report.seed = cfg.seed
    report.extra.update(train_report.extra)
    report.extra.update(variant.sweep)
    if run_dir is not None:
        report.save(run_dir, "report")
    log.info("%s seed %d: %s", variant.name, cfg.seed, report.summary())
    return report


def run_ablation(kind: str, train: TrainConfig, decoder: DecoderConfig, inputs_for_seed, seeds=(0,),
                 eval_tasks: int = 600, out_dir=None) -> list[MetricsReport]:
    """Run every variant of ``kind`` for each seed.

    ``inputs_for_seed(seed)`` supplies the ExperimentInputs (typically with a
    backbone pretrained under that seed) shared by all variants of the seed.
    """
    reports = []
    for seed in seeds:
        inputs = inputs_for_seed(seed)
        for v in ablation_variants(kind, replace(train, seed=seed), decoder):
            reports.append(run_variant(v, inputs, eval_tasks, out_dir=out_dir))
    return reports
