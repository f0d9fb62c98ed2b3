"""Joint episodic training, checkpoints and few-shot evaluation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Augmenter, Backbone, BackboneConfig, encode, to_tensor
from .data import ClassDescriptionSet, EpisodeSampler, Vocabulary, select_descriptions
from .errors import ConfigurationError, DivergenceError, EpisodeError
from .language import DecoderConfig, DecoderStack, LanguageLossTerms, language_loss_terms
from .proto import Temperature, cosine_matrix, episodic_loss_from_logits

log = logging.getLogger(__name__)

AUX_KINDS = ("language", "word_embedding", "rotation", "none")
CHECKPOINT_FORMAT = "protolang-checkpoint"
CHECKPOINT_VERSION = 1
STREAMS = ("episodes", "augment", "dropout", "init", "aux", "validation")


@dataclass
class TrainConfig:
    lam: float = 5.0
    n_way: int = 5
    k_shot: int = 1
    q_per_class: int = 15
    episodes_per_epoch: int = 100
    epochs: int = 600
    lr: float = 5e-4
    tau_init: float = 1.0
    descs_per_class: int = 20
    seed: int = 0
    val_tasks: int = 200
    loss_norm: str = "per-description"
    aux: str = "language"
    augment: bool = True

    def __post_init__(self):
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ConfigurationError("lambda must be a finite non-negative number")
        if self.aux not in AUX_KINDS:
            raise ConfigurationError(f"unknown auxiliary task {self.aux!r}")
        if self.loss_norm not in ("per-description", "paper-sum"):
            raise ConfigurationError(f"unknown loss normalization {self.loss_norm!r}")
        if min(self.n_way, self.k_shot, self.epochs, self.episodes_per_epoch) < 1 or self.q_per_class < 1:
            raise ConfigurationError("episode sizes and schedule lengths must be positive")


def stream_seeds(seed: int) -> dict[str, int]:
    """Independent seeds for each random stream of a run."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(STREAMS, children)}


def joint_loss(l_epi, l_aux, lam: float):
    """L_epi + lambda * L_aux, refusing non-finite inputs."""
    for name, v in (("L_epi", l_epi), ("L_aux", l_aux)):
        value = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise DivergenceError(f"{name} is {value}")
    return l_epi + lam * l_aux


# --- auxiliary tasks used by the ablations ------------------------------------

class WordEmbeddingAux(nn.Module):
    """Regress each hybrid prototype onto the mean word vector of its class's descriptions."""

    def __init__(self, embedding_dim: int, word_dim: int):
        super().__init__()
        self.proj = nn.Linear(embedding_dim, word_dim)

    def forward(self, prototypes: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        return (1.0 - F.cosine_similarity(self.proj(prototypes), targets, dim=-1, eps=1e-8)).mean()


def class_word_targets(descriptions: Mapping[int, ClassDescriptionSet], table: np.ndarray) -> dict[int, torch.Tensor]:
    out = {}
    for c, ds in descriptions.items():
        toks = [t for seq in ds.descriptions for t in seq.tokens if t >= 4]
        if toks:
            out[c] = torch.as_tensor(table[toks].mean(axis=0), dtype=torch.float32)
    return out


class RotationAux(nn.Module):
    """4-way rotation prediction (0, 90, 180, 270 degrees) from image embeddings."""

    def __init__(self, embedding_dim: int):
        super().__init__()
        self.fc = nn.Linear(embedding_dim, 4)

    def forward(self, embeddings, labels):
        return F.cross_entropy(self.fc(embeddings), labels)


def rotate_images(x: torch.Tensor, quarter_turns: torch.Tensor) -> torch.Tensor:
    """Rotate each (C, H, W) image counter-clockwise by ``quarter_turns[i] * 90`` degrees."""
    return torch.stack([torch.rot90(img, int(k), dims=(1, 2)) for img, k in zip(x, quarter_turns)])


# --- model container and checkpoints --------------------------------------------

class FewShotModel(nn.Module):
    def __init__(self, backbone: Backbone, tau_init: float = 1.0, decoder: DecoderStack | None = None,
                 aux_head: nn.Module | None = None):
        super().__init__()
        self.backbone = backbone
        self.temperature = Temperature(tau_init)
        self.decoder = decoder
        self.aux_head = aux_head

    def classify_embeddings(self, query, prototypes):
        return self.temperature.tau * cosine_matrix(query, prototypes)


def make_checkpoint(model: FewShotModel, train_config: TrainConfig | None = None, vocab: Vocabulary | None = None,
                    **meta) -> dict:
    state = {"backbone": copy.deepcopy(model.backbone.state_dict()),
             "temperature": copy.deepcopy(model.temperature.state_dict())}
    dec_cfg = None
    if model.decoder is not None:
        state["decoder"] = copy.deepcopy(model.decoder.state_dict())
        dec_cfg = model.decoder.config.to_dict()
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "backbone_config": asdict(model.backbone.config),
        "decoder_config": dec_cfg,
        "embedding_dim": model.backbone.embedding_dim,
        "vocab": vocab.words() if vocab is not None else None,
        "train_config": asdict(train_config) if train_config is not None else None,
        "state": state,
        "meta": meta,
    }


def save_checkpoint(ckpt: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt, path)
    return path


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a protolang checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def strip_language(ckpt: dict) -> dict:
    """Copy of a checkpoint with the language branch removed."""
    out = dict(ckpt)
    out["state"] = {k: v for k, v in ckpt["state"].items() if k != "decoder"}
    out["decoder_config"] = None
    return out


def model_from_checkpoint(ckpt: dict) -> tuple[FewShotModel, Vocabulary | None]:
    backbone = Backbone(BackboneConfig(**ckpt["backbone_config"]))
    backbone.load_state_dict(ckpt["state"]["backbone"])
    vocab = Vocabulary(ckpt["vocab"]) if ckpt.get("vocab") is not None else None
    decoder = None
    if ckpt.get("decoder_config") is not None and "decoder" in ckpt["state"]:
        if vocab is None:
            raise ConfigurationError("checkpoint has a decoder but no vocabulary")
        decoder = DecoderStack(len(vocab), ckpt["embedding_dim"], DecoderConfig(**ckpt["decoder_config"]))
        decoder.load_state_dict(ckpt["state"]["decoder"])
    model = FewShotModel(backbone, decoder=decoder)
    model.temperature.load_state_dict(ckpt["state"]["temperature"])
    model.eval()
    return model, vocab


# --- reports --------------------------------------------------------------------

def confidence_halfwidth(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / math.sqrt(len(values)))


@dataclass
class MetricsReport:
    name: str
    accuracies: list[float] = field(default_factory=list)
    loss_curves: dict[str, list[float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    @property
    def ci95(self) -> float:
        return confidence_halfwidth(self.accuracies)

    @property
    def n_tasks(self) -> int:
        return len(self.accuracies)

    def summary(self) -> str:
        return f"acc: {100 * self.mean:.2f} ± {100 * self.ci95:.2f} (95% CI, {self.n_tasks} tasks)"

    def to_dict(self) -> dict:
        return {"name": self.name, "mean": self.mean, "ci95": self.ci95, "n_tasks": self.n_tasks,
                "accuracies": list(self.accuracies), "loss_curves": self.loss_curves,
                "config": self.config, "seed": self.seed, "extra": self.extra}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["name"], list(d.get("accuracies", [])), dict(d.get("loss_curves", {})),
                   dict(d.get("config", {})), d.get("seed"), dict(d.get("extra", {})))

    def save(self, out_dir, stem: str | None = None) -> Path:
        """Write ``<stem>.json`` plus ``<stem>_curves.csv`` with the per-epoch curves."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or self.name
        path = out_dir / f"{stem}.json"
        path.write_text(json.dumps(self.to_dict(), indent=1, default=_jsonable) + "\n")
        curves = {k: v for k, v in self.loss_curves.items() if k != "steps"}
        if curves:
            n = max(len(v) for v in curves.values())
            with (out_dir / f"{stem}_curves.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", *curves])
                for i in range(n):
                    w.writerow([i, *(v[i] if i < len(v) else "" for v in curves.values())])
        return path

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


# --- evaluation -------------------------------------------------------------------

def _episode_accuracy(model: FewShotModel, emb: torch.Tensor, ep, index_of: dict) -> float:
    sup = emb[[index_of[i] for i in ep.support_indices().tolist()]]
    qry = emb[[index_of[i] for i in ep.query_indices().tolist()]]
    protos = sup.view(ep.n_way, ep.k_shot, -1).mean(dim=1)
    pred = model.classify_embeddings(qry, protos).argmax(dim=1)
    return float((pred == torch.as_tensor(ep.query_slots())).double().mean())


def evaluate(model: FewShotModel | dict | str | Path, dataset, split: str = "novel", n_tasks: int = 600,
             n_way: int = 5, k_shot: int = 1, q_per_class: int = 15, seed: int = 0,
             name: str = "evaluate") -> MetricsReport:
    """Accuracy over ``n_tasks`` few-shot tasks sampled from ``split``.

    Only the backbone and temperature are used; the language branch is never
    consulted. Images are embedded once in evaluation mode and tasks are
    assembled from the cached embeddings.
    """
    if not isinstance(model, FewShotModel):
        ckpt = model if isinstance(model, dict) else load_checkpoint(model)
        model, _ = model_from_checkpoint(ckpt)
    view = dataset.subset(split) if split is not None else dataset
    if len(view.classes()) < n_way:
        raise EpisodeError(f"split {split!r} has {len(view.classes())} classes, need {n_way}")
    emb = encode(view.take(np.arange(len(view))), model.backbone)
    index_of = {i: i for i in range(len(view))}
    sampler = EpisodeSampler(view, None, n_way, k_shot, q_per_class, 0, seed)
    with torch.no_grad():
        accs = [_episode_accuracy(model, emb, next(sampler), index_of) for _ in range(n_tasks)]
    return MetricsReport(name, accs, seed=seed,
                         extra={"split": split, "n_way": n_way, "k_shot": k_shot, "q_per_class": q_per_class})


# --- training ---------------------------------------------------------------------

@dataclass
class StepLog:
    epi: float
    lang: float
    train: float


def _check_descriptions(descriptions, classes):
    if descriptions is None or not any(len(descriptions.get(c, ())) for c in classes):
        raise ConfigurationError("language loss requested with lambda > 0 but no class descriptions are available")


def train_episodic(config: TrainConfig, backbone: Backbone, dataset, descriptions: Mapping[int, ClassDescriptionSet]
                   | None = None, decoder: DecoderStack | None = None, vocab: Vocabulary | None = None,
                   aux_head: nn.Module | None = None, word_table: np.ndarray | None = None,
                   name: str = "train", out_dir=None) -> tuple[dict, MetricsReport]:
    """Episodic training of the backbone (+ auxiliary branch) on base classes.

    Returns the best-validation checkpoint and a report holding loss and
    validation curves. ``dataset`` may contain every split; only base and
    validation classes are ever read. ``descriptions`` must be tokenized.
    """
    seeds = stream_seeds(config.seed)
    base = dataset.subset("base")
    val = dataset.subset("val") if dataset.classes("val") else None
    aux = config.aux
    if aux == "language" and decoder is None:
        aux = "none"
    if aux == "word_embedding" and (aux_head is None or word_table is None):
        raise ConfigurationError("word_embedding auxiliary needs an aux head and a word-vector table")
    if aux == "rotation" and aux_head is None:
        raise ConfigurationError("rotation auxiliary needs an aux head")
    base_descs = None
    if descriptions is not None:
        base_descs = select_descriptions({c: descriptions[c] for c in base.classes() if c in descriptions},
                                         config.descs_per_class, seeds["episodes"])
    if aux in ("language", "word_embedding") and config.lam > 0:
        _check_descriptions(base_descs, base.classes())
    targets = class_word_targets(base_descs, word_table) if aux == "word_embedding" else None

    model = FewShotModel(backbone, config.tau_init, decoder if aux == "language" else None,
                         aux_head if aux in ("word_embedding", "rotation") else None)
    torch.manual_seed(seeds["dropout"])
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    episodes = EpisodeSampler(base, base_descs, config.n_way, config.k_shot, config.q_per_class,
                              config.descs_per_class if aux == "language" else 0, seeds["episodes"])
    augment = Augmenter(seeds["augment"], flip=dataset.allow_flip) if config.augment else None
    aux_gen = torch.Generator().manual_seed(seeds["aux"])
    n, k, q = config.n_way, config.k_shot, config.q_per_class
    labels = torch.arange(n).repeat_interleave(q)

    curves = {"epi": [], "lang": [], "train": [], "val_accuracy": [], "tau": []}
    steps: list[StepLog] = []
    best_acc, best_state, best_epoch = -1.0, None, -1
    started = time.time()
    for epoch in range(config.epochs):
        model.train()
        sums = np.zeros(3)
        for _ in range(config.episodes_per_epoch):
            ep = next(episodes)
            idx = np.concatenate([ep.support_indices(), ep.query_indices()])
            x = to_tensor(base.take(idx))
            if augment is not None:
                x = augment(x)
            emb = model.backbone(x)
            sup = emb[: n * k].view(n, k, -1)
            qry = emb[n * k:].view(n, q, -1)
            l_epi = episodic_loss_from_logits(model.classify_embeddings(qry.reshape(n * q, -1), sup.mean(dim=1)),
                                              labels)
            if aux == "language":
                terms: LanguageLossTerms = language_loss_terms(sup, qry, ep.descriptions, model.decoder)
                l_aux = terms.total(config.loss_norm)
            elif aux == "word_embedding":
                hybrid = torch.cat([sup, qry], dim=1).mean(dim=1)
                keep = [s for s, c in enumerate(ep.class_ids) if c in targets]
                l_aux = model.aux_head(hybrid[keep], torch.stack([targets[ep.class_ids[s]] for s in keep])) \
                    if keep else emb.sum() * 0.0
            elif aux == "rotation":
                turns = torch.randint(0, 4, (len(x),), generator=aux_gen)
                l_aux = model.aux_head(model.backbone(rotate_images(x, turns)), turns)
            else:
                l_aux = torch.zeros(())
            l_train = joint_loss(l_epi, l_aux, config.lam)
            opt.zero_grad()
            l_train.backward()
            opt.step()
            rec = StepLog(float(l_epi.detach()), float(l_aux.detach()), float(l_train.detach()))
            steps.append(rec)
            sums += (rec.epi, rec.lang, rec.train)
        means = sums / config.episodes_per_epoch
        curves["epi"].append(means[0])
        curves["lang"].append(means[1])
        curves["train"].append(means[2])
        curves["tau"].append(float(model.temperature.tau.detach()))
        if val is not None and len(val.classes()) >= n:
            acc = evaluate(model, val, None, config.val_tasks, n, k, q, seeds["validation"]).mean
        else:
            acc = float("nan")
        curves["val_accuracy"].append(acc)
        if best_state is None or acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_state = make_checkpoint(model, config, vocab)
        log.info("%s epoch %d L_epi %.4f L_lang %.4f L_train %.4f val %.4f", name, epoch, *means, acc)
    model.eval()
    best_state["meta"].update(epoch=best_epoch, val_accuracy=best_acc)
    report = MetricsReport(
        name, [], {**curves, "steps": [asdict(s) for s in steps]}, asdict(config), config.seed,
        {"best_epoch": best_epoch, "best_val_accuracy": best_acc, "wall_clock_s": time.time() - started,
         "episodes_total": config.epochs * config.episodes_per_epoch, "aux": aux,
         "bidirectional": bool(decoder.bidirectional) if decoder is not None and aux == "language" else None},
    )
    if out_dir is not None:
        save_checkpoint(best_state, Path(out_dir) / f"{name}.pt")
        report.save(out_dir, name)
    return best_state, report
