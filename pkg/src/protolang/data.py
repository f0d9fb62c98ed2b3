"""Datasets, class-level descriptions, vocabulary and episode sampling."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, EpisodeError

PAD, START, END, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
MAX_LEN = 30
SPLITS = ("base", "val", "novel")

_PUNCT = re.compile(r"[^\w\s]|_")


def normalize_text(text: str) -> list[str]:
    """Lowercase, turn punctuation into separators and split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    raw_text: str

    def __post_init__(self):
        if len(self.tokens) < 2 or self.tokens[0] != START or self.tokens[-1] != END:
            raise ValueError("token sequence must be <s> ... </s> with length >= 2")

    def __len__(self):
        return len(self.tokens)


class Vocabulary:
    """Token/index bijection with reserved indices 0-3 (pad, start, end, unknown)."""

    def __init__(self, tokens: Iterable[str]):
        self.itos: list[str] = list(RESERVED)
        for tok in tokens:
            if tok in RESERVED:
                continue
            self.itos.append(tok)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigurationError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token: str):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def words(self) -> list[str]:
        """Non-reserved tokens in index order."""
        return self.itos[len(RESERVED):]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words()) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(line for line in Path(path).read_text().splitlines() if line)


def build_vocabulary(descriptions: Iterable[str] | Mapping, min_count: int = 1) -> Vocabulary:
    """Build a vocabulary from base-class description strings.

    ``descriptions`` is either an iterable of raw strings or a mapping of
    class id to ``ClassDescriptionSet``. Tokens seen fewer than ``min_count``
    times are left out and therefore map to ``<unk>``.
    """
    if isinstance(descriptions, Mapping):
        texts = [t for ds in descriptions.values() for t in (ds.texts or [s.raw_text for s in ds.descriptions])]
    else:
        texts = list(descriptions)
    if not texts:
        raise ConfigurationError("cannot build a vocabulary from an empty description corpus")
    counts = Counter(tok for text in texts for tok in normalize_text(text))
    # first-occurrence order keeps the index assignment stable across runs
    order = list(dict.fromkeys(tok for text in texts for tok in normalize_text(text)))
    return Vocabulary(tok for tok in order if counts[tok] >= min_count)


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_LEN) -> TokenSequence:
    words = normalize_text(text)
    if not words:
        raise ValueError("cannot tokenize empty text")
    body = [vocab.index(w) for w in words[:max_len]]
    return TokenSequence((START, *body, END), text)


def detokenize(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> str:
    tokens = seq.tokens if isinstance(seq, TokenSequence) else seq
    return " ".join(vocab.itos[i] for i in tokens if i not in (PAD, START, END))


@dataclass
class ClassDescriptionSet:
    """Class-level descriptions; the same set is attached to every image of the class.

    ``texts`` holds raw strings before a vocabulary exists; ``descriptions``
    holds the tokenized form.
    """

    class_id: int
    descriptions: list[TokenSequence] = field(default_factory=list)
    texts: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.descriptions) if self.descriptions else len(self.texts)

    def tokenized(self, vocab: Vocabulary, max_len: int = MAX_LEN) -> "ClassDescriptionSet":
        texts = self.texts or [d.raw_text for d in self.descriptions]
        return ClassDescriptionSet(self.class_id, [tokenize(t, vocab, max_len) for t in texts], list(texts))


class LabeledImageDataset:
    """Images (N, H, W, C) in [0, 1] with integer labels and a split tag per class."""

    def __init__(self, images, labels, split_of: Mapping[int, str], class_names: Mapping[int, str] | None = None,
                 allow_flip: bool = True):
        images = np.asarray(images)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4 or len(images) != len(labels):
            raise ConfigurationError("images must be (N, H, W, C) with one label per image")
        unknown = set(np.unique(labels).tolist()) - set(split_of)
        if unknown:
            raise ConfigurationError(f"labels without a split tag: {sorted(unknown)}")
        bad = {s for s in split_of.values() if s not in SPLITS}
        if bad:
            raise ConfigurationError(f"unknown split tags {bad}")
        self._images = images
        self.labels = labels
        self.split_of = dict(split_of)
        self.class_names = dict(class_names) if class_names else {c: str(c) for c in split_of}
        self.allow_flip = allow_flip
        self._hashes: list[str] | None = None

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self._images.shape[1:])

    def take(self, indices) -> np.ndarray:
        """Image pixels for ``indices`` as float32 in [0, 1]."""
        x = self._images[np.asarray(indices, dtype=np.int64)]
        if x.dtype == np.uint8:
            return x.astype(np.float32) / 255.0
        return x.astype(np.float32, copy=False)

    def classes(self, split: str | None = None) -> list[int]:
        return sorted(c for c, s in self.split_of.items() if split is None or s == split)

    def indices_of(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)

    def subset(self, split: str) -> "LabeledImageDataset":
        """A view restricted to one split; no other split's pixels are reachable from it."""
        keep = set(self.classes(split))
        idx = np.flatnonzero(np.isin(self.labels, list(keep)))
        return LabeledImageDataset(
            self._images[idx], self.labels[idx], {c: split for c in keep},
            {c: self.class_names[c] for c in keep}, allow_flip=self.allow_flip,
        )

    def image_hashes(self) -> list[str]:
        if self._hashes is None:
            self._hashes = [hashlib.sha1(np.ascontiguousarray(img).tobytes()).hexdigest() for img in self._images]
        return self._hashes

    def check_disjoint_splits(self) -> None:
        seen: dict[int, str] = {}
        for c, s in self.split_of.items():
            if c in seen and seen[c] != s:
                raise ConfigurationError(f"class {c} tagged with two splits")
            seen[c] = s


@dataclass
class Episode:
    """One N-way K-shot task. Items are dataset indices with their class slot."""

    support: list[tuple[int, int]]
    queries: list[tuple[int, int]]
    class_ids: list[int]
    descriptions: list[list[TokenSequence]]

    @property
    def n_way(self) -> int:
        return len(self.class_ids)

    @property
    def k_shot(self) -> int:
        return len(self.support) // self.n_way

    def support_indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.support], dtype=np.int64)

    def query_indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.queries], dtype=np.int64)

    def query_slots(self) -> np.ndarray:
        return np.array([s for _, s in self.queries], dtype=np.int64)


def as_rng(rng_state) -> np.random.Generator:
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


def _canonical_pools(dataset: LabeledImageDataset, classes: Sequence[int]) -> dict[int, np.ndarray]:
    hashes = dataset.image_hashes()
    pools = {}
    for c in classes:
        idx = dataset.indices_of(c)
        pools[c] = np.array(sorted(idx.tolist(), key=lambda i: (hashes[i], i)), dtype=np.int64)
    return pools


def sample_episode(dataset: LabeledImageDataset, descriptions: Mapping[int, ClassDescriptionSet] | None,
                   n_way: int, k_shot: int, q_per_class: int, descs_per_class: int, rng_state,
                   split: str | None = None, _pools=None, desc_rng=None) -> Episode:
    """Sample an N-way K-shot episode.

    Images of each class are visited in a canonical order (sorted by content
    hash), so the result does not depend on how the dataset happens to be
    ordered on disk. Descriptions are drawn from ``desc_rng`` when given, so
    turning description sampling on or off leaves the image draws unchanged.
    """
    rng = as_rng(rng_state)
    drng = rng if desc_rng is None else desc_rng
    classes = dataset.classes(split)
    if len(classes) < n_way:
        raise EpisodeError(f"need {n_way} classes, split has {len(classes)}")
    pools = _pools if _pools is not None else _canonical_pools(dataset, classes)
    chosen = [classes[i] for i in rng.choice(len(classes), size=n_way, replace=False)]
    support, queries, descs = [], [], []
    for slot, c in enumerate(chosen):
        pool = pools[c]
        need = k_shot + q_per_class
        if len(pool) < need:
            raise EpisodeError(f"class {c} ({dataset.class_names.get(c, c)}) has {len(pool)} images, needs {need}")
        picked = pool[rng.choice(len(pool), size=need, replace=False)]
        support += [(int(i), slot) for i in picked[:k_shot]]
        queries += [(int(i), slot) for i in picked[k_shot:]]
        available = list(descriptions[c].descriptions) if descriptions is not None and c in descriptions else []
        if available and descs_per_class > 0:
            take = min(descs_per_class, len(available))
            descs.append([available[j] for j in drng.choice(len(available), size=take, replace=False)])
        else:
            descs.append([])
    return Episode(support, queries, chosen, descs)


class EpisodeSampler:
    """Re-entrant episode stream over a fixed split with its own RNG."""

    def __init__(self, dataset: LabeledImageDataset, descriptions, n_way, k_shot, q_per_class,
                 descs_per_class=0, seed=0, split: str | None = None):
        self.dataset = dataset
        self.descriptions = descriptions
        self.args = (n_way, k_shot, q_per_class, descs_per_class)
        self.split = split
        self.rng = as_rng(seed)
        self.desc_rng = self.rng.spawn(1)[0]
        self._pools = _canonical_pools(dataset, dataset.classes(split))

    def __iter__(self):
        return self

    def __next__(self) -> Episode:
        return sample_episode(self.dataset, self.descriptions, *self.args, self.rng, split=self.split,
                              _pools=self._pools, desc_rng=self.desc_rng)


def select_descriptions(descriptions: Mapping[int, ClassDescriptionSet], per_class: int,
                        rng_state) -> dict[int, ClassDescriptionSet]:
    """Fix each class's description pool once per run (replacement-free)."""
    rng = as_rng(rng_state)
    out = {}
    for c in sorted(descriptions):
        ds = descriptions[c]
        items = ds.descriptions
        if len(items) > per_class:
            keep = sorted(rng.choice(len(items), size=per_class, replace=False).tolist())
            items = [items[j] for j in keep]
        out[c] = ClassDescriptionSet(c, list(items), [s.raw_text for s in items])
    return out


# --- on-disk format -------------------------------------------------------
#
#   <root>/classes.json       [{"id", "name", "split"}, ...]
#   <root>/images/<name>.npy  uint8 array (n_images, H, W, 3) per class
#   <root>/descriptions.json  {"<class name>": ["description", ...], ...}
#   <root>/meta.json          {"allow_flip": bool, ...}

def save_dataset(root, dataset: LabeledImageDataset, texts: Mapping[int, Sequence[str]], meta: dict | None = None):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    classes = []
    for c in dataset.classes():
        name = dataset.class_names[c]
        imgs = dataset._images[dataset.indices_of(c)]
        if imgs.dtype != np.uint8:
            imgs = np.clip(np.rint(imgs * 255.0), 0, 255).astype(np.uint8)
        np.save(root / "images" / f"{name}.npy", imgs)
        classes.append({"id": int(c), "name": name, "split": dataset.split_of[c]})
    (root / "classes.json").write_text(json.dumps(classes, indent=1) + "\n")
    desc = {dataset.class_names[c]: list(texts.get(c, [])) for c in dataset.classes()}
    (root / "descriptions.json").write_text(json.dumps(desc, indent=1) + "\n")
    (root / "meta.json").write_text(json.dumps({"allow_flip": dataset.allow_flip, **(meta or {})}, indent=1,
                                               sort_keys=True) + "\n")


def load_dataset(root) -> tuple[LabeledImageDataset, dict[int, ClassDescriptionSet]]:
    """Load a dataset directory; descriptions come back untokenized (``texts`` only)."""
    root = Path(root)
    if not (root / "classes.json").exists():
        raise ConfigurationError(f"{root} is not a dataset directory (classes.json missing)")
    classes = json.loads((root / "classes.json").read_text())
    meta = json.loads((root / "meta.json").read_text()) if (root / "meta.json").exists() else {}
    texts = json.loads((root / "descriptions.json").read_text()) if (root / "descriptions.json").exists() else {}
    images, labels = [], []
    for entry in classes:
        arr = np.load(root / "images" / f"{entry['name']}.npy")
        images.append(arr)
        labels.append(np.full(len(arr), entry["id"], dtype=np.int64))
    ds = LabeledImageDataset(
        np.concatenate(images), np.concatenate(labels),
        {e["id"]: e["split"] for e in classes}, {e["id"]: e["name"] for e in classes},
        allow_flip=meta.get("allow_flip", True),
    )
    descs = {e["id"]: ClassDescriptionSet(e["id"], texts=list(texts.get(e["name"], []))) for e in classes}
    return ds, descs


def tokenize_descriptions(descriptions: Mapping[int, ClassDescriptionSet], vocab: Vocabulary,
                          max_len: int = MAX_LEN) -> dict[int, ClassDescriptionSet]:
    return {c: ds.tokenized(vocab, max_len) for c, ds in descriptions.items() if len(ds)}
