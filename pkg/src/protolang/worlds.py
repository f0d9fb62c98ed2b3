"""Procedural shapes-in-relations dataset with class-level descriptions.

Each class is a visual concept such as "a red circle to the left of a blue
square". Every image of the class is a positive example of the concept with
2-3 distractor shapes around it. Descriptions are template paraphrases of the
concept and are shared by every image of the class.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import ClassDescriptionSet, LabeledImageDataset, as_rng
from .errors import ConfigurationError

SHAPES = ("circle", "square", "triangle", "cross", "ellipse")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 215, 40),
    "magenta": (210, 50, 200),
    "cyan": (40, 210, 220),
}
RELATIONS = ("left-of", "right-of", "above", "below")
BACKGROUND = (128, 128, 128)

COLOR_WORDS = {
    "red": ("red", "crimson"),
    "green": ("green", "emerald"),
    "blue": ("blue", "azure"),
    "yellow": ("yellow", "golden"),
    "magenta": ("magenta", "pink"),
    "cyan": ("cyan", "turquoise"),
}
RELATION_PHRASES = {
    "left-of": ("to the left of", "left of", "on the left side of"),
    "right-of": ("to the right of", "right of", "on the right side of"),
    "above": ("above", "somewhere above", "positioned above"),
    "below": ("below", "somewhere below", "positioned below"),
}
# every phrasing of a relation contains its keyword
RELATION_KEYWORD = {"left-of": "left", "right-of": "right", "above": "above", "below": "below"}
FRAMES = (
    "{t} is {r} {ref}",
    "there is {t} {r} {ref}",
    "{t} sits {r} {ref}",
    "{t} appears {r} {ref}",
    "{t} lies {r} {ref}",
)
COLORED_OBJECT = ("a {c} {s}", "a {s} that is {c}")
ANY_COLOR_OBJECT = ("a {s}", "a {s} of any color")
MAX_PARAPHRASES = 25
_MIRROR = {"left-of": "right-of", "right-of": "left-of", "above": "below", "below": "above"}


@dataclass(frozen=True)
class ConceptSpec:
    target_shape: str
    target_color: str | None
    relation: str
    reference_shape: str
    reference_color: str | None

    def __post_init__(self):
        for s in (self.target_shape, self.reference_shape):
            if s not in SHAPES:
                raise ConfigurationError(f"unknown shape {s!r}")
        for c in (self.target_color, self.reference_color):
            if c is not None and c not in COLORS:
                raise ConfigurationError(f"unknown color {c!r}")
        if self.relation not in RELATIONS:
            raise ConfigurationError(f"unknown relation {self.relation!r}")

    @property
    def decidable(self) -> bool:
        if self.target_shape != self.reference_shape:
            return True
        # same shape: only distinguishable when both colors are fixed and differ
        return None not in (self.target_color, self.reference_color) and self.target_color != self.reference_color

    def mirrored(self) -> "ConceptSpec":
        return ConceptSpec(self.reference_shape, self.reference_color, _MIRROR[self.relation],
                           self.target_shape, self.target_color)

    def slug(self) -> str:
        t = f"{self.target_color or 'any'}-{self.target_shape}"
        r = f"{self.reference_color or 'any'}-{self.reference_shape}"
        return f"{t}_{self.relation}_{r}"

    def attribute_words(self) -> set[str]:
        words = {self.target_shape, self.reference_shape, RELATION_KEYWORD[self.relation]}
        for c in (self.target_color, self.reference_color):
            if c is not None:
                words.add(c)
        return words


@dataclass
class PlacedObject:
    shape: str
    color: str
    cx: int
    cy: int
    half: int  # half extent along x; bbox is [cx - half, cx + half]
    half_y: int

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return self.cx - self.half, self.cy - self.half_y, self.cx + self.half, self.cy + self.half_y


@dataclass
class RenderedScene:
    image: np.ndarray
    target: PlacedObject
    reference: PlacedObject
    distractors: list[PlacedObject] = field(default_factory=list)

    @property
    def objects(self) -> list[PlacedObject]:
        return [self.target, self.reference, *self.distractors]

    @property
    def distractor_count(self) -> int:
        return len(self.distractors)


def relation_holds(a: PlacedObject, b: PlacedObject, relation: str, margin: int = 1) -> bool:
    """Whether ``a`` stands in ``relation`` to ``b`` (image y grows downwards)."""
    if relation == "left-of":
        return b.cx - a.cx >= margin
    if relation == "right-of":
        return a.cx - b.cx >= margin
    if relation == "above":
        return b.cy - a.cy >= margin
    return a.cy - b.cy >= margin


def _matches(obj: PlacedObject, shape: str, color: str | None) -> bool:
    return obj.shape == shape and (color is None or obj.color == color)


def scene_satisfies(objects, spec: ConceptSpec, margin: int = 1) -> bool:
    for a, b in itertools.permutations(objects, 2):
        if (_matches(a, spec.target_shape, spec.target_color)
                and _matches(b, spec.reference_shape, spec.reference_color)
                and relation_holds(a, b, spec.relation, margin)):
            return True
    return False


def subsumes(general: ConceptSpec, specific: ConceptSpec) -> bool:
    """True when every scene of ``specific`` is also a scene of ``general``."""
    def covers(g, s):
        return (g.target_shape == s.target_shape and g.reference_shape == s.reference_shape
                and g.relation == s.relation
                and g.target_color in (None, s.target_color)
                and g.reference_color in (None, s.reference_color))
    return covers(general, specific) or covers(general.mirrored(), specific)


# --- descriptions -----------------------------------------------------------

def _object_phrases(shape: str, color: str | None) -> list[str]:
    if color is None:
        return [p.format(s=shape) for p in ANY_COLOR_OBJECT]
    return [p.format(s=shape, c=name) for name in COLOR_WORDS[color] for p in COLORED_OBJECT]


def realizations(spec: ConceptSpec) -> list[str]:
    """Every template realization of ``spec``; the first one is the canonical phrasing."""
    out = []
    for frame, rel, t, ref in itertools.product(
            FRAMES, RELATION_PHRASES[spec.relation],
            _object_phrases(spec.target_shape, spec.target_color),
            _object_phrases(spec.reference_shape, spec.reference_color)):
        out.append(frame.format(t=t, r=rel, ref=ref))
    return list(dict.fromkeys(out))


def describe(spec: ConceptSpec, n_descriptions: int, rng_state) -> list[str]:
    """Up to ``n_descriptions`` distinct paraphrases, canonical phrasing first."""
    rng = as_rng(rng_state)
    all_ = realizations(spec)
    rest = [all_[i] for i in rng.permutation(np.arange(1, len(all_)))]
    return ([all_[0]] + rest)[: max(1, min(n_descriptions, MAX_PARAPHRASES))]


# --- rendering ----------------------------------------------------------------

def _mask(obj: PlacedObject) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    h, hy = obj.half, obj.half_y
    y, x = np.mgrid[-hy:hy + 1, -h:h + 1]
    if obj.shape == "circle":
        m = x * x + y * y <= h * h + 0.5
    elif obj.shape == "ellipse":
        m = (x / h) ** 2 + (y / hy) ** 2 <= 1.0 + 1e-9
    elif obj.shape == "square":
        m = np.ones_like(x, dtype=bool)
    elif obj.shape == "triangle":
        # apex on top row, base on bottom row, symmetric about the vertical axis
        m = np.abs(x) * (2 * hy) <= (y + hy) * h
    else:  # cross
        arm = max(1, int(round(h / 4)))
        m = (np.abs(x) <= arm) | (np.abs(y) <= arm)
    return m, y + obj.cy, x + obj.cx


def render(objects, resolution: int) -> np.ndarray:
    """Flat-color, aliased rendering on a gray background as float32 in [0, 1]."""
    img = np.empty((resolution, resolution, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for obj in objects:
        m, ys, xs = _mask(obj)
        img[ys[m], xs[m]] = COLORS[obj.color]
    return img.astype(np.float32) / 255.0


def _size_range(resolution: int) -> tuple[int, int]:
    lo = max(2, int(round(resolution * 0.09)))
    return lo, max(lo, int(round(resolution * 0.13)))


def _separated(a: PlacedObject, b: PlacedObject, gap: int) -> bool:
    ax0, ay0, ax1, ay1 = a.bbox
    bx0, by0, bx1, by1 = b.bbox
    return ax1 + gap < bx0 or bx1 + gap < ax0 or ay1 + gap < by0 or by1 + gap < ay0


def _random_object(rng, shape, color, resolution, placed, gap=2, tries=200):
    lo, hi = _size_range(resolution)
    for _ in range(tries):
        half = int(rng.integers(lo, hi + 1))
        half_y = max(1, int(round(half * 0.55))) if shape == "ellipse" else half
        cx = int(rng.integers(half, resolution - half))
        cy = int(rng.integers(half_y, resolution - half_y))
        obj = PlacedObject(shape, color, cx, cy, half, half_y)
        if all(_separated(obj, p, gap) for p in placed):
            return obj
    return None


def relation_margin(resolution: int) -> int:
    return max(2, resolution // 8)


def render_positive(spec: ConceptSpec, rng_state, resolution: int = 64, exclude=(), max_tries: int = 500) -> RenderedScene:
    """Render one positive example of ``spec`` that satisfies none of ``exclude``."""
    if not spec.decidable:
        raise ConfigurationError(f"relation in {spec.slug()} is not decidable")
    rng = as_rng(rng_state)
    colors = list(COLORS)
    margin = relation_margin(resolution)
    distractor_shapes = [s for s in SHAPES if s not in (spec.target_shape, spec.reference_shape)]
    for _ in range(max_tries):
        tc = spec.target_color or colors[rng.integers(len(colors))]
        rc = spec.reference_color or colors[rng.integers(len(colors))]
        if spec.target_shape == spec.reference_shape and tc == rc:
            continue
        target = _random_object(rng, spec.target_shape, tc, resolution, [])
        ref = _random_object(rng, spec.reference_shape, rc, resolution, [target])
        if ref is None or not relation_holds(target, ref, spec.relation, margin):
            continue
        placed = [target, ref]
        n_distract = int(rng.integers(2, 4))
        for _ in range(n_distract):
            shape = distractor_shapes[rng.integers(len(distractor_shapes))]
            d = _random_object(rng, shape, colors[rng.integers(len(colors))], resolution, placed)
            if d is None:
                break
            placed.append(d)
        if len(placed) != 2 + n_distract:
            continue
        if any(scene_satisfies(placed, other) for other in exclude):
            continue
        return RenderedScene(render(placed, resolution), target, ref, placed[2:])
    raise ConfigurationError(f"could not render a clean positive for {spec.slug()} in {max_tries} tries")


def generate_class(spec: ConceptSpec, n_images: int, n_descriptions: int, rng_state, resolution: int = 64,
                   exclude=(), class_id: int = 0, return_scenes: bool = False):
    """Images (n, H, W, 3) in [0, 1] plus the class's description set."""
    if n_images < 1:
        raise ConfigurationError("n_images must be >= 1")
    if not spec.decidable:
        raise ConfigurationError(f"relation in {spec.slug()} is not decidable")
    rng = as_rng(rng_state)
    texts = describe(spec, n_descriptions, rng)
    scenes = [render_positive(spec, rng, resolution, exclude) for _ in range(n_images)]
    images = np.stack([s.image for s in scenes])
    descs = ClassDescriptionSet(class_id, texts=texts)
    if return_scenes:
        return images, descs, scenes
    return images, descs


def concept_space() -> list[ConceptSpec]:
    """All decidable concepts, one representative per mirror pair."""
    colors = [None, *COLORS]
    seen, out = set(), []
    for ts, tc, rel, rs, rc in itertools.product(SHAPES, colors, RELATIONS, SHAPES, colors):
        spec = ConceptSpec(ts, tc, rel, rs, rc)
        if not spec.decidable or spec.mirrored() in seen:
            continue
        seen.add(spec)
        out.append(spec)
    return out


@dataclass
class Benchmark:
    dataset: LabeledImageDataset
    descriptions: dict[int, ClassDescriptionSet]
    specs: dict[int, ConceptSpec]
    scenes: list[RenderedScene]
    manifest: dict


def generate_benchmark(n_base: int, n_val: int, n_novel: int, images_per_class: int, rng_state,
                       n_descriptions: int = MAX_PARAPHRASES, resolution: int = 64) -> Benchmark:
    """Sample distinct, mutually non-subsuming concepts and render every class."""
    space = concept_space()
    total = n_base + n_val + n_novel
    if total > len(space):
        raise ConfigurationError(f"requested {total} classes; concept space holds at most {len(space)}")
    seed_seq = np.random.SeedSequence(rng_state if isinstance(rng_state, int) else None)
    if not isinstance(rng_state, int):
        seed_seq = np.random.SeedSequence(int(as_rng(rng_state).integers(2**63)))
    pick_rng = np.random.default_rng(seed_seq.spawn(1)[0])
    chosen: list[ConceptSpec] = []
    for i in pick_rng.permutation(len(space)):
        cand = space[i]
        if any(subsumes(c, cand) or subsumes(cand, c) for c in chosen):
            continue
        chosen.append(cand)
        if len(chosen) == total:
            break
    if len(chosen) < total:
        raise ConfigurationError(f"only {len(chosen)} mutually distinct concepts available; requested {total}")

    splits = ["base"] * n_base + ["val"] * n_val + ["novel"] * n_novel
    class_rngs = seed_seq.spawn(total + 1)[1:]
    images, labels, scenes = [], [], []
    descriptions, specs, names = {}, {}, {}
    for cid, (spec, split) in enumerate(zip(chosen, splits)):
        others = [c for c in chosen if c != spec]
        imgs, descs, sc = generate_class(spec, images_per_class, n_descriptions, np.random.default_rng(class_rngs[cid]),
                                         resolution, exclude=others, class_id=cid, return_scenes=True)
        images.append((imgs * 255.0).round().astype(np.uint8))
        labels.append(np.full(images_per_class, cid))
        scenes += sc
        descriptions[cid] = descs
        specs[cid] = spec
        names[cid] = f"{cid:03d}_{spec.slug()}"
    dataset = LabeledImageDataset(np.concatenate(images), np.concatenate(labels),
                                  dict(enumerate(splits)), names, allow_flip=False)
    manifest = {
        "generator": "synthetic-worlds",
        "seed": rng_state if isinstance(rng_state, int) else None,
        "n_base": n_base, "n_val": n_val, "n_novel": n_novel,
        "images_per_class": images_per_class, "n_descriptions": n_descriptions,
        "resolution": resolution,
        "classes": [{"id": cid, "name": names[cid], "split": splits[cid], "spec": asdict(specs[cid])}
                    for cid in range(total)],
    }
    return Benchmark(dataset, descriptions, specs, scenes, manifest)
