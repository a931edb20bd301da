"""
Synthetic shapes-and-phrases scenes.

A scene is a grayscale canvas holding one to three shapes (circle, square, bar),
each in its own quadrant. A prompt picks a subset of them:

    single   "segment the upper left circle"
    both     "find both lower squares"      (two same-kind shapes sharing a half)
    all      "highlight all bars"           (every shape of one kind, at least two)

Positional and kind words have synonyms (top/upper, box/square, ...) so the
text encoder has to learn which words carry the target. resolve_prompt()
maps any grammatical prompt back to the shape indices it names.
"""

import logging
from dataclasses import dataclass

import cv2
import numpy as np

from src.errors import NotApplicableError

logger = logging.getLogger(__name__)

KINDS = ("circle", "square", "bar")
QUADRANTS = ("upper-left", "upper-right", "lower-left", "lower-right")

# word → canonical meaning
_VERTICAL = {"upper": "upper", "top": "upper", "lower": "lower", "bottom": "lower"}
_HORIZONTAL = {"left": "left", "right": "right"}
_KIND_WORDS = {
    "circle": "circle", "circles": "circle", "disc": "circle", "discs": "circle",
    "square": "square", "squares": "square", "box": "square", "boxes": "square",
    "bar": "bar", "bars": "bar", "stripe": "bar", "stripes": "bar",
}
_SINGULAR = {"circle": ("circle", "disc"), "square": ("square", "box"), "bar": ("bar", "stripe")}
_PLURAL = {"circle": ("circles", "discs"), "square": ("squares", "boxes"), "bar": ("bars", "stripes")}
_VERBS = ("segment", "find", "highlight", "mark", "show", "locate", "outline", "select")
_FILLER = ("the", "both", "all", "in", "image", "picture", "region", "shape", "shapes", "object", "objects")

VOCABULARY_WORDS: tuple[str, ...] = tuple(sorted(
    set(_VERBS) | set(_FILLER) | set(_VERTICAL) | set(_HORIZONTAL) | set(_KIND_WORDS)
))

# Foreground share of the target mask
MIN_FOREGROUND = 0.02
MAX_FOREGROUND = 0.20
_MAX_ATTEMPTS = 50

# prompt kind → relative frequency when feasible
_PROMPT_FREQUENCY = {"single": 0.6, "both": 0.25, "all": 0.15}


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    quadrant: str
    center: tuple[int, int]         # (x, y) pixels
    size: tuple[int, int]           # circle (r, r); square (s, s); bar (w, h)
    intensity: float

    @property
    def vertical(self) -> str:
        return self.quadrant.split("-")[0]

    @property
    def horizontal(self) -> str:
        return self.quadrant.split("-")[1]


@dataclass
class SceneSpec:
    canvas: int
    shapes: list[ShapeSpec]
    targets: tuple[int, ...]
    prompt: str
    seed: int
    background: float = 0.0
    noise: float = 0.03
    phrasing: str = "single"

    def to_dict(self) -> dict:
        return {
            "canvas": self.canvas,
            "shapes": [
                {"kind": s.kind, "quadrant": s.quadrant, "center": list(s.center),
                 "size": list(s.size), "intensity": round(s.intensity, 6)}
                for s in self.shapes
            ],
            "targets": list(self.targets),
            "prompt": self.prompt,
            "seed": self.seed,
            "background": round(self.background, 6),
            "phrasing": self.phrasing,
        }


# ----------------------------------------------------------------------
# Rendering
# ----------------------------------------------------------------------

def shape_mask(shape: ShapeSpec, canvas: int) -> np.ndarray:
    """Boolean pixel mask of one shape."""
    mask = np.zeros((canvas, canvas), dtype=np.uint8)
    x, y = shape.center
    if shape.kind == "circle":
        cv2.circle(mask, (x, y), shape.size[0], 1, thickness=-1)
    else:
        w, h = shape.size
        top_left = (x - w // 2, y - h // 2)
        cv2.rectangle(mask, top_left, (top_left[0] + w - 1, top_left[1] + h - 1), 1, thickness=-1)
    return mask.astype(bool)


def target_mask(scene: SceneSpec, targets: tuple[int, ...] | None = None) -> np.ndarray:
    """Union of the referred shapes' pixels."""
    targets = scene.targets if targets is None else targets
    mask = np.zeros((scene.canvas, scene.canvas), dtype=bool)
    for i in targets:
        mask |= shape_mask(scene.shapes[i], scene.canvas)
    return mask


def render(scene: SceneSpec) -> np.ndarray:
    """Float image in [0, 1]: flat background, shapes at their intensity, Gaussian pixel noise."""
    rng = np.random.default_rng([scene.seed, 1])
    image = np.full((scene.canvas, scene.canvas), scene.background, dtype=np.float64)
    for shape in scene.shapes:
        image[shape_mask(shape, scene.canvas)] = shape.intensity
    image += rng.normal(0.0, scene.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


# ----------------------------------------------------------------------
# Sampling
# ----------------------------------------------------------------------

def _quadrant_box(quadrant: str, canvas: int) -> tuple[int, int, int, int]:
    half = canvas // 2
    vertical, horizontal = quadrant.split("-")
    x0 = 0 if horizontal == "left" else half
    y0 = 0 if vertical == "upper" else half
    return x0, y0, x0 + half, y0 + half


def _sample_size(kind: str, rng: np.random.Generator, scale: float) -> tuple[int, int]:
    if kind == "circle":
        r = int(rng.integers(round(6 * scale), round(10 * scale) + 1))
        return r, r
    if kind == "square":
        s = int(rng.integers(round(10 * scale), round(18 * scale) + 1))
        return s, s
    long = int(rng.integers(round(17 * scale), round(26 * scale) + 1))
    short = int(rng.integers(round(5 * scale), round(7 * scale) + 1))
    return (long, short) if rng.random() < 0.5 else (short, long)


def _place(kind: str, quadrant: str, size: tuple[int, int], canvas: int, rng: np.random.Generator) -> tuple[int, int]:
    """Centre such that the shape stays one pixel inside its quadrant."""
    x0, y0, x1, y1 = _quadrant_box(quadrant, canvas)
    if kind == "circle":
        left = right = up = down = size[0]
    else:
        w, h = size
        left, right = w // 2, w - w // 2 - 1
        up, down = h // 2, h - h // 2 - 1
    x = int(rng.integers(x0 + 1 + left, x1 - 1 - right))
    y = int(rng.integers(y0 + 1 + up, y1 - 1 - down))
    return x, y


def _feasible_phrasings(shapes: list[ShapeSpec]) -> dict[str, list[tuple[int, ...]]]:
    options: dict[str, list[tuple[int, ...]]] = {"single": [(i,) for i in range(len(shapes))], "both": [], "all": []}
    for kind in KINDS:
        same = tuple(i for i, s in enumerate(shapes) if s.kind == kind)
        if len(same) >= 2:
            options["all"].append(same)
        for half in ("upper", "lower", "left", "right"):
            in_half = tuple(i for i in same if half in (shapes[i].vertical, shapes[i].horizontal))
            if len(in_half) == 2:
                options["both"].append(in_half)
    return options


def _half_of(shapes: list[ShapeSpec], pair: tuple[int, ...]) -> str:
    a, b = shapes[pair[0]], shapes[pair[1]]
    return a.vertical if a.vertical == b.vertical else a.horizontal


def phrase(shapes: list[ShapeSpec], targets: tuple[int, ...], phrasing: str, rng: np.random.Generator | None = None) -> str:
    """Prompt text for a target subset. Without rng, the canonical wording is used."""
    def pick(options):
        return options[0] if rng is None else options[int(rng.integers(len(options)))]

    verb = pick(_VERBS)
    kind = shapes[targets[0]].kind
    if phrasing == "single":
        s = shapes[targets[0]]
        vertical = pick(("upper", "top") if s.vertical == "upper" else ("lower", "bottom"))
        words = [verb, "the", vertical, s.horizontal, pick(_SINGULAR[kind])]
    elif phrasing == "both":
        half = _half_of(shapes, targets)
        if half in ("upper", "lower"):
            half = pick(("upper", "top") if half == "upper" else ("lower", "bottom"))
        words = [verb, "both", half, pick(_PLURAL[kind])]
    elif phrasing == "all":
        words = [verb, "all", pick(_PLURAL[kind])]
    else:
        raise ValueError(f"unknown phrasing {phrasing!r}")
    if rng is not None and len(words) <= 5 and rng.random() < 0.25:
        words += ["in", "the", pick(("image", "picture"))]
    return " ".join(words)


def resolve_prompt(text: str, shapes: list[ShapeSpec]) -> tuple[int, ...]:
    """Indices of the shapes a prompt refers to (empty if none match)."""
    words = text.lower().split()
    kinds = {_KIND_WORDS[w] for w in words if w in _KIND_WORDS}
    verticals = {_VERTICAL[w] for w in words if w in _VERTICAL}
    horizontals = {_HORIZONTAL[w] for w in words if w in _HORIZONTAL}
    matches = []
    for i, s in enumerate(shapes):
        if kinds and s.kind not in kinds:
            continue
        if verticals and s.vertical not in verticals:
            continue
        if horizontals and s.horizontal not in horizontals:
            continue
        matches.append(i)
    return tuple(matches)


def _sample_shapes(rng: np.random.Generator, canvas: int) -> list[ShapeSpec]:
    scale = canvas / 64
    count = int(rng.integers(1, 4))
    quadrants = [QUADRANTS[i] for i in sorted(rng.choice(4, size=count, replace=False))]
    # repeated kinds make "both"/"all" prompts possible
    if count >= 2 and rng.random() < 0.5:
        kinds = [KINDS[int(rng.integers(3))]] * count
        if count == 3 and rng.random() < 0.5:
            kinds[int(rng.integers(3))] = KINDS[int(rng.integers(3))]
    else:
        kinds = [KINDS[int(rng.integers(3))] for _ in range(count)]
    shapes = []
    for kind, quadrant in zip(kinds, quadrants):
        size = _sample_size(kind, rng, scale)
        center = _place(kind, quadrant, size, canvas, rng)
        shapes.append(ShapeSpec(kind, quadrant, center, size, float(rng.uniform(0.55, 1.0))))
    return shapes


def _disjoint(shapes: list[ShapeSpec], canvas: int) -> bool:
    seen = np.zeros((canvas, canvas), dtype=bool)
    for s in shapes:
        m = shape_mask(s, canvas)
        if (seen & m).any():
            return False
        seen |= m
    return True


def sample_scene(seed: int, canvas: int = 64) -> SceneSpec:
    """
    Deterministic scene for a seed. Shapes are rejection-sampled until they are
    disjoint and the target covers 2–20% of the canvas; after too many attempts
    the last disjoint draw is kept.
    """
    rng = np.random.default_rng(seed)
    fallback = None
    for _ in range(_MAX_ATTEMPTS):
        shapes = _sample_shapes(rng, canvas)
        if not _disjoint(shapes, canvas):
            continue
        options = _feasible_phrasings(shapes)
        kinds = [k for k in _PROMPT_FREQUENCY if options[k]]
        freq = np.array([_PROMPT_FREQUENCY[k] for k in kinds])
        phrasing = kinds[int(rng.choice(len(kinds), p=freq / freq.sum()))]
        targets = options[phrasing][int(rng.integers(len(options[phrasing])))]
        scene = SceneSpec(
            canvas=canvas,
            shapes=shapes,
            targets=targets,
            prompt=phrase(shapes, targets, phrasing, rng),
            seed=int(seed),
            background=float(rng.uniform(0.0, 0.25)),
            phrasing=phrasing,
        )
        fraction = target_mask(scene).mean()
        if MIN_FOREGROUND <= fraction <= MAX_FOREGROUND:
            return scene
        fallback = scene
    if fallback is None:
        raise RuntimeError(f"could not place disjoint shapes for seed {seed}")
    logger.debug("seed %d: foreground share out of range after %d attempts", seed, _MAX_ATTEMPTS)
    return fallback


def counterfactual_pair(scene: SceneSpec) -> tuple[str, np.ndarray, str, np.ndarray]:
    """Two single-shape prompts over the same image with their disjoint masks."""
    if len(scene.shapes) < 2:
        raise NotApplicableError(f"scene {scene.seed} has a single shape; no counterfactual prompt exists")
    a, b = (0,), (1,)
    prompt_a = phrase(scene.shapes, a, "single")
    prompt_b = phrase(scene.shapes, b, "single")
    return prompt_a, target_mask(scene, a), prompt_b, target_mask(scene, b)
