"""Synthetic shape-world corpus: scene specs, a pixel-exact renderer, a closed
caption grammar with its parser, and a manifest-based loader for external
image/caption pairs.

Layout: the canvas is split into a 3x3 grid of square slots of side
``canvas // 4``. Slot origins along each axis are ``0, canvas // 2`` and
``3 * canvas // 4`` so every slot covers whole 8-pixel tokenizer patches at the
default 32px canvas (one object = one image token). The middle slot therefore
sits just below/right of the geometric center.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np

from arralab.errors import CaptionParseError, ConfigError, ManifestError
from arralab.numerics import _stream_key

SHAPES = ("square", "circle", "triangle", "cross")
PALETTES = {
    "primary": {
        "red": (0.9, 0.15, 0.15),
        "green": (0.15, 0.8, 0.2),
        "blue": (0.2, 0.3, 0.95),
        "yellow": (0.95, 0.85, 0.2),
        "cyan": (0.2, 0.85, 0.9),
        "magenta": (0.85, 0.25, 0.85),
    },
    # source domain for the adaptation regime
    "alt": {
        "orange": (0.95, 0.55, 0.1),
        "purple": (0.5, 0.2, 0.8),
        "white": (0.95, 0.95, 0.95),
        "pink": (0.98, 0.6, 0.75),
        "teal": (0.1, 0.55, 0.5),
        "brown": (0.55, 0.35, 0.15),
    },
}
ALL_COLORS = tuple(c for pal in PALETTES.values() for c in pal)
BACKGROUND = (0.1, 0.1, 0.1)

POSITIONS = (
    "top left", "top", "top right",
    "left", "center", "right",
    "bottom left", "bottom", "bottom right",
)  # fmt: skip
TEMPLATES = ("{objects}", "an image of {objects}")
_PREFIXES = tuple(t.split("{objects}")[0].split() for t in TEMPLATES)


@dataclass(frozen=True, order=True)
class SceneObject:
    cell: int  # row-major index into the 3x3 grid
    shape: str
    color: str

    @property
    def row(self) -> int:
        return self.cell // 3

    @property
    def col(self) -> int:
        return self.cell % 3


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...] = ()
    canvas: int = 32

    def __post_init__(self):
        # canonical order: row-major by cell
        object.__setattr__(self, "objects", tuple(sorted(self.objects)))

    def validate(self, palette: str | None = None, require_objects: bool = True) -> None:
        if require_objects and not 1 <= len(self.objects) <= 3:
            raise ValueError(f"scene must hold 1-3 objects, got {len(self.objects)}")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError(f"overlapping cells in scene: {cells}")
        colors = PALETTES[palette] if palette else ALL_COLORS
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in colors or not 0 <= o.cell < 9:
                raise ValueError(f"invalid object {o}")
        if self.canvas % 4:
            raise ValueError("canvas side must be divisible by 4")


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    caption: str
    spec: SceneSpec | None = None
    category_id: int | None = None


@dataclass(frozen=True)
class CorpusConfig:
    canvas: int = 32
    palette: str = "primary"
    object_counts: tuple[int, ...] = (1, 2, 3)
    count_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    templates: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        if self.palette not in PALETTES:
            raise ConfigError(f"unknown palette {self.palette!r}")
        if len(self.object_counts) != len(self.count_weights):
            raise ConfigError("object_counts and count_weights differ in length")
        if any(not 1 <= c <= 3 for c in self.object_counts):
            raise ConfigError("object counts must lie in 1..3")
        if any(t not in range(len(TEMPLATES)) for t in self.templates):
            raise ConfigError(f"template ids must lie in 0..{len(TEMPLATES) - 1}")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        for k in ("object_counts", "count_weights", "templates"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "canvas": self.canvas,
            "palette": self.palette,
            "object_counts": list(self.object_counts),
            "count_weights": list(self.count_weights),
            "templates": list(self.templates),
        }


ONE_OBJECT = CorpusConfig(object_counts=(1,), count_weights=(1.0,), templates=(0,))


# ---------------------------------------------------------------------------
# categories: (shape, color) within a palette <-> 0..23


def category_id(shape: str, color: str, palette: str = "primary") -> int:
    colors = list(PALETTES[palette])
    return SHAPES.index(shape) * len(colors) + colors.index(color)


def category_attributes(cid: int, palette: str = "primary") -> tuple[str, str]:
    colors = list(PALETTES[palette])
    if not 0 <= cid < len(SHAPES) * len(colors):
        raise ValueError(f"category id {cid} out of range")
    return SHAPES[cid // len(colors)], colors[cid % len(colors)]


# ---------------------------------------------------------------------------
# rendering


def slot_origins(canvas: int) -> tuple[int, int, int]:
    return (0, canvas // 2, 3 * canvas // 4)


@lru_cache(maxsize=None)
def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` mask of a shape inside one slot."""
    m = max(1, size // 8)
    yy, xx = np.mgrid[0:size, 0:size]
    cy = yy + 0.5 - size / 2
    cx = xx + 0.5 - size / 2
    inner = (yy >= m) & (yy < size - m) & (xx >= m) & (xx < size - m)
    if shape == "square":
        mask = inner
    elif shape == "circle":
        r = size / 2 - m - 0.1
        mask = cx**2 + cy**2 <= r**2
    elif shape == "triangle":
        n = size - 2 * m
        half = (yy - m + 1) / n * (n / 2)
        mask = inner & (np.abs(cx) <= half)
    elif shape == "cross":
        t = max(2, size // 4) / 2
        mask = inner & ((np.abs(cx) <= t) | (np.abs(cy) <= t))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    mask = np.asarray(mask, dtype=bool)
    mask.setflags(write=False)
    return mask


def cell_box(cell: int, canvas: int) -> tuple[int, int, int]:
    """(y0, x0, side) of a grid cell's slot."""
    org = slot_origins(canvas)
    return org[cell // 3], org[cell % 3], canvas // 4


def render(spec: SceneSpec, palette: str | None = None) -> np.ndarray:
    """Rasterize a scene; no anti-aliasing, pure function of the SceneSpec."""
    spec.validate(palette, require_objects=False)
    colors = {**PALETTES["primary"], **PALETTES["alt"]}
    img = np.empty((spec.canvas, spec.canvas, 3), dtype=np.float32)
    img[...] = np.asarray(BACKGROUND, dtype=np.float32)
    for o in spec.objects:
        y0, x0, side = cell_box(o.cell, spec.canvas)
        region = img[y0 : y0 + side, x0 : x0 + side]
        region[shape_mask(o.shape, side)] = np.asarray(colors[o.color], dtype=np.float32)
    return img


# ---------------------------------------------------------------------------
# captions


def object_phrase(o: SceneObject) -> str:
    return f"a {o.color} {o.shape} at {POSITIONS[o.cell]}"


def caption(spec: SceneSpec, template: int = 0) -> str:
    body = " and ".join(object_phrase(o) for o in spec.objects)
    return TEMPLATES[template].format(objects=body)


def grammar_words() -> list[str]:
    words = {"a", "at", "and"}
    for prefix in _PREFIXES:
        words.update(prefix)
    words.update(SHAPES)
    words.update(ALL_COLORS)
    for p in POSITIONS:
        words.update(p.split())
    return sorted(words)


def parse_caption(text: str, canvas: int = 32) -> SceneSpec:
    """Inverse of ``caption`` over the template grammar."""
    words, starts = [], []
    pos = 0
    for w in text.split(" "):
        if w:
            words.append(w)
            starts.append(pos)
        pos += len(w) + 1
    i = 0

    def where(k):
        return starts[k] if k < len(starts) else len(text)

    def expect(options, what):
        nonlocal i
        if i >= len(words) or words[i] not in options:
            got = words[i] if i < len(words) else "end of text"
            raise CaptionParseError(f"expected {what}, got {got!r}", where(i), text)
        i += 1
        return words[i - 1]

    for prefix in _PREFIXES:
        if prefix and words[: len(prefix)] == prefix:
            i = len(prefix)
            break
    objects = []
    while True:
        expect(("a",), "'a'")
        color = expect(ALL_COLORS, "a color")
        shape = expect(SHAPES, "a shape")
        expect(("at",), "'at'")
        first = expect({p.split()[0] for p in POSITIONS}, "a position")
        name = first
        if i < len(words) and f"{first} {words[i]}" in POSITIONS:
            name = f"{first} {words[i]}"
            i += 1
        if name not in POSITIONS:
            raise CaptionParseError(f"unknown position {name!r}", where(i - 1), text)
        objects.append(SceneObject(POSITIONS.index(name), shape, color))
        if i == len(words):
            break
        expect(("and",), "'and' or end of text")
    spec = SceneSpec(tuple(objects), canvas)
    try:
        spec.validate()
    except ValueError as exc:
        raise CaptionParseError(str(exc), 0, text) from None
    return spec


# ---------------------------------------------------------------------------
# generation


def generate_spec(rng: np.random.Generator, config: CorpusConfig) -> SceneSpec:
    weights = np.asarray(config.count_weights, dtype=np.float64)
    count = int(config.object_counts[rng.choice(len(weights), p=weights / weights.sum())])
    cells = rng.choice(9, size=count, replace=False)
    colors = list(PALETTES[config.palette])
    objects = tuple(
        SceneObject(int(c), SHAPES[rng.integers(len(SHAPES))], colors[rng.integers(len(colors))])
        for c in cells
    )
    return SceneSpec(objects, config.canvas)


def generate_scene(seed: int, config: CorpusConfig = CorpusConfig()) -> Sample:
    """Deterministic in ``(seed, config)``."""
    rng = np.random.Generator(np.random.Philox(key=_stream_key(seed, "corpus")))
    spec = generate_spec(rng, config)
    template = int(config.templates[rng.integers(len(config.templates))])
    first = spec.objects[0]
    return Sample(
        image=render(spec, config.palette),
        caption=caption(spec, template),
        spec=spec,
        category_id=category_id(first.shape, first.color, config.palette),
    )


def all_one_object_specs(canvas: int = 32, palette: str = "primary") -> list[SceneSpec]:
    return [
        SceneSpec((SceneObject(cell, shape, color),), canvas)
        for shape in SHAPES
        for color in PALETTES[palette]
        for cell in range(9)
    ]


@dataclass
class CorpusSplit:
    """Materialized images + captions for one split."""

    images: np.ndarray  # N x H x W x 3
    captions: list[str]
    specs: list[SceneSpec | None] = field(default_factory=list)

    def __len__(self):
        return len(self.captions)


def generate_split(seeds, config: CorpusConfig) -> CorpusSplit:
    samples = [generate_scene(int(s), config) for s in seeds]
    return CorpusSplit(
        np.stack([s.image for s in samples]),
        [s.caption for s in samples],
        [s.spec for s in samples],
    )


# ---------------------------------------------------------------------------
# external pairs


def _resize(img: np.ndarray, canvas: int) -> np.ndarray:
    h, w = img.shape[:2]
    side = min(h, w)
    y0, x0 = (h - side) // 2, (w - side) // 2
    img = img[y0 : y0 + side, x0 : x0 + side]
    idx = ((np.arange(canvas) + 0.5) * side / canvas).astype(int)
    return img[idx][:, idx]


def load_pairs(path, canvas: int = 32) -> Iterator[Sample]:
    """Yield samples from ``manifest.jsonl`` (or the given manifest file).

    Records: ``{"file": str, "caption": str, "category_id": int?}``; image
    paths are relative to the manifest's directory.
    """
    from PIL import Image

    path = Path(path)
    manifest = path / "manifest.jsonl" if path.is_dir() else path
    root = manifest.parent
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                fname, text = rec["file"], rec["caption"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ManifestError(lineno, f"malformed record ({exc})") from None
            img_path = root / fname
            if not img_path.is_file():
                raise ManifestError(lineno, f"missing image file {fname!r}")
            with Image.open(img_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            yield Sample(_resize(arr, canvas), text, None, rec.get("category_id"))
