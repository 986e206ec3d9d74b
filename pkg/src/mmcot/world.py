"""Synthetic shapes world: scene specs, deterministic rendering, text
descriptions, exact object detection, and category scoring.

Everything here is pure and immutable: the same spec always renders to the
same grid, and detection recovers exactly what was rendered.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

COLORS = ("red", "blue", "green", "yellow", "orange", "purple", "cyan", "white")
SHAPES = ("circle", "square", "triangle", "cross")
RELATIONS = ("left-of", "right-of", "above", "below")
EXTENTS = (1, 2)

BACKGROUND = 0
DEFAULT_CANVAS = 8
MAX_OBJECTS = 4

# RGB used when exporting grids to PNG; index 0 is the background.
PALETTE_RGB = (
    (64, 64, 64),     # background
    (225, 35, 35),    # red
    (40, 80, 230),    # blue
    (35, 165, 70),    # green
    (235, 205, 40),   # yellow
    (240, 130, 25),   # orange
    (150, 45, 185),   # purple
    (45, 200, 215),   # cyan
    (250, 250, 250),  # white
)

# Cell stencils keyed by (shape, extent), as offsets from the anchor cell
# (top-left of the bounding box). Constraints: every stencil touches offset
# row 0 and column 0, is 8-connected, and no two stencils share a cell set,
# so detection can classify components by exact match.
STENCILS: dict[tuple[str, int], frozenset[tuple[int, int]]] = {
    ("square", 1): frozenset({(0, 0)}),
    ("square", 2): frozenset({(0, 0), (0, 1), (1, 0), (1, 1)}),
    ("triangle", 1): frozenset({(0, 0), (1, 0), (1, 1)}),
    ("triangle", 2): frozenset({(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)}),
    ("circle", 1): frozenset({(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)}),
    ("circle", 2): frozenset(
        {(0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (1, 3),
         (2, 0), (2, 1), (2, 2), (2, 3), (3, 1), (3, 2)}
    ),
    ("cross", 1): frozenset({(0, 0), (0, 2), (1, 1), (2, 0), (2, 2)}),
    ("cross", 2): frozenset(
        {(0, 0), (0, 3), (1, 1), (1, 2), (2, 1), (2, 2), (3, 0), (3, 3)}
    ),
}

_STENCIL_INDEX = {cells: key for key, cells in STENCILS.items()}


class SceneError(ValueError):
    """Raised for scene specs that violate the world's invariants."""


class ImageGridError(ValueError):
    """Raised for malformed image grids."""


def stencil_size(shape: str, extent: int) -> tuple[int, int]:
    cells = STENCILS[(shape, extent)]
    return (max(r for r, _ in cells) + 1, max(c for _, c in cells) + 1)


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    anchor: tuple[int, int]
    extent: int = 1

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SceneError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise SceneError(f"unknown color {self.color!r}")
        if self.extent not in EXTENTS:
            raise SceneError(f"unknown extent {self.extent!r}")

    @property
    def color_index(self) -> int:
        return COLORS.index(self.color) + 1

    def cells(self) -> frozenset[tuple[int, int]]:
        r0, c0 = self.anchor
        return frozenset((r0 + r, c0 + c) for r, c in STENCILS[(self.shape, self.extent)])


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...]
    relations: tuple[tuple[int, str, int], ...] = ()
    canvas_size: int = DEFAULT_CANVAS


@dataclass(frozen=True)
class ImageGrid:
    """G x G matrix of palette indices; 0 is background, 1..8 are colors."""

    cells: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.cells, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ImageGridError(f"grid must be square, got shape {arr.shape}")
        if arr.min(initial=0) < 0 or arr.max(initial=0) > len(COLORS):
            raise ImageGridError("cell values must be in 0..8")
        arr.flags.writeable = False
        object.__setattr__(self, "cells", arr)

    @property
    def size(self) -> int:
        return self.cells.shape[0]

    def __eq__(self, other):
        return isinstance(other, ImageGrid) and np.array_equal(self.cells, other.cells)

    def __hash__(self):
        return hash(self.cells.tobytes())


def relation_holds(rel: str, subj_anchor: tuple[int, int], obj_anchor: tuple[int, int]) -> bool:
    """Relations compare anchor cells (top-left of each stencil)."""
    sr, sc = subj_anchor
    objr, objc = obj_anchor
    if rel == "left-of":
        return sc < objc
    if rel == "right-of":
        return sc > objc
    if rel == "above":
        return sr < objr
    if rel == "below":
        return sr > objr
    raise SceneError(f"unknown relation {rel!r}")


def _neighborhood(cells: Iterable[tuple[int, int]]) -> set[tuple[int, int]]:
    out = set()
    for r, c in cells:
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                out.add((r + dr, c + dc))
    return out


def validate_scene(spec: SceneSpec) -> None:
    """Raise SceneError unless every world invariant holds.

    Beyond the basics (bounds, counts, relation consistency), objects must not
    touch each other, even diagonally: detection labels same-color
    8-connected components, so two adjacent objects would merge into one
    unrecognizable component.
    """
    g = spec.canvas_size
    if g < 2:
        raise SceneError(f"canvas_size must be >= 2, got {g}")
    if len(spec.objects) == 0:
        raise SceneError("empty scene")
    if len(spec.objects) > MAX_OBJECTS:
        raise SceneError(f"too many objects ({len(spec.objects)} > {MAX_OBJECTS})")
    occupied: set[tuple[int, int]] = set()
    blocked: set[tuple[int, int]] = set()
    for i, obj in enumerate(spec.objects):
        cells = obj.cells()
        for r, c in cells:
            if not (0 <= r < g and 0 <= c < g):
                raise SceneError(f"object {i} out of bounds at cell ({r}, {c})")
        if cells & occupied:
            raise SceneError(f"object {i} overlaps another object")
        if cells & blocked:
            raise SceneError(f"object {i} touches another object")
        occupied |= cells
        blocked |= _neighborhood(cells)
    for subj, rel, obj in spec.relations:
        if rel not in RELATIONS:
            raise SceneError(f"unknown relation {rel!r}")
        if not (0 <= subj < len(spec.objects) and 0 <= obj < len(spec.objects)):
            raise SceneError(f"relation references missing object ({subj}, {obj})")
        if subj == obj:
            raise SceneError("relation references the same object twice")
        if not relation_holds(rel, spec.objects[subj].anchor, spec.objects[obj].anchor):
            raise SceneError(f"inconsistent relation {rel!r} between objects {subj} and {obj}")


def render_scene(spec: SceneSpec) -> ImageGrid:
    """Rasterize a valid scene; pure function of the spec."""
    validate_scene(spec)
    g = spec.canvas_size
    arr = np.zeros((g, g), dtype=np.int64)
    for obj in spec.objects:
        for r, c in obj.cells():
            arr[r, c] = obj.color_index
    return ImageGrid(arr)


# ---------------------------------------------------------------------------
# Descriptions


_NUMBER_WORDS = {1: "one", 2: "two", 3: "three", 4: "four"}
_PLURALS = {"circle": "circles", "square": "squares", "triangle": "triangles", "cross": "crosses"}
_REL_PHRASES = {
    "left-of": "to the left of",
    "right-of": "to the right of",
    "above": "above",
    "below": "below",
}


def _article(color: str) -> str:
    return "an" if color[0] in "aeiou" else "a"


def object_phrase(color: str, shape: str, count: int = 1) -> str:
    if count == 1:
        return f"{_article(color)} {color} {shape}"
    return f"{_NUMBER_WORDS[count]} {color} {_PLURALS[shape]}"


def describe_scene(spec: SceneSpec, style: str = "plain") -> str:
    """Deterministic template description over the closed word list.

    plain: grouped object listing, e.g. "a red square and a blue circle".
    relational: for a two-object scene with one relation, the compact
    "a red square to the left of a blue circle"; otherwise the plain listing
    followed by one clause per relation.
    """
    if style not in ("plain", "relational"):
        raise SceneError(f"unknown style {style!r}")
    validate_scene(spec)
    groups: list[tuple[str, str, int]] = []
    for obj in spec.objects:
        for i, (color, shape, count) in enumerate(groups):
            if (color, shape) == (obj.color, obj.shape):
                groups[i] = (color, shape, count + 1)
                break
        else:
            groups.append((obj.color, obj.shape, 1))
    plain = " and ".join(object_phrase(c, s, n) for c, s, n in groups)
    if style == "plain" or not spec.relations:
        return plain
    if len(spec.objects) == 2 and len(spec.relations) == 1:
        subj, rel, obj = spec.relations[0]
        s, o = spec.objects[subj], spec.objects[obj]
        if (s.color, s.shape) != (o.color, o.shape):
            return (
                f"{object_phrase(s.color, s.shape)} {_REL_PHRASES[rel]} "
                f"{object_phrase(o.color, o.shape)}"
            )
    clauses = [
        f"the {spec.objects[subj].color} {spec.objects[subj].shape} {_REL_PHRASES[rel]} "
        f"the {spec.objects[obj].color} {spec.objects[obj].shape}"
        for subj, rel, obj in spec.relations
    ]
    return " and ".join([plain] + clauses)


# ---------------------------------------------------------------------------
# Detection


@dataclass(frozen=True)
class DetectedObject:
    shape: str
    color: str
    anchor: tuple[int, int]
    extent: int


@dataclass(frozen=True)
class Blob:
    """A same-color connected component that matches no stencil."""

    color: str
    cells: frozenset[tuple[int, int]]


@dataclass(frozen=True)
class DetectedScene:
    objects: tuple[DetectedObject, ...]
    blobs: tuple[Blob, ...]

    def shape_color_multiset(self) -> tuple[tuple[str, str], ...]:
        return tuple(sorted((o.shape, o.color) for o in self.objects))


def detect_objects(image: ImageGrid) -> DetectedScene:
    """Exact detector: label same-color 8-connected components and classify
    each by stencil match. Components matching no stencil come back as blobs;
    unrecognized content is an outcome, never an error.
    """
    arr = image.cells
    g = image.size
    seen = np.zeros_like(arr, dtype=bool)
    objects: list[DetectedObject] = []
    blobs: list[Blob] = []
    for r0 in range(g):
        for c0 in range(g):
            if arr[r0, c0] == BACKGROUND or seen[r0, c0]:
                continue
            color_idx = arr[r0, c0]
            stack = [(r0, c0)]
            seen[r0, c0] = True
            comp = []
            while stack:
                r, c = stack.pop()
                comp.append((r, c))
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < g and 0 <= cc < g and not seen[rr, cc] and arr[rr, cc] == color_idx:
                            seen[rr, cc] = True
                            stack.append((rr, cc))
            minr = min(r for r, _ in comp)
            minc = min(c for _, c in comp)
            normalized = frozenset((r - minr, c - minc) for r, c in comp)
            color = COLORS[color_idx - 1]
            key = _STENCIL_INDEX.get(normalized)
            if key is None:
                blobs.append(Blob(color=color, cells=frozenset(comp)))
            else:
                shape, extent = key
                objects.append(DetectedObject(shape=shape, color=color, anchor=(minr, minc), extent=extent))
    objects.sort(key=lambda o: (o.anchor, o.shape, o.color))
    blobs.sort(key=lambda b: min(b.cells))
    return DetectedScene(objects=tuple(objects), blobs=tuple(blobs))


# ---------------------------------------------------------------------------
# Scoring


class GenevalCategory(Enum):
    SINGLE_OBJ = "single_obj"
    TWO_OBJ = "two_obj"
    COUNTING = "counting"
    COLORS = "colors"
    POSITION = "position"
    COLOR_ATTRI = "color_attri"


CATEGORY_LABELS = {
    GenevalCategory.SINGLE_OBJ: "Single Obj.",
    GenevalCategory.TWO_OBJ: "Two Obj.",
    GenevalCategory.COUNTING: "Counting",
    GenevalCategory.COLORS: "Colors",
    GenevalCategory.POSITION: "Position",
    GenevalCategory.COLOR_ATTRI: "Color Attri.",
}


class CategoryError(ValueError):
    """Raised when a category does not apply to the given target scene."""


def category_applicable(target: SceneSpec, category: GenevalCategory) -> bool:
    n = len(target.objects)
    pairs = [(o.shape, o.color) for o in target.objects]
    if category == GenevalCategory.SINGLE_OBJ:
        return n == 1
    if category == GenevalCategory.TWO_OBJ:
        return n == 2 and len(set(pairs)) == 2
    if category == GenevalCategory.COUNTING:
        return n >= 2 and len({o.shape for o in target.objects}) == 1
    if category == GenevalCategory.COLORS:
        return True
    if category == GenevalCategory.POSITION:
        return len(target.relations) >= 1 and len(set(pairs)) == n
    if category == GenevalCategory.COLOR_ATTRI:
        return n >= 2 and len(set(pairs)) == n
    raise CategoryError(f"unknown category {category!r}")


def applicable_categories(target: SceneSpec) -> tuple[GenevalCategory, ...]:
    return tuple(c for c in GenevalCategory if category_applicable(target, c))


def score_geneval(detected: DetectedScene, target: SceneSpec, category: GenevalCategory) -> int:
    """Binary category score of a detected scene against its target spec."""
    if not category_applicable(target, category):
        raise CategoryError(f"category {category.value} not applicable to this target")
    target_pairs = sorted((o.shape, o.color) for o in target.objects)
    detected_pairs = sorted((o.shape, o.color) for o in detected.objects)
    if category in (GenevalCategory.SINGLE_OBJ, GenevalCategory.TWO_OBJ):
        return int(detected_pairs == target_pairs)
    if category == GenevalCategory.COUNTING:
        shape = target.objects[0].shape
        want = len(target.objects)
        got = sum(1 for o in detected.objects if o.shape == shape)
        return int(got == want)
    if category == GenevalCategory.COLORS:
        return int(
            sorted(o.color for o in detected.objects)
            == sorted(o.color for o in target.objects)
        )
    if category == GenevalCategory.POSITION:
        by_pair: dict[tuple[str, str], list[DetectedObject]] = {}
        for o in detected.objects:
            by_pair.setdefault((o.shape, o.color), []).append(o)
        for subj, rel, obj in target.relations:
            s = target.objects[subj]
            o = target.objects[obj]
            s_hits = by_pair.get((s.shape, s.color), [])
            o_hits = by_pair.get((o.shape, o.color), [])
            if len(s_hits) != 1 or len(o_hits) != 1:
                return 0
            if not relation_holds(rel, s_hits[0].anchor, o_hits[0].anchor):
                return 0
        return 1
    if category == GenevalCategory.COLOR_ATTRI:
        remaining = list(detected_pairs)
        for pair in target_pairs:
            if pair in remaining:
                remaining.remove(pair)
            else:
                return 0
        return 1
    raise CategoryError(f"unknown category {category!r}")


# ---------------------------------------------------------------------------
# Serialization


def scene_to_json(spec: SceneSpec) -> str:
    payload = {
        "canvas_size": spec.canvas_size,
        "objects": [
            {"shape": o.shape, "color": o.color, "anchor": list(o.anchor), "extent": o.extent}
            for o in spec.objects
        ],
        "relations": [[s, r, o] for s, r, o in spec.relations],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def scene_from_json(line: str) -> SceneSpec:
    payload = json.loads(line)
    objects = tuple(
        ObjectSpec(
            shape=o["shape"],
            color=o["color"],
            anchor=(int(o["anchor"][0]), int(o["anchor"][1])),
            extent=int(o.get("extent", 1)),
        )
        for o in payload["objects"]
    )
    relations = tuple((int(s), str(r), int(o)) for s, r, o in payload.get("relations", []))
    return SceneSpec(objects=objects, relations=relations, canvas_size=int(payload["canvas_size"]))


def write_scenes(specs: Sequence[SceneSpec], path) -> None:
    with open(path, "w") as f:
        for spec in specs:
            f.write(scene_to_json(spec) + "\n")


def read_scenes(path) -> list[SceneSpec]:
    with open(path) as f:
        return [scene_from_json(line) for line in f if line.strip()]


def grid_to_png(grid: ImageGrid, path, cell_px: int = 16) -> None:
    """Write the grid as a PNG, one cell_px x cell_px block per cell."""
    from PIL import Image

    rgb = np.array(PALETTE_RGB, dtype=np.uint8)[grid.cells]
    img = np.repeat(np.repeat(rgb, cell_px, axis=0), cell_px, axis=1)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Random scene construction (shared by the data pipeline and tests)


def place_objects(
    rng: np.random.Generator,
    parts: Sequence[tuple[str, str, int]],
    canvas_size: int = DEFAULT_CANVAS,
    max_attempts: int = 64,
) -> tuple[ObjectSpec, ...] | None:
    """Place (shape, color, extent) parts at random non-touching anchors.

    Returns None when no placement was found within max_attempts.
    """
    for _ in range(max_attempts):
        placed: list[ObjectSpec] = []
        blocked: set[tuple[int, int]] = set()
        ok = True
        for shape, color, extent in parts:
            h, w = stencil_size(shape, extent)
            anchors = [
                (r, c)
                for r in range(canvas_size - h + 1)
                for c in range(canvas_size - w + 1)
                if not any(
                    (r + dr, c + dc) in blocked
                    for dr, dc in STENCILS[(shape, extent)]
                )
            ]
            if not anchors:
                ok = False
                break
            anchor = anchors[rng.integers(len(anchors))]
            obj = ObjectSpec(shape=shape, color=color, anchor=anchor, extent=extent)
            placed.append(obj)
            blocked |= _neighborhood(obj.cells())
        if ok:
            return tuple(placed)
    return None
