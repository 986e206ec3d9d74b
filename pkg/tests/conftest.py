import numpy as np
import pytest
from hypothesis import strategies as st

from mmcot import world


def random_scene(rng: np.random.Generator, n_objects: int, canvas_size: int = 8,
                 extents=(1, 2), with_relation: bool = False) -> world.SceneSpec:
    """Random valid scene used across the test suite."""
    for _ in range(32):
        parts = []
        for _ in range(n_objects):
            shape = world.SHAPES[rng.integers(len(world.SHAPES))]
            color = world.COLORS[rng.integers(len(world.COLORS))]
            extent = extents[rng.integers(len(extents))]
            parts.append((shape, color, extent))
        placed = world.place_objects(rng, parts, canvas_size=canvas_size)
        if placed is None:
            continue
        relations = ()
        if with_relation and n_objects >= 2:
            rel = next(
                (r for r in world.RELATIONS
                 if world.relation_holds(r, placed[0].anchor, placed[1].anchor)),
                None,
            )
            if rel is None:
                continue
            relations = ((0, rel, 1),)
        return world.SceneSpec(objects=placed, relations=relations, canvas_size=canvas_size)
    raise AssertionError("could not build a random scene")


@st.composite
def scenes(draw, max_objects: int = 3, canvas_size: int = 8, extents=(1, 2)):
    seed = draw(st.integers(min_value=0, max_value=2**32 - 1))
    n = draw(st.integers(min_value=1, max_value=max_objects))
    rng = np.random.default_rng(seed)
    return random_scene(rng, n, canvas_size=canvas_size, extents=extents)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
