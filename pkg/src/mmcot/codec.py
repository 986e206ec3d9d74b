"""Deterministic visual tokenizer: grid cells <-> fixed-length token blocks,
plus the fixed codebook feature matrix targeted by the reconstruction loss.

The codec is lossless on palette-valid grids, which keeps every downstream
check exact. Codebook rows are fixed random unit-norm vectors from a
documented seed (DEFAULT_CODEBOOK_SEED) so feature geometry is nondegenerate
and reproducible.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .world import COLORS, ImageGrid

DEFAULT_CODEBOOK_SEED = 20240501
DEFAULT_NUM_ENTRIES = len(COLORS) + 1  # background + 8 colors
DEFAULT_FEATURE_DIM = 16
MAX_NUM_ENTRIES = 64

CODEBOOK_MAGIC = b"MMCB1"


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class Codebook:
    features: np.ndarray  # K x D' float32, unit-norm rows

    def __post_init__(self):
        arr = np.asarray(self.features, dtype=np.float32)
        if arr.ndim != 2:
            raise CodecError("features must be a K x D' matrix")
        k = arr.shape[0]
        if not (1 <= k <= MAX_NUM_ENTRIES):
            raise CodecError(f"num_entries must be in 1..{MAX_NUM_ENTRIES}, got {k}")
        if k > 1:
            diffs = arr[:, None, :] - arr[None, :, :]
            dist = np.sqrt((diffs**2).sum(-1))
            dist[np.diag_indices(k)] = np.inf
            if dist.min() <= 0.0:
                raise CodecError("codebook rows must be pairwise distinct")
        arr.flags.writeable = False
        object.__setattr__(self, "features", arr)

    @property
    def num_entries(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @classmethod
    def from_seed(
        cls,
        num_entries: int = DEFAULT_NUM_ENTRIES,
        feature_dim: int = DEFAULT_FEATURE_DIM,
        seed: int = DEFAULT_CODEBOOK_SEED,
    ) -> "Codebook":
        rng = np.random.default_rng(seed)
        feats = rng.standard_normal((num_entries, feature_dim))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        return cls(features=feats.astype(np.float32))


@dataclass(frozen=True)
class VisualTokenBlock:
    tokens: tuple[int, ...]

    def __len__(self):
        return len(self.tokens)


def block_length(canvas_size: int) -> int:
    return canvas_size * canvas_size


def encode_image(image: ImageGrid, codebook: Codebook) -> VisualTokenBlock:
    """Row-major mapping of cell palette indices to codebook indices."""
    palette_max = int(image.cells.max(initial=0))
    if palette_max >= codebook.num_entries:
        raise CodecError(
            f"palette value {palette_max} exceeds codebook size {codebook.num_entries}"
        )
    return VisualTokenBlock(tokens=tuple(int(v) for v in image.cells.reshape(-1)))


def decode_tokens(
    block: VisualTokenBlock, canvas_size: int, codebook: Codebook
) -> tuple[ImageGrid, bool]:
    """Inverse of encode_image on its range.

    Indices >= the palette size decode to background; the second return value
    flags that lossy fallback.
    """
    t = block_length(canvas_size)
    if len(block.tokens) != t:
        raise CodecError(f"block length {len(block.tokens)} != {t}")
    palette = len(COLORS) + 1
    lossy = False
    cells = np.zeros(t, dtype=np.int64)
    for i, tok in enumerate(block.tokens):
        if not (0 <= tok < codebook.num_entries):
            raise CodecError(f"token {tok} outside codebook range 0..{codebook.num_entries - 1}")
        if tok >= palette:
            lossy = True
        else:
            cells[i] = tok
    return ImageGrid(cells.reshape(canvas_size, canvas_size)), lossy


def codebook_features(block: VisualTokenBlock, codebook: Codebook) -> np.ndarray:
    """Pure gather: row t of the result is codebook.features[block.tokens[t]]."""
    idx = np.asarray(block.tokens, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= codebook.num_entries):
        raise CodecError("token outside codebook range")
    return codebook.features[idx]


def save_codebook(codebook: Codebook, path) -> None:
    """Binary layout: b"MMCB1", int32 K, int32 D', row-major float32."""
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<ii", codebook.num_entries, codebook.feature_dim))
        f.write(np.ascontiguousarray(codebook.features, dtype="<f4").tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as f:
        magic = f.read(len(CODEBOOK_MAGIC))
        if magic != CODEBOOK_MAGIC:
            raise CodecError(f"bad codebook magic {magic!r}")
        k, d = struct.unpack("<ii", f.read(8))
        data = np.frombuffer(f.read(4 * k * d), dtype="<f4").reshape(k, d)
    return Codebook(features=data.copy())
