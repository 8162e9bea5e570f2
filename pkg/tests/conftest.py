import sys
import zlib
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for the oracles module

from embkit.datamodel import EmbeddingMatrix


class PlantedEncoder:
    """Deterministic stub encoder: each text hashes to a fixed unit vector.

    An explicit `table` pins chosen texts to chosen rows; side can shift the
    vector so query/passage asymmetry is testable."""

    def __init__(self, dim=8, table=None, scale=1.0, side_sensitive=False):
        self.dim = dim
        self.table = dict(table or {})
        self.scale = scale
        self.side_sensitive = side_sensitive

    def _vector(self, text, side):
        if text in self.table:
            vec = np.asarray(self.table[text], dtype=np.float64)
        else:
            tag = text + ("\x00" + side if self.side_sensitive else "")
            key = zlib.crc32(tag.encode("utf-8"))
            rng = np.random.default_rng(key)
            vec = rng.normal(size=self.dim)
        return vec / np.linalg.norm(vec)

    def encode(self, texts, side):
        if not texts:
            return EmbeddingMatrix(np.zeros((0, self.dim)), normalized=True)
        rows = np.stack([self._vector(t, side) for t in texts]) * self.scale
        if self.scale == 1.0:
            return EmbeddingMatrix(rows, normalized=True)
        return EmbeddingMatrix(rows)


@pytest.fixture
def planted_encoder():
    return PlantedEncoder


def one_hot(dim, index, value=1.0):
    vec = np.zeros(dim)
    vec[index] = value
    return vec
