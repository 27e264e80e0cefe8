"""Deterministic text encoders for category names.

The default encoder hashes character n-grams of the (templated) name into
a signed sketch and projects it to the output dimension with a seeded
Gaussian matrix.  Name prefixes are weighted up so near-synonyms that
share a stem ("minibus", "minivan") embed close together, the property
the downstream prompt-selection stage keys on.  Everything is pure
arithmetic on fixed seeds: the same encoder id, template, and name list
produce the same bytes on every run and platform.
"""

from dataclasses import dataclass
from functools import cached_property
import hashlib

import numpy as np

from .errors import GenError

NGRAM_SIZES = (2, 3, 4)
PREFIX_WEIGHT = 3.0


def row_norm(vec: np.ndarray) -> float:
    """Euclidean norm through the same reduction a fixture loader uses.

    ``np.linalg.norm`` routes 1-D inputs through BLAS dot but reduces 2-D
    inputs axis-wise with pairwise summation; the two can round an ulp
    apart.  Exactness promises below are against the loader's expression
    (``norm(rows, axis=1)``), so compute norms through that path.
    """
    return float(np.linalg.norm(np.asarray(vec)[None, :], axis=1)[0])


def exact_unit(vec: np.ndarray) -> np.ndarray:
    """Normalize until the norm is exactly 1.0 in float64.

    A single division usually lands within one ulp of unit norm; loaders
    that re-normalize defensively would then rewrite the low bits.  Taking
    the fixed point of x -> x/|x| makes re-normalization a bitwise no-op,
    which is what lets written fixtures round-trip byte-identically.
    Rows where the iteration oscillates one ulp around unit norm get the
    largest component nudged by the few ulps that land the norm exactly.
    """
    vec = np.asarray(vec, dtype=np.float64)
    for _ in range(8):
        norm = row_norm(vec)
        if norm == 1.0:
            return vec
        if norm == 0.0 or not np.isfinite(norm):
            raise GenError(f"cannot normalize vector with norm {norm!r}")
        vec = vec / norm
    order = np.argsort(np.abs(vec))[::-1]
    for j in order[:3]:
        for direction in (np.inf, -np.inf):
            stepped = vec[j]
            for _ in range(128):
                stepped = np.nextafter(stepped, direction)
                cand = vec.copy()
                cand[j] = stepped
                if row_norm(cand) == 1.0:
                    return cand
    raise GenError("vector never reached exact unit norm")


@dataclass(frozen=True)
class ChargramEncoder:
    """Hashed character n-gram encoder with a fixed Gaussian projection."""

    name: str
    dim: int
    sketch_dim: int = 1024
    projection_seed: int = 0xC1DE

    @cached_property
    def projection(self) -> np.ndarray:
        rng = np.random.default_rng(self.projection_seed)
        mat = rng.standard_normal((self.sketch_dim, self.dim))
        return mat / np.sqrt(self.dim)

    def _grams(self, text: str):
        padded = "#" + text.strip().lower() + "#"
        for n in NGRAM_SIZES:
            for i in range(len(padded) - n + 1):
                yield padded[i:i + n], PREFIX_WEIGHT if i == 0 else 1.0

    def encode(self, text: str) -> np.ndarray:
        """Embed one text as an exact-unit-norm float64 vector."""
        sketch = np.zeros(self.sketch_dim)
        for gram, weight in self._grams(text):
            digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "little")
            bucket = value % self.sketch_dim
            sign = 1.0 if (value >> 63) & 1 else -1.0
            sketch[bucket] += sign * weight
        return exact_unit(self.projection.T @ sketch)

    def encode_all(self, texts) -> np.ndarray:
        rows = [self.encode(t) for t in texts]
        if not rows:
            raise GenError("nothing to encode")
        return np.stack(rows)


ENCODERS = {
    "chargram64-v1": ChargramEncoder(name="chargram64-v1", dim=64),
}


def get_encoder(encoder_id: str) -> ChargramEncoder:
    try:
        return ENCODERS[encoder_id]
    except KeyError:
        known = ", ".join(sorted(ENCODERS))
        raise GenError(f"unknown encoder {encoder_id!r} (available: {known})") from None
