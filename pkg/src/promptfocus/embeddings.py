"""Category library, text-embedding table, and image-class similarity.

The embedding fixture is a little-endian binary file (magic ``EMBT``,
version, count, dim, then count*dim float64 values row-major) plus a JSON
sidecar manifest holding the class names.  Everything here is immutable
after load and safe to share across threads.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, DataError, FixtureFormatError

log = logging.getLogger(__name__)

MAGIC = b"EMBT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")

SOURCE_INITIAL = "initial"
SOURCE_SUPPLEMENTED = "supplemented"
_SOURCES = (SOURCE_INITIAL, SOURCE_SUPPLEMENTED)


def _fold(name: str) -> str:
    return name.strip().casefold()


@dataclass(frozen=True)
class CategoryLibrary:
    """Ordered class names, unique after case-folding and trimming."""

    names: tuple[str, ...]
    source: str = SOURCE_INITIAL

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(n.strip() for n in self.names))
        if not self.names:
            raise ContractError("category library must not be empty")
        if self.source not in _SOURCES:
            raise ContractError(f"unknown library source {self.source!r}")
        folded = [_fold(n) for n in self.names]
        if any(not f for f in folded):
            raise ContractError("class names must not be blank")
        seen: set[str] = set()
        for name, key in zip(self.names, folded):
            if key in seen:
                raise ContractError(f"duplicate class name {name!r} after case-folding")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class EmbeddingTable:
    """Unit-norm float64 embedding rows aligned with a name list."""

    names: tuple[str, ...]
    rows: np.ndarray
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        rows = np.ascontiguousarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ContractError(f"embedding rows must be a matrix, got shape {rows.shape}")
        if rows.shape[0] != len(self.names):
            raise ContractError(
                f"{rows.shape[0]} rows for {len(self.names)} names")
        norms = np.linalg.norm(rows, axis=1)
        off = np.abs(norms - 1.0)
        if off.size and off.max() > 1e-6:
            i = int(off.argmax())
            raise ContractError(
                f"row {i} ({self.names[i]!r}) has norm {norms[i]:.8f}, expected 1")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.names)})

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"class {name!r} not found in embedding table") from None

    def row_of(self, name: str) -> np.ndarray:
        return self.rows[self.index_of(name)]


@dataclass(frozen=True)
class SimilarityScores:
    """Per-class scores; when normalized they form a probability vector."""

    values: np.ndarray
    normalized: bool

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size == 0:
            raise ContractError(f"scores must be a non-empty vector, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ContractError("scores must be finite")
        if self.normalized:
            if vals.min() < 0.0 or abs(vals.sum() - 1.0) > 1e-9:
                raise ContractError(
                    f"normalized scores must be a probability vector (sum {vals.sum()!r})")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def summary(self) -> dict:
        v = self.values
        return {"count": int(v.size), "min": float(v.min()), "max": float(v.max()),
                "mean": float(v.mean())}


def _manifest_path(path: Path) -> Path:
    return path.with_suffix(".json")


def load_fixture(path) -> tuple[CategoryLibrary, EmbeddingTable]:
    """Read a binary embedding fixture and its JSON manifest.

    Rows within 1e-3 of unit norm are re-normalized; anything further off
    is rejected.  Structural problems raise ``FixtureFormatError`` with the
    byte offset where the problem was detected.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise FixtureFormatError("file too short for header", offset=len(blob))
    magic, version, count, dim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FixtureFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FixtureFormatError(
            f"unsupported format version {version}, expected {FORMAT_VERSION}", offset=4)
    if count == 0:
        raise FixtureFormatError("count must be positive", offset=8)
    if dim == 0:
        raise FixtureFormatError("dim must be positive", offset=12)
    expected = _HEADER.size + count * dim * 8
    if len(blob) < expected:
        raise FixtureFormatError(
            f"payload truncated: expected {expected} bytes, file has {len(blob)}",
            offset=len(blob))
    if len(blob) > expected:
        raise FixtureFormatError(
            f"{len(blob) - expected} unexpected trailing bytes", offset=expected)
    rows = np.frombuffer(blob, dtype="<f8", count=count * dim,
                         offset=_HEADER.size).reshape(count, dim).copy()

    mpath = _manifest_path(path)
    if not mpath.exists():
        raise FixtureFormatError(f"manifest {mpath.name} not found next to fixture")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FixtureFormatError(f"manifest is not valid JSON: {e}") from e
    for key in ("names", "dim", "count", "source"):
        if key not in manifest:
            raise FixtureFormatError(f"manifest missing field {key!r}")
    if manifest["count"] != count or len(manifest["names"]) != count:
        raise FixtureFormatError(
            f"manifest count {manifest['count']} / {len(manifest['names'])} names "
            f"vs binary count {count}")
    if manifest["dim"] != dim:
        raise FixtureFormatError(f"manifest dim {manifest['dim']} vs binary dim {dim}")
    if manifest["source"] not in _SOURCES:
        raise FixtureFormatError(f"manifest source {manifest['source']!r} unknown")

    norms = np.linalg.norm(rows, axis=1)
    off = np.abs(norms - 1.0)
    worst = int(off.argmax())
    if off[worst] > 1e-3:
        raise DataError(
            f"row {worst} ({manifest['names'][worst]!r}) has norm {norms[worst]:.6f}, "
            "more than 1e-3 from unit")
    rows /= norms[:, None]

    lib = CategoryLibrary(tuple(manifest["names"]), source=manifest["source"])
    table = EmbeddingTable(lib.names, rows)
    return lib, table


def save_fixture(path, lib: CategoryLibrary, table: EmbeddingTable) -> None:
    """Write the binary fixture and manifest; inverse of ``load_fixture``."""
    if lib.names != table.names:
        raise ContractError("library and table names differ")
    path = Path(path)
    rows = np.ascontiguousarray(table.rows, dtype="<f8")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(table), table.dim)
    path.write_bytes(header + rows.tobytes())
    manifest = {"names": list(lib.names), "dim": table.dim,
                "count": len(table), "source": lib.source}
    _manifest_path(path).write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def supplement_library(lib: CategoryLibrary, extra) -> CategoryLibrary:
    """Append new class names, dropping duplicates against the library.

    Original order is preserved and additions keep their given order.  The
    number of names actually added is reported on the module logger.  An
    extra list that adds nothing returns the library unchanged.
    """
    seen = {_fold(n) for n in lib.names}
    added: list[str] = []
    for name in extra:
        key = _fold(name)
        if not key or key in seen:
            continue
        seen.add(key)
        added.append(name.strip())
    log.info("supplement: %d of %d new names added", len(added), len(list(extra)))
    if not added:
        return lib
    return CategoryLibrary(lib.names + tuple(added), source=SOURCE_SUPPLEMENTED)


def image_class_similarity(img_embedding, table: EmbeddingTable,
                           temperature: float = 0.01) -> SimilarityScores:
    """Softmax over cosine similarities between one image and every class."""
    if temperature <= 0.0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    img = np.asarray(img_embedding, dtype=np.float64)
    if img.shape != (table.dim,):
        raise ContractError(f"image embedding shape {img.shape}, expected ({table.dim},)")
    norm = float(np.linalg.norm(img))
    if abs(norm - 1.0) > 1e-6:
        raise ContractError(f"image embedding norm {norm:.8f}, expected 1")
    logits = (table.rows @ img) / float(temperature)
    logits -= logits.max()
    e = np.exp(logits)
    return SimilarityScores(e / e.sum(), normalized=True)
