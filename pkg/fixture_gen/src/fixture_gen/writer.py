"""Binary fixture writer.

Produces the ``.embt`` + ``.json`` pair consumed by the prompt-selection
package's embedding store: a 16-byte little-endian header (magic,
version, count, dim), row-major float64 rows, and a JSON manifest whose
``names``/``dim``/``count``/``source`` fields mirror the binary header.
The byte layout here is the interface contract between the two tools, so
this module is deliberately standalone and dependency-free.
"""

import json
from pathlib import Path
import struct

import numpy as np

from .encoder import exact_unit
from .errors import GenError

MAGIC = b"EMBT"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIII")
SOURCE = "initial"
NORM_TOLERANCE = 1e-6


def validate_rows(names, rows: np.ndarray) -> np.ndarray:
    """Check shape, name uniqueness, and unit norms; return exact rows.

    Rows must already be within ``NORM_TOLERANCE`` of unit norm; they are
    then snapped to the exact fixed point of normalization so a loader
    that re-normalizes reproduces the file byte for byte.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise GenError(f"rows must be 2-D, got shape {rows.shape}")
    count, dim = rows.shape
    if count == 0 or dim == 0:
        raise GenError(f"empty fixture ({count} rows, dim {dim})")
    if len(names) != count:
        raise GenError(f"{len(names)} names for {count} rows")
    seen = set()
    for name in names:
        key = name.strip().casefold()
        if not key:
            raise GenError("blank class name")
        if key in seen:
            raise GenError(f"duplicate class name {name!r}")
        seen.add(key)
    if not np.isfinite(rows).all():
        raise GenError("rows contain non-finite values")
    norms = np.linalg.norm(rows, axis=1)
    worst = int(np.abs(norms - 1.0).argmax())
    if abs(norms[worst] - 1.0) > NORM_TOLERANCE:
        raise GenError(
            f"row {worst} ({names[worst]!r}) has norm {norms[worst]:.9f}, "
            f"more than {NORM_TOLERANCE} from unit")
    return np.stack([exact_unit(row) for row in rows])


def write_fixture(base_path, names, rows: np.ndarray) -> tuple[Path, Path]:
    """Write ``base_path.embt`` and ``base_path.json``; return both paths."""
    rows = validate_rows(names, rows)
    count, dim = rows.shape
    # extensions are appended, not substituted: directory names may
    # contain dots, and a stray ".embt" on the base is forgiven
    base = str(base_path)
    if base.endswith(".embt"):
        base = base[:-len(".embt")]
    embt = Path(base + ".embt")
    manifest = Path(base + ".json")
    payload = np.ascontiguousarray(rows, dtype="<f8")
    embt.parent.mkdir(parents=True, exist_ok=True)
    embt.write_bytes(HEADER.pack(MAGIC, FORMAT_VERSION, count, dim) + payload.tobytes())
    doc = {"names": [str(n) for n in names], "dim": dim,
           "count": count, "source": SOURCE}
    manifest.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n",
                        encoding="utf-8")
    return embt, manifest
