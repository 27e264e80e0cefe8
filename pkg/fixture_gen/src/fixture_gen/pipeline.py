"""End-to-end fixture generation: name list -> encoder -> fixture pair."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import get_encoder
from .errors import GenError
from .writer import write_fixture

DEFAULT_TEMPLATE = "a photo of a {}"
DEFAULT_ENCODER = "chargram64-v1"


@dataclass(frozen=True)
class GenSpec:
    """One fixture-generation job.

    ``names_path`` lists class names one per line (UTF-8, blank lines
    skipped).  Each name is rendered through ``template`` before encoding;
    the manifest keeps the raw names, the encoder sees the rendered text.
    """

    names_path: str
    out_base: str
    template: str = DEFAULT_TEMPLATE
    encoder: str = DEFAULT_ENCODER


def load_names(path) -> list[str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise GenError(f"cannot read name list {p}: {e}") from e
    except UnicodeDecodeError as e:
        raise GenError(f"name list {p} is not UTF-8: {e}") from e
    names = [line.strip() for line in text.splitlines()]
    names = [n for n in names if n]
    if not names:
        raise GenError(f"name list {p} contains no names")
    return names


def render_template(template: str, name: str) -> str:
    if "{}" not in template:
        raise GenError(f"template {template!r} has no {{}} placeholder")
    try:
        return template.format(name)
    except (ValueError, IndexError, KeyError) as e:
        raise GenError(f"template {template!r} failed on {name!r}: {e}") from e


def templated_names(names, template: str) -> list[tuple[str, str]]:
    """Render every name and drop duplicates of the rendered text.

    Deduplication happens after templating (two raw names that render to
    the same prompt are one class); the first spelling wins.  Matching is
    case-insensitive because the downstream library treats names that way.
    """
    out: list[tuple[str, str]] = []
    seen: set[str] = set()
    for name in names:
        rendered = render_template(template, name)
        key = rendered.strip().casefold()
        if key in seen:
            continue
        seen.add(key)
        out.append((name, rendered))
    return out


def generate_fixture(spec: GenSpec) -> tuple[Path, Path]:
    """Encode the name list and write the fixture pair; return both paths."""
    enc = get_encoder(spec.encoder)
    pairs = templated_names(load_names(spec.names_path), spec.template)
    names = [raw for raw, _ in pairs]
    rows = enc.encode_all([rendered for _, rendered in pairs])
    return write_fixture(spec.out_base, names, rows)


def scene_vector(class_names, template: str = DEFAULT_TEMPLATE,
                 encoder: str = DEFAULT_ENCODER) -> np.ndarray:
    """Stand-in image embedding: unit-normalized mean of member texts.

    Demo helper for the selection CLI.  It lives in the same embedding
    space as fixtures generated with the same encoder and template, so
    its cosines against those fixture rows peak at the member classes.
    """
    enc = get_encoder(encoder)
    names = [n for n in class_names if n.strip()]
    if not names:
        raise GenError("scene needs at least one class name")
    mean = enc.encode_all([render_template(template, n) for n in names]).mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        raise GenError("scene classes cancel out; cannot normalize")
    return mean / norm


def write_scene_vector(path, vec: np.ndarray) -> Path:
    """Write a vector as one line of whitespace-separated decimal floats."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(" ".join(repr(float(v)) for v in vec) + "\n", encoding="utf-8")
    return p
