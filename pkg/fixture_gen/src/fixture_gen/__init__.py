"""Offline generator for binary category-embedding fixtures.

Encodes a list of class names with a deterministic text encoder and
writes the ``.embt`` fixture + JSON manifest pair that the prompt
selection package loads.  The file format is the only coupling between
the two packages.
"""

from .encoder import ENCODERS, ChargramEncoder, exact_unit, get_encoder
from .errors import GenError
from .pipeline import (DEFAULT_ENCODER, DEFAULT_TEMPLATE, GenSpec,
                       generate_fixture, load_names, scene_vector,
                       templated_names, write_scene_vector)
from .writer import write_fixture

__version__ = "0.1.0"

__all__ = [
    "ENCODERS", "ChargramEncoder", "DEFAULT_ENCODER", "DEFAULT_TEMPLATE",
    "GenError", "GenSpec", "exact_unit", "generate_fixture", "get_encoder",
    "load_names", "scene_vector", "templated_names", "write_fixture",
    "write_scene_vector", "__version__",
]
