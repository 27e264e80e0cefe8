"""Command-line entry points.

``gen-fixture`` encodes a class-name list into a binary embedding
fixture plus JSON manifest; ``gen-scene-vec`` writes a demo image-
embedding vector for a described scene.  Exit codes: 0 success, 2 bad
input (missing file, unknown encoder, bad template, empty list), 1
unexpected internal failure.
"""

import argparse
import sys

from .errors import GenError
from .pipeline import (DEFAULT_ENCODER, DEFAULT_TEMPLATE, GenSpec,
                       generate_fixture, scene_vector, write_scene_vector)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2


def _fixture_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gen-fixture",
        description="Encode a class-name list into an .embt fixture + manifest.")
    p.add_argument("--names", required=True,
                   help="text file with one class name per line (UTF-8)")
    p.add_argument("--out", required=True,
                   help="output base path; writes <out>.embt and <out>.json")
    p.add_argument("--template", default=DEFAULT_TEMPLATE,
                   help="prompt template with a {} placeholder "
                        f"(default: {DEFAULT_TEMPLATE!r})")
    p.add_argument("--encoder", default=DEFAULT_ENCODER,
                   help=f"encoder identifier (default: {DEFAULT_ENCODER})")
    return p


def main(argv=None) -> int:
    args = _fixture_parser().parse_args(argv)
    spec = GenSpec(names_path=args.names, out_base=args.out,
                   template=args.template, encoder=args.encoder)
    try:
        embt, manifest = generate_fixture(spec)
    except GenError as e:
        print(f"gen-fixture: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001 - tool boundary
        print(f"gen-fixture: internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    print(f"wrote {embt} and {manifest}")
    return EXIT_OK


def _scene_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gen-scene-vec",
        description="Write a demo image-embedding vector for a scene "
                    "described by its class names.")
    p.add_argument("--classes", required=True,
                   help="comma-separated class names present in the scene")
    p.add_argument("--out", required=True, help="output .vec path")
    p.add_argument("--template", default=DEFAULT_TEMPLATE,
                   help="prompt template with a {} placeholder "
                        f"(default: {DEFAULT_TEMPLATE!r})")
    p.add_argument("--encoder", default=DEFAULT_ENCODER,
                   help=f"encoder identifier (default: {DEFAULT_ENCODER})")
    return p


def scene_vec_main(argv=None) -> int:
    args = _scene_parser().parse_args(argv)
    names = [n.strip() for n in args.classes.split(",")]
    try:
        vec = scene_vector(names, template=args.template, encoder=args.encoder)
        path = write_scene_vector(args.out, vec)
    except GenError as e:
        print(f"gen-scene-vec: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001 - tool boundary
        print(f"gen-scene-vec: internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    print(f"wrote {path} ({vec.size} dims)")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
