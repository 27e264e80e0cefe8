"""Command-line entry point: selection, training, gradient verification,
ablation sweeps, and fixture tooling as reproducible batch commands.

Exit codes are disjoint and stable:

* 0 - success
* 1 - unexpected internal error
* 2 - configuration or file-format problem (also argparse usage errors)
* 3 - empty selection (every filter pass rejected every class)
* 4 - training aborted on a non-finite loss

Config files are flat JSON objects with dotted keys (``"dcp.temperature"``)
so they diff cleanly; ``--override k=v`` entries win over the file, and
built-in defaults fill the rest.  Unknown keys are rejected by name.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import statistics
import sys
import tempfile
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from .embeddings import CategoryLibrary, EmbeddingTable, load_fixture, save_fixture
from .errors import (ConfigurationError, ContractError, DataError, DimensionError,
                     EmptySelectionError, FixtureFormatError, PromptFocusError,
                     TrainAbortError)
from .focuser import PffParams, pff_layer_forward
from .gradcheck import check_gradients, run_all_checks
from .harness import ONTOLOGY, TrainConfig, synthetic_library, train
from .rng import RngState
from .selection import DcpConfig, PromptSelection, select_prompts
from .tensor import Tensor, mul, sum_all

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_FORMAT = 2
EXIT_EMPTY = 3
EXIT_ABORT = 4

GRADCHECK_TOLERANCE = 1e-4

_DCP_KEYS = tuple(f.name for f in dataclass_fields(DcpConfig))
_TRAIN_KEYS = tuple(f.name for f in dataclass_fields(TrainConfig) if f.name != "dcp")
KNOWN_KEYS = frozenset(_TRAIN_KEYS) | {f"dcp.{k}" for k in _DCP_KEYS}


# ---------------------------------------------------------------------------
# config plumbing


def parse_override(item: str) -> tuple[str, object]:
    """One ``key=value`` entry; the value is JSON, or a bare string."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"override {item!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # unquoted strings like component=self_only
    return key, value


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return data


def merge_config(file_cfg: dict, overrides: dict) -> dict:
    flat = dict(file_cfg)
    flat.update(overrides)
    for key in flat:
        if key not in KNOWN_KEYS:
            raise ConfigurationError(f"unknown config key {key!r}")
    return flat


def build_train_config(flat: dict, seed: int | None = None) -> TrainConfig:
    dcp_kwargs = {}
    train_kwargs = {}
    for key, value in flat.items():
        if key.startswith("dcp."):
            dcp_kwargs[key[4:]] = value
        else:
            train_kwargs[key] = value
    if "scene_classes" in train_kwargs and train_kwargs["scene_classes"] is not None:
        train_kwargs["scene_classes"] = tuple(train_kwargs["scene_classes"])
    if seed is not None:
        train_kwargs["seed"] = seed
    return TrainConfig(dcp=DcpConfig(**dcp_kwargs), **train_kwargs)


def gather_flat_config(args) -> dict:
    file_cfg = load_config_file(args.config) if args.config else {}
    overrides = dict(parse_override(item) for item in args.override or [])
    return merge_config(file_cfg, overrides)


# ---------------------------------------------------------------------------
# select


def _read_vector(path) -> np.ndarray:
    """Image embedding file: whitespace-separated decimal floats."""
    try:
        vec = np.loadtxt(path, dtype=np.float64).ravel()
    except OSError as e:
        raise ConfigurationError(f"cannot read embedding file {path}: {e}") from e
    except ValueError as e:
        raise FixtureFormatError(f"embedding file {path} is not numeric: {e}") from e
    if vec.size == 0:
        raise FixtureFormatError(f"embedding file {path} holds no values")
    return vec


def _synthetic_selection_inputs(classes: int, dim: int, seed: int):
    if classes < 1:
        raise ConfigurationError(f"--classes must be >= 1, got {classes}")
    rng = RngState(seed).derive("cli/select")
    rows = rng.normal((classes, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    names = tuple(f"class{i:03d}" for i in range(classes))
    lib = CategoryLibrary(names)
    table = EmbeddingTable(names, rows)
    img = rng.normal((dim,))
    img /= np.linalg.norm(img)
    return lib, table, img


def selection_to_dict(sel: PromptSelection) -> dict:
    return {"classes": list(sel.cls),
            "sim": [float(s) for s in sel.sim],
            "iterations_used": sel.iterations_used,
            "final_tau_f": sel.final_tau_f,
            "final_tau_c": sel.final_tau_c}


def cmd_select(args) -> int:
    flat = gather_flat_config(args)
    dcp = build_train_config(flat, seed=args.seed).dcp
    if args.synthetic:
        lib, table, img = _synthetic_selection_inputs(args.classes, args.dim, args.seed)
    else:
        if not args.fixture:
            raise ConfigurationError("select needs --fixture or --synthetic")
        lib, table = load_fixture(args.fixture)
        if not args.image:
            raise ConfigurationError("select with --fixture needs --image")
        img = _read_vector(args.image)
    sel = select_prompts(img, lib, table, dcp)
    text = json.dumps(selection_to_dict(sel), sort_keys=True, indent=1) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    flat = gather_flat_config(args)
    cfg = build_train_config(flat, seed=args.seed)
    if args.fixture:
        fixtures = load_fixture(args.fixture)
    else:
        fixtures = synthetic_library()
    report = train(cfg, fixtures, args.out)
    summary = {"out_dir": str(args.out),
               "steps": cfg.steps,
               "loss_first": report.loss_first,
               "loss_last": report.loss_last,
               "step0_equivalence": report.step0_equivalence,
               "backbone_hash_equal":
                   report.backbone_hash_start == report.backbone_hash_end,
               "knowledge_miou": report.final_knowledge["miou"],
               "application_miou": report.final_application["miou"]}
    sys.stdout.write(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def _pff_tensor_errors(seed: int) -> dict[str, float]:
    """Worst gradcheck error for every tensor of one focuser layer."""
    rng = RngState(seed).derive("cli/gradcheck")
    width, classes, patches = 8, 3, 4
    rows = rng.normal((classes, width))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    names = tuple(f"g{i}" for i in range(classes))
    table = EmbeddingTable(names, rows)
    raw = rng.uniform(classes) + 0.05
    sel = PromptSelection(cls=names, sim=tuple(float(s) for s in raw / raw.sum()))
    params = PffParams.init(width, rng, heads=2, token_count=2)
    for _, t in params.tensors():
        if not np.any(t.data):  # zero-initialized layers would hide gradients
            t.data = rng.normal(t.data.shape, std=0.05)
    f_i = Tensor(rng.normal((patches, width)))
    probe = Tensor(rng.normal((patches, width)))

    def build():
        return sum_all(mul(pff_layer_forward(f_i, sel, table, params), probe))

    return check_gradients(build, params.tensors(), sample=4,
                           rng=rng.derive("sample"))


def cmd_gradcheck(args) -> int:
    results: dict[str, float] = {}
    if args.scope in ("tensor_core", "all"):
        for op, err in run_all_checks(range(3)).items():
            results[f"op.{op}"] = err
    if args.scope in ("pff", "all"):
        for name, err in _pff_tensor_errors(seed=0).items():
            results[f"pff.{name}"] = err
    failed = 0
    for name in sorted(results):
        err = results[name]
        ok = err < GRADCHECK_TOLERANCE
        failed += 0 if ok else 1
        sys.stdout.write(f"{'PASS' if ok else 'FAIL'} {name} {err:.3e}\n")
    sys.stdout.write(f"{len(results) - failed}/{len(results)} checks passed "
                     f"(tolerance {GRADCHECK_TOLERANCE:g})\n")
    return EXIT_OK if failed == 0 else EXIT_INTERNAL


# ---------------------------------------------------------------------------
# ablate

ABLATE_AXES = ("token_length", "tau_f", "tau_c", "max_classes", "component")


def _axis_value(axis: str, raw: str) -> object:
    if axis == "component":
        return raw
    if axis in ("token_length", "max_classes"):
        return int(raw)
    return float(raw)


def _apply_axis(flat: dict, axis: str, value) -> dict:
    out = dict(flat)
    if axis == "token_length":
        out["token_count"] = value
    elif axis == "component":
        out["component"] = value
    elif axis == "max_classes":
        out["dcp.max_classes"] = value
    elif axis == "tau_f":
        # sweep the schedule start; keep the schedule non-empty
        out["dcp.tau_f_min"] = value
        out["dcp.tau_f_max"] = max(value, out.get("dcp.tau_f_max", 0.005))
    elif axis == "tau_c":
        out["dcp.tau_c_min"] = value
        out["dcp.tau_c_max"] = max(value, out.get("dcp.tau_c_max", 7.0))
    else:
        raise ConfigurationError(f"unknown ablation axis {axis!r}")
    return out


def cmd_ablate(args) -> int:
    values = [v for v in (args.values or "").split(",") if v]
    if not values:
        raise ConfigurationError("ablate needs a non-empty --values list")
    if args.seeds < 1:
        raise ConfigurationError(f"--seeds must be >= 1, got {args.seeds}")
    flat = gather_flat_config(args)
    fixtures = load_fixture(args.fixture) if args.fixture else synthetic_library()

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([args.axis, "mean_application_miou", "std_application_miou",
                     "seeds"])
    for raw in values:
        value = _axis_value(args.axis, raw)
        swept = _apply_axis(flat, args.axis, value)
        mious = []
        for seed in range(args.seeds):
            cfg = build_train_config(swept, seed=seed)
            with tempfile.TemporaryDirectory() as scratch:
                report = train(cfg, fixtures, scratch)
            mious.append(report.final_application["miou"])
        spread = statistics.pstdev(mious) if len(mious) > 1 else 0.0
        writer.writerow([raw, repr(float(np.mean(mious))), repr(spread),
                         args.seeds])
        sys.stderr.write(f"{args.axis}={raw}: mean {np.mean(mious):.4f} "
                         f"over {args.seeds} seed(s)\n")
    text = buf.getvalue()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fixtures


def cmd_fixtures(args) -> int:
    if args.inspect:
        lib, table = load_fixture(args.inspect)
        info = {"count": len(lib), "dim": table.dim,
                "names_head": list(lib.names[:8]),
                "covers_toy_ontology": all(n in set(lib.names) for n in ONTOLOGY)}
        sys.stdout.write(json.dumps(info, sort_keys=True, indent=1) + "\n")
        return EXIT_OK
    if not args.out:
        raise ConfigurationError("fixtures needs --inspect or --out")
    lib, table = synthetic_library(dim=args.dim, extra=args.extra,
                                   twin_text_cos=args.twin_cos)
    save_fixture(args.out, lib, table)
    sys.stdout.write(json.dumps({"written": str(args.out), "count": len(lib),
                                 "dim": table.dim}, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def _add_config_flags(sub):
    sub.add_argument("--config", help="flat JSON config file with dotted keys")
    sub.add_argument("--override", action="append", metavar="KEY=VALUE",
                     help="config override, repeatable; wins over the file")
    sub.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptfocus",
        description="prompt selection and focuser training on the toy task")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    p = subs.add_parser("select", help="run prompt selection on one embedding")
    _add_config_flags(p)
    p.add_argument("--fixture", help=".embt category fixture")
    p.add_argument("--image", help="image embedding file (decimal floats)")
    p.add_argument("--synthetic", action="store_true",
                   help="use a generated library and embedding instead of files")
    p.add_argument("--classes", type=int, default=12,
                   help="synthetic library size (with --synthetic)")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--out", help="also write the selection JSON here")
    p.set_defaults(run=cmd_select)

    p = subs.add_parser("train", help="train the focuser and write artifacts")
    _add_config_flags(p)
    p.add_argument("--fixture", help="train against this .embt library")
    p.add_argument("--out", default="out", help="artifact directory")
    p.set_defaults(run=cmd_train)

    p = subs.add_parser("gradcheck", help="verify analytic gradients")
    p.add_argument("--scope", choices=("tensor_core", "pff", "all"),
                   default="all")
    p.set_defaults(run=cmd_gradcheck)

    p = subs.add_parser("ablate", help="sweep one config axis, CSV out")
    _add_config_flags(p)
    p.add_argument("--axis", choices=ABLATE_AXES, required=True)
    p.add_argument("--values", required=True,
                   help="comma-separated axis values")
    p.add_argument("--seeds", type=int, default=3,
                   help="seeds averaged per value")
    p.add_argument("--fixture", help="train against this .embt library")
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(run=cmd_ablate)

    p = subs.add_parser("fixtures", help="generate or inspect .embt fixtures")
    p.add_argument("--out", help="write the toy library fixture here")
    p.add_argument("--inspect", metavar="PATH", help="print a fixture summary")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--extra", type=int, default=12,
                   help="distractor classes beyond the toy ontology")
    p.add_argument("--twin-cos", type=float, default=None,
                   help="rebuild the look-alike vehicle rows at this cosine")
    p.set_defaults(run=cmd_fixtures)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except EmptySelectionError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_EMPTY
    except TrainAbortError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_ABORT
    except (ConfigurationError, FixtureFormatError, DataError,
            DimensionError, ContractError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_FORMAT
    except PromptFocusError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
