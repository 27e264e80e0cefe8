"""Prompt-guided feature focuser: the trainable adapter block.

Per frozen backbone layer, class-prompt embeddings are scaled by their
log-normalized probabilities and fused by an MLP, concatenated with that
layer's learnable tokens, self-attended, and then read by the image
features through cross-attention (image-side queries, so the result keeps
the patch-sequence length).  A zero-initialized output MLP makes the whole
block an exact no-op at initialization, so training starts from the frozen
baseline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingTable
from .errors import (ConfigurationError, ContractError, DataError, DimensionError,
                     FixtureFormatError)
from .rng import RngState
from .selection import PromptSelection
from .tensor import (AttentionParams, MlpParams, Tensor, add, broadcast_rows,
                     concat_rows, expand_cols, matmul, mean_rows, mlp_forward,
                     mul, multi_head_attention, slice_rows)

DEFAULT_TOKEN_COUNT = 75

COMPONENT_FULL = "full"
COMPONENT_SELF_ONLY = "self_only"
COMPONENT_CROSS_ONLY = "cross_only"
COMPONENT_NO_PROMPTS = "no_prompts"
COMPONENTS = (COMPONENT_FULL, COMPONENT_SELF_ONLY, COMPONENT_CROSS_ONLY,
              COMPONENT_NO_PROMPTS)

IMAGE_QUERY = "image_query"
TEXT_QUERY = "text_query"

CHECKPOINT_MAGIC = b"PFFC"
CHECKPOINT_VERSION = 1


@dataclass
class PffParams:
    """All trainable tensors of one focuser layer."""

    tokens: Tensor
    fusion: MlpParams
    self_attn: AttentionParams
    cross_attn: AttentionParams
    out_mlp: MlpParams
    heads: int

    @classmethod
    def init(cls, width: int, rng: RngState, heads: int = 4,
             token_count: int = DEFAULT_TOKEN_COUNT,
             out_hidden: int | None = None) -> "PffParams":
        if token_count < 1:
            raise ConfigurationError(f"token count must be >= 1, got {token_count}")
        if width % heads != 0:
            raise ConfigurationError(f"width {width} not divisible by {heads} heads")
        # self-attention starts close to a pass-through so the fused class
        # rows reach cross-attention unscrambled; training reshapes it from
        # there (cross-attention keeps the usual random projections: its
        # queries live in the image basis, identity buys nothing there)
        return cls(
            tokens=Tensor(rng.normal((token_count, width), std=0.02), requires_grad=True),
            fusion=MlpParams.init(width, width, rng),
            self_attn=AttentionParams.init(width, rng, identity_gain=6.0),
            cross_attn=AttentionParams.init(width, rng),
            out_mlp=MlpParams.init(width, width, rng, hidden=out_hidden, zero_last=True),
            heads=heads)

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @property
    def token_count(self) -> int:
        return self.tokens.shape[0]

    def tensors(self) -> list[tuple[str, Tensor]]:
        out = [("tokens", self.tokens)]
        out += [(f"fusion.{n}", t) for n, t in self.fusion.tensors()]
        out += [(f"self_attn.{n}", t) for n, t in self.self_attn.tensors()]
        out += [(f"cross_attn.{n}", t) for n, t in self.cross_attn.tensors()]
        out += [(f"out_mlp.{n}", t) for n, t in self.out_mlp.tensors()]
        return out


@dataclass(frozen=True)
class FusedPrompt:
    """Fused prompt features, one row per selected class."""

    f_fuse: Tensor


@dataclass
class WidthAdapter:
    """Frozen random projection used only when fixture dim != layer width."""

    weight: Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: RngState) -> "WidthAdapter":
        w = Tensor(rng.normal((d_in, d_out), std=1.0 / np.sqrt(d_in)))
        return cls(weight=w)


def encode_class_prompts(selection: PromptSelection, table: EmbeddingTable) -> Tensor:
    """Frozen lookup of the selected classes' embedding rows, in order."""
    if len(selection) == 0:
        raise ContractError("cannot encode an empty selection")
    rows = np.stack([table.row_of(n) for n in selection.cls])
    return Tensor(rows)


def normalize_similarity(sim) -> Tensor:
    """Min-max normalize log probabilities into [0, 1].

    Equal scores (including a single class) map to all ones rather than
    zeros: a lone prompt should contribute at full weight.
    """
    vals = np.asarray(sim, dtype=np.float64)
    if vals.ndim != 1 or vals.size == 0:
        raise ContractError(f"similarity values must be a non-empty vector, got {vals.shape}")
    if vals.min() <= 0.0:
        raise ContractError("similarity values must be positive for log normalization")
    logs = np.log(vals)
    lo, hi = logs.min(), logs.max()
    if hi == lo:
        return Tensor(np.ones_like(vals))
    return Tensor((logs - lo) / (hi - lo + 1e-12))


def fuse(f_cls: Tensor, p_sim: Tensor, params: MlpParams) -> FusedPrompt:
    """Scale each class row by its normalized score, then apply the MLP."""
    if f_cls.data.ndim != 2 or p_sim.data.ndim != 1:
        raise DimensionError(
            f"expected K x d features and length-K scores, got {f_cls.shape} and {p_sim.shape}")
    if f_cls.shape[0] != p_sim.shape[0]:
        raise DimensionError(
            f"{f_cls.shape[0]} class rows but {p_sim.shape[0]} similarity values")
    scaled = mul(f_cls, expand_cols(p_sim, f_cls.shape[1]))
    return FusedPrompt(f_fuse=mlp_forward(scaled, params))


def _prompt_text(selection: PromptSelection | None, table: EmbeddingTable,
                 params: PffParams, layer_index: int,
                 adapter: WidthAdapter | None, component: str):
    """Token sequence offered to cross-attention: learnable tokens plus
    fused prompts, refined by the self-attention stage.

    The tokens belong to the self-attention stage (their role is to mix
    with the fused prompts there), so ``cross_only`` drops them along with
    that stage and attends to the raw fused prompts alone; ``no_prompts``
    keeps only the tokens."""
    width = params.width
    if component == COMPONENT_NO_PROMPTS:
        text = params.tokens
    else:
        f_cls = encode_class_prompts(selection, table)
        if f_cls.shape[1] != width:
            if adapter is None:
                raise ConfigurationError(
                    f"layer {layer_index}: prompt dim {f_cls.shape[1]} != width {width} "
                    "and no adapter configured")
            f_cls = matmul(f_cls, adapter.weight)
        p_sim = normalize_similarity(selection.sim)
        f_fuse = fuse(f_cls, p_sim, params.fusion).f_fuse
        if component == COMPONENT_CROSS_ONLY:
            text = f_fuse
        else:
            text = concat_rows([params.tokens, f_fuse])

    self_weights: list[np.ndarray] = []
    if component != COMPONENT_CROSS_ONLY:
        text, self_weights = multi_head_attention(
            text, text, text, params.heads, params.self_attn, return_weights=True)
    return text, self_weights


def pff_layer_forward(f_i: Tensor, selection: PromptSelection, table: EmbeddingTable,
                      params: PffParams, layer_index: int = 0,
                      adapter: WidthAdapter | None = None,
                      component: str = COMPONENT_FULL,
                      attention_direction: str = IMAGE_QUERY,
                      return_weights: bool = False):
    """One focuser layer: fuse prompts, attend, and residually refine f_i.

    ``component`` ablates the block: ``self_only`` drops cross-attention
    and injects the mean self-attended text row into every patch;
    ``cross_only`` drops the self-attention stage together with its
    learnable tokens, attending straight to the fused prompts;
    ``no_prompts`` ignores the selection and uses only the tokens.
    Output shape always equals the input shape.
    """
    if component not in COMPONENTS:
        raise ConfigurationError(f"unknown component variant {component!r}")
    width = params.width
    if f_i.data.ndim != 2 or f_i.shape[1] != width:
        raise ConfigurationError(
            f"layer {layer_index}: image features {f_i.shape} do not match width {width}")
    patches = f_i.shape[0]

    text, self_weights = _prompt_text(selection, table, params, layer_index,
                                      adapter, component)
    cross_weights: list[np.ndarray] = []

    if component == COMPONENT_SELF_ONLY:
        mid = broadcast_rows(mean_rows(text), patches)
    elif attention_direction == IMAGE_QUERY:
        mid, cross_weights = multi_head_attention(
            f_i, text, text, params.heads, params.cross_attn, return_weights=True)
    elif attention_direction == TEXT_QUERY:
        # literal text-side queries: the attended sequence has text length,
        # so it is mean-pooled and broadcast back to the patch count
        attended, cross_weights = multi_head_attention(
            text, f_i, f_i, params.heads, params.cross_attn, return_weights=True)
        mid = broadcast_rows(mean_rows(attended), patches)
    else:
        raise ConfigurationError(f"unknown attention direction {attention_direction!r}")

    out = add(f_i, mlp_forward(mid, params.out_mlp))
    if return_weights:
        return out, {"self": self_weights, "cross": cross_weights}
    return out


def pff_layer_forward_batched(f_stack: Tensor, counts: Sequence[int],
                              selections: Sequence[PromptSelection | None],
                              table: EmbeddingTable, params: PffParams,
                              layer_index: int = 0,
                              adapter: WidthAdapter | None = None,
                              component: str = COMPONENT_FULL,
                              attention_direction: str = IMAGE_QUERY) -> Tensor:
    """One focuser layer over several scenes stacked along rows.

    Row block ``i`` of ``f_stack`` holds scene ``i``'s ``counts[i]`` patch
    features and pairs with ``selections[i]``.  Equivalent to running
    ``pff_layer_forward`` per scene and concatenating, but the patch-side
    work (output MLP, residual) runs once on the whole stack, and the
    selection-independent ``no_prompts`` variant shares one token pass.
    """
    if component not in COMPONENTS:
        raise ConfigurationError(f"unknown component variant {component!r}")
    if len(counts) != len(selections) or not counts:
        raise ConfigurationError(
            f"{len(counts)} scene sizes for {len(selections)} selections")
    width = params.width
    if f_stack.data.ndim != 2 or f_stack.shape[1] != width:
        raise ConfigurationError(
            f"layer {layer_index}: stacked features {f_stack.shape} do not match width {width}")
    if sum(counts) != f_stack.shape[0]:
        raise ConfigurationError(
            f"scene sizes {list(counts)} do not cover {f_stack.shape[0]} stacked rows")

    if component == COMPONENT_NO_PROMPTS and attention_direction == IMAGE_QUERY:
        # one shared token pass: the text side never depends on the scene
        text, _ = _prompt_text(None, table, params, layer_index, adapter, component)
        mid = multi_head_attention(f_stack, text, text, params.heads, params.cross_attn)
    else:
        mids = []
        offset = 0
        for count, selection in zip(counts, selections):
            text, _ = _prompt_text(selection, table, params, layer_index,
                                   adapter, component)
            if component == COMPONENT_SELF_ONLY:
                mids.append(broadcast_rows(mean_rows(text), count))
            elif attention_direction == IMAGE_QUERY:
                q = slice_rows(f_stack, offset, offset + count)
                mids.append(multi_head_attention(q, text, text,
                                                 params.heads, params.cross_attn))
            elif attention_direction == TEXT_QUERY:
                q = slice_rows(f_stack, offset, offset + count)
                attended = multi_head_attention(text, q, q,
                                                params.heads, params.cross_attn)
                mids.append(broadcast_rows(mean_rows(attended), count))
            else:
                raise ConfigurationError(
                    f"unknown attention direction {attention_direction!r}")
            offset += count
        mid = mids[0] if len(mids) == 1 else concat_rows(mids)
    return add(f_stack, mlp_forward(mid, params.out_mlp))


def pff_trainable_parameters(layer_params, head_params) -> list[tuple[str, Tensor]]:
    """Flat named list of exactly the focuser and task-head tensors.

    Frozen things (backbone weights, embedding table, width adapter) are
    never part of ``layer_params``/``head_params``, so they cannot leak in.
    """
    out: list[tuple[str, Tensor]] = []
    for i, p in enumerate(layer_params):
        out += [(f"pff{i}.{n}", t) for n, t in p.tensors()]
    out += [(f"head.{n}", t) for n, t in head_params.tensors()]
    return out


# ---------------------------------------------------------------------------
# checkpoint container: named float64 tensor records


def save_checkpoint(path, named_tensors) -> None:
    """Write named tensors as a single binary checkpoint file."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    seen: set[str] = set()
    for name, tensor in named_tensors:
        if name in seen:
            raise ContractError(f"duplicate checkpoint tensor name {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(tensor.data, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into {name: array}; validates structure."""
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FixtureFormatError("file too short for header", offset=len(blob))
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FixtureFormatError(f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}",
                                 offset=0)
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FixtureFormatError(f"unsupported checkpoint version {version}", offset=4)
    pos = 8
    out: dict[str, np.ndarray] = {}

    def need(n: int):
        if pos + n > len(blob):
            raise FixtureFormatError("checkpoint truncated", offset=len(blob))

    while pos < len(blob):
        need(4)
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(name_len)
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        need(4)
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(4 * rank)
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        need(8 * count)
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        if name in out:
            raise FixtureFormatError(f"duplicate tensor record {name!r}")
        out[name] = values.copy()
    return out


def load_checkpoint_into(path, named_tensors) -> None:
    """Load a checkpoint into existing tensors, strictly matching names/shapes."""
    stored = load_checkpoint(path)
    names = [n for n, _ in named_tensors]
    missing = [n for n in names if n not in stored]
    extra = [n for n in stored if n not in set(names)]
    if missing or extra:
        raise DataError(
            f"checkpoint does not match parameters: missing {missing}, extra {extra}")
    for name, tensor in named_tensors:
        value = stored[name]
        if value.shape != tensor.data.shape:
            raise DataError(
                f"tensor {name!r} has shape {value.shape}, expected {tensor.data.shape}")
        # in-place write keeps any views onto tensor.data (optimizer flat
        # buffers) aliased to the loaded values
        np.copyto(tensor.data, value)
