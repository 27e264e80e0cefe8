"""Frozen mock backbone, synthetic street-scene task, and training loop.

The toy task: 8x8 grids of patch cells labeled from a small street
ontology.  Each scene contains a 4-class subset; cell features are class
prototypes (two of which, the van-like pair, sit deliberately close)
pushed through a style transform.  The knowledge-set style is the identity;
the application-set style rotates the prototypes and adds more noise, so a
head trained on raw frozen features degrades under the shift while scene
prompts remain style-invariant.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .embeddings import CategoryLibrary, EmbeddingTable
from .errors import ConfigurationError, ContractError, StateError, TrainAbortError
from .focuser import (COMPONENT_NO_PROMPTS, COMPONENTS, IMAGE_QUERY, PffParams,
                      WidthAdapter, pff_layer_forward, pff_layer_forward_batched,
                      pff_trainable_parameters, save_checkpoint)
from .rng import RngState
from .selection import DcpConfig, PromptSelection, select_prompts
from .tensor import (Tensor, add, affine, backward, cross_entropy_logits,
                     deferred_finite_checks, gelu, matmul)

ONTOLOGY = ("road", "car", "person", "building", "sky",
            "vegetation", "minibus", "minivan")
TWIN_CLASSES = (6, 7)  # prototype near-duplicates, per the ontology above

COMPONENT_FROZEN = "frozen"
COMPONENT_DUMMY = "dummy_prompts"
TRAIN_COMPONENTS = (COMPONENT_FROZEN, COMPONENT_DUMMY) + COMPONENTS


@dataclass(frozen=True)
class SceneStyle:
    """Domain parameters: prototype rotation angle and feature noise."""

    name: str
    rotation: float = 0.0
    noise_std: float = 0.0


@dataclass
class ToyScene:
    labels: np.ndarray    # (grid*grid,) int class ids
    features: np.ndarray  # (grid*grid, feature_dim)
    present: tuple[int, ...]
    grid: int
    style: str
    key: str = ""


class SceneFactory:
    """Shared prototypes and style transforms for scene generation.

    Prototypes are fixed constants of the task (independent of the training
    seed).  Two ingredients make the task discriminate between model
    variants: the twin classes share a base direction with a small offset,
    so they are separable only with scene-content side information once
    noise comes in; and with ``variants=2`` each class occupies a pair of
    antipodal prototypes, which no per-patch linear map can unite but
    attention plus an MLP can.
    """

    def __init__(self, feature_dim: int = 32, twin_gap: float = 0.18,
                 variants: int = 2, variant_spread: float = 1.5,
                 context_pull: float = 0.0):
        classes = len(ONTOLOGY)
        if feature_dim < 2 * classes + 1:
            raise ConfigurationError(
                f"feature_dim {feature_dim} too small for {classes} bimodal prototypes")
        if variants not in (1, 2):
            raise ConfigurationError(f"variants must be 1 or 2, got {variants}")
        rng = RngState(2024).derive("scene-prototypes")
        basis, _ = np.linalg.qr(rng.normal((feature_dim, feature_dim)))
        protos = basis[:classes].copy()
        a, b = TWIN_CLASSES
        shared = basis[classes]  # direction unused by other classes
        protos[a] = shared + twin_gap * protos[a]
        protos[b] = shared - twin_gap * protos[b]
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        self.feature_dim = feature_dim
        self.variants = variants
        self.context_pull = context_pull
        if variants == 1:
            self.prototypes = protos[:, None, :]
        else:
            # each class splits into two modes around its mean direction;
            # the linear-head signal shrinks by 1/sqrt(1+spread^2) while
            # nonlinear per-patch models can use both modes
            modes = basis[classes + 1:classes + 1 + classes]
            hi = protos + variant_spread * modes
            lo = protos - variant_spread * modes
            pair = np.stack([hi, lo], axis=1)
            pair /= np.linalg.norm(pair, axis=2, keepdims=True)
            self.prototypes = pair
        spin = rng.normal((feature_dim, feature_dim))
        skew = (spin - spin.T) / 2.0
        # normalize so a style's rotation value is the largest principal
        # angle in radians rather than an uncalibrated multiple of sqrt(d)
        self._plane = skew / np.linalg.norm(skew, 2)
        self._rotations: dict[float, np.ndarray] = {}

    def rotation_matrix(self, angle: float) -> np.ndarray:
        if angle not in self._rotations:
            self._rotations[angle] = expm(angle * self._plane)
        return self._rotations[angle]

    def styled_prototypes(self, style: SceneStyle) -> np.ndarray:
        return self.prototypes @ self.rotation_matrix(style.rotation).T


DEFAULT_FACTORY = SceneFactory()


def generate_scene(style: SceneStyle, rng: RngState,
                   factory: SceneFactory = DEFAULT_FACTORY, grid: int = 8,
                   classes_per_scene: int = 4,
                   allowed: tuple[int, ...] | None = None,
                   key: str = "") -> ToyScene:
    """One synthetic scene: a class subset laid out in near-equal quotas.

    Deterministic per (style, rng state).  Each chosen class gets the same
    share of cells up to a one-cell remainder, so per-class frequencies
    stay balanced across scenes.
    """
    pool = tuple(range(len(ONTOLOGY))) if allowed is None else tuple(allowed)
    if not (1 <= classes_per_scene <= len(pool)):
        raise ConfigurationError(
            f"cannot place {classes_per_scene} classes from a pool of {len(pool)}")
    cells = grid * grid
    chosen = [pool[i] for i in rng.choice(len(pool), classes_per_scene)]
    quota, leftover = divmod(cells, classes_per_scene)
    counts = [quota + (1 if i < leftover else 0) for i in range(classes_per_scene)]
    flat = np.repeat(np.array(chosen, dtype=np.int64), counts)
    labels = flat[rng.choice(cells, cells)]
    variant = rng.integers(0, factory.variants, cells)
    protos = factory.styled_prototypes(style)
    features = protos[labels, variant]
    if factory.context_pull != 0.0:
        # every cell is biased toward the scene's class composition, so a
        # patch's identity depends on what else is present; per-patch
        # matching against static references cannot absorb this shift
        ctx = protos[list(chosen)].mean(axis=(0, 1))
        features = features + factory.context_pull * ctx
    if style.noise_std > 0.0:
        features = features + rng.normal((cells, factory.feature_dim),
                                         std=style.noise_std)
    return ToyScene(labels=labels, features=features,
                    present=tuple(sorted(set(int(c) for c in chosen))),
                    grid=grid, style=style.name, key=key)


def scene_image_embedding(scene: ToyScene, table: EmbeddingTable,
                          rng: RngState, noise_std: float = 0.02) -> np.ndarray:
    """Style-invariant scene embedding: mean of present classes' text rows.

    This stands in for a contrastive image encoder: scenes embed near the
    text embeddings of what they contain, regardless of visual style.
    """
    rows = np.stack([table.row_of(ONTOLOGY[c]) for c in scene.present])
    v = rows.mean(axis=0)
    if noise_std > 0.0:
        v = v + rng.normal((table.dim,), std=noise_std)
    return v / np.linalg.norm(v)


def synthetic_library(dim: int = 64, extra: int = 12,
                      twin_text_cos: float | None = None) -> tuple[CategoryLibrary, EmbeddingTable]:
    """Deterministic stand-in embedding store covering the ontology.

    By default every class gets an independent random unit row.  Passing
    ``twin_text_cos`` rebuilds the two look-alike vehicle rows with that
    cosine between them, mirroring how near-synonym names embed.
    """
    names = list(ONTOLOGY) + [f"distractor{i}" for i in range(extra)]
    rng = RngState(2024).derive("synthetic-library")
    rows = rng.normal((len(names), dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    if twin_text_cos is not None:
        a, b = TWIN_CLASSES
        basis, _ = np.linalg.qr(rng.normal((dim, 3)).reshape(dim, 3))
        shared, u1, u2 = basis[:, 0], basis[:, 1], basis[:, 2]
        c = math.sqrt(twin_text_cos)
        s = math.sqrt(1.0 - twin_text_cos)
        rows[a] = c * shared + s * u1
        rows[b] = c * shared + s * u2
    lib = CategoryLibrary(tuple(names))
    return lib, EmbeddingTable(lib.names, rows)


# ---------------------------------------------------------------------------
# frozen backbone


@dataclass
class MockBackbone:
    """Fixed random patch projection plus residual GELU blocks, all frozen."""

    patch_weight: Tensor
    block_weights: list[Tensor]

    @classmethod
    def init(cls, feature_dim: int, width: int, depth: int, rng: RngState) -> "MockBackbone":
        pw = Tensor(rng.normal((feature_dim, width), std=1.0 / math.sqrt(feature_dim)))
        blocks = [Tensor(rng.normal((width, width), std=0.5 / math.sqrt(width)))
                  for _ in range(depth)]
        return cls(patch_weight=pw, block_weights=blocks)

    @property
    def width(self) -> int:
        return self.patch_weight.shape[1]

    @property
    def depth(self) -> int:
        return len(self.block_weights)

    def patchify(self, features: np.ndarray) -> Tensor:
        return matmul(Tensor(features), self.patch_weight)

    def block(self, index: int, x: Tensor) -> Tensor:
        return add(x, gelu(matmul(x, self.block_weights[index])))

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for t in [self.patch_weight] + self.block_weights:
            h.update(repr(t.shape).encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


@dataclass
class LinearHead:
    """Per-patch linear map to class logits."""

    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, width: int, classes: int, rng: RngState) -> "LinearHead":
        return cls(w=Tensor(rng.normal((width, classes), std=1.0 / math.sqrt(width)),
                            requires_grad=True),
                   b=Tensor(np.zeros(classes), requires_grad=True))

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w", self.w), ("b", self.b)]

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.w, self.b)


@dataclass
class SegmentationModel:
    """Everything needed to map a scene to per-patch class logits."""

    backbone: MockBackbone
    head: LinearHead
    table: EmbeddingTable
    pff: list[PffParams] | None = None
    component: str = COMPONENT_FROZEN
    attention_direction: str = IMAGE_QUERY
    adapter: WidthAdapter | None = None
    selections: dict[str, PromptSelection] = field(default_factory=dict)

    def logits(self, scene: ToyScene, selection: PromptSelection | None = None) -> Tensor:
        if selection is None:
            selection = self.selections.get(scene.key)
        x = self.backbone.patchify(scene.features)
        arch = "full" if self.component == COMPONENT_DUMMY else self.component
        for i in range(self.backbone.depth):
            x = self.backbone.block(i, x)
            if self.pff is not None and arch != COMPONENT_FROZEN:
                if selection is None:
                    raise ContractError(f"no cached selection for scene {scene.key!r}")
                x = pff_layer_forward(x, selection, self.table, self.pff[i],
                                      layer_index=i, adapter=self.adapter,
                                      component=arch,
                                      attention_direction=self.attention_direction)
        return self.head(x)

    def batched_logits(self, scenes: Sequence[ToyScene]) -> Tensor:
        """Per-patch logits for several scenes, stacked along rows.

        Matches ``logits`` scene by scene while sharing the patch-side
        compute across the batch; row blocks follow the scene order.
        """
        if not scenes:
            raise ContractError("batched_logits needs at least one scene")
        arch = "full" if self.component == COMPONENT_DUMMY else self.component
        counts = [s.labels.size for s in scenes]
        selections: list[PromptSelection | None] = []
        if self.pff is not None and arch != COMPONENT_FROZEN:
            for s in scenes:
                sel = self.selections.get(s.key)
                if sel is None and arch != COMPONENT_NO_PROMPTS:
                    raise ContractError(f"no cached selection for scene {s.key!r}")
                selections.append(sel)
        x = self.backbone.patchify(np.concatenate([s.features for s in scenes]))
        for i in range(self.backbone.depth):
            x = self.backbone.block(i, x)
            if self.pff is not None and arch != COMPONENT_FROZEN:
                x = pff_layer_forward_batched(
                    x, counts, selections, self.table, self.pff[i],
                    layer_index=i, adapter=self.adapter, component=arch,
                    attention_direction=self.attention_direction)
        return self.head(x)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    """First/second moment accumulators keyed by parameter name.

    On the first update with a fresh state the parameters and moments are
    rebound to contiguous flat buffers (each tensor's array becomes a view
    into the shared buffer), so every later update runs a single fused
    numpy pass instead of a per-tensor loop. The per-element arithmetic is
    identical either way; ``m``/``v`` stay inspectable as views.
    """

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    _flat: tuple | None = field(default=None, repr=False)


def _bind_flat(state: AdamWState, named_params) -> None:
    # parameter order is frozen here; adamw_step rejects a different list
    names = tuple(name for name, _ in named_params)
    total = sum(t.data.size for _, t in named_params)
    pbuf = np.empty(total, dtype=np.float64)
    mbuf = np.zeros(total, dtype=np.float64)
    vbuf = np.zeros(total, dtype=np.float64)
    spans = []
    pos = 0
    for name, tensor in named_params:
        size = tensor.data.size
        shape = tensor.data.shape
        seg = pbuf[pos:pos + size]
        np.copyto(seg, tensor.data.ravel())
        tensor.data = seg.reshape(shape)
        state.m[name] = mbuf[pos:pos + size].reshape(shape)
        state.v[name] = vbuf[pos:pos + size].reshape(shape)
        spans.append((pos, pos + size))
        pos += size
    scratch = (np.empty(total, dtype=np.float64), np.empty(total, dtype=np.float64))
    state._flat = (names, pbuf, mbuf, vbuf, np.empty(total, dtype=np.float64),
                   spans, scratch)


def adamw_step(named_params, grads, state: AdamWState, cfg,
               lr: float | None = None) -> None:
    """One AdamW update; decoupled decay is applied before the Adam step.

    ``lr`` overrides ``cfg.lr`` for this step (warmup schedules); decay
    scales with the same effective rate.
    """
    named_params = list(named_params)
    grads = list(grads)
    if len(named_params) != len(grads):
        raise StateError(f"{len(named_params)} params but {len(grads)} gradients")
    eff_lr = cfg.lr if lr is None else lr
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    # denominator rescaled so sqrt(v) needs no per-parameter division:
    # lr*(m/bc1)/(sqrt(v/bc2)+eps) == (lr/bc1)*m / (sqrt(v)+eps*sqrt(bc2)) * ...
    rate = eff_lr / bc1
    root_bc2 = math.sqrt(bc2)
    if state._flat is None and not state.m:
        _bind_flat(state, named_params)
    if state._flat is not None:
        names, pbuf, mbuf, vbuf, gbuf, spans, (dbuf, ubuf) = state._flat
        if names != tuple(name for name, _ in named_params):
            raise StateError("optimizer state is bound to a different parameter list")
        for (name, tensor), grad, (start, stop) in zip(named_params, grads, spans):
            g = np.asarray(grad, dtype=np.float64)
            if g.shape != tensor.data.shape:
                raise StateError(
                    f"gradient shape {g.shape} does not match {name!r} {tensor.data.shape}")
            np.copyto(gbuf[start:stop], g.ravel())
        pbuf *= 1.0 - eff_lr * cfg.weight_decay
        mbuf *= cfg.beta1
        np.multiply(gbuf, 1.0 - cfg.beta1, out=ubuf)
        mbuf += ubuf
        vbuf *= cfg.beta2
        np.square(gbuf, out=ubuf)
        ubuf *= 1.0 - cfg.beta2
        vbuf += ubuf
        np.sqrt(vbuf, out=dbuf)
        dbuf /= root_bc2
        dbuf += cfg.eps
        np.divide(mbuf, dbuf, out=ubuf)
        ubuf *= rate
        pbuf -= ubuf
        return
    for (name, tensor), grad in zip(named_params, grads):
        g = np.asarray(grad, dtype=np.float64)
        if g.shape != tensor.data.shape:
            raise StateError(
                f"gradient shape {g.shape} does not match {name!r} {tensor.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        v = state.v[name]
        if m.shape != tensor.data.shape or v.shape != tensor.data.shape:
            raise StateError(f"optimizer state shape mismatch for {name!r}")
        p = tensor.data
        p *= 1.0 - eff_lr * cfg.weight_decay
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        denom = np.sqrt(v)
        denom /= root_bc2
        denom += cfg.eps
        update = m / denom
        update *= rate
        p -= update


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 300
    batch_size: int = 4
    seed: int = 0
    dcp: DcpConfig = field(default_factory=DcpConfig)
    token_count: int = 75
    width: int = 64
    heads: int = 4
    depth: int = 4
    mlp_hidden: int | None = None
    grid: int = 8
    feature_dim: int = 32
    twin_gap: float = 0.18
    variants: int = 2
    variant_spread: float = 1.5
    context_pull: float = 0.0
    classes_per_scene: int = 4
    scene_classes: tuple[int, ...] | None = None
    train_scenes: int = 48
    eval_scenes: int = 24
    eval_every: int = 100
    component: str = "full"
    attention_direction: str = IMAGE_QUERY
    warmup_steps: int = 0
    ks_noise: float = 0.25
    as_noise: float = 0.45
    as_rotation: float = 0.55
    embed_noise: float = 0.02

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1 or self.train_scenes < 1 or self.eval_scenes < 1:
            raise ConfigurationError("batch_size and scene counts must be >= 1")
        if self.eval_every < 1:
            raise ConfigurationError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.component not in TRAIN_COMPONENTS:
            raise ConfigurationError(
                f"unknown component {self.component!r}, expected one of {TRAIN_COMPONENTS}")
        if self.warmup_steps < 0:
            raise ConfigurationError(f"warmup_steps must be >= 0, got {self.warmup_steps}")

    def lr_at(self, step: int) -> float:
        """Effective learning rate: linear warmup, then constant."""
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        return self.lr

    def knowledge_style(self) -> SceneStyle:
        return SceneStyle(name="knowledge", rotation=0.0, noise_std=self.ks_noise)

    def application_style(self) -> SceneStyle:
        return SceneStyle(name="application", rotation=self.as_rotation,
                          noise_std=self.as_noise)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class MetricsReport:
    """Per-class IoU over an evaluation set plus the unweighted mean.

    The mean runs over classes present in the ground truth; classes absent
    from both prediction and ground truth are excluded and listed.
    """

    per_class_iou: dict[str, float]
    miou: float
    excluded: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"per_class_iou": {k: self.per_class_iou[k]
                                  for k in sorted(self.per_class_iou)},
                "miou": self.miou, "excluded": list(self.excluded)}


def confusion_matrix(model: SegmentationModel, scenes) -> np.ndarray:
    classes = len(ONTOLOGY)
    conf = np.zeros((classes, classes), dtype=np.int64)
    scenes = list(scenes)
    for lo in range(0, len(scenes), 8):  # stack a few scenes per forward
        chunk = scenes[lo:lo + 8]
        pred = np.argmax(model.batched_logits(chunk).data, axis=1)
        labels = np.concatenate([s.labels for s in chunk])
        np.add.at(conf, (labels, pred), 1)
    return conf


def metrics_from_confusion(conf: np.ndarray) -> MetricsReport:
    tp = np.diag(conf).astype(np.float64)
    fn = conf.sum(axis=1) - tp
    fp = conf.sum(axis=0) - tp
    per_class: dict[str, float] = {}
    in_mean: list[float] = []
    excluded: list[str] = []
    for c, name in enumerate(ONTOLOGY):
        union = tp[c] + fp[c] + fn[c]
        if union == 0:
            excluded.append(name)
            continue
        iou = tp[c] / union
        per_class[name] = float(iou)
        if tp[c] + fn[c] > 0:  # present in ground truth
            in_mean.append(float(iou))
    if not in_mean:
        raise ContractError("no class present in ground truth")
    return MetricsReport(per_class_iou=per_class,
                         miou=float(np.mean(in_mean)),
                         excluded=tuple(excluded))


def evaluate(model: SegmentationModel, scenes) -> MetricsReport:
    """Aggregate confusion over scenes, then IoU_c = TP/(TP+FP+FN)."""
    return metrics_from_confusion(confusion_matrix(model, scenes))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainReport:
    config: dict
    backbone_hash_start: str
    backbone_hash_end: str
    step0_equivalence: bool
    prompt_counts: tuple[int, ...]
    selection_metadata: tuple[dict, ...]
    loss_first: float
    loss_last: float
    eval_history: tuple[dict, ...]
    final_knowledge: dict
    final_application: dict

    def to_dict(self) -> dict:
        return {"config": self.config,
                "backbone_hash_start": self.backbone_hash_start,
                "backbone_hash_end": self.backbone_hash_end,
                "backbone_hash_equal": self.backbone_hash_start == self.backbone_hash_end,
                "step0_equivalence": self.step0_equivalence,
                "prompt_counts": list(self.prompt_counts),
                "selections": list(self.selection_metadata),
                "loss_first": self.loss_first,
                "loss_last": self.loss_last,
                "eval_history": list(self.eval_history),
                "final": {"knowledge": self.final_knowledge,
                          "application": self.final_application}}


def _config_dict(cfg: TrainConfig) -> dict:
    d = {}
    for name in cfg.__dataclass_fields__:
        value = getattr(cfg, name)
        if isinstance(value, DcpConfig):
            d[name] = {k: getattr(value, k) for k in value.__dataclass_fields__}
        elif isinstance(value, tuple):
            d[name] = list(value)
        else:
            d[name] = value
    return d


def _build_model(cfg: TrainConfig, table: EmbeddingTable, master: RngState) -> SegmentationModel:
    backbone = MockBackbone.init(cfg.feature_dim, cfg.width, cfg.depth,
                                 master.derive("backbone"))
    head = LinearHead.init(cfg.width, len(ONTOLOGY), master.derive("head"))
    pff = None
    adapter = None
    if cfg.component != COMPONENT_FROZEN:
        pff = [PffParams.init(cfg.width, master.derive(f"pff/{i}"),
                              heads=cfg.heads, token_count=cfg.token_count,
                              out_hidden=cfg.mlp_hidden)
               for i in range(cfg.depth)]
        if table.dim != cfg.width:
            adapter = WidthAdapter.init(table.dim, cfg.width, master.derive("adapter"))
    return SegmentationModel(backbone=backbone, head=head, table=table, pff=pff,
                             component=cfg.component,
                             attention_direction=cfg.attention_direction,
                             adapter=adapter)


def _make_scenes(cfg: TrainConfig, master: RngState):
    factory = SceneFactory(feature_dim=cfg.feature_dim, twin_gap=cfg.twin_gap,
                           variants=cfg.variants, variant_spread=cfg.variant_spread,
                           context_pull=cfg.context_pull)
    ks, aps = cfg.knowledge_style(), cfg.application_style()

    def batch(style, split, count):
        return [generate_scene(style, master.derive(f"scene/{split}/{i}"),
                               factory, grid=cfg.grid,
                               classes_per_scene=cfg.classes_per_scene,
                               allowed=cfg.scene_classes, key=f"{split}/{i}")
                for i in range(count)]

    return (batch(ks, "train", cfg.train_scenes),
            batch(ks, "holdout", cfg.eval_scenes),
            batch(aps, "application", cfg.eval_scenes))


def _select_for_scenes(cfg: TrainConfig, scenes, lib, table, master: RngState):
    selections: dict[str, PromptSelection] = {}
    if cfg.component == COMPONENT_DUMMY:
        uniform = PromptSelection(cls=lib.names,
                                  sim=(1.0 / len(lib),) * len(lib))
        return {s.key: uniform for s in scenes}
    for scene in scenes:
        emb = scene_image_embedding(scene, table, master.derive(f"emb/{scene.key}"),
                                    noise_std=cfg.embed_noise)
        sel = select_prompts(emb, lib, table, cfg.dcp)
        # canonical library-order layout: the fused weights carry the
        # ranking, so the text rows get a stable arrangement that does not
        # depend on probability ties
        order = sorted(range(len(sel)), key=lambda i: table.index_of(sel.cls[i]))
        selections[scene.key] = PromptSelection(
            cls=tuple(sel.cls[i] for i in order),
            sim=tuple(sel.sim[i] for i in order),
            iterations_used=sel.iterations_used,
            final_tau_f=sel.final_tau_f, final_tau_c=sel.final_tau_c)
    return selections


def train(cfg: TrainConfig, fixtures: tuple[CategoryLibrary, EmbeddingTable],
          out_dir) -> TrainReport:
    """Train the focuser (and head) on knowledge-set scenes.

    Writes loss.csv, report.json, last_good.pffc and final.pffc into
    ``out_dir``.  The backbone is hashed before and after; a non-finite
    loss aborts with the failing step and the last checkpoint.
    """
    lib, table = fixtures
    missing = [n for n in ONTOLOGY if n not in set(lib.names)]
    if missing:
        raise ContractError(f"library does not cover the ontology: missing {missing}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    master = RngState(cfg.seed)

    model = _build_model(cfg, table, master)
    train_scenes, ks_scenes, as_scenes = _make_scenes(cfg, master)
    all_scenes = train_scenes + ks_scenes + as_scenes
    model.selections = _select_for_scenes(cfg, all_scenes, lib, table, master)

    hash_start = model.backbone.weights_hash()

    # at init the focuser is an exact no-op, so logits must match a
    # pff-free model built from the same seeds bitwise
    baseline = SegmentationModel(backbone=model.backbone, head=model.head,
                                 table=table, pff=None,
                                 component=COMPONENT_FROZEN)
    probe = ks_scenes[0]
    step0_equal = (model.logits(probe).data.tobytes()
                   == baseline.logits(probe).data.tobytes())

    if cfg.component == COMPONENT_FROZEN:
        trainables = [(f"head.{n}", t) for n, t in model.head.tensors()]
    else:
        trainables = pff_trainable_parameters(model.pff, model.head)

    opt_state = AdamWState()
    loss_rows: list[tuple[int, float, float]] = []
    history: list[dict] = []
    last_good = out / "last_good.pffc"
    loss_first = loss_last = float("nan")

    def run_eval(step: int) -> None:
        history.append({"step": step,
                        "knowledge_miou": evaluate(model, ks_scenes).miou,
                        "application_miou": evaluate(model, as_scenes).miou})
        save_checkpoint(last_good, trainables)

    run_eval(0)
    pointer = 0
    for step in range(1, cfg.steps + 1):
        batch = [train_scenes[(pointer + j) % len(train_scenes)]
                 for j in range(cfg.batch_size)]
        pointer = (pointer + cfg.batch_size) % len(train_scenes)
        try:
            # the explicit loss check below still catches anything non-finite
            # produced this step, so per-op checks can be deferred in the
            # hot loop; scenes share one grid, so the mean over stacked
            # patch rows equals the mean of per-scene losses
            with deferred_finite_checks():
                logits = model.batched_logits(batch)
                labels = np.concatenate([scene.labels for scene in batch])
                loss = cross_entropy_logits(logits, labels)
                value = loss.item()
                if not math.isfinite(value):
                    raise ContractError(f"loss is {value}")
                for _, t in trainables:
                    t.zero_grad()
                backward(loss)
        except ContractError as e:
            raise TrainAbortError(
                f"non-finite loss at step {step}: {e}", step=step,
                checkpoint_path=str(last_good)) from e
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data)
                 for _, t in trainables]
        eff_lr = cfg.lr_at(step)
        adamw_step(trainables, grads, opt_state, cfg, lr=eff_lr)
        loss_rows.append((step, value, eff_lr))
        if math.isnan(loss_first):
            loss_first = value
        loss_last = value
        if step % cfg.eval_every == 0 or step == cfg.steps:
            try:
                run_eval(step)
            except ContractError as e:
                # finite loss but exploded parameters: eval-path finite
                # checks are the first to see it
                raise TrainAbortError(
                    f"non-finite evaluation at step {step}: {e}", step=step,
                    checkpoint_path=str(last_good)) from e

    hash_end = model.backbone.weights_hash()
    if hash_start != hash_end:
        raise ContractError("backbone weights changed during training")

    save_checkpoint(out / "final.pffc", trainables)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss", "lr"])
    for step, value, lr in loss_rows:
        writer.writerow([step, repr(value), repr(lr)])
    (out / "loss.csv").write_text(buf.getvalue(), encoding="utf-8")

    selections_meta = tuple(
        {"scene": key, "count": len(sel), "iterations_used": sel.iterations_used,
         "final_tau_f": sel.final_tau_f, "final_tau_c": sel.final_tau_c}
        for key, sel in sorted(model.selections.items()))
    report = TrainReport(
        config=_config_dict(cfg),
        backbone_hash_start=hash_start,
        backbone_hash_end=hash_end,
        step0_equivalence=step0_equal,
        prompt_counts=tuple(len(model.selections[s.key]) for s in all_scenes),
        selection_metadata=selections_meta,
        loss_first=loss_first,
        loss_last=loss_last,
        eval_history=tuple(history),
        final_knowledge=evaluate(model, ks_scenes).to_dict(),
        final_application=evaluate(model, as_scenes).to_dict())
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n",
        encoding="utf-8")
    return report
