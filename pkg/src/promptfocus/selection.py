"""Iterative semantic prompt selection.

One image's class-probability scores are filtered against a threshold and
the survivors' text embeddings are agglomeratively clustered; one
representative per cluster survives.  Both thresholds are raised together
and the process repeats until few enough classes remain or the schedules
are exhausted.  All functions are pure over immutable inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .embeddings import CategoryLibrary, EmbeddingTable, SimilarityScores, image_class_similarity
from .errors import ConfigurationError, ContractError, DataError, EmptySelectionError

# Clustering runs on unit-norm embedding rows, where pairwise Euclidean
# distances live in [0, 2]; the nominal stop-threshold schedule assumes a
# wider distance scale, so effective thresholds are nominal * tau_c_scale.
# The default is calibrated on the committed street fixture: the nominal
# schedule start (3.0) must merge its near-synonym vehicle pair (distance
# 0.67) while keeping every other co-surviving pair (>= 1.10) apart.
DEFAULT_TAU_C_SCALE = 0.30


@dataclass(frozen=True)
class DcpConfig:
    """Threshold schedules and size cap for the selection loop."""

    tau_f_min: float = 0.002
    tau_f_max: float = 0.005
    delta_tau_f: float = 0.001
    tau_c_min: float = 3.0
    tau_c_max: float = 7.0
    delta_tau_c: float = 0.5
    max_classes: int = 30
    temperature: float = 0.01
    tau_c_scale: float = DEFAULT_TAU_C_SCALE

    def __post_init__(self):
        if not (0.0 < self.tau_f_min <= self.tau_f_max < 1.0):
            raise ConfigurationError(
                f"filter thresholds must satisfy 0 < {self.tau_f_min} <= {self.tau_f_max} < 1")
        if self.tau_c_min > self.tau_c_max:
            raise ConfigurationError(
                f"cluster thresholds must satisfy {self.tau_c_min} <= {self.tau_c_max}")
        if self.delta_tau_f <= 0.0 or self.delta_tau_c <= 0.0:
            raise ConfigurationError("threshold steps must be positive")
        if self.max_classes < 1:
            raise ConfigurationError(f"max_classes must be >= 1, got {self.max_classes}")
        if self.temperature <= 0.0 or self.tau_c_scale <= 0.0:
            raise ConfigurationError("temperature and tau_c_scale must be positive")

    def max_iterations(self) -> int:
        return math.ceil((self.tau_f_max - self.tau_f_min) / self.delta_tau_f) + 1


@dataclass(frozen=True)
class PromptSelection:
    """Selected class prompts with their probabilities and loop metadata.

    ``final_tau_f``/``final_tau_c`` are the nominal thresholds of the pass
    that produced this selection; ``iterations_used`` counts every loop
    pass that ran, including ones whose filter came back empty.  Hand-built
    instances (tests, dummy selections) may leave all three at zero.
    """

    cls: tuple[str, ...]
    sim: tuple[float, ...]
    iterations_used: int = 0
    final_tau_f: float = 0.0
    final_tau_c: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "cls", tuple(self.cls))
        object.__setattr__(self, "sim", tuple(float(s) for s in self.sim))
        if len(self.cls) != len(self.sim):
            raise ContractError(
                f"{len(self.cls)} classes but {len(self.sim)} similarity values")

    def __len__(self) -> int:
        return len(self.cls)

    def to_json(self) -> str:
        return json.dumps({"cls": list(self.cls), "sim": list(self.sim),
                           "iterations_used": self.iterations_used,
                           "final_tau_f": self.final_tau_f,
                           "final_tau_c": self.final_tau_c}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PromptSelection":
        d = json.loads(text)
        return cls(tuple(d["cls"]), tuple(d["sim"]), int(d["iterations_used"]),
                   float(d["final_tau_f"]), float(d["final_tau_c"]))


@dataclass(frozen=True)
class ClusterTree:
    """Dendrogram fragment: merges actually performed before the stop.

    Leaves are numbered 0..n-1 in input order; each merge creates ids
    n, n+1, ...  Merge distances are non-decreasing (average linkage is
    reducible).
    """

    leaf_names: tuple[str, ...]
    merges: tuple[tuple[int, int, float, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "leaf_names", tuple(self.leaf_names))
        object.__setattr__(self, "merges", tuple(
            (int(a), int(b), float(d), int(n)) for a, b, d, n in self.merges))
        dists = [m[2] for m in self.merges]
        if any(b < a - 1e-12 for a, b in zip(dists, dists[1:])):
            raise ContractError("merge distances must be non-decreasing")

    def cluster_count(self) -> int:
        return len(self.leaf_names) - len(self.merges)


def category_filter(scores: SimilarityScores, lib: CategoryLibrary,
                    tau_f: float) -> PromptSelection:
    """Keep exactly the classes whose score strictly exceeds ``tau_f``.

    Library order is preserved.  An empty result is a legal value here;
    the driver loop decides what to do with it.
    """
    if not scores.normalized:
        raise ContractError("category filter expects normalized scores")
    if len(scores) != len(lib):
        raise ContractError(
            f"{len(scores)} scores for {len(lib)} classes")
    keep = scores.values > tau_f
    return PromptSelection(
        cls=tuple(n for n, k in zip(lib.names, keep) if k),
        sim=tuple(float(s) for s, k in zip(scores.values, keep) if k),
        final_tau_f=float(tau_f))


def _pairwise_euclidean(rows: np.ndarray) -> np.ndarray:
    sq = np.sum(rows * rows, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (rows @ rows.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def _agglomerate(rows: np.ndarray, tau_c: float):
    """Average-linkage merges up to ``tau_c``; returns (merges, clusters).

    Distances between merged clusters follow the Lance-Williams update for
    average linkage, which keeps every entry equal to the mean pairwise
    member distance without re-scanning members.
    """
    m = rows.shape[0]
    members: list[list[int]] = [[i] for i in range(m)]
    ids = list(range(m))
    sizes = np.ones(m)
    dist = _pairwise_euclidean(rows)
    np.fill_diagonal(dist, np.inf)
    active = np.ones(m, dtype=bool)
    merges: list[tuple[int, int, float, int]] = []
    next_id = m
    for _ in range(m - 1):
        flat = np.argmin(dist)
        i, j = divmod(int(flat), m)
        d = dist[i, j]
        if not np.isfinite(d) or d > tau_c:
            break
        if j < i:
            i, j = j, i
        merges.append((ids[i], ids[j], float(d), next_id))
        # slot i absorbs slot j
        ni, nj = sizes[i], sizes[j]
        new_row = (ni * dist[i, :] + nj * dist[j, :]) / (ni + nj)
        dist[i, :] = new_row
        dist[:, i] = new_row
        dist[i, i] = np.inf
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        members[i] = members[i] + members[j]
        sizes[i] = ni + nj
        active[j] = False
        ids[i] = next_id
        next_id += 1
    clusters = [mem for mem, a in zip(members, active) if a]
    return merges, clusters


def hierarchical_cluster(selection: PromptSelection, table: EmbeddingTable,
                         tau_c: float) -> tuple[PromptSelection, ClusterTree]:
    """Cluster the selected classes and keep one representative per cluster.

    Average-linkage agglomeration over embedding rows with Euclidean
    distance, stopping when the next merge distance would exceed ``tau_c``.
    Each cluster keeps the member most cosine-similar to the cluster
    centroid (ties: lowest embedding-table index).  Output is ordered by
    descending probability, carrying each representative's input score.
    """
    if len(selection) == 0:
        raise ContractError("cannot cluster an empty selection")
    rows = np.stack([table.row_of(n) for n in selection.cls])
    merges, clusters = _agglomerate(rows, float(tau_c))

    reps: list[tuple[str, float, int]] = []
    for mem in clusters:
        centroid = rows[mem].mean(axis=0)
        cnorm = np.linalg.norm(centroid)
        if cnorm < 1e-12:
            cos = np.zeros(len(mem))
        else:
            cos = rows[mem] @ (centroid / cnorm)
        best_cos = cos.max()
        tied = [mem[t] for t in range(len(mem)) if cos[t] >= best_cos - 1e-12]
        rep = min(tied, key=lambda t: table.index_of(selection.cls[t]))
        reps.append((selection.cls[rep], selection.sim[rep],
                     table.index_of(selection.cls[rep])))

    reps.sort(key=lambda r: (-r[1], r[2]))
    out = PromptSelection(
        cls=tuple(r[0] for r in reps), sim=tuple(r[1] for r in reps),
        iterations_used=selection.iterations_used,
        final_tau_f=selection.final_tau_f, final_tau_c=float(tau_c))
    return out, ClusterTree(selection.cls, tuple(merges))


def select_prompts(img_embedding, lib: CategoryLibrary, table: EmbeddingTable,
                   cfg: DcpConfig) -> PromptSelection:
    """Run the full filter-and-cluster loop for one image.

    The first pass always runs: even a library already within
    ``max_classes`` gets one filter-and-cluster sweep, which is what prunes
    near-synonym prompts from small libraries.  Each pass re-filters from
    the full library at the current filter threshold, clusters the
    survivors at the current stop threshold, and raises both thresholds.
    After the first pass the loop continues only while more than
    ``max_classes`` classes remain and both schedules have room; the last
    non-empty pass result is returned.  If no pass ever kept a class,
    raises ``EmptySelectionError`` with a summary of the score
    distribution.
    """
    if len(lib) != len(table) or lib.names != table.names:
        raise ContractError("library and table are not aligned")
    scores = image_class_similarity(img_embedding, table, cfg.temperature)

    count = len(lib)
    tau_f, tau_c = cfg.tau_f_min, cfg.tau_c_min
    iterations = 0
    best: PromptSelection | None = None
    while tau_f <= cfg.tau_f_max and tau_c <= cfg.tau_c_max:
        iterations += 1
        filtered = category_filter(scores, lib, tau_f)
        if len(filtered) > 0:
            clustered, _ = hierarchical_cluster(
                filtered, table, tau_c * cfg.tau_c_scale)
            best = PromptSelection(
                cls=clustered.cls, sim=clustered.sim,
                iterations_used=iterations,
                final_tau_f=tau_f, final_tau_c=tau_c)
            count = len(best)
        # an empty filter pass skips clustering but still advances thresholds
        tau_f += cfg.delta_tau_f
        tau_c += cfg.delta_tau_c
        if count <= cfg.max_classes:
            break

    if best is None:
        raise EmptySelectionError(
            f"no class score exceeded tau_f in any of {iterations} passes "
            f"(starting at {cfg.tau_f_min})", score_summary=scores.summary())
    if iterations != best.iterations_used:
        best = PromptSelection(best.cls, best.sim, iterations,
                               best.final_tau_f, best.final_tau_c)
    return best
