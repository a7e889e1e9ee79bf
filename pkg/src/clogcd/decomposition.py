"""Class decomposition: per-class k-means over latent vectors at every granularity level.

Level i relabels each original class into i sub-classes (fewer when a class
has fewer distinct points). Level 1 is the identity relabeling. Sub-labels
are densely renumbered across classes in class order, and every level keeps
a total sub-label -> parent map so predictions can be recombined.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from clogcd.errors import ClogcdError, DataError
from clogcd.seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (k, d)
    inertia: float
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)

    def assign(self, points: np.ndarray) -> np.ndarray:
        """Nearest centroid by squared euclidean distance, lowest index on ties."""
        d2 = _sq_distances(np.asarray(points, dtype=np.float64), self.centroids)
        return d2.argmin(axis=1)


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ||x||^2 - 2 x.c + ||c||^2, clipped against tiny negative round-off
    d2 = (np.sum(points ** 2, axis=1)[:, None]
          - 2.0 * points @ centroids.T
          + np.sum(centroids ** 2, axis=1)[None, :])
    return np.maximum(d2, 0.0)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: draw several D^2-weighted candidates per step and
    keep the one that shrinks the potential most."""
    n = len(points)
    trials = 2 + int(np.log(k))
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = _sq_distances(points, centroids[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining mass sits on chosen centroids; duplicates exhausted
            centroids[j] = points[rng.integers(n)]
            continue
        cand = rng.choice(n, size=trials, p=d2 / total)
        cand_d2 = np.minimum(d2[None, :], _sq_distances(points, points[cand]).T)
        pick = int(np.argmin(cand_d2.sum(axis=1)))
        centroids[j] = points[cand[pick]]
        d2 = cand_d2[pick]
    return centroids


def _lloyd(points: np.ndarray, init: np.ndarray, max_iters: int, tol: float):
    centroids = init.copy()
    k = len(centroids)
    prev_inertia = np.inf
    history = []
    labels = None
    for it in range(1, max_iters + 1):
        d2 = _sq_distances(points, centroids)
        labels = d2.argmin(axis=1)
        # repair empty clusters: move each onto the worst-served point
        for j in range(k):
            if not np.any(labels == j):
                residual = d2[np.arange(len(points)), labels]
                far = int(residual.argmax())
                centroids[j] = points[far]
                d2 = _sq_distances(points, centroids)
                labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(len(points)), labels].sum())
        history.append(inertia)
        if prev_inertia - inertia <= tol * max(prev_inertia, 1e-300) and np.isfinite(prev_inertia):
            break
        prev_inertia = inertia
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    # final assignment against the final centroids
    d2 = _sq_distances(points, centroids)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(points)), labels].sum())
    return centroids, labels, inertia, len(history), history


# Below this many distinct-point subsets, seed Lloyd from every one of them
# instead of sampling: restarts can structurally miss the optimum basin when
# only a handful of inits exist.
_EXHAUSTIVE_INIT_LIMIT = 64


def kmeans(points: np.ndarray, k: int, seed: int, max_iters: int = 300,
           tol: float = 1e-6, restarts: int = 10) -> ClusterModel:
    """Lloyd's algorithm, best over several seedings.

    Tiny inputs are seeded exhaustively from every distinct k-subset of
    points; larger ones use greedy k-means++ with `restarts` runs. k is
    clamped to the number of distinct points; the clamp is logged.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) < 1:
        raise ClogcdError("kmeans needs a non-empty (n, d) point array")
    if k < 1:
        raise ClogcdError(f"k must be >= 1, got {k}")
    distinct = np.unique(points, axis=0)
    k_eff = min(k, len(distinct))
    if k_eff < k:
        log.info("kmeans: clamped k from %d to %d distinct points", k, k_eff)

    if math.comb(len(distinct), k_eff) <= _EXHAUSTIVE_INIT_LIMIT:
        inits = (distinct[list(subset)].copy()
                 for subset in itertools.combinations(range(len(distinct)), k_eff))
    else:
        inits = (_kmeanspp_init(points, k_eff, np.random.default_rng([seed, r]))
                 for r in range(restarts))

    best = None
    for init in inits:
        centroids, _, inertia, n_iter, history = _lloyd(points, init, max_iters, tol)
        if best is None or inertia < best.inertia - 1e-12:
            best = ClusterModel(centroids, inertia, n_iter, history)
    return best


@dataclass
class GranularityLevel:
    """One relabeled dataset level: class c split into (at most) `level` sub-classes."""

    level: int
    sublabel_count: int
    assignments: dict[str, int]  # training sample id -> global sub-label
    parent_map: list[int]  # sub-label -> original class

    def sub_label(self, sample_id: str) -> int:
        return self.assignments[sample_id]

    def membership_matrix(self, class_count: int) -> np.ndarray:
        """(sublabel_count, class_count) indicator used to recombine probabilities."""
        m = np.zeros((self.sublabel_count, class_count))
        for sub, parent in enumerate(self.parent_map):
            m[sub, parent] = 1.0
        return m


def parent_of(level: GranularityLevel, sub_label: int) -> int:
    if not 0 <= sub_label < level.sublabel_count:
        raise ClogcdError(f"sub-label {sub_label} out of range at level {level.level} "
                          f"(0..{level.sublabel_count - 1})")
    return level.parent_map[sub_label]


@dataclass
class GranularitySequence:
    levels: list[GranularityLevel]  # descending: k, k-1, ..., 1
    k: int
    class_count: int

    def level(self, i: int) -> GranularityLevel:
        for lvl in self.levels:
            if lvl.level == i:
                return lvl
        raise ClogcdError(f"no granularity level {i} (k={self.k})")


def standardize(latents: np.ndarray):
    """Per-dimension zero mean / unit variance; constant dims are left unscaled."""
    mean = latents.mean(axis=0)
    std = latents.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return (latents - mean) / std


def decompose_class(class_latents: np.ndarray, i: int, seed: int) -> tuple[np.ndarray, int]:
    """Cluster one class's latents into i sub-classes.

    Returns (per-sample cluster ids, number of non-empty clusters); ids are
    densified so every id below the count is used.
    """
    if i < 1:
        raise ClogcdError(f"granularity level must be >= 1, got {i}")
    model = kmeans(class_latents, i, seed)
    raw = model.assign(class_latents)
    used = np.unique(raw)
    remap = {int(old): new for new, old in enumerate(used)}
    dense = np.array([remap[int(x)] for x in raw], dtype=np.int64)
    return dense, len(used)


def build_granularity_sequence(latents: np.ndarray, labels: np.ndarray,
                               sample_ids: list[str], k: int, seed: int,
                               class_count: int | None = None) -> GranularitySequence:
    """Decompose every class into i sub-classes for each level i = k..1.

    Latents are standardized over the whole training split first. Each
    (level, class) clustering gets its own derived seed, so per-class work
    is order-independent.
    """
    if k < 2:
        raise ClogcdError(f"granularity k must be >= 2, got {k}")
    labels = np.asarray(labels)
    if class_count is None:
        class_count = int(labels.max()) + 1
    if len(latents) != len(labels) or len(labels) != len(sample_ids):
        raise ClogcdError("latents, labels, and sample_ids must align")
    std_latents = standardize(np.asarray(latents, dtype=np.float64))
    class_indices = [np.flatnonzero(labels == c) for c in range(class_count)]
    for c, idx in enumerate(class_indices):
        if len(idx) == 0:
            raise DataError(f"class {c} has no training samples to decompose")

    levels = []
    for i in range(k, 0, -1):
        assignments: dict[str, int] = {}
        parent_map: list[int] = []
        offset = 0
        for c in range(class_count):
            idx = class_indices[c]
            sub, used = decompose_class(std_latents[idx], i, derive_seed(seed, i, c))
            for pos, row in enumerate(idx):
                assignments[sample_ids[row]] = offset + int(sub[pos])
            parent_map.extend([c] * used)
            offset += used
        levels.append(GranularityLevel(level=i, sublabel_count=offset,
                                       assignments=assignments, parent_map=parent_map))
    return GranularitySequence(levels=levels, k=k, class_count=class_count)


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------

def write_manifest(path: str | Path, seq: GranularitySequence):
    doc = {
        "k": seq.k,
        "class_count": seq.class_count,
        "levels": [
            {
                "level": lvl.level,
                "sublabel_count": lvl.sublabel_count,
                "parent_map": lvl.parent_map,
                "assignments": lvl.assignments,
            }
            for lvl in seq.levels
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_manifest(path: str | Path) -> GranularitySequence:
    doc = json.loads(Path(path).read_text())
    levels = [GranularityLevel(level=d["level"], sublabel_count=d["sublabel_count"],
                               assignments=dict(d["assignments"]),
                               parent_map=list(d["parent_map"]))
              for d in doc["levels"]]
    return GranularitySequence(levels=levels, k=doc["k"], class_count=doc["class_count"])
