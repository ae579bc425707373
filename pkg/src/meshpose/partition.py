"""Theorem harness: vertex partitions, per-block threshold subsets, global
pseudo-label subsets, support checks, and the constructive elicited domain.

All operations work on a LabeledSampleSet: per scene, the similarity and
image feature observed at each visible vertex.  Visibility matters: the
threshold constraints quantify over visible vertices only, and scenes with
no visible vertex in a block never qualify for that block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, rasterize
from .training import Model


class SupportError(RuntimeError):
    """Piece-wise support is not satisfied: some block subset is empty."""


@dataclass(frozen=True)
class VertexPartition:
    """Disjoint non-empty blocks covering vertex indices 0..R-1."""

    blocks: tuple[tuple[int, ...], ...]
    n_vertices: int

    def __post_init__(self):
        seen: set[int] = set()
        if len(self.blocks) < 1:
            raise ValueError("need at least one block")
        for block in self.blocks:
            if len(block) == 0:
                raise ValueError("blocks must be non-empty")
            for v in block:
                if not 0 <= v < self.n_vertices:
                    raise ValueError(f"vertex index {v} out of range")
                if v in seen:
                    raise ValueError(f"vertex {v} appears in two blocks")
                seen.add(v)
        if len(seen) != self.n_vertices:
            raise ValueError("blocks must cover all vertices")
        object.__setattr__(
            self, "blocks", tuple(tuple(sorted(b)) for b in self.blocks)
        )

    @property
    def k(self) -> int:
        return len(self.blocks)

    @classmethod
    def trivial(cls, n_vertices: int) -> "VertexPartition":
        return cls(blocks=(tuple(range(n_vertices)),), n_vertices=n_vertices)


@dataclass(frozen=True)
class LabeledSampleSet:
    """Per-scene vertex observations: similarity and feature where visible.

    sims is NaN at invisible entries; feats rows there are zeros.  A vertex
    is accepted under delta when it is visible and its similarity strictly
    exceeds the vertex threshold."""

    scene_ids: tuple[int, ...]
    visible: np.ndarray  # (S, R) bool
    sims: np.ndarray  # (S, R) float, NaN where invisible
    feats: np.ndarray  # (S, R, d)

    def __post_init__(self):
        s, r = self.visible.shape
        if self.sims.shape != (s, r) or self.feats.shape[:2] != (s, r):
            raise ValueError("inconsistent sample-set shapes")
        if len(self.scene_ids) != s:
            raise ValueError("scene_ids length mismatch")

    @property
    def n_scenes(self) -> int:
        return self.visible.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.visible.shape[1]

    def accepted(self, delta) -> np.ndarray:
        delta = np.asarray(delta, dtype=np.float64)
        if delta.ndim == 0:
            delta = np.full(self.n_vertices, float(delta))
        with np.errstate(invalid="ignore"):
            return self.visible & (self.sims > delta[None, :])


def build_sample_set(
    model: Model,
    scenes,
    cam: Camera,
    estimates=None,
) -> LabeledSampleSet:
    """Observe per-vertex similarities at the ground-truth poses (default) or
    at externally supplied pose estimates."""
    r = model.mesh.geometry.n_vertices
    d = model.mesh.dim
    s = len(scenes)
    visible = np.zeros((s, r), dtype=bool)
    sims = np.full((s, r), np.nan)
    feats = np.zeros((s, r, d))
    for i, scene in enumerate(scenes):
        if estimates is not None:
            est = estimates[i]
            if est is None:
                continue
            raster = est.correspondences.raster
        else:
            raster = rasterize(model.mesh.geometry, scene.pose, cam)
        vis = raster.visible_indices
        if vis.size == 0:
            continue
        f = model.extract(scene.features)
        rows = raster.vertex_pixel[vis, 0]
        cols = raster.vertex_pixel[vis, 1]
        fv = f[rows, cols]
        visible[i, vis] = True
        sims[i, vis] = np.sum(fv * model.mesh.features[vis], axis=1)
        feats[i, vis] = fv
    return LabeledSampleSet(
        scene_ids=tuple(getattr(sc, "scene_id", i) for i, sc in enumerate(scenes)),
        visible=visible,
        sims=sims,
        feats=feats,
    )


def k_delta_subset(
    sample_set: LabeledSampleSet, partition: VertexPartition, k: int, delta
) -> list[int]:
    """Scene indices where every visible vertex of block k is accepted (and
    at least one block vertex is visible)."""
    if not 0 <= k < partition.k:
        raise ValueError("block index out of range")
    block = list(partition.blocks[k])
    acc = sample_set.accepted(delta)[:, block]
    vis = sample_set.visible[:, block]
    ok = np.all(acc | ~vis, axis=1) & np.any(vis, axis=1)
    return np.flatnonzero(ok).tolist()


def global_pseudo_label_subset(
    sample_set: LabeledSampleSet, delta, omega: float
) -> list[int]:
    """Scenes whose accepted visible-vertex count exceeds omega times the
    visible count; omega = 1 demands every visible vertex."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError("omega must be in [0, 1]")
    acc = sample_set.accepted(delta).sum(axis=1)
    vis = sample_set.visible.sum(axis=1)
    if omega == 1.0:
        ok = (vis > 0) & (acc == vis)
    else:
        ok = (vis > 0) & (acc > omega * vis)
    return np.flatnonzero(ok).tolist()


def check_support(
    sample_set: LabeledSampleSet, partition: VertexPartition, delta
) -> tuple[bool, list[int]]:
    """Piece-wise support: every block subset non-empty.  Returns the verdict
    plus per-block counts."""
    counts = [
        len(k_delta_subset(sample_set, partition, k, delta))
        for k in range(partition.k)
    ]
    return all(c > 0 for c in counts), counts


@dataclass(frozen=True)
class ElicitedSample:
    """One constructed sample: accepted features assembled block-by-block."""

    features: dict[int, np.ndarray]
    block_scenes: dict[int, int] = field(repr=False)


def elicit_domain(
    sample_set: LabeledSampleSet,
    partition: VertexPartition,
    delta,
    m: int,
    rng: np.random.Generator,
) -> list[ElicitedSample]:
    """Build m samples by drawing, independently per block, one scene from
    that block's subset and copying its accepted block features.  Every
    carried vertex satisfies its threshold by construction."""
    ok, counts = check_support(sample_set, partition, delta)
    if not ok:
        raise SupportError(f"empty block subsets (counts: {counts})")
    subsets = [
        k_delta_subset(sample_set, partition, k, delta) for k in range(partition.k)
    ]
    accepted = sample_set.accepted(delta)
    out = []
    for _ in range(m):
        features: dict[int, np.ndarray] = {}
        block_scenes: dict[int, int] = {}
        for k, block in enumerate(partition.blocks):
            scene = int(subsets[k][rng.integers(0, len(subsets[k]))])
            block_scenes[k] = scene
            for v in block:
                if accepted[scene, v]:
                    features[v] = sample_set.feats[scene, v]
        out.append(ElicitedSample(features=features, block_scenes=block_scenes))
    return out


def discover_partition(
    sample_set: LabeledSampleSet, delta, k: int, rng: np.random.Generator
) -> VertexPartition:
    """Greedy acceptance-pattern clustering into k blocks.

    Vertices whose acceptance patterns across scenes correlate end up in the
    same block; empty blocks are refilled with the farthest vertex."""
    if k < 1:
        raise ValueError("k must be >= 1")
    r = sample_set.n_vertices
    k = min(k, r)
    patterns = sample_set.accepted(delta).T.astype(np.float64)  # (R, S)
    centers = patterns[rng.permutation(r)[:k]].copy()
    assign = np.zeros(r, dtype=np.int64)
    for _ in range(50):
        dists = ((patterns[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        for j in range(k):
            if not np.any(new_assign == j):
                far = int(np.argmax(dists.min(axis=1)))
                new_assign[far] = j
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            centers[j] = patterns[assign == j].mean(axis=0)
    blocks = tuple(
        tuple(np.flatnonzero(assign == j).tolist()) for j in range(k)
    )
    return VertexPartition(blocks=blocks, n_vertices=r)
