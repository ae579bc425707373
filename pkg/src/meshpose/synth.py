"""Synthetic source/target domain generation.

Scenes are feature lattices drawn from a known "true" neural mesh model at a
known pose.  Domain shift is constructed explicitly: a robust subset of
vertices keeps its feature, the rest are rotated in feature space by a
controlled angle, with optional occlusion, clutter swap and a global
extractor drift.  Ground truth travels in a sealed channel that the
adaptation code never sees.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import vmf
from .geometry import Camera, CuboidMesh, Pose, PoseRanges, rasterize
from .meshmodel import ClutterModel, NeuralMesh, load_feature_map, save_feature_map

OCCLUSION_BOUNDS = {"L1": (0.2, 0.4), "L2": (0.4, 0.6)}


class DataError(RuntimeError):
    """Unusable generator input or on-disk dataset."""


def scene_seed(run_seed: int, index: int) -> np.random.Generator:
    """Per-scene generator; independent of thread count and iteration order.
    Scene indices live below 2**30; higher values are reserved for dataset-
    level draws (occluder prototype, drift matrix)."""
    return np.random.default_rng(np.random.SeedSequence((int(run_seed), int(index))))


_SETUP_INDEX = 2**30


@dataclass(frozen=True)
class DomainSpec:
    """Constructive description of a target domain shift."""

    robust_fraction: float = 1.0
    robust_subset: tuple[int, ...] | None = None
    perturb_deg: tuple[float, float] = (60.0, 90.0)
    data_kappa: float | None = 20.0  # None = noise-free copies of the prototypes
    occlusion_level: str | None = None
    occluder_kappa: float = 200.0
    clutter_swap: bool = False
    extractor_drift: bool = False
    drift_scale: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.robust_fraction <= 1.0:
            raise ValueError("robust_fraction must be in [0, 1]")
        if self.occlusion_level is not None and self.occlusion_level not in OCCLUSION_BOUNDS:
            raise ValueError(f"occlusion_level must be one of {sorted(OCCLUSION_BOUNDS)}")
        lo, hi = self.perturb_deg
        if not 0.0 <= lo <= hi <= 180.0:
            raise ValueError("perturb_deg must satisfy 0 <= min <= max <= 180")


@dataclass(frozen=True)
class Scene:
    """A labeled scene: raw feature lattice plus generation ground truth."""

    scene_id: int
    features: np.ndarray
    pose: Pose
    visible: np.ndarray
    occlusion_mask: np.ndarray | None
    seed: int


@dataclass(frozen=True)
class UnlabeledScene:
    """What adaptation is allowed to see: features and an id, nothing else."""

    scene_id: int
    features: np.ndarray
    seed: int


@dataclass(frozen=True)
class SealedGroundTruth:
    """Evaluation-only channel carrying the stripped annotations."""

    scenes: tuple[Scene, ...] = field(repr=False)

    def labeled(self) -> list[Scene]:
        return list(self.scenes)


def strip_labels(scenes) -> list[UnlabeledScene]:
    return [
        UnlabeledScene(scene_id=s.scene_id, features=s.features, seed=s.seed)
        for s in scenes
    ]


def random_true_model(
    geometry: CuboidMesh,
    d: int,
    n_clutter: int,
    kappa: float,
    kappa_prime: float,
    rng: np.random.Generator,
) -> tuple[NeuralMesh, ClutterModel]:
    """Independent random unit prototypes per vertex and clutter component."""
    feats = rng.standard_normal((geometry.n_vertices, d))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    betas = rng.standard_normal((n_clutter, d))
    betas /= np.linalg.norm(betas, axis=1, keepdims=True)
    mesh = NeuralMesh(
        geometry=geometry,
        features=feats,
        kappas=np.full(geometry.n_vertices, float(kappa)),
    )
    return mesh, ClutterModel(betas=betas, kappa_prime=float(kappa_prime))


def _scene_features(mesh, clutter, raster, data_kappa, rng):
    h, w = raster.pixel_vertex.shape
    d = mesh.dim
    values = np.empty((h, w, d))

    fg = raster.fg_mask
    protos = mesh.features[raster.pixel_vertex[fg]]
    if data_kappa is None or math.isinf(data_kappa):
        values[fg] = protos
    else:
        values[fg] = vmf.sample_vmf_stack(protos, float(data_kappa), rng)

    n_bg = int(np.count_nonzero(~fg))
    which = rng.integers(0, clutter.n, size=n_bg)
    values[~fg] = vmf.sample_vmf_stack(
        clutter.betas[which], float(clutter.kappa_prime), rng
    )
    return values


def generate_source(
    mesh: NeuralMesh,
    clutter: ClutterModel,
    cam: Camera,
    n: int,
    data_kappa: float | None,
    seed: int,
    ranges: PoseRanges = PoseRanges(),
) -> list[Scene]:
    """Labeled scenes with poses uniform over the sampling ranges."""
    if n < 1:
        raise DataError("need at least one scene")
    scenes = []
    for i in range(n):
        rng = scene_seed(seed, i)
        pose = ranges.sample(rng)
        raster = rasterize(mesh.geometry, pose, cam)
        values = _scene_features(mesh, clutter, raster, data_kappa, rng)
        scenes.append(
            Scene(
                scene_id=i,
                features=values,
                pose=pose,
                visible=raster.vertex_visible.copy(),
                occlusion_mask=None,
                seed=i,
            )
        )
    return scenes


def shift_model(
    mesh: NeuralMesh,
    clutter: ClutterModel,
    spec: DomainSpec,
    rng: np.random.Generator,
) -> tuple[NeuralMesh, ClutterModel, np.ndarray]:
    """Rotate every non-robust vertex feature by a random angle in the spec's
    range, inside the plane spanned by the feature and a random orthogonal
    direction.  Returns the shifted model and the robust index set."""
    r = mesh.geometry.n_vertices
    if spec.robust_subset is not None:
        robust = np.asarray(sorted(set(spec.robust_subset)), dtype=np.int64)
        if robust.size and (robust[0] < 0 or robust[-1] >= r):
            raise ValueError("robust_subset index out of range")
    else:
        n_robust = int(math.ceil(spec.robust_fraction * r))
        robust = np.sort(rng.permutation(r)[:n_robust])

    feats = mesh.features.copy()
    robust_mask = np.zeros(r, dtype=bool)
    robust_mask[robust] = True
    lo, hi = (math.radians(a) for a in spec.perturb_deg)
    for idx in np.flatnonzero(~robust_mask):
        angle = rng.uniform(lo, hi)
        c = feats[idx]
        tangent = rng.standard_normal(c.shape)
        tangent -= np.dot(tangent, c) * c
        tangent /= np.linalg.norm(tangent)
        feats[idx] = math.cos(angle) * c + math.sin(angle) * tangent

    new_clutter = clutter
    if spec.clutter_swap:
        betas = rng.standard_normal(clutter.betas.shape)
        betas /= np.linalg.norm(betas, axis=1, keepdims=True)
        new_clutter = ClutterModel(betas=betas, kappa_prime=clutter.kappa_prime)
    return mesh.with_features(feats), new_clutter, robust


def _drift_matrix(d: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    return np.eye(d) + scale * rng.standard_normal((d, d)) / math.sqrt(d)


def occlude(
    scene: Scene,
    level: str,
    rng: np.random.Generator,
    occluder_mean: np.ndarray,
    occluder_kappa: float,
    fg_mask: np.ndarray,
) -> Scene:
    """Replace a contiguous foreground rectangle with occluder features.

    A random rectangle seeded at a foreground pixel grows one edge at a time
    until it covers the sampled fraction of the foreground."""
    lo, hi = OCCLUSION_BOUNDS[level]
    n_fg = int(np.count_nonzero(fg_mask))
    if n_fg == 0:
        raise DataError("scene has no foreground to occlude")
    # Aim inside the band, leaving one growth step of slack at the top.
    target = rng.uniform(lo + 0.01, hi - 0.03)

    rows, cols = np.nonzero(fg_mask)
    pick = rng.integers(0, rows.size)
    r0 = r1 = int(rows[pick])
    c0 = c1 = int(cols[pick])
    h, w = fg_mask.shape

    def covered(rr0, rr1, cc0, cc1):
        return int(np.count_nonzero(fg_mask[rr0 : rr1 + 1, cc0 : cc1 + 1]))

    frac = covered(r0, r1, c0, c1) / n_fg
    sides = ["top", "bottom", "left", "right"]
    while frac < target:
        grew = False
        for side in sides:
            if frac >= target:
                break
            if side == "top" and r0 > 0:
                r0 -= 1
                grew = True
            elif side == "bottom" and r1 < h - 1:
                r1 += 1
                grew = True
            elif side == "left" and c0 > 0:
                c0 -= 1
                grew = True
            elif side == "right" and c1 < w - 1:
                c1 += 1
                grew = True
            frac = covered(r0, r1, c0, c1) / n_fg
        if not grew:
            break

    mask = np.zeros_like(fg_mask)
    mask[r0 : r1 + 1, c0 : c1 + 1] = True
    mask &= fg_mask

    values = scene.features.copy()
    n_occ = int(np.count_nonzero(mask))
    values[mask] = vmf.sample_vmf_stack(
        np.broadcast_to(occluder_mean, (n_occ, occluder_mean.shape[0])).copy(),
        float(occluder_kappa),
        rng,
    )
    return replace(scene, features=values, occlusion_mask=mask)


def generate_target(
    mesh_t: NeuralMesh,
    clutter_t: ClutterModel,
    spec: DomainSpec,
    cam: Camera,
    n: int,
    seed: int,
    ranges: PoseRanges = PoseRanges(),
) -> tuple[list[UnlabeledScene], SealedGroundTruth]:
    """Scenes from the shifted model; ground truth returns only in the sealed
    channel."""
    if n < 1:
        raise DataError("need at least one scene")
    setup_rng = scene_seed(seed, _SETUP_INDEX)
    occluder_mean = setup_rng.standard_normal(mesh_t.dim)
    occluder_mean /= np.linalg.norm(occluder_mean)
    drift = (
        _drift_matrix(mesh_t.dim, spec.drift_scale, setup_rng)
        if spec.extractor_drift
        else None
    )

    labeled = []
    for i in range(n):
        rng = scene_seed(seed, i)
        pose = ranges.sample(rng)
        raster = rasterize(mesh_t.geometry, pose, cam)
        values = _scene_features(mesh_t, clutter_t, raster, spec.data_kappa, rng)
        scene = Scene(
            scene_id=i,
            features=values,
            pose=pose,
            visible=raster.vertex_visible.copy(),
            occlusion_mask=None,
            seed=i,
        )
        if spec.occlusion_level is not None:
            scene = occlude(
                scene, spec.occlusion_level, rng, occluder_mean,
                spec.occluder_kappa, raster.fg_mask,
            )
        if drift is not None:
            drifted = scene.features @ drift.T
            drifted /= np.linalg.norm(drifted, axis=-1, keepdims=True)
            scene = replace(scene, features=drifted)
        labeled.append(scene)

    sealed = SealedGroundTruth(scenes=tuple(labeled))
    return strip_labels(labeled), sealed


# ---------------------------------------------------------------------------
# On-disk datasets: manifest + per-scene binary maps, ground truth sealed in a
# separate file.
# ---------------------------------------------------------------------------


def _pose_to_json(pose: Pose) -> dict:
    return {
        "azimuth": pose.azimuth,
        "elevation": pose.elevation,
        "theta": pose.theta,
        "distance": pose.distance,
    }


def _pose_from_json(obj: dict) -> Pose:
    return Pose(**obj)


def write_dataset(directory, scenes, meta: dict, sealed: bool):
    """Write manifest + feature maps; with sealed=True the labels go to a
    separate gt.json instead of the manifest."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    gt = {}
    for s in scenes:
        name = f"scene_{s.scene_id:05d}.fmap"
        save_feature_map(os.path.join(directory, name), s.features)
        entries.append({"id": s.scene_id, "file": name, "seed": s.seed})
        if isinstance(s, Scene):
            gt[str(s.scene_id)] = {
                "pose": _pose_to_json(s.pose),
                "visible": np.flatnonzero(s.visible).tolist(),
                "n_vertices": int(s.visible.shape[0]),
                "occlusion": (
                    None
                    if s.occlusion_mask is None
                    else np.argwhere(s.occlusion_mask).tolist()
                ),
            }
    manifest = {"meta": meta, "scenes": entries, "sealed": bool(sealed)}
    if not sealed:
        manifest["ground_truth"] = gt
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True)
    if sealed and gt:
        with open(os.path.join(directory, "gt.json"), "w") as fh:
            json.dump(gt, fh, sort_keys=True)


def _scene_from_entry(directory, entry, gt_record, shape_hint=None):
    values = load_feature_map(os.path.join(directory, entry["file"]))
    if gt_record is None:
        return UnlabeledScene(
            scene_id=int(entry["id"]), features=values, seed=int(entry["seed"])
        )
    visible = np.zeros(int(gt_record["n_vertices"]), dtype=bool)
    visible[np.asarray(gt_record["visible"], dtype=np.int64)] = True
    mask = None
    if gt_record.get("occlusion") is not None:
        mask = np.zeros(values.shape[:2], dtype=bool)
        idx = np.asarray(gt_record["occlusion"], dtype=np.int64)
        if idx.size:
            mask[idx[:, 0], idx[:, 1]] = True
    return Scene(
        scene_id=int(entry["id"]),
        features=values,
        pose=_pose_from_json(gt_record["pose"]),
        visible=visible,
        occlusion_mask=mask,
        seed=int(entry["seed"]),
    )


def read_dataset(directory, with_labels: bool = True):
    """Returns (scenes, meta).  Labeled scenes when ground truth is present
    (inline or sealed) and with_labels is set; unlabeled otherwise."""
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest.json under {directory}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    gt = manifest.get("ground_truth", {})
    gt_path = os.path.join(directory, "gt.json")
    if with_labels and manifest.get("sealed") and os.path.exists(gt_path):
        with open(gt_path) as fh:
            gt = json.load(fh)
    scenes = []
    for entry in manifest["scenes"]:
        record = gt.get(str(entry["id"])) if with_labels else None
        scenes.append(_scene_from_entry(directory, entry, record))
    return scenes, manifest["meta"]
