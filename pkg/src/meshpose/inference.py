"""Pose estimation by render-and-compare: pre-rendered pose bank, multi-pose
initialization, and finite-difference gradient refinement of the
reconstruction loss.

The refinement engine runs several initializations in lockstep so that all
loss evaluations of one iteration share a single batched rasterization; the
per-candidate arithmetic is unchanged, so lockstep and one-at-a-time runs
produce identical results.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    ELEVATION_LIMIT,
    Camera,
    Pose,
    PoseRanges,
    RasterMap,
    TWO_PI,
    geodesic_distance,
    pose_to_rotation,
    rasterize_batch,
    wrap_angle,
)
from .meshmodel import ClutterModel, FeatureMap, NeuralMesh, RenderResult, render_from_raster


class EstimationError(RuntimeError):
    """All pose candidates failed to produce a finite loss."""


@dataclass(frozen=True)
class InferenceOpts:
    """Optimizer knobs (angles in radians internally; config uses degrees)."""

    k_init: int = 3
    min_sep: float = math.radians(20.0)
    fd_step: float = math.radians(0.5)
    max_iters: int = 200
    tol: float = 1e-6
    init_step: float = math.radians(2.0)
    min_step: float = math.radians(0.02)
    max_step: float = math.radians(10.0)
    n_backtrack: int = 8


@dataclass(frozen=True)
class PoseGrid:
    """Uniform pose grid: azimuth covers the circle endpoint-free, elevation
    and theta span their ranges inclusively (midpoint when the count is 1)."""

    n_azimuth: int = 12
    n_elevation: int = 3
    n_theta: int = 1
    ranges: PoseRanges = PoseRanges()

    def poses(self) -> list[Pose]:
        if min(self.n_azimuth, self.n_elevation, self.n_theta) < 1:
            raise ValueError("grid counts must be >= 1")

        def axis(n, lo, hi):
            if n == 1:
                return np.array([(lo + hi) / 2.0])
            return np.linspace(lo, hi, n)

        azs = np.linspace(0.0, TWO_PI, self.n_azimuth, endpoint=False)
        els = axis(self.n_elevation, *self.ranges.elevation)
        ths = axis(self.n_theta, *self.ranges.theta)
        return [
            Pose(azimuth=a, elevation=e, theta=t, distance=self.ranges.distance)
            for a, e, t in itertools.product(azs, els, ths)
        ]


@dataclass(frozen=True)
class PoseBank:
    """Pre-rendered pose grid.  Rasterizations depend only on mesh geometry,
    so one bank serves throughout adaptation while vertex features change;
    features holds the vertex features captured at build time, used when the
    caller does not pass fresher ones."""

    poses: tuple[Pose, ...]
    rasters: tuple[RasterMap, ...]
    rotations: np.ndarray
    features: np.ndarray
    cam: Camera

    def __len__(self) -> int:
        return len(self.poses)


def build_pose_bank(mesh: NeuralMesh, cam: Camera, grid: PoseGrid) -> PoseBank:
    poses = grid.poses()
    rasters = []
    chunk = 32
    for start in range(0, len(poses), chunk):
        part = poses[start : start + chunk]
        rmats = np.stack([pose_to_rotation(p) for p in part])
        dists = np.array([p.distance for p in part])
        maps, ok = rasterize_batch(mesh.geometry, rmats, dists, cam)
        if not np.all(ok):
            bad = part[int(np.flatnonzero(~ok)[0])]
            raise ValueError(f"pose bank entry degenerate: {bad}")
        rasters.extend(maps)
    rotations = np.stack([pose_to_rotation(p) for p in poses])
    return PoseBank(
        poses=tuple(poses),
        rasters=tuple(rasters),
        rotations=rotations,
        features=mesh.features.copy(),
        cam=cam,
    )


class SceneCache:
    """Per-scene precomputation shared by every loss evaluation.

    The best-clutter dot product per pixel does not depend on the pose, so
    the background half of the reconstruction loss reduces to a masked sum
    of a precomputed array."""

    def __init__(self, f: FeatureMap | np.ndarray, clutter: ClutterModel | None):
        values = f.values if isinstance(f, FeatureMap) else np.asarray(f, dtype=np.float64)
        self.shape = values.shape[:2]
        self.flat = values.reshape(-1, values.shape[-1])
        self.n_px = self.flat.shape[0]
        if clutter is not None:
            self.bg_best = (self.flat @ clutter.betas.T).max(axis=1)
            self.bg_best_sum = float(self.bg_best.sum())
        else:
            self.bg_best = None
            self.bg_best_sum = 0.0


def score_raster(cache: SceneCache, raster: RasterMap, features: np.ndarray) -> float:
    """Reconstruction loss of the cached scene against one rasterized pose."""
    pv = raster.pixel_vertex.ravel()
    fg_lin = np.flatnonzero(pv >= 0)
    n_fg = fg_lin.size
    fg_mean = 0.0
    if n_fg:
        fg_mean = float(
            np.einsum("ij,ij->", cache.flat[fg_lin], features[pv[fg_lin]]) / n_fg
        )
    bg_mean = 0.0
    n_bg = cache.n_px - n_fg
    if cache.bg_best is not None and n_bg:
        bg_mean = float(
            (cache.bg_best_sum - cache.bg_best[fg_lin].sum()) / n_bg
        )
    return 1.0 - 0.5 * (fg_mean + bg_mean)


def _evaluate_poses(cache, mesh, cam, params, distance):
    """Loss per (azimuth, elevation, theta) row; inf where degenerate."""
    if params.shape[0] == 0:
        return np.empty(0), []
    rmats = np.stack(
        [
            pose_to_rotation(Pose(a, e, t, distance))
            for a, e, t in params
        ]
    )
    maps, ok = rasterize_batch(
        mesh.geometry, rmats, np.full(len(params), distance), cam
    )
    losses = np.full(len(params), np.inf)
    for i, m in enumerate(maps):
        if ok[i]:
            losses[i] = score_raster(cache, m, mesh.features)
    return losses, maps


def select_initial_poses(
    f: FeatureMap,
    bank: PoseBank,
    k: int,
    min_sep: float,
    clutter: ClutterModel | None = None,
    features: np.ndarray | None = None,
) -> list[Pose]:
    """Greedy pick of the k best bank entries, skipping poses closer than
    min_sep (geodesic) to an already selected one.

    Without a clutter model the ranking falls back to the foreground half of
    the loss; without explicit vertex features the bank's build-time features
    are used."""
    if not 1 <= k <= 5:
        raise ValueError("k must be in [1, 5]")
    if features is None:
        features = bank.features
    cache = SceneCache(f, clutter)
    losses = np.array([score_raster(cache, r, features) for r in bank.rasters])
    order = np.argsort(losses, kind="stable")
    chosen: list[int] = []
    for idx in order:
        if not math.isfinite(losses[idx]):
            continue
        if all(
            geodesic_distance(bank.rotations[idx], bank.rotations[j]) >= min_sep
            for j in chosen
        ):
            chosen.append(int(idx))
        if len(chosen) == k:
            break
    return [bank.poses[i] for i in chosen]


@dataclass(frozen=True)
class PoseEstimate:
    """One optimized candidate (or the best of several)."""

    pose: Pose
    loss: float
    init_pose: Pose
    correspondences: RenderResult
    iterations: int
    candidates: tuple["PoseEstimate", ...] = field(default=(), repr=False)


def _clamp_el(e):
    return min(max(e, -ELEVATION_LIMIT), ELEVATION_LIMIT)


def _optimize_lockstep(cache, mesh, cam, inits, opts):
    """Backtracking gradient descent on (azimuth, elevation, theta) for all
    initializations simultaneously; candidate arithmetic is independent."""
    n = len(inits)
    distance = inits[0].distance
    params = np.array([[p.azimuth, _clamp_el(p.elevation), p.theta] for p in inits])
    losses, _ = _evaluate_poses(cache, mesh, cam, params, distance)
    steps = np.full(n, opts.init_step)
    active = np.isfinite(losses)
    iters = np.zeros(n, dtype=int)
    h = opts.fd_step
    backs = 0.5 ** np.arange(opts.n_backtrack)

    for _ in range(opts.max_iters):
        act = np.flatnonzero(active)
        if act.size == 0:
            break
        # Central-difference stencil, elevation clamped at the gimbal guard.
        stencil = []
        for i in act:
            a, e, t = params[i]
            stencil.extend(
                [
                    (a + h, e, t),
                    (a - h, e, t),
                    (a, _clamp_el(e + h), t),
                    (a, _clamp_el(e - h), t),
                    (a, e, t + h),
                    (a, e, t - h),
                ]
            )
        st_losses, _ = _evaluate_poses(cache, mesh, cam, np.array(stencil), distance)
        st_losses = st_losses.reshape(act.size, 6)
        grads = np.stack(
            [
                (st_losses[:, 0] - st_losses[:, 1]) / (2 * h),
                (st_losses[:, 2] - st_losses[:, 3]) / (2 * h),
                (st_losses[:, 4] - st_losses[:, 5]) / (2 * h),
            ],
            axis=1,
        )
        gnorm = np.linalg.norm(grads, axis=1)
        finite = np.isfinite(gnorm) & (gnorm > 1e-14)
        for i, ok in zip(act, finite):
            if not ok:
                active[i] = False
        act = act[finite]
        if act.size == 0:
            break
        dirs = -grads[finite] / gnorm[finite][:, None]

        trial = []
        for row, i in enumerate(act):
            a, e, t = params[i]
            for bk in backs:
                s = steps[i] * bk
                trial.append(
                    (a + s * dirs[row, 0], _clamp_el(e + s * dirs[row, 1]), t + s * dirs[row, 2])
                )
        tr_losses, _ = _evaluate_poses(cache, mesh, cam, np.array(trial), distance)
        tr_losses = tr_losses.reshape(act.size, opts.n_backtrack)

        for row, i in enumerate(act):
            improved = np.flatnonzero(tr_losses[row] < losses[i])
            iters[i] += 1
            if improved.size == 0:
                steps[i] *= backs[-1] * 0.5
                if steps[i] < opts.min_step:
                    active[i] = False
                continue
            j = int(improved[0])
            new_loss = float(tr_losses[row, j])
            gain = losses[i] - new_loss
            params[i] = trial[row * opts.n_backtrack + j]
            params[i, 0] %= TWO_PI
            params[i, 2] = wrap_angle(params[i, 2])
            losses[i] = new_loss
            steps[i] = min(max(steps[i] * backs[j] * 1.5, opts.min_step), opts.max_step)
            if gain < opts.tol:
                active[i] = False

    final_losses, final_maps = _evaluate_poses(cache, mesh, cam, params, distance)
    out = []
    for i in range(n):
        if final_maps[i] is None or not math.isfinite(final_losses[i]):
            out.append(None)
            continue
        pose = Pose(params[i, 0], params[i, 1], params[i, 2], distance)
        out.append(
            PoseEstimate(
                pose=pose,
                loss=float(final_losses[i]),
                init_pose=inits[i],
                correspondences=render_from_raster(mesh, final_maps[i]),
                iterations=int(iters[i]),
            )
        )
    return out


def optimize_pose(
    f: FeatureMap,
    mesh: NeuralMesh,
    clutter: ClutterModel,
    cam: Camera,
    init: Pose,
    opts: InferenceOpts = InferenceOpts(),
) -> PoseEstimate:
    """Refine a single initialization; accepted steps strictly decrease the
    loss, so the final loss never exceeds the initial one."""
    cache = SceneCache(f, clutter)
    result = _optimize_lockstep(cache, mesh, cam, [init], opts)[0]
    if result is None:
        raise EstimationError("degenerate projection at the initial pose")
    return result


def estimate_pose(
    f: FeatureMap,
    mesh: NeuralMesh,
    clutter: ClutterModel,
    cam: Camera,
    opts: InferenceOpts = InferenceOpts(),
    bank: PoseBank | None = None,
    inits: list[Pose] | None = None,
) -> PoseEstimate:
    """Multi-initialization estimate: K bank picks, refined jointly, best
    final loss wins (ties by candidate index); all candidates ride along for
    the adaptation stage.

    Explicit inits bypass the bank (used for warm starts)."""
    if inits is None:
        if bank is None:
            raise ValueError("estimate_pose needs a pose bank or explicit inits")
        inits = select_initial_poses(
            f, bank, opts.k_init, opts.min_sep, clutter, features=mesh.features
        )
    if not inits:
        raise EstimationError("no usable initial poses")
    cache = SceneCache(f, clutter)
    results = _optimize_lockstep(cache, mesh, cam, list(inits), opts)
    usable = [r for r in results if r is not None]
    if not usable:
        raise EstimationError("all pose candidates failed")
    best = min(usable, key=lambda r: (r.loss, usable.index(r)))
    return replace(best, candidates=tuple(usable))
