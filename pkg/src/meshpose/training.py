"""Supervised source-model training, the feature-extractor surrogate, and
pose-accuracy metrics.

The extractor stands in for a CNN backbone: a learnable d x d linear map
applied per lattice vector, followed by renormalization, so every downstream
feature map keeps unit rows no matter what the weights do.  Training
alternates closed-form vertex/clutter updates with gradient steps on the
extractor weights, accepting only steps that do not increase the total loss.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import vmf
from ._util import parallel_map
from .geometry import Camera, CuboidMesh, Pose, geodesic_distance, pose_to_rotation, rasterize
from .inference import EstimationError, InferenceOpts, PoseBank, PoseEstimate, estimate_pose
from .meshmodel import ClutterModel, FeatureMap, NeuralMesh


@dataclass(frozen=True)
class FeatureExtractor:
    """Per-pixel linear map + renormalization (the backbone surrogate)."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("extractor weights must be square")
        if not np.all(np.isfinite(w)):
            raise ValueError("extractor weights must be finite")
        object.__setattr__(self, "w", w)

    @classmethod
    def identity(cls, d: int) -> "FeatureExtractor":
        return cls(np.eye(d))

    def apply(self, raw: np.ndarray) -> np.ndarray:
        """Map raw lattice vectors and renormalize rows to unit length."""
        out = np.asarray(raw, dtype=np.float64) @ self.w.T
        norms = np.linalg.norm(out, axis=-1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ValueError("extractor produced a zero vector")
        return out / norms

    def feature_map(self, raw: np.ndarray) -> FeatureMap:
        return FeatureMap(self.apply(raw))


@dataclass(frozen=True)
class TrainingConfig:
    lam: float = 0.1
    mu: float = 0.1
    epochs: int = 8
    batch_size: int = 32
    lr: float = 0.05
    fixed_kappa: bool = True
    kappa: float = 20.0
    kappa_prime: float = 15.0
    n_clutter: int = 5
    clutter_restarts: int = 10
    bg_subsample: int = 128
    w_steps_per_epoch: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0:
            raise ValueError("contrastive weights must be >= 0")


@dataclass(frozen=True)
class Metrics:
    """Pose accuracy at the pi/6 and pi/18 thresholds plus the median error."""

    acc_pi6: float
    acc_pi18: float
    median_error: float
    n: int

    def __post_init__(self):
        if not 0.0 <= self.acc_pi18 <= self.acc_pi6 <= 1.0:
            raise ValueError("accuracies must satisfy 0 <= pi/18 acc <= pi/6 acc <= 1")


@dataclass(frozen=True)
class Model:
    """Trained bundle: neural mesh, clutter model, extractor, optional
    per-vertex similarity thresholds."""

    mesh: NeuralMesh
    clutter: ClutterModel
    extractor: FeatureExtractor
    thresholds: np.ndarray | None = None

    def extract(self, raw: np.ndarray) -> np.ndarray:
        return self.extractor.apply(raw)


def spherical_kmeans(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator,
    restarts: int = 10,
    iters: int = 50,
):
    """Cosine k-means on unit vectors; returns (centroids, objective).

    Centroids are renormalized means; the objective is the summed cosine to
    the assigned centroid (maximized).  Best of `restarts` seeded inits.
    """
    n, d = points.shape
    k = min(k, n)
    best = None
    best_obj = -np.inf
    for _ in range(restarts):
        centers = points[rng.permutation(n)[:k]].copy()
        for _ in range(iters):
            sims = points @ centers.T
            assign = sims.argmax(axis=1)
            new_centers = centers.copy()
            for j in range(k):
                sel = assign == j
                if np.any(sel):
                    m = points[sel].sum(axis=0)
                    norm = np.linalg.norm(m)
                    if norm > 1e-12:
                        new_centers[j] = m / norm
                else:
                    # Re-seed an empty cluster at the worst-covered point.
                    worst = int(np.argmin(sims.max(axis=1)))
                    new_centers[j] = points[worst]
            if np.allclose(new_centers, centers, atol=1e-12):
                centers = new_centers
                break
            centers = new_centers
        obj = float((points @ centers.T).max(axis=1).sum())
        if obj > best_obj:
            best_obj = obj
            best = centers
    return best, best_obj


class _SceneObs:
    """Fixed per-scene observation structure (geometry never changes):
    visible vertex ids, their pixel positions, and a background subsample."""

    def __init__(self, scene, geometry, cam, n_bg, rng):
        raster = rasterize(geometry, scene.pose, cam)
        self.vis = raster.visible_indices
        rows = raster.vertex_pixel[self.vis, 0]
        cols = raster.vertex_pixel[self.vis, 1]
        h, w, _ = scene.features.shape
        self.vert_lin = rows * w + cols
        bg_lin = np.flatnonzero(~raster.fg_mask.ravel())
        take = min(n_bg, bg_lin.size)
        self.bg_lin = bg_lin[rng.permutation(bg_lin.size)[:take]] if take else bg_lin
        self.raw = scene.features.reshape(-1, scene.features.shape[-1])


def _non_neighbor_matrix(geometry: CuboidMesh) -> np.ndarray:
    """Mask M[r, l] = 1 iff l is contrastive-relevant for r (l != r, l not a
    neighbor of r)."""
    r = geometry.n_vertices
    mask = np.ones((r, r), dtype=bool)
    np.fill_diagonal(mask, False)
    for i, nbrs in enumerate(geometry.neighbors):
        mask[i, list(nbrs)] = False
    return mask


def source_loss(
    obs_list,
    mesh: NeuralMesh,
    clutter: ClutterModel,
    extractor: FeatureExtractor,
    cfg: TrainingConfig,
    nn_mask: np.ndarray,
    with_grad: bool = False,
):
    """Total source loss (and optionally its gradient in the extractor
    weights).

    Per scene: negative vertex log-likelihoods at the ground-truth
    correspondences, negative best-clutter log-likelihoods on sampled
    background pixels, and the two contrastive terms (vertex-vs-vertex
    excluding neighbors, vertex-vs-clutter) weighted by lam/mu.
    """
    kappas = mesh.kappas
    d = mesh.dim
    log_z = np.array([vmf.log_norm_const(k, d) for k in kappas])
    log_zp = vmf.log_norm_const(clutter.kappa_prime, d)
    c = mesh.features
    betas = clutter.betas
    kp = clutter.kappa_prime

    total = {"neural": 0.0, "clutter": 0.0, "contrastive": 0.0}
    grad = np.zeros_like(extractor.w) if with_grad else None

    for obs in obs_list:
        if obs.vis.size:
            raw_v = obs.raw[obs.vert_lin]
            pre = raw_v @ extractor.w.T
            norms = np.linalg.norm(pre, axis=1, keepdims=True)
            f = pre / norms
            dots = f @ c.T  # (n_vis, R)
            own = dots[np.arange(obs.vis.size), obs.vis]
            total["neural"] -= float(
                np.sum(log_z[obs.vis] + kappas[obs.vis] * own)
            )
            contr_vv = (log_z[None, :] + kappas[None, :] * dots) * nn_mask[obs.vis]
            bdots = f @ betas.T
            contr_vb = log_zp + kp * bdots
            total["contrastive"] += float(
                cfg.lam * contr_vv.sum() + cfg.mu * contr_vb.sum()
            )
            if with_grad:
                u = -(kappas[obs.vis, None] * c[obs.vis])
                u += cfg.lam * (nn_mask[obs.vis] * kappas[None, :]) @ c
                u += cfg.mu * kp * betas.sum(axis=0)
                g_pre = (u - f * np.sum(u * f, axis=1, keepdims=True)) / norms
                grad += g_pre.T @ raw_v
        if obs.bg_lin.size:
            raw_b = obs.raw[obs.bg_lin]
            pre = raw_b @ extractor.w.T
            norms = np.linalg.norm(pre, axis=1, keepdims=True)
            fb = pre / norms
            bdots = fb @ betas.T
            best = bdots.argmax(axis=1)
            total["clutter"] -= float(
                np.sum(log_zp + kp * bdots[np.arange(len(best)), best])
            )
            if with_grad:
                u = -kp * betas[best]
                g_pre = (u - fb * np.sum(u * fb, axis=1, keepdims=True)) / norms
                grad += g_pre.T @ raw_b

    total["total"] = total["neural"] + total["clutter"] + total["contrastive"]
    return (total, grad) if with_grad else total


def train_source(
    scenes,
    geometry: CuboidMesh,
    cam: Camera,
    d: int,
    cfg: TrainingConfig = TrainingConfig(),
):
    """Fit vertex features, clutter prototypes and the extractor on labeled
    scenes.

    Alternates (a) closed-form vertex means + spherical k-means clutter,
    accepted only when the total loss does not increase, with (b) backtracking
    gradient steps on the extractor weights.  Returns (Model, history); the
    per-epoch history rows carry the loss components.
    """
    if not scenes:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    obs_list = [
        _SceneObs(s, geometry, cam, cfg.bg_subsample, np.random.default_rng((cfg.seed, s.scene_id)))
        for s in scenes
    ]
    nn_mask = _non_neighbor_matrix(geometry)
    r = geometry.n_vertices

    feats = rng.standard_normal((r, d))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    kappas = np.full(r, cfg.kappa)
    mesh = NeuralMesh(geometry=geometry, features=feats, kappas=kappas)
    betas = rng.standard_normal((cfg.n_clutter, d))
    betas /= np.linalg.norm(betas, axis=1, keepdims=True)
    clutter = ClutterModel(betas=betas, kappa_prime=cfg.kappa_prime)
    extractor = FeatureExtractor.identity(d)

    seen = np.zeros(r, dtype=bool)
    for obs in obs_list:
        seen[obs.vis] = True
    never_visible = np.flatnonzero(~seen)
    if never_visible.size:
        warnings.warn(
            f"{never_visible.size} vertices never visible in the dataset; "
            "their features stay at initialization",
            RuntimeWarning,
        )

    history = []
    loss = source_loss(obs_list, mesh, clutter, extractor, cfg, nn_mask)
    for epoch in range(cfg.epochs):
        # (a) closed-form vertex means and clutter k-means, accept-if-not-worse.
        sums = np.zeros((r, d))
        counts = np.zeros(r)
        bg_feats = []
        for obs in obs_list:
            if obs.vis.size:
                f = extractor.apply(obs.raw[obs.vert_lin])
                np.add.at(sums, obs.vis, f)
                counts[obs.vis] += 1
            if obs.bg_lin.size:
                bg_feats.append(extractor.apply(obs.raw[obs.bg_lin]))
        new_feats = mesh.features.copy()
        upd = counts > 0
        norms = np.linalg.norm(sums[upd], axis=1, keepdims=True)
        ok = norms[:, 0] > 1e-12
        rows = np.flatnonzero(upd)[ok]
        new_feats[rows] = sums[rows] / np.linalg.norm(sums[rows], axis=1, keepdims=True)

        new_kappas = mesh.kappas.copy()
        if not cfg.fixed_kappa:
            per_vertex: dict[int, list[np.ndarray]] = {}
            for obs in obs_list:
                if obs.vis.size:
                    f = extractor.apply(obs.raw[obs.vert_lin])
                    for i, rr in enumerate(obs.vis):
                        per_vertex.setdefault(int(rr), []).append(f[i])
            for rr, fs in per_vertex.items():
                if len(fs) >= 2:
                    new_kappas[rr] = max(vmf.estimate_kappa(np.array(fs)), 1e-2)

        new_betas = clutter.betas
        if bg_feats:
            stacked = np.vstack(bg_feats)
            new_betas, _ = spherical_kmeans(
                stacked, cfg.n_clutter, np.random.default_rng((cfg.seed, epoch)),
                restarts=cfg.clutter_restarts,
            )
        cand_mesh = mesh.with_features(new_feats, new_kappas)
        cand_clutter = ClutterModel(betas=new_betas, kappa_prime=cfg.kappa_prime)
        cand_loss = source_loss(obs_list, cand_mesh, cand_clutter, extractor, cfg, nn_mask)
        if cand_loss["total"] <= loss["total"]:
            mesh, clutter, loss = cand_mesh, cand_clutter, cand_loss

        # (b) backtracking gradient steps on the extractor weights.
        for _ in range(cfg.w_steps_per_epoch):
            cur, grad = source_loss(
                obs_list, mesh, clutter, extractor, cfg, nn_mask, with_grad=True
            )
            gnorm = float(np.linalg.norm(grad))
            if gnorm < 1e-12:
                break
            step = cfg.lr / gnorm
            accepted = False
            for _ in range(12):
                cand_ext = FeatureExtractor(extractor.w - step * grad)
                cand = source_loss(obs_list, mesh, clutter, cand_ext, cfg, nn_mask)
                if cand["total"] <= cur["total"]:
                    extractor, loss = cand_ext, cand
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break

        history.append(
            {
                "epoch": epoch,
                "l_total": loss["total"],
                "l_neural": loss["neural"],
                "l_clutter": loss["clutter"],
                "l_contrastive": loss["contrastive"],
            }
        )

    model = Model(mesh=mesh, clutter=clutter, extractor=extractor)
    return model, {"curve": history, "never_visible": never_visible.tolist()}


def _estimate_scene(model, scene, opts, bank):
    f = FeatureMap(model.extract(scene.features))
    return estimate_pose(
        f, model.mesh, model.clutter, bank.cam, opts, bank=bank
    )


def evaluate(
    model: Model,
    scenes,
    opts: InferenceOpts = InferenceOpts(),
    bank: PoseBank | None = None,
    cam: Camera | None = None,
    threads: int = 1,
    estimates: list[PoseEstimate | None] | None = None,
):
    """Run pose estimation per labeled scene and report threshold accuracies
    and median geodesic error.  Failed estimations count as errors of pi.

    Returns (Metrics, per-scene records, estimates)."""
    if bank is None:
        raise ValueError("evaluate needs a pose bank")

    def run(scene):
        try:
            return _estimate_scene(model, scene, opts, bank)
        except EstimationError:
            return None

    if estimates is None:
        estimates = parallel_map(run, scenes, threads)
    records = []
    errors = []
    for scene, est in zip(scenes, estimates):
        gt = pose_to_rotation(scene.pose)
        if est is None:
            err = math.pi
            records.append({"scene_id": scene.scene_id, "error": err, "loss": math.nan})
        else:
            err = geodesic_distance(pose_to_rotation(est.pose), gt)
            records.append(
                {"scene_id": scene.scene_id, "error": err, "loss": est.loss}
            )
        errors.append(err)
    errors = np.array(errors)
    metrics = Metrics(
        acc_pi6=float(np.mean(errors < math.pi / 6)),
        acc_pi18=float(np.mean(errors < math.pi / 18)),
        median_error=float(np.median(errors)),
        n=len(scenes),
    )
    return metrics, records, estimates


def robust_vertex_ratio(
    model: Model,
    scenes,
    delta: float,
    bins: int,
    opts: InferenceOpts = InferenceOpts(),
    bank: PoseBank | None = None,
    threads: int = 1,
    estimates: list[PoseEstimate | None] | None = None,
):
    """Per-azimuth-bin mean fraction of visible vertices whose image feature
    clears the cosine threshold at the estimated pose.

    Returns populated rows only, as (bin_center, ratio, count) triples."""
    if bank is None:
        raise ValueError("robust_vertex_ratio needs a pose bank")

    def run(scene):
        try:
            return _estimate_scene(model, scene, opts, bank)
        except EstimationError:
            return None

    if estimates is None:
        estimates = parallel_map(run, scenes, threads)
    ratios = []
    azimuths = []
    for scene, est in zip(scenes, estimates):
        if est is None:
            continue
        ratios.append(scene_robust_ratio(model, scene.features, est, delta))
        azimuths.append(scene.pose.azimuth)
    edges = np.linspace(0.0, 2 * math.pi, bins + 1)
    rows = []
    ratios = np.array(ratios)
    azimuths = np.array(azimuths)
    for b in range(bins):
        sel = (azimuths >= edges[b]) & (azimuths < edges[b + 1])
        if np.any(sel):
            center = 0.5 * (edges[b] + edges[b + 1])
            rows.append((float(center), float(ratios[sel].mean()), int(sel.sum())))
    return rows


def scene_robust_ratio(model: Model, raw_features, est: PoseEstimate, delta: float) -> float:
    """Fraction of visible vertices with cosine similarity above delta at one
    estimated pose."""
    raster = est.correspondences.raster
    vis = raster.visible_indices
    if vis.size == 0:
        return 0.0
    f = model.extract(raw_features)
    rows = raster.vertex_pixel[vis, 0]
    cols = raster.vertex_pixel[vis, 1]
    sims = np.sum(f[rows, cols] * model.mesh.features[vis], axis=1)
    return float(np.mean(sims > delta))
