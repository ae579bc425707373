"""Source-free selective vertex adaptation.

Per-vertex cosine thresholds are calibrated on source data once; on the
unlabeled target, every epoch estimates poses (multi-initialization),
collects per-vertex feature matches above threshold, blends them into the
vertex features by exponential moving average, drops low-similarity scenes,
and fine-tunes the extractor with a contrastive softmax loss over
non-neighbor vertices and clutter.  Vertices without matches (occluded or
out-of-distribution) stay untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import vmf
from ._util import parallel_map
from .geometry import Camera, rasterize
from .inference import (
    EstimationError,
    InferenceOpts,
    PoseBank,
    PoseEstimate,
    PoseGrid,
    build_pose_bank,
    estimate_pose,
)
from .meshmodel import ClutterModel, FeatureMap, NeuralMesh, RenderResult
from .training import FeatureExtractor, Metrics, Model, _non_neighbor_matrix, evaluate


class MatchStarvationError(RuntimeError):
    """An entire adaptation epoch produced zero accepted matches."""


@dataclass(frozen=True)
class AdaptationConfig:
    """Knobs of the adaptation loop.  delta may be a scalar or a per-vertex
    array; None falls back to the model's calibrated thresholds."""

    delta: float | np.ndarray | None = None
    alpha: float = 0.9
    psi: float = 0.075
    batch_size: int = 32
    epochs: int = 100
    drop_threshold: float = 0.5
    recompute_kappa: bool = False
    kappa_min_matches: int = 10
    adaptive_batch: bool = False
    target_coverage: float = 0.8
    lr: float = 0.02
    fixed_kappa: float | None = 20.0
    match_mode: str = "all"  # or "best": only the best candidate feeds matches
    warm_start: bool = True
    drift_tol_deg: float = 0.1
    drift_window: int = 5
    diagnostic_delta: float = 0.8
    probe_every: int = 0
    seed: int = 0
    infer: InferenceOpts = field(
        default_factory=lambda: InferenceOpts(max_iters=25)
    )

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if not 0.0 <= self.psi <= 1.0:
            raise ValueError("psi must be in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.match_mode not in ("all", "best"):
            raise ValueError("match_mode must be 'all' or 'best'")


@dataclass
class MatchTable:
    """Accepted image features per vertex, deduplicated by (scene, vertex)."""

    by_vertex: dict[int, dict[int, tuple[float, np.ndarray]]] = field(
        default_factory=dict
    )

    def add(self, vertex: int, scene_id: int, similarity: float, feature: np.ndarray):
        slot = self.by_vertex.setdefault(int(vertex), {})
        prev = slot.get(int(scene_id))
        if prev is None or similarity > prev[0]:
            slot[int(scene_id)] = (float(similarity), feature)

    def merge(self, other: "MatchTable"):
        for vertex, entries in other.by_vertex.items():
            for scene_id, (sim, feat) in entries.items():
                self.add(vertex, scene_id, sim, feat)

    def features_for(self, vertex: int) -> np.ndarray:
        entries = self.by_vertex.get(int(vertex), {})
        if not entries:
            return np.empty((0, 0))
        return np.stack([entries[sid][1] for sid in sorted(entries)])

    def count(self, vertex: int) -> int:
        return len(self.by_vertex.get(int(vertex), {}))

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.by_vertex.values())

    @property
    def vertices(self) -> list[int]:
        return sorted(self.by_vertex)


def _as_delta_array(delta, n_vertices: int) -> np.ndarray:
    arr = np.asarray(delta, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(n_vertices, float(arr))
    if arr.shape != (n_vertices,):
        raise ValueError("delta must be scalar or one value per vertex")
    return arr


def calibrate_thresholds(
    model: Model,
    scenes,
    cam: Camera,
    quantile: float = 0.95,
    min_obs: int = 10,
    default: float = 0.8,
) -> np.ndarray:
    """Per-vertex cosine threshold passing `quantile` of the source features.

    Similarities are taken at the ground-truth poses; vertices observed fewer
    than min_obs times fall back to the global default threshold."""
    if not 0.0 <= quantile <= 1.0:
        raise ValueError("quantile must be in [0, 1]")
    r = model.mesh.geometry.n_vertices
    sims_per_vertex: list[list[float]] = [[] for _ in range(r)]
    for scene in scenes:
        raster = rasterize(model.mesh.geometry, scene.pose, cam)
        vis = raster.visible_indices
        if vis.size == 0:
            continue
        f = model.extract(scene.features)
        rows = raster.vertex_pixel[vis, 0]
        cols = raster.vertex_pixel[vis, 1]
        sims = np.sum(f[rows, cols] * model.mesh.features[vis], axis=1)
        for rr, s in zip(vis, sims):
            sims_per_vertex[int(rr)].append(float(s))
    delta = np.full(r, default)
    for rr in range(r):
        if len(sims_per_vertex[rr]) >= min_obs:
            delta[rr] = float(np.quantile(np.array(sims_per_vertex[rr]), 1.0 - quantile))
    return delta


def collect_matches(
    batch_maps,
    estimates,
    mesh: NeuralMesh,
    delta,
    scene_ids=None,
    mode: str = "all",
) -> MatchTable:
    """Accept the image feature at each visible vertex's pixel whenever its
    cosine to the vertex feature clears the vertex threshold.

    With mode='all' every optimized candidate pose contributes (duplicates per
    (scene, vertex) keep the highest similarity); 'best' uses only the winning
    candidate."""
    delta = _as_delta_array(delta, mesh.geometry.n_vertices)
    table = MatchTable()
    if scene_ids is None:
        scene_ids = list(range(len(batch_maps)))
    for sid, values, est in zip(scene_ids, batch_maps, estimates):
        if est is None:
            continue
        cands = est.candidates if (mode == "all" and est.candidates) else (est,)
        for cand in cands:
            raster = cand.correspondences.raster
            vis = raster.visible_indices
            if vis.size == 0:
                continue
            rows = raster.vertex_pixel[vis, 0]
            cols = raster.vertex_pixel[vis, 1]
            feats = values[rows, cols]
            sims = np.sum(feats * mesh.features[vis], axis=1)
            hit = sims > delta[vis]
            for rr, s, fvec in zip(vis[hit], sims[hit], feats[hit]):
                table.add(int(rr), int(sid), float(s), fvec)
    return table


def sva_update(mesh: NeuralMesh, matches: MatchTable, alpha: float) -> NeuralMesh:
    """Blend each matched vertex feature toward the mean of its accepted
    image features: C <- alpha * C + (1 - alpha) * mean(f), renormalized.
    Vertices without matches are returned unchanged."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    feats = mesh.features.copy()
    for vertex in matches.vertices:
        fs = matches.features_for(vertex)
        if fs.size == 0:
            continue
        blended = alpha * feats[vertex] + (1.0 - alpha) * fs.mean(axis=0)
        norm = np.linalg.norm(blended)
        if norm > 1e-12:
            feats[vertex] = blended / norm
    return mesh.with_features(feats)


def _vertex_logits(f_vis, vis, mesh, clutter, nn_mask, fixed_kappa):
    """Numerator logit and denominator logit matrix for the contrastive loss."""
    d = mesh.dim
    if fixed_kappa is None:
        kappas = mesh.kappas
        kappa_prime = clutter.kappa_prime
    else:
        kappas = np.full(mesh.geometry.n_vertices, float(fixed_kappa))
        kappa_prime = float(fixed_kappa)
    log_z = np.array([vmf.log_norm_const(k, d) for k in kappas])
    log_zp = vmf.log_norm_const(kappa_prime, d)

    dots = f_vis @ mesh.features.T  # (n_vis, R)
    logits = log_z[None, :] + kappas[None, :] * dots
    num = logits[np.arange(vis.size), vis]
    den_vert = np.where(nn_mask[vis], logits, -np.inf)
    bdots = f_vis @ clutter.betas.T
    den_clut = log_zp + kappa_prime * bdots
    return num, den_vert, den_clut, kappas, kappa_prime


def _nn_mask_with_self(geometry) -> np.ndarray:
    """Denominator membership: every vertex outside N_r, r itself included."""
    mask = _non_neighbor_matrix(geometry).copy()
    np.fill_diagonal(mask, True)
    return mask


def backbone_loss(
    f: FeatureMap | np.ndarray,
    rr: RenderResult,
    mesh: NeuralMesh,
    clutter: ClutterModel,
    fixed_kappa: float | None = 20.0,
) -> float:
    """Negated sum over visible vertices of the log-ratio of the vertex vMF
    score against all non-neighbor vertices plus clutter."""
    values = f.values if isinstance(f, FeatureMap) else np.asarray(f, dtype=np.float64)
    raster = rr.raster
    vis = raster.visible_indices
    if vis.size == 0:
        return 0.0
    rows = raster.vertex_pixel[vis, 0]
    cols = raster.vertex_pixel[vis, 1]
    f_vis = values[rows, cols]
    nn_mask = _nn_mask_with_self(mesh.geometry)
    num, den_vert, den_clut, _, _ = _vertex_logits(
        f_vis, vis, mesh, clutter, nn_mask, fixed_kappa
    )
    den = np.concatenate([den_vert, den_clut], axis=1)
    m = den.max(axis=1)
    lse = m + np.log(np.sum(np.exp(den - m[:, None]), axis=1))
    return float(-np.sum(num - lse))


@dataclass(frozen=True)
class _AdaptObs:
    """Raw pixel vectors behind the visible vertices of one kept scene."""

    raw_vectors: np.ndarray
    vis: np.ndarray


def _batch_backbone_loss(obs_list, mesh, clutter, extractor, nn_mask, fixed_kappa, with_grad=False):
    total = 0.0
    grad = np.zeros_like(extractor.w) if with_grad else None
    for obs in obs_list:
        if obs.vis.size == 0:
            continue
        pre = obs.raw_vectors @ extractor.w.T
        norms = np.linalg.norm(pre, axis=1, keepdims=True)
        f_vis = pre / norms
        num, den_vert, den_clut, kappas, kappa_prime = _vertex_logits(
            f_vis, obs.vis, mesh, clutter, nn_mask, fixed_kappa
        )
        den = np.concatenate([den_vert, den_clut], axis=1)
        m = den.max(axis=1)
        expd = np.exp(den - m[:, None])
        sums = expd.sum(axis=1)
        lse = m + np.log(sums)
        total += float(-np.sum(num - lse))
        if with_grad:
            w_soft = expd / sums[:, None]
            r = mesh.geometry.n_vertices
            # d(loss)/d(f) = -kappa_r C_r + sum_c softmax_c * kappa_c * u_c
            u = -(kappas[obs.vis, None] * mesh.features[obs.vis])
            u += (w_soft[:, :r] * kappas[None, :]) @ mesh.features
            u += kappa_prime * (w_soft[:, r:] @ clutter.betas)
            g_pre = (u - f_vis * np.sum(u * f_vis, axis=1, keepdims=True)) / norms
            grad += g_pre.T @ obs.raw_vectors
    return (total, grad) if with_grad else total


def update_extractor(
    extractor: FeatureExtractor,
    kept_obs: list[_AdaptObs],
    mesh: NeuralMesh,
    clutter: ClutterModel,
    lr: float,
    fixed_kappa: float | None = 20.0,
) -> FeatureExtractor:
    """One backtracking gradient step on the extractor weights for the
    contrastive loss summed over kept scenes; the loss never increases on the
    step's own batch."""
    if lr <= 0.0 or not kept_obs:
        return extractor
    nn_mask = _nn_mask_with_self(mesh.geometry)
    cur, grad = _batch_backbone_loss(
        kept_obs, mesh, clutter, extractor, nn_mask, fixed_kappa, with_grad=True
    )
    gnorm = float(np.linalg.norm(grad))
    if gnorm < 1e-12:
        return extractor
    step = lr / gnorm
    for _ in range(12):
        cand = FeatureExtractor(extractor.w - step * grad)
        if _batch_backbone_loss(kept_obs, mesh, clutter, cand, nn_mask, fixed_kappa) <= cur:
            return cand
        step *= 0.5
    return extractor


def drop_low_similarity(
    batch_maps,
    estimates,
    mesh: NeuralMesh,
    delta,
    drop_threshold: float,
    psi: float,
):
    """Keep scene indices whose best estimate has mean foreground cosine at
    least drop_threshold and at least a psi fraction of visible vertices
    above their per-vertex thresholds."""
    delta = _as_delta_array(delta, mesh.geometry.n_vertices)
    kept = []
    for idx, (values, est) in enumerate(zip(batch_maps, estimates)):
        if est is None:
            continue
        raster = est.correspondences.raster
        fg = raster.fg_mask
        if not np.any(fg):
            continue
        rendered = mesh.features[raster.pixel_vertex[fg]]
        mean_fg = float(np.mean(np.sum(values[fg] * rendered, axis=1)))
        vis = raster.visible_indices
        if vis.size == 0:
            continue
        rows = raster.vertex_pixel[vis, 0]
        cols = raster.vertex_pixel[vis, 1]
        sims = np.sum(values[rows, cols] * mesh.features[vis], axis=1)
        activated = float(np.mean(sims > delta[vis]))
        if mean_fg >= drop_threshold and activated >= psi:
            kept.append(idx)
    return kept


def recompute_kappas(
    mesh: NeuralMesh, matches: MatchTable, min_matches: int = 10
) -> NeuralMesh:
    """Re-estimate per-vertex concentrations from this round's matched
    features; vertices with fewer than min_matches stay unchanged."""
    kappas = mesh.kappas.copy()
    for vertex in matches.vertices:
        if matches.count(vertex) >= min_matches:
            feats = matches.features_for(vertex)
            kappas[vertex] = max(vmf.estimate_kappa(feats), 1e-2)
    return mesh.with_features(mesh.features, kappas)


@dataclass
class AdaptationHistory:
    """One row per epoch of adaptation diagnostics."""

    rows: list[dict] = field(default_factory=list)

    def to_csv_rows(self):
        header = [
            "epoch",
            "robust_ratio",
            "mean_drift_deg",
            "kept",
            "dropped",
            "matches",
            "acc_pi6",
            "acc_pi18",
        ]
        out = [header]
        for row in self.rows:
            out.append(
                [
                    row["epoch"],
                    f"{row['robust_ratio']:.6f}",
                    f"{row['mean_drift_deg']:.6f}",
                    row["kept"],
                    row["dropped"],
                    row["matches"],
                    "" if row.get("acc_pi6") is None else f"{row['acc_pi6']:.6f}",
                    "" if row.get("acc_pi18") is None else f"{row['acc_pi18']:.6f}",
                ]
            )
        return out


def _mean_drift_deg(old_feats, new_feats) -> float:
    dots = np.clip(np.sum(old_feats * new_feats, axis=1), -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(dots))))


def _scene_ratio(values, est, mesh, delta: float) -> float:
    raster = est.correspondences.raster
    vis = raster.visible_indices
    if vis.size == 0:
        return 0.0
    rows = raster.vertex_pixel[vis, 0]
    cols = raster.vertex_pixel[vis, 1]
    sims = np.sum(values[rows, cols] * mesh.features[vis], axis=1)
    return float(np.mean(sims > delta))


def adapt(
    model: Model,
    target,
    cfg: AdaptationConfig,
    cam: Camera,
    probe=None,
    bank: PoseBank | None = None,
    grid: PoseGrid | None = None,
    threads: int = 1,
) -> tuple[Model, AdaptationHistory]:
    """Run the adaptation loop on unlabeled target scenes.

    Per batch: multi-init pose estimation, match collection, EMA vertex
    update, sample dropping, one extractor step, optional kappa refresh.
    Stops at the epoch cap, or when the mean vertex drift stays under the
    tolerance for drift_window consecutive epochs.  Raises
    MatchStarvationError when an entire epoch accepts nothing.
    """
    if cfg.delta is not None:
        delta = _as_delta_array(cfg.delta, model.mesh.geometry.n_vertices)
    elif model.thresholds is not None:
        delta = np.asarray(model.thresholds, dtype=np.float64)
    else:
        delta = _as_delta_array(0.8, model.mesh.geometry.n_vertices)

    if bank is None:
        bank = build_pose_bank(model.mesh, cam, grid or PoseGrid())

    mesh = model.mesh
    clutter = model.clutter
    extractor = model.extractor
    history = AdaptationHistory()
    warm: dict[int, list] = {}
    calm_epochs = 0

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng((cfg.seed, epoch))
        order = rng.permutation(len(target))
        epoch_start_feats = mesh.features.copy()
        epoch_matches = 0
        epoch_kept = 0
        epoch_dropped = 0
        ratios = []

        cursor = 0
        while cursor < len(order):
            batch_idx = list(order[cursor : cursor + cfg.batch_size])
            cursor += len(batch_idx)
            scenes = [target[i] for i in batch_idx]
            maps = [extractor.apply(s.features) for s in scenes]

            def run(pair):
                scene, values = pair
                inits = warm.get(scene.scene_id) if cfg.warm_start else None
                try:
                    return estimate_pose(
                        FeatureMap(values), mesh, clutter, cam,
                        cfg.infer, bank=bank, inits=inits,
                    )
                except EstimationError:
                    return None

            estimates = parallel_map(run, list(zip(scenes, maps)), threads)
            if cfg.warm_start:
                for scene, est in zip(scenes, estimates):
                    if est is not None:
                        warm[scene.scene_id] = [c.pose for c in est.candidates] or [est.pose]

            matches = collect_matches(
                maps,
                estimates,
                mesh,
                delta,
                scene_ids=[s.scene_id for s in scenes],
                mode=cfg.match_mode,
            )

            # Adaptive batching: pull in extra scenes until enough vertices
            # have at least one match.
            while (
                cfg.adaptive_batch
                and cursor < len(order)
                and len(matches.vertices) < cfg.target_coverage * mesh.geometry.n_vertices
            ):
                extra_i = int(order[cursor])
                cursor += 1
                scene = target[extra_i]
                values = extractor.apply(scene.features)
                est = run((scene, values))
                scenes.append(scene)
                maps.append(values)
                estimates.append(est)
                if cfg.warm_start and est is not None:
                    warm[scene.scene_id] = [c.pose for c in est.candidates] or [est.pose]
                matches.merge(
                    collect_matches(
                        [values], [est], mesh, delta,
                        scene_ids=[scene.scene_id], mode=cfg.match_mode,
                    )
                )

            epoch_matches += matches.total
            mesh = sva_update(mesh, matches, cfg.alpha)

            kept_idx = drop_low_similarity(
                maps, estimates, mesh, delta, cfg.drop_threshold, cfg.psi
            )
            epoch_kept += len(kept_idx)
            epoch_dropped += len(scenes) - len(kept_idx)
            if cfg.lr > 0 and kept_idx:
                kept_obs = []
                for i in kept_idx:
                    raster = estimates[i].correspondences.raster
                    vis = raster.visible_indices
                    rows = raster.vertex_pixel[vis, 0]
                    cols = raster.vertex_pixel[vis, 1]
                    raw = scenes[i].features[rows, cols]
                    kept_obs.append(_AdaptObs(raw_vectors=raw, vis=vis))
                extractor = update_extractor(
                    extractor, kept_obs, mesh, clutter, cfg.lr, cfg.fixed_kappa
                )
            if cfg.recompute_kappa:
                mesh = recompute_kappas(mesh, matches, cfg.kappa_min_matches)

            for values, est in zip(maps, estimates):
                if est is not None:
                    ratios.append(_scene_ratio(values, est, mesh, cfg.diagnostic_delta))

        if epoch_matches == 0:
            raise MatchStarvationError(
                f"epoch {epoch} accepted zero matches; piece-wise support "
                "assumption violated for the calibrated thresholds"
            )

        drift = _mean_drift_deg(epoch_start_feats, mesh.features)
        row = {
            "epoch": epoch,
            "robust_ratio": float(np.mean(ratios)) if ratios else 0.0,
            "mean_drift_deg": drift,
            "kept": epoch_kept,
            "dropped": epoch_dropped,
            "matches": epoch_matches,
            "acc_pi6": None,
            "acc_pi18": None,
        }
        if (
            probe is not None
            and cfg.probe_every > 0
            and (epoch % cfg.probe_every == 0 or epoch == cfg.epochs - 1)
        ):
            probe_model = Model(mesh=mesh, clutter=clutter, extractor=extractor)
            metrics, _, _ = evaluate(
                probe_model, probe, cfg.infer, bank=bank, threads=threads
            )
            row["acc_pi6"] = metrics.acc_pi6
            row["acc_pi18"] = metrics.acc_pi18
        history.rows.append(row)

        calm_epochs = calm_epochs + 1 if drift < cfg.drift_tol_deg else 0
        if calm_epochs >= cfg.drift_window:
            break

    adapted = Model(
        mesh=mesh, clutter=clutter, extractor=extractor, thresholds=delta
    )
    return adapted, history
