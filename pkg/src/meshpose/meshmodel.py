"""Neural mesh generative model: per-vertex features, clutter prototypes,
feature-map rendering, joint likelihood and the reconstruction loss."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import vmf
from .geometry import Camera, CuboidMesh, Pose, RasterMap, mesh_from_json, mesh_to_json, rasterize

_UNIT_TOL = 1e-6


def _check_unit_rows(arr, name, tol=_UNIT_TOL):
    norms = np.linalg.norm(arr, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"{name} must be unit-norm rows (worst deviation {worst:.2e})")


@dataclass(frozen=True)
class NeuralMesh:
    """Cuboid geometry with a unit feature vector and concentration per vertex."""

    geometry: CuboidMesh
    features: np.ndarray
    kappas: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        kappas = np.asarray(self.kappas, dtype=np.float64)
        r = self.geometry.n_vertices
        if features.shape[0] != r or kappas.shape != (r,):
            raise ValueError("features/kappas must have one row per vertex")
        _check_unit_rows(features, "features")
        if np.any(kappas <= 0) or np.any(kappas > vmf.KAPPA_MAX):
            raise ValueError("kappas must lie in (0, KAPPA_MAX]")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "kappas", kappas)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def with_features(self, features, kappas=None) -> "NeuralMesh":
        return replace(
            self,
            features=features,
            kappas=self.kappas if kappas is None else kappas,
        )


@dataclass(frozen=True)
class ClutterModel:
    """Background vMF prototypes with a shared concentration."""

    betas: np.ndarray
    kappa_prime: float

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 2 or betas.shape[0] < 1:
            raise ValueError("betas must be a non-empty (N, d) array")
        _check_unit_rows(betas, "betas")
        if not 0 < self.kappa_prime <= vmf.KAPPA_MAX:
            raise ValueError("kappa_prime must lie in (0, KAPPA_MAX]")
        object.__setattr__(self, "betas", betas)

    @property
    def n(self) -> int:
        return int(self.betas.shape[0])


@dataclass(frozen=True)
class FeatureMap:
    """H x W lattice of unit d-vectors."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ValueError("feature map must have shape (H, W, d)")
        _check_unit_rows(values, "feature map")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @classmethod
    def from_array(cls, arr, normalize: bool = False) -> "FeatureMap":
        arr = np.asarray(arr, dtype=np.float64)
        if normalize:
            arr = arr / np.linalg.norm(arr, axis=-1, keepdims=True)
        return cls(arr)


@dataclass(frozen=True)
class RenderResult:
    """A rasterization plus the rendered feature lattice.

    rendered carries C_r on foreground pixels and zeros on background (the
    zero rows are markers, not unit features; they never enter foreground
    sums)."""

    raster: RasterMap
    rendered: np.ndarray

    @property
    def fg_mask(self) -> np.ndarray:
        return self.raster.fg_mask

    @property
    def correspondence(self) -> np.ndarray:
        return self.raster.pixel_vertex

    @property
    def visible(self) -> np.ndarray:
        return self.raster.visible_indices


def render_feature_map(mesh: NeuralMesh, pose: Pose, cam: Camera) -> RenderResult:
    """Rasterize the mesh and paint each foreground pixel with its vertex feature."""
    raster = rasterize(mesh.geometry, pose, cam)
    return render_from_raster(mesh, raster)


def render_from_raster(mesh: NeuralMesh, raster: RasterMap) -> RenderResult:
    h, w = raster.pixel_vertex.shape
    rendered = np.zeros((h, w, mesh.dim))
    fg = raster.fg_mask
    rendered[fg] = mesh.features[raster.pixel_vertex[fg]]
    return RenderResult(raster=raster, rendered=rendered)


def clutter_log_density(values: np.ndarray, clutter: ClutterModel) -> np.ndarray:
    """Per-row max over clutter prototypes of the vMF log-density."""
    log_z = vmf.log_norm_const(clutter.kappa_prime, clutter.betas.shape[1])
    dots = values @ clutter.betas.T
    return log_z + clutter.kappa_prime * dots.max(axis=-1)


def joint_log_likelihood(
    f: FeatureMap,
    mesh: NeuralMesh,
    pose: Pose,
    clutter: ClutterModel,
    cam: Camera,
) -> float:
    """Sum of per-pixel vMF log-densities: vertex models on foreground pixels,
    best clutter prototype on background pixels."""
    raster = rasterize(mesh.geometry, pose, cam)
    values = f.values
    fg = raster.fg_mask
    verts = raster.pixel_vertex[fg]
    fg_feats = values[fg]
    log_z = np.array(
        [vmf.log_norm_const(k, mesh.dim) for k in mesh.kappas], dtype=np.float64
    )
    fg_term = float(
        np.sum(
            log_z[verts]
            + mesh.kappas[verts] * np.sum(fg_feats * mesh.features[verts], axis=1)
        )
    )
    bg_term = float(np.sum(clutter_log_density(values[~fg], clutter)))
    return fg_term + bg_term


def reconstruction_loss(f: FeatureMap, rr: RenderResult, clutter: ClutterModel) -> float:
    """Feature-level render-and-compare loss.

    1 - (mean foreground dot product + mean best-clutter background dot
    product) / 2; zero for a perfect match, one when everything is
    orthogonal, at most two.  Per-side means keep the value lattice-size
    independent; an empty side contributes zero.
    """
    values = f.values
    fg = rr.fg_mask
    n_fg = int(np.count_nonzero(fg))
    n_px = fg.size
    fg_mean = 0.0
    if n_fg:
        fg_mean = float(np.sum(values[fg] * rr.rendered[fg]) / n_fg)
    bg_mean = 0.0
    if n_px - n_fg:
        bg_dots = values[~fg] @ clutter.betas.T
        bg_mean = float(np.sum(bg_dots.max(axis=-1)) / (n_px - n_fg))
    return 1.0 - 0.5 * (fg_mean + bg_mean)


def vertex_similarity(
    f: np.ndarray, r: int, mesh: NeuralMesh, mode: str = "cosine"
) -> float:
    """Similarity of an image feature to vertex r: plain cosine, or the vMF
    score Z[kappa_r] * exp(kappa_r * f . C_r)."""
    f = np.asarray(f, dtype=np.float64)
    if abs(np.linalg.norm(f) - 1.0) > _UNIT_TOL:
        raise ValueError("f must be unit-norm")
    cos = float(np.dot(f, mesh.features[r]))
    if mode == "cosine":
        return cos
    if mode == "vmf_score":
        kappa = float(mesh.kappas[r])
        return float(np.exp(vmf.log_norm_const(kappa, mesh.dim) + kappa * cos))
    raise ValueError(f"unknown similarity mode {mode!r}")


# ---------------------------------------------------------------------------
# Persistence: model JSON and feature-map binary files.
# ---------------------------------------------------------------------------


def model_to_json(
    mesh: NeuralMesh,
    clutter: ClutterModel,
    extractor_w: np.ndarray | None = None,
    thresholds: np.ndarray | None = None,
) -> dict:
    obj = {
        "geometry": mesh_to_json(mesh.geometry),
        "d": mesh.dim,
        "features": mesh.features.tolist(),
        "kappas": mesh.kappas.tolist(),
        "clutter": {
            "betas": clutter.betas.tolist(),
            "kappa_prime": clutter.kappa_prime,
        },
    }
    if extractor_w is not None:
        obj["extractor_w"] = np.asarray(extractor_w).tolist()
    if thresholds is not None:
        obj["thresholds"] = np.asarray(thresholds).tolist()
    return obj


def model_from_json(obj: dict):
    geometry = mesh_from_json(obj["geometry"])
    mesh = NeuralMesh(
        geometry=geometry,
        features=np.asarray(obj["features"], dtype=np.float64),
        kappas=np.asarray(obj["kappas"], dtype=np.float64),
    )
    if mesh.dim != obj["d"]:
        raise ValueError("feature dimension mismatch in model file")
    clutter = ClutterModel(
        betas=np.asarray(obj["clutter"]["betas"], dtype=np.float64),
        kappa_prime=float(obj["clutter"]["kappa_prime"]),
    )
    extractor_w = (
        np.asarray(obj["extractor_w"], dtype=np.float64)
        if "extractor_w" in obj
        else None
    )
    thresholds = (
        np.asarray(obj["thresholds"], dtype=np.float64)
        if "thresholds" in obj
        else None
    )
    return mesh, clutter, extractor_w, thresholds


def save_model(path, mesh, clutter, extractor_w=None, thresholds=None):
    with open(path, "w") as fh:
        json.dump(model_to_json(mesh, clutter, extractor_w, thresholds), fh, sort_keys=True)


def load_model(path):
    with open(path) as fh:
        return model_from_json(json.load(fh))


def save_feature_map(path, values: np.ndarray):
    """One JSON header line, then row-major float32 data."""
    values = np.asarray(values)
    h, w, d = values.shape
    header = {"H": int(h), "W": int(w), "d": int(d), "dtype": "f32", "order": "row-major"}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_feature_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        if header.get("dtype") != "f32":
            raise ValueError("unsupported feature map dtype")
        data = np.frombuffer(fh.read(), dtype="<f4")
    shape = (header["H"], header["W"], header["d"])
    if data.size != int(np.prod(shape)):
        raise ValueError("feature map payload size mismatch")
    return data.reshape(shape).astype(np.float64)
