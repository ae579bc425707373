"""Rotations, viewpoints, cuboid meshes and rasterization onto the feature lattice.

Conventions (fixed once, used everywhere):

* World-to-camera rotation ``R = Rz(theta) @ Rx(elevation) @ Ry(azimuth)``,
  right-handed elementary rotations.  A world point maps to camera space as
  ``p_cam = R @ p_world + [0, 0, distance]``.
* The camera sits at the camera-space origin looking down +z; x maps to the
  image column (u) and y to the image row (v):
  ``u = focal * x / z + cx``, ``v = focal * y / z + cy``.
* Lattice pixels are indexed (row, col) = (round(v), round(u)).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi

# Elevation is clamped away from +-pi/2 during optimization (gimbal).
ELEVATION_LIMIT = math.pi / 2.0 - 1e-6

# A camera-space z at or below this is treated as behind the camera.
_Z_EPS = 1e-6
# Relative depth slack for the vertex-vs-triangle occlusion test.
_DEPTH_REL_EPS = 1e-4


class DegenerateProjectionError(RuntimeError):
    """Raised when part of the mesh projects from behind the camera."""


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def is_rotation(m: np.ndarray, tol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        return False
    return bool(
        np.max(np.abs(m.T @ m - np.eye(3))) <= tol
        and abs(np.linalg.det(m) - 1.0) <= tol
    )


def wrap_angle(a: float) -> float:
    """Wrap to [-pi, pi)."""
    return float((a + math.pi) % TWO_PI - math.pi)


@dataclass(frozen=True)
class Pose:
    """Viewpoint: azimuth in [0, 2pi), elevation in [-pi/2, pi/2],
    in-plane rotation theta in [-pi, pi), camera distance > 0.

    Azimuth and theta are wrapped into range on construction; elevation and
    distance are validated.
    """

    azimuth: float
    elevation: float
    theta: float
    distance: float

    def __post_init__(self):
        if not -math.pi / 2 - 1e-12 <= self.elevation <= math.pi / 2 + 1e-12:
            raise ValueError(f"elevation {self.elevation} outside [-pi/2, pi/2]")
        if not self.distance > 0:
            raise ValueError("distance must be positive")
        object.__setattr__(self, "azimuth", float(self.azimuth % TWO_PI))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(
            self,
            "elevation",
            float(min(max(self.elevation, -math.pi / 2), math.pi / 2)),
        )


def pose_to_rotation(pose: Pose) -> np.ndarray:
    """World-to-camera rotation R = Rz(theta) @ Rx(elevation) @ Ry(azimuth)."""
    return rot_z(pose.theta) @ rot_x(pose.elevation) @ rot_y(pose.azimuth)


def rotation_to_pose(m: np.ndarray, distance: float = 1.0) -> Pose:
    """Inverse of pose_to_rotation (azimuth folded into theta at gimbal lock)."""
    m = np.asarray(m, dtype=np.float64)
    se = min(max(float(m[2, 1]), -1.0), 1.0)
    el = math.asin(se)
    if abs(abs(se) - 1.0) < 1e-9:
        # cos(el) ~ 0: only theta +- azimuth is observable.
        az = 0.0
        th = math.atan2(float(m[1, 0]), float(m[0, 0]))
    else:
        az = math.atan2(-float(m[2, 0]), float(m[2, 2]))
        th = math.atan2(-float(m[0, 1]), float(m[1, 1]))
    return Pose(azimuth=az, elevation=el, theta=th, distance=distance)


def geodesic_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Rotation angle of a^T b, i.e. ||logm(a^T b)||_F / sqrt(2), in [0, pi].

    Evaluated as atan2(||antisymmetric part||, trace-based cosine), which is
    accurate over the whole range including near 0 and pi.
    """
    r = np.asarray(a, dtype=np.float64).T @ np.asarray(b, dtype=np.float64)
    s = 0.5 * math.sqrt(
        (r[2, 1] - r[1, 2]) ** 2 + (r[0, 2] - r[2, 0]) ** 2 + (r[1, 0] - r[0, 1]) ** 2
    )
    c = 0.5 * (float(np.trace(r)) - 1.0)
    return math.atan2(s, c)


@dataclass(frozen=True)
class PoseRanges:
    """Sampling/grid ranges of the pose space (azimuth always covers the circle)."""

    elevation: tuple[float, float] = (-math.pi / 3, math.pi / 3)
    theta: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    distance: float = 5.0

    def sample(self, rng: np.random.Generator) -> Pose:
        return Pose(
            azimuth=rng.uniform(0.0, TWO_PI),
            elevation=rng.uniform(*self.elevation),
            theta=rng.uniform(*self.theta),
            distance=self.distance,
        )


@dataclass(frozen=True)
class Camera:
    """Pinhole camera over the H x W feature lattice."""

    focal: float
    cx: float
    cy: float
    height: int
    width: int

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the lattice")


@dataclass(frozen=True)
class CuboidMesh:
    """Axis-aligned cuboid sampled on a surface grid.

    vertices lie on the surface of the box [-dims/2, dims/2]; faces are
    outward-wound triangles; normals are the exact outward surface normals
    (face/edge/corner averaged); neighbors is the 1-hop triangle-edge
    adjacency, symmetric and irreflexive.
    """

    dims: tuple[float, float, float]
    verts_per_edge: int
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray
    neighbors: tuple[tuple[int, ...], ...]
    edges: np.ndarray = field(repr=False)

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])


def make_cuboid_mesh(dims, verts_per_edge: int) -> CuboidMesh:
    """Uniform surface grid over a cuboid: all points of an n^3 lattice with at
    least one coordinate pinned to a face, triangulated per face."""
    dims = tuple(float(x) for x in dims)
    if len(dims) != 3 or any(x <= 0 for x in dims):
        raise ValueError("dims must be three positive lengths")
    n = int(verts_per_edge)
    if n < 2:
        raise ValueError("verts_per_edge must be >= 2")

    index_of: dict[tuple[int, int, int], int] = {}
    points = []

    def vid(i, j, k):
        key = (i, j, k)
        if key not in index_of:
            index_of[key] = len(points)
            points.append(key)
        return index_of[key]

    faces = []
    # axis = coordinate pinned to lo/hi; (a, b) iterate the face grid.
    for axis in range(3):
        a, b = (axis + 1) % 3, (axis + 2) % 3
        for side in (0, n - 1):
            for ia in range(n - 1):
                for ib in range(n - 1):
                    q = [[0, 0, 0] for _ in range(4)]
                    for corner, (da, db) in enumerate(((0, 0), (1, 0), (1, 1), (0, 1))):
                        q[corner][axis] = side
                        q[corner][a] = ia + da
                        q[corner][b] = ib + db
                    v0, v1, v2, v3 = (vid(*c) for c in q)
                    if side == n - 1:
                        faces.append((v0, v1, v2))
                        faces.append((v0, v2, v3))
                    else:
                        faces.append((v0, v2, v1))
                        faces.append((v0, v3, v2))

    grid = np.array(points, dtype=np.float64)
    scale = np.array(dims) / (n - 1)
    vertices = grid * scale - np.array(dims) / 2.0

    normals = np.zeros_like(vertices)
    for axis in range(3):
        on_lo = grid[:, axis] == 0
        on_hi = grid[:, axis] == n - 1
        normals[on_lo, axis] -= 1.0
        normals[on_hi, axis] += 1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    faces_arr = np.array(faces, dtype=np.int64)
    nbr_sets: list[set[int]] = [set() for _ in range(len(points))]
    for tri in faces:
        for p, q in ((0, 1), (1, 2), (2, 0)):
            nbr_sets[tri[p]].add(tri[q])
            nbr_sets[tri[q]].add(tri[p])
    neighbors = tuple(tuple(sorted(s)) for s in nbr_sets)
    edge_set = {
        (min(i, j), max(i, j)) for i, nbrs in enumerate(neighbors) for j in nbrs
    }
    edges = np.array(sorted(edge_set), dtype=np.int64)

    return CuboidMesh(
        dims=dims,
        verts_per_edge=n,
        vertices=vertices,
        faces=faces_arr,
        normals=normals,
        neighbors=neighbors,
        edges=edges,
    )


def mesh_to_json(mesh: CuboidMesh) -> dict:
    return {
        "dims": list(mesh.dims),
        "verts_per_edge": mesh.verts_per_edge,
        "vertices": mesh.vertices.tolist(),
        "faces": mesh.faces.tolist(),
    }


def mesh_from_json(obj: dict) -> CuboidMesh:
    """Rebuild from the {dims, verts_per_edge, vertices, faces} schema.

    Normals/adjacency are derived data; the stored vertices/faces are checked
    against the reconstruction.
    """
    mesh = make_cuboid_mesh(obj["dims"], obj["verts_per_edge"])
    stored = np.asarray(obj["vertices"], dtype=np.float64)
    if stored.shape != mesh.vertices.shape or not np.allclose(
        stored, mesh.vertices, atol=1e-9
    ):
        raise ValueError("stored vertices do not match the declared cuboid grid")
    if not np.array_equal(np.asarray(obj["faces"], dtype=np.int64), mesh.faces):
        raise ValueError("stored faces do not match the declared cuboid grid")
    return mesh


def save_mesh(path, mesh: CuboidMesh):
    with open(path, "w") as f:
        json.dump(mesh_to_json(mesh), f, sort_keys=True)


def load_mesh(path) -> CuboidMesh:
    with open(path) as f:
        return mesh_from_json(json.load(f))


@dataclass(frozen=True)
class RasterMap:
    """Per-pixel and per-vertex view of one rasterization.

    pixel_vertex holds the owning vertex index per pixel (-1 on background);
    fg_mask is pixel_vertex >= 0; vertex_pixel holds the (row, col) each
    visible vertex rounds to ((-1, -1) when invisible).
    """

    fg_mask: np.ndarray
    pixel_vertex: np.ndarray
    vertex_visible: np.ndarray
    vertex_pixel: np.ndarray
    vertex_depth: np.ndarray
    splat_radius: float

    @property
    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(self.vertex_visible)


def rasterize(mesh: CuboidMesh, pose: Pose, cam: Camera) -> RasterMap:
    """Project, cull, depth-test and splat the mesh onto the lattice."""
    rmat = pose_to_rotation(pose)
    maps, ok = rasterize_batch(
        mesh, rmat[None, :, :], np.array([pose.distance]), cam
    )
    if not ok[0]:
        raise DegenerateProjectionError("mesh projects from behind the camera")
    return maps[0]


def rasterize_batch(
    mesh: CuboidMesh,
    rmats: np.ndarray,
    distances: np.ndarray,
    cam: Camera,
) -> tuple[list[RasterMap | None], np.ndarray]:
    """Rasterize B poses at once; returns (maps, ok) with maps[i] None where
    the projection is degenerate.  Identical per-pose arithmetic to the
    single-pose path, so batched and serial runs agree bitwise."""
    rmats = np.asarray(rmats, dtype=np.float64)
    distances = np.asarray(distances, dtype=np.float64)
    nb = rmats.shape[0]
    verts = mesh.vertices
    h, w = cam.height, cam.width

    p_cam = np.einsum("bij,vj->bvi", rmats, verts)
    p_cam[:, :, 2] += distances[:, None]
    z = p_cam[:, :, 2]
    ok = np.all(z > _Z_EPS, axis=1)

    maps: list[RasterMap | None] = [None] * nb
    if not np.any(ok):
        return maps, ok

    u = cam.focal * p_cam[:, :, 0] / z + cam.cx
    v = cam.focal * p_cam[:, :, 1] / z + cam.cy
    col = np.rint(u).astype(np.int64)
    row = np.rint(v).astype(np.int64)
    in_lattice = (row >= 0) & (row < h) & (col >= 0) & (col < w)

    n_cam = np.einsum("bij,vj->bvi", rmats, mesh.normals)
    facing = np.einsum("bvi,bvi->bv", n_cam, p_cam) < 0.0
    candidate = facing & in_lattice

    blocked = _depth_blocked(mesh, u, v, z, candidate)
    visible = candidate & ~blocked

    for b in range(nb):
        if not ok[b]:
            continue
        maps[b] = _assemble_map(
            mesh, u[b], v[b], z[b], row[b], col[b], visible[b], h, w
        )
    return maps, ok


def _depth_blocked(mesh, u, v, z, candidate):
    """Screen-space z-buffer test at each candidate vertex's exact projection.

    A vertex is blocked when some triangle covers its projected point with a
    strictly smaller interpolated depth.  Barycentric interpolation is exact
    at a triangle's own vertices, so incident triangles never self-occlude.
    Candidate/triangle pairs are prefiltered by 2D bounding box before the
    barycentric evaluation.
    """
    tri = mesh.faces
    tu = u[:, tri]  # (B, T, 3)
    tv = v[:, tri]
    tz = z[:, tri]

    margin = 1e-9
    pu = u[:, :, None]  # (B, V, 1)
    pv = v[:, :, None]
    pair = (
        candidate[:, :, None]
        & (pu >= tu.min(axis=2)[:, None, :] - margin)
        & (pu <= tu.max(axis=2)[:, None, :] + margin)
        & (pv >= tv.min(axis=2)[:, None, :] - margin)
        & (pv <= tv.max(axis=2)[:, None, :] + margin)
    )
    bi, vi, ti = np.nonzero(pair)
    blocked = np.zeros(candidate.shape, dtype=bool)
    if bi.size == 0:
        return blocked

    au, bu, cu = (tu[bi, ti, k] for k in range(3))
    av, bv_, cv = (tv[bi, ti, k] for k in range(3))
    az, bz, cz = (tz[bi, ti, k] for k in range(3))
    qu = u[bi, vi]
    qv = v[bi, vi]

    denom = (bv_ - cv) * (au - cu) + (cu - bu) * (av - cv)
    valid = np.abs(denom) > 1e-12
    denom = np.where(valid, denom, 1.0)
    w0 = ((bv_ - cv) * (qu - cu) + (cu - bu) * (qv - cv)) / denom
    w1 = ((cv - av) * (qu - cu) + (au - cu) * (qv - cv)) / denom
    w2 = 1.0 - w0 - w1
    inside = valid & (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
    z_interp = w0 * az + w1 * bz + w2 * cz
    hit = inside & (z_interp < z[bi, vi] * (1.0 - _DEPTH_REL_EPS))
    np.logical_or.at(blocked, (bi[hit], vi[hit]), True)
    return blocked


def _assemble_map(mesh, u, v, z, row, col, visible, h, w):
    """Resolve pixel ownership for one pose and build the RasterMap."""
    nv = mesh.n_vertices
    vis_idx = np.flatnonzero(visible)

    # Two visible vertices rounding to one pixel: nearer depth wins, ties by
    # index; the loser is dropped from the visible set so that the
    # vertex -> pixel map stays injective.
    if vis_idx.size:
        flat = row[vis_idx] * w + col[vis_idx]
        order = np.lexsort((vis_idx, z[vis_idx], flat))
        flat_sorted = flat[order]
        keep_first = np.ones(order.size, dtype=bool)
        keep_first[1:] = flat_sorted[1:] != flat_sorted[:-1]
        vis_idx = np.sort(vis_idx[order[keep_first]])

    vertex_visible = np.zeros(nv, dtype=bool)
    vertex_visible[vis_idx] = True
    vertex_pixel = np.full((nv, 2), -1, dtype=np.int64)
    vertex_pixel[vis_idx, 0] = row[vis_idx]
    vertex_pixel[vis_idx, 1] = col[vis_idx]

    radius = _splat_radius(mesh, u, v, vertex_visible)

    pixel_vertex = np.full(h * w, -1, dtype=np.int64)
    if vis_idx.size:
        owners_pix, owners_vert = _splat_owners(
            u, v, row, col, vis_idx, radius, h, w
        )
        pixel_vertex[owners_pix] = owners_vert
        # The rounded projection of each visible vertex always belongs to it.
        pixel_vertex[row[vis_idx] * w + col[vis_idx]] = vis_idx

    pixel_vertex = pixel_vertex.reshape(h, w)
    return RasterMap(
        fg_mask=pixel_vertex >= 0,
        pixel_vertex=pixel_vertex,
        vertex_visible=vertex_visible,
        vertex_pixel=vertex_pixel,
        vertex_depth=z.copy(),
        splat_radius=float(radius),
    )


def _splat_radius(mesh, u, v, vertex_visible):
    """Half the median projected spacing between adjacent visible vertices."""
    e = mesh.edges
    both = vertex_visible[e[:, 0]] & vertex_visible[e[:, 1]]
    sel = e[both] if np.any(both) else e
    du = u[sel[:, 0]] - u[sel[:, 1]]
    dv = v[sel[:, 0]] - v[sel[:, 1]]
    lengths = np.sort(np.hypot(du, dv))
    n = lengths.size
    spacing = float(
        lengths[n // 2] if n % 2 else 0.5 * (lengths[n // 2 - 1] + lengths[n // 2])
    )
    if not math.isfinite(spacing) or spacing <= 0:
        return 1.0
    return float(min(max(spacing / 2.0, 0.75), 16.0))


_STENCILS: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _stencil(k: int):
    if k not in _STENCILS:
        offs = np.arange(-k, k + 1)
        drow, dcol = np.meshgrid(offs, offs, indexing="ij")
        _STENCILS[k] = (drow.ravel().copy(), dcol.ravel().copy())
    return _STENCILS[k]


def _splat_owners(u, v, row, col, vis_idx, radius, h, w):
    """Nearest-visible-vertex-within-radius assignment, vertex-centric.

    Candidate pixels are stamped around each visible vertex; per pixel the
    smallest (distance, vertex index) pair wins, which matches a pixel-centric
    nearest-vertex scan exactly.
    """
    k = int(math.floor(radius + 0.5))
    drow, dcol = _stencil(k)

    prow = row[vis_idx][:, None] + drow[None, :]
    pcol = col[vis_idx][:, None] + dcol[None, :]
    dist = np.hypot(
        prow - v[vis_idx][:, None], pcol - u[vis_idx][:, None]
    )
    good = (
        (dist <= radius) & (prow >= 0) & (prow < h) & (pcol >= 0) & (pcol < w)
    )
    vg, pg = np.nonzero(good)
    if vg.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    flat = prow[vg, pg] * w + pcol[vg, pg]
    verts = vis_idx[vg]
    order = np.lexsort((verts, dist[vg, pg], flat))
    flat_sorted = flat[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    return flat_sorted[first], verts[order[first]]
