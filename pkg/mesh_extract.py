# mesh_extract.py
"""
Second stage: cloud -> occupancy -> signed distance -> deformable tet grid
-> marching tetrahedra -> coloured mesh file.

SDF sign convention: negative inside, positive outside; triangle normals
point toward the positive side.
"""
import itertools
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.ndimage import distance_transform_edt, map_coordinates
from tqdm import tqdm

from errors import (
    DegenerateField,
    DivergedFit,
    EmptyCloud,
    FormatError,
    InvalidField,
    InvalidParameter,
    IoError,
)
from gauss_core import MAX_CONDITION_NUMBER, GaussianCloud, covariances
from optim import AdamState, adam_update

Bounds = Tuple[np.ndarray, np.ndarray]

GREY = np.array([0.5, 0.5, 0.5])

# Edges of a tet as vertex pairs, in the order the case table refers to
TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])

# Case index = sum of 2^k over tet corners k with positive SDF
TRIANGLE_TABLE = np.array([
    [-1, -1, -1, -1, -1, -1],
    [1, 0, 2, -1, -1, -1],
    [4, 0, 3, -1, -1, -1],
    [1, 4, 2, 1, 3, 4],
    [3, 1, 5, -1, -1, -1],
    [2, 3, 0, 2, 5, 3],
    [1, 4, 0, 1, 5, 4],
    [4, 2, 5, -1, -1, -1],
    [4, 5, 2, -1, -1, -1],
    [4, 1, 0, 4, 5, 1],
    [3, 2, 0, 3, 5, 2],
    [1, 3, 5, -1, -1, -1],
    [4, 1, 2, 4, 3, 1],
    [3, 0, 4, -1, -1, -1],
    [2, 0, 1, -1, -1, -1],
    [-1, -1, -1, -1, -1, -1],
])
NUM_TRIANGLES = np.array([0, 1, 1, 2, 1, 2, 2, 1, 1, 2, 2, 1, 2, 1, 1, 0])


# ============================================================
# Types
# ============================================================
@dataclass(frozen=True)
class GridSpec:
    resolution: int = 64
    bounds: Optional[Tuple[Sequence[float], Sequence[float]]] = None
    padding: float = 0.05
    threshold: float = 0.2


@dataclass
class OccupancyGrid:
    occupied: np.ndarray       # (R, R, R) bool, indexed [x, y, z]
    density: np.ndarray        # (R, R, R)
    lo: np.ndarray
    hi: np.ndarray
    threshold: float

    @property
    def resolution(self) -> int:
        return self.occupied.shape[0]

    @property
    def cell_size(self) -> np.ndarray:
        return (self.hi - self.lo) / np.array(self.occupied.shape)

    def cell_centers(self) -> np.ndarray:
        axes = [self.lo[a] + (np.arange(self.occupied.shape[a]) + 0.5) * self.cell_size[a] for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def occupied_count(self) -> int:
        return int(self.occupied.sum())


@dataclass
class TetGrid:
    vertices: np.ndarray        # (V, 3) undeformed lattice positions
    sdf: np.ndarray             # (V,)
    deform: np.ndarray          # (V, 3)
    tets: np.ndarray            # (T, 4)
    lo: np.ndarray
    spacing: float
    shape: Tuple[int, int, int]  # vertices per axis

    @property
    def positions(self) -> np.ndarray:
        return self.vertices + self.deform

    @property
    def max_deform(self) -> float:
        return 0.5 * self.spacing

    def copy(self) -> "TetGrid":
        return TetGrid(
            self.vertices, self.sdf.copy(), self.deform.copy(), self.tets,
            self.lo, self.spacing, self.shape,
        )

    def field(self) -> Callable[[np.ndarray], np.ndarray]:
        """Piecewise-linear interpolant of the vertex SDF over the undeformed lattice."""
        nx, ny, nz = self.shape
        values = self.sdf.reshape(self.shape)

        def evaluate(points: np.ndarray) -> np.ndarray:
            p = (np.asarray(points, dtype=np.float64) - self.lo) / self.spacing
            upper = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64)
            p = np.clip(p, 0.0, upper)
            base = np.minimum(np.floor(p).astype(np.int64), (upper - 1).astype(np.int64))
            frac = p - base
            # Kuhn simplex: walk the cube corners in order of decreasing local coordinate
            order = np.argsort(-frac, axis=1, kind="stable")
            sorted_frac = np.take_along_axis(frac, order, axis=1)
            corner = base.copy()
            out = values[corner[:, 0], corner[:, 1], corner[:, 2]] * (1.0 - sorted_frac[:, 0])
            weights = np.concatenate([
                sorted_frac[:, :2] - sorted_frac[:, 1:],
                sorted_frac[:, 2:],
            ], axis=1)
            rows = np.arange(len(p))
            for step in range(3):
                corner[rows, order[:, step]] += 1
                out = out + values[corner[:, 0], corner[:, 1], corner[:, 2]] * weights[:, step]
            return out

        return evaluate


@dataclass
class Mesh:
    vertices: np.ndarray                  # (V, 3)
    faces: np.ndarray                     # (F, 3)
    colors: Optional[np.ndarray] = None   # (V, 3) in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidParameter("face index out of range")

    @staticmethod
    def empty() -> "Mesh":
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.sort(e, axis=1)

    def is_watertight(self) -> bool:
        if len(self.faces) == 0:
            return False
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        unique_edges = np.unique(self.edges(), axis=0)
        return int(len(used) - len(unique_edges) + len(self.faces))

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


# ============================================================
# Density query
# ============================================================
def _cloud_bounds(cloud: GaussianCloud, padding: float) -> Bounds:
    sigma = covariances(cloud.log_scales, cloud.rotations)
    extent = 3.0 * np.sqrt(np.einsum("nii->ni", sigma))
    lo = (cloud.positions - extent).min(axis=0)
    hi = (cloud.positions + extent).max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * float(np.max(hi - lo)) + padding
    return center - half, center + half


def density_query(cloud: GaussianCloud, grid: GridSpec = GridSpec()) -> OccupancyGrid:
    """
    Occupancy where sum_i alpha_i exp(-0.5 d^T Sigma_i^-1 d) exceeds the
    threshold at a cell centre. Each Gaussian only visits the cells within its
    3-sigma box plus one cell.
    """
    if len(cloud) == 0:
        raise EmptyCloud("density query needs a non-empty cloud")
    if grid.resolution < 8:
        raise InvalidParameter("occupancy resolution must be >= 8 per axis")

    if grid.bounds is None:
        lo, hi = _cloud_bounds(cloud, grid.padding)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in grid.bounds)
        if np.any(hi <= lo):
            raise InvalidParameter("grid bounds must have hi > lo")

    r = grid.resolution
    cell = (hi - lo) / r
    density = np.zeros((r, r, r))
    sigma = covariances(cloud.log_scales, cloud.rotations)
    alphas = cloud.opacities

    for i in range(len(cloud)):
        if np.linalg.cond(sigma[i]) >= MAX_CONDITION_NUMBER:
            continue
        extent = 3.0 * np.sqrt(np.diag(sigma[i]))
        first = np.maximum(np.floor((cloud.positions[i] - extent - lo) / cell).astype(int) - 1, 0)
        last = np.minimum(np.floor((cloud.positions[i] + extent - lo) / cell).astype(int) + 1, r - 1)
        if np.any(last < first):
            continue
        axes = [lo[a] + (np.arange(first[a], last[a] + 1) + 0.5) * cell[a] for a in range(3)]
        centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        d = centers - cloud.positions[i]
        m2 = np.einsum("...i,ij,...j->...", d, np.linalg.inv(sigma[i]), d)
        density[first[0]:last[0] + 1, first[1]:last[1] + 1, first[2]:last[2] + 1] += alphas[i] * np.exp(-0.5 * m2)

    return OccupancyGrid(density > grid.threshold, density, lo, hi, grid.threshold)


def sdf_from_occupancy(grid: OccupancyGrid) -> np.ndarray:
    """Signed distance in cell units: EDT of the free cells minus EDT of the occupied cells."""
    occ = grid.occupied
    if occ.all() or not occ.any():
        raise DegenerateField("occupancy is uniform; no surface to extract")
    return distance_transform_edt(~occ) - distance_transform_edt(occ)


# ============================================================
# Tet grid
# ============================================================
def _kuhn_template() -> np.ndarray:
    """Six positively oriented tets of the unit cube, as corner offsets."""
    tets = []
    for perm in itertools.permutations(range(3)):
        corner = np.zeros(3, dtype=np.int64)
        path = [corner.copy()]
        for axis in perm:
            corner[axis] += 1
            path.append(corner.copy())
        p = np.array(path, dtype=np.float64)
        if np.linalg.det(p[1:] - p[0]) < 0:
            path[1], path[2] = path[2], path[1]
        tets.append(path)
    return np.array(tets)


def build_tetgrid(lo: Sequence[float], hi: Sequence[float], resolution: int) -> TetGrid:
    """Regular lattice of resolution^3 vertices over a cube, six tets per cell."""
    if resolution < 2:
        raise InvalidParameter("tet grid needs at least 2 vertices per axis")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    spacing = float(np.max(hi - lo)) / (resolution - 1)
    n = resolution

    axes = [lo[a] + np.arange(n) * spacing for a in range(3)]
    vertices = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    cells = np.stack(np.meshgrid(*[np.arange(n - 1)] * 3, indexing="ij"), axis=-1).reshape(-1, 1, 1, 3)
    corners = cells + _kuhn_template()[None]
    index = (corners[..., 0] * n + corners[..., 1]) * n + corners[..., 2]
    tets = index.reshape(-1, 4).astype(np.int64)

    return TetGrid(
        vertices=vertices,
        sdf=np.zeros(len(vertices)),
        deform=np.zeros_like(vertices),
        tets=tets,
        lo=lo,
        spacing=spacing,
        shape=(n, n, n),
    )


def sample_cell_sdf(grid: OccupancyGrid, sdf_cells: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinear lookup of a cell-unit SDF at world points, returned in world units."""
    coords = (np.asarray(points, dtype=np.float64) - grid.lo) / grid.cell_size - 0.5
    values = map_coordinates(sdf_cells, coords.T, order=1, mode="nearest")
    return values * float(np.mean(grid.cell_size))


def init_tetgrid_from_occupancy(grid: OccupancyGrid, sdf_cells: np.ndarray, resolution: int = 128) -> TetGrid:
    tet = build_tetgrid(grid.lo, grid.hi, resolution)
    tet.sdf = sample_cell_sdf(grid, sdf_cells, tet.vertices)
    return tet


# ============================================================
# Marching tetrahedra
# ============================================================
def marching_tetrahedra(tet: TetGrid) -> Mesh:
    sdf = tet.sdf
    if not np.all(np.isfinite(sdf)):
        raise InvalidField("tet grid SDF contains NaN or inf")

    positive = sdf >= 0
    occ = positive[tet.tets]
    count = occ.sum(axis=1)
    active = (count > 0) & (count < 4)
    if not active.any():
        return Mesh.empty()

    tets = tet.tets[active]
    occ = occ[active]
    edges = np.sort(tets[:, TET_EDGES].reshape(-1, 2), axis=1)
    unique_edges, edge_map = np.unique(edges, axis=0, return_inverse=True)
    crossing = positive[unique_edges[:, 0]] != positive[unique_edges[:, 1]]
    remap = np.full(len(unique_edges), -1, dtype=np.int64)
    remap[crossing] = np.arange(crossing.sum())
    edge_map = remap[edge_map.reshape(-1)].reshape(-1, 6)

    a, b = unique_edges[crossing, 0], unique_edges[crossing, 1]
    pos = tet.positions
    w = (sdf[a] / (sdf[a] - sdf[b]))[:, None]
    verts = pos[a] + w * (pos[b] - pos[a])

    case = (occ * (1 << np.arange(4))).sum(axis=1)
    n_tri = NUM_TRIANGLES[case]
    table = TRIANGLE_TABLE[case]

    faces, owner = [], []
    for k in (0, 1):
        rows = np.flatnonzero(n_tri > k)
        local = table[rows, 3 * k:3 * k + 3]
        faces.append(np.take_along_axis(edge_map[rows], local, axis=1))
        owner.append(rows)
    faces = np.concatenate(faces)
    owner = np.concatenate(owner)

    # Orient each triangle toward the positive corners of its tet
    corner_pos = pos[tets[owner]]
    sign = np.where(occ[owner], 1.0, -1.0)
    n_pos = occ[owner].sum(axis=1, keepdims=True)
    direction = (
        (corner_pos * (sign > 0)[..., None]).sum(axis=1) / n_pos
        - (corner_pos * (sign < 0)[..., None]).sum(axis=1) / (4 - n_pos)
    )
    v = verts[faces]
    normal = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    flip = np.einsum("ij,ij->i", normal, direction) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    return _cleanup(Mesh(verts, faces))


def _cleanup(mesh: Mesh) -> Mesh:
    """Weld coincident vertices, drop degenerate faces and unused vertices."""
    if len(mesh.faces) == 0:
        return Mesh.empty()
    welded, inverse = np.unique(mesh.vertices, axis=0, return_inverse=True)
    faces = inverse.reshape(-1)[mesh.faces]
    distinct = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[distinct]
    candidate = Mesh(welded, faces)
    faces = faces[candidate.face_areas() >= 1e-12]
    used, compact = np.unique(faces, return_inverse=True)
    return Mesh(welded[used], compact.reshape(-1, 3))


# ============================================================
# Fitting the tet grid to a target field
# ============================================================
SAMPLE_BARYCENTRICS = np.array([
    [0.25, 0.25, 0.25, 0.25],
    [0.55, 0.15, 0.15, 0.15],
    [0.15, 0.55, 0.15, 0.15],
    [0.15, 0.15, 0.55, 0.15],
    [0.15, 0.15, 0.15, 0.55],
])


def _target_gradient(target: Callable[[np.ndarray], np.ndarray], points: np.ndarray, h: float) -> np.ndarray:
    grad = np.empty_like(points)
    for axis in range(3):
        offset = np.zeros(3)
        offset[axis] = h
        grad[:, axis] = (target(points + offset) - target(points - offset)) / (2.0 * h)
    return grad


def fit_tetgrid(
    tet: TetGrid,
    target: Callable[[np.ndarray], np.ndarray],
    iterations: int = 300,
    lr: float = 1e-3,
    band: float = 2.0,
    history: Optional[List[float]] = None,
    progress: bool = False,
) -> TetGrid:
    """
    Adam on per-vertex SDF and deformation so the grid's interpolated SDF
    matches `target` at fixed barycentric samples of tets near the surface.
    Deformations are clamped to half a lattice cell after every step.
    """
    if iterations < 0 or lr < 0:
        raise InvalidParameter("iterations and learning rate must be >= 0")
    out = tet.copy()
    if not np.all(np.isfinite(out.sdf)):
        raise InvalidField("tet grid SDF contains NaN or inf")

    near = np.abs(out.sdf[out.tets]).min(axis=1) < band * out.spacing
    tets = out.tets[near]
    if len(tets) == 0:
        return out

    state = AdamState(betas=(0.9, 0.999), eps=1e-8)
    fd_step = 1e-3 * out.spacing
    losses: List[float] = []
    num_samples = len(tets) * len(SAMPLE_BARYCENTRICS)

    for step in tqdm(range(iterations), desc="[MESH] fit", disable=not progress):
        corners = out.positions[tets]                                  # (T, 4, 3)
        points = np.einsum("sk,tkd->tsd", SAMPLE_BARYCENTRICS, corners).reshape(-1, 3)
        predicted = np.einsum("sk,tk->ts", SAMPLE_BARYCENTRICS, out.sdf[tets]).reshape(-1)
        residual = predicted - target(points)
        loss = float(np.mean(residual ** 2))
        losses.append(loss)

        if step >= 100 and loss > 5.0 * losses[step - 100]:
            raise DivergedFit(f"fit loss grew from {losses[step - 100]:.3e} to {loss:.3e} over 100 steps")

        g = (2.0 / num_samples) * residual.reshape(len(tets), -1)      # (T, S)
        g_sdf = np.zeros_like(out.sdf)
        np.add.at(g_sdf, tets, np.einsum("ts,sk->tk", g, SAMPLE_BARYCENTRICS))

        pull = -_target_gradient(target, points, fd_step).reshape(len(tets), -1, 3)
        g_deform = np.zeros_like(out.deform)
        np.add.at(g_deform, tets, np.einsum("ts,tsd,sk->tkd", g, pull, SAMPLE_BARYCENTRICS))

        updated = adam_update(state, {"sdf": out.sdf, "deform": out.deform}, {"sdf": g_sdf, "deform": g_deform}, lr)
        out.sdf = updated["sdf"]
        out.deform = np.clip(updated["deform"], -out.max_deform, out.max_deform)

    if history is not None:
        history.extend(losses)
    return out


# ============================================================
# Colour baking
# ============================================================
def bake_vertex_colors(mesh: Mesh, cloud: GaussianCloud) -> Mesh:
    """Vertex colour = sum alpha_i G_i c_i / sum alpha_i G_i over Gaussians within 3 sigma."""
    if len(cloud) == 0:
        raise EmptyCloud("colour baking needs a non-empty cloud")
    sigma = covariances(cloud.log_scales, cloud.rotations)
    alphas = cloud.opacities
    colors = cloud.colors
    weight = np.zeros(len(mesh.vertices))
    accum = np.zeros((len(mesh.vertices), 3))

    for i in range(len(cloud)):
        if np.linalg.cond(sigma[i]) >= MAX_CONDITION_NUMBER:
            continue
        d = mesh.vertices - cloud.positions[i]
        m2 = np.einsum("ni,ij,nj->n", d, np.linalg.inv(sigma[i]), d)
        inside = m2 <= 9.0
        w = np.where(inside, alphas[i] * np.exp(-0.5 * m2), 0.0)
        weight += w
        accum += w[:, None] * colors[i]

    baked = np.tile(GREY, (len(mesh.vertices), 1))
    ok = weight >= 1e-6
    baked[ok] = accum[ok] / weight[ok, None]
    return Mesh(mesh.vertices, mesh.faces, baked)


# ============================================================
# Mesh files
# ============================================================
def export_mesh(mesh: Mesh, path: str, fmt: str = "obj") -> None:
    if fmt not in ("obj", "ply"):
        raise InvalidParameter("mesh format must be 'obj' or 'ply'")
    try:
        if fmt == "obj":
            _write_obj(mesh, path)
        else:
            _write_ply(mesh, path)
    except OSError as ex:
        raise IoError(f"cannot write mesh to {path}: {ex}") from ex


def _write_obj(mesh: Mesh, path: str) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(f"# vertices {len(mesh.vertices)} faces {len(mesh.faces)}\n")
        for k, v in enumerate(mesh.vertices):
            if mesh.colors is None:
                f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            else:
                c = mesh.colors[k]
                f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
        for a, b, c in mesh.faces + 1:
            f.write(f"f {a} {b} {c}\n")


def _write_ply(mesh: Mesh, path: str) -> None:
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if mesh.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vertex = np.empty(len(mesh.vertices), dtype=fields)
    vertex["x"], vertex["y"], vertex["z"] = mesh.vertices.T
    if mesh.colors is not None:
        rgb = np.round(np.clip(mesh.colors, 0.0, 1.0) * 255.0).astype(np.uint8)
        vertex["red"], vertex["green"], vertex["blue"] = rgb.T

    face = np.empty(len(mesh.faces), dtype=[("vertex_indices", "i4", (3,))])
    face["vertex_indices"] = mesh.faces
    PlyData(
        [PlyElement.describe(vertex, "vertex"), PlyElement.describe(face, "face")],
        byte_order="<",
    ).write(path)


def load_mesh(path: str) -> Mesh:
    if path.lower().endswith(".ply"):
        return _read_ply(path)
    return _read_obj(path)


def _read_obj(path: str) -> Mesh:
    vertices, colors, faces = [], [], []
    try:
        with open(path, "rb") as f:
            lines = f.readlines()
    except OSError as ex:
        raise IoError(f"cannot read mesh from {path}: {ex}") from ex

    offset = 0
    for raw in lines:
        try:
            line = raw.decode("ascii")
        except UnicodeDecodeError as ex:
            raise FormatError("non-ASCII byte in OBJ file", offset=offset + ex.start) from ex
        parts = line.split()
        try:
            if parts and parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError("vertex needs 3 coordinates")
                vertices.append([float(x) for x in parts[1:4]])
                if len(parts) >= 7:
                    colors.append([float(x) for x in parts[4:7]])
            elif parts and parts[0] == "f":
                if len(parts) < 4:
                    raise ValueError("face needs 3 vertex indices")
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        except ValueError as ex:
            raise FormatError(f"malformed OBJ line {line.strip()!r}", offset=offset) from ex
        offset += len(raw)

    return Mesh(
        np.array(vertices, dtype=np.float64).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        np.array(colors) if colors and len(colors) == len(vertices) else None,
    )


def _read_ply(path: str) -> Mesh:
    try:
        with open(path, "rb") as f:
            ply = PlyData.read(f)
    except OSError as ex:
        raise IoError(f"cannot read mesh from {path}: {ex}") from ex
    except Exception as ex:
        raise FormatError(f"malformed PLY mesh: {ex}", offset=0) from ex

    v = ply["vertex"].data
    vertices = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64) if len(v) else np.zeros((0, 3))
    names = v.dtype.names or ()
    colors = None
    if "red" in names and len(v):
        colors = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64) / 255.0
    f = ply["face"].data
    faces = np.stack([np.asarray(row, dtype=np.int64) for row in f["vertex_indices"]]) if len(f) else np.zeros((0, 3), dtype=np.int64)
    return Mesh(vertices, faces, colors)
