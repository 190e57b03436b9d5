"""Tetrahedral and triangle mesh structures with FEM utilities.

Provides the rest-state tet mesh with cached shape matrices, deformation
gradients, the linear FEM Laplacian used for volumetric morphs and skin
weight diffusion, barycentric embeddings, and analytic collision proxies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class MeshError(ValueError):
    """Raised for malformed or degenerate mesh input."""


class PoissonSolveError(RuntimeError):
    """Raised when a Poisson solve fails to reach the required residual."""


# Rest volumes this far below the mesh mean are treated as degenerate.
DEGENERATE_VOLUME_RATIO = 1e-12
# A query point may sit at most this far outside the best containing tet.
EMBED_DISTANCE_TOL = 1e-6
# Relative residual required of every Poisson solve.
POISSON_RESIDUAL_TOL = 1e-10


@dataclass
class TetMesh:
    """Rest-state tetrahedral flesh mesh.

    Parameters
    ----------
    vertices : (V, 3) float array
        Rest positions.
    tets : (T, 4) int array
        Vertex indices, positively oriented.
    boundary_vertices : (B,) int array
        Outer-boundary vertices, ordered to match the bound surface mesh.
    boundary_triangles : (Bt, 3) int array
        Triangles of the outer boundary.
    inner_boundary : (C,) int array
        Vertices on the attachment side (cranium and jaw interface).
    """

    vertices: np.ndarray
    tets: np.ndarray
    boundary_vertices: np.ndarray
    boundary_triangles: np.ndarray
    inner_boundary: np.ndarray
    rest_volumes: np.ndarray = field(init=False, repr=False)
    rest_shape_inverse: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64)
        self.boundary_vertices = np.asarray(self.boundary_vertices, dtype=np.int64)
        self.boundary_triangles = np.asarray(self.boundary_triangles, dtype=np.int64).reshape(-1, 3)
        self.inner_boundary = np.asarray(self.inner_boundary, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be (V, 3)")
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise MeshError("tets must be (T, 4)")
        nv = len(self.vertices)
        for name, idx in (("tets", self.tets), ("boundary_vertices", self.boundary_vertices),
                          ("boundary_triangles", self.boundary_triangles),
                          ("inner_boundary", self.inner_boundary)):
            if idx.size and (idx.min() < 0 or idx.max() >= nv):
                raise MeshError(f"{name} reference vertices outside [0, {nv})")
        if np.intersect1d(self.boundary_vertices, self.inner_boundary).size:
            raise MeshError("outer and inner boundary vertex sets must be disjoint")
        dm = _edge_matrices(self.vertices, self.tets)
        vol = np.linalg.det(dm) / 6.0
        if np.any(vol <= 0):
            bad = int(np.argmin(vol))
            raise MeshError(f"tet {bad} has non-positive volume {vol[bad]:.3e}")
        self.rest_volumes = vol
        self.rest_shape_inverse = np.linalg.inv(dm)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_tets(self) -> int:
        return len(self.tets)

    def total_volume(self, positions: np.ndarray | None = None) -> float:
        """Sum of signed tet volumes at `positions` (rest positions if None)."""
        if positions is None:
            return float(self.rest_volumes.sum())
        dm = _edge_matrices(np.asarray(positions, dtype=np.float64), self.tets)
        return float((np.linalg.det(dm) / 6.0).sum())


@dataclass
class SurfaceMesh:
    """Triangle surface mesh bound one-to-one to the flesh outer boundary."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise MeshError("triangle indices exceed vertex count")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)


def _edge_matrices(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Per-tet edge matrix with columns x1-x0, x2-x0, x3-x0, shape (T, 3, 3)."""
    p = positions[tets]
    return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)


def deformation_gradients(mesh: TetMesh, positions: np.ndarray) -> np.ndarray:
    """Deformation gradients F = Ds * inverse(Dm) for every tet, shape (T, 3, 3)."""
    ds = _edge_matrices(np.asarray(positions, dtype=np.float64), mesh.tets)
    return ds @ mesh.rest_shape_inverse


def deformation_gradient(mesh: TetMesh, positions: np.ndarray, tet: int) -> np.ndarray:
    """Deformation gradient of a single tet at the given vertex positions."""
    idx = mesh.tets[tet]
    p = np.asarray(positions, dtype=np.float64)[idx]
    ds = np.stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]], axis=1)
    return ds @ mesh.rest_shape_inverse[tet]


def shape_gradients(mesh: TetMesh) -> np.ndarray:
    """Gradients of the four linear hat functions per tet, shape (T, 4, 3).

    Row a holds the constant gradient of the barycentric basis function of
    node a; rows sum to zero exactly by construction.
    """
    g = np.empty((mesh.num_tets, 4, 3))
    g[:, 1:, :] = mesh.rest_shape_inverse  # rows of Dm^-1 are grad(lambda_1..3)
    g[:, 0, :] = -(g[:, 1, :] + g[:, 2, :] + g[:, 3, :])
    return g


@dataclass
class VolumetricLaplacian:
    """Linear FEM Laplacian of a tet mesh, partitioned for Dirichlet solves.

    The full stiffness matrix has zero row sums. Dirichlet values are imposed
    on `constrained` (a subset of the outer boundary); every other vertex gets
    the natural zero-flux condition. The unconstrained block is factorized
    once and shared read-only across solves.
    """

    matrix: sp.csr_matrix
    constrained: np.ndarray
    unconstrained: np.ndarray
    a_uu: sp.csc_matrix
    a_uc: sp.csr_matrix
    _lu: spla.SuperLU = field(repr=False)

    def position_of(self, vertex_ids: np.ndarray) -> np.ndarray:
        """Positions of the given constrained vertex ids within the Dirichlet ordering."""
        lookup = {int(v): i for i, v in enumerate(self.constrained)}
        try:
            return np.array([lookup[int(v)] for v in np.atleast_1d(vertex_ids)], dtype=np.int64)
        except KeyError as exc:
            raise MeshError(f"vertex {exc.args[0]} is not in the constrained set") from exc


def assemble_laplacian(mesh: TetMesh, constrained: np.ndarray) -> VolumetricLaplacian:
    """Assemble the FEM tet Laplacian and factorize its unconstrained block.

    Parameters
    ----------
    mesh : TetMesh
    constrained : int array
        Dirichlet vertex ids; must be a non-empty subset of the mesh boundary
        (outer surface or attachment side) and keeps its given order for
        Dirichlet data layout.
    """
    constrained = np.asarray(constrained, dtype=np.int64)
    if constrained.size == 0:
        raise MeshError("constrained set must be non-empty")
    if len(np.unique(constrained)) != len(constrained):
        raise MeshError("constrained set contains duplicates")
    boundary = np.union1d(mesh.boundary_vertices, mesh.inner_boundary)
    if not np.isin(constrained, boundary).all():
        raise MeshError("constrained vertices must lie on the mesh boundary")
    mean_vol = mesh.rest_volumes.mean()
    bad = np.nonzero(mesh.rest_volumes < DEGENERATE_VOLUME_RATIO * mean_vol)[0]
    if bad.size:
        raise MeshError(f"degenerate tet {int(bad[0])}: volume "
                        f"{mesh.rest_volumes[bad[0]]:.3e} vs mean {mean_vol:.3e}")

    g = shape_gradients(mesh)
    # K_e[a,b] = V0 * grad_a . grad_b gives an SPSD element matrix with zero row sums.
    ke = np.einsum("t,taj,tbj->tab", mesh.rest_volumes, g, g)
    rows = np.repeat(mesh.tets, 4, axis=1).reshape(-1)
    cols = np.tile(mesh.tets, (1, 4)).reshape(-1)
    nv = mesh.num_vertices
    matrix = sp.coo_matrix((ke.reshape(-1), (rows, cols)), shape=(nv, nv)).tocsr()

    mask = np.zeros(nv, dtype=bool)
    mask[constrained] = True
    unconstrained = np.nonzero(~mask)[0]
    a_uu = matrix[unconstrained][:, unconstrained].tocsc()
    a_uc = matrix[unconstrained][:, constrained].tocsr()
    lu = spla.splu(a_uu)
    return VolumetricLaplacian(matrix=matrix, constrained=constrained,
                               unconstrained=unconstrained, a_uu=a_uu, a_uc=a_uc, _lu=lu)


def solve_poisson(laplacian: VolumetricLaplacian, dirichlet: np.ndarray) -> np.ndarray:
    """Harmonic extension of Dirichlet data into the unconstrained interior.

    Parameters
    ----------
    laplacian : VolumetricLaplacian
    dirichlet : (C,) or (C, d) array
        One value (or d stacked fields) per constrained vertex, in the
        constrained ordering.

    Returns
    -------
    (U,) or (U, d) array of interior values. Columns are independent, so a
    stacked call equals per-column calls exactly.
    """
    d = np.asarray(dirichlet, dtype=np.float64)
    single = d.ndim == 1
    d2 = d[:, None] if single else d
    if d2.shape[0] != len(laplacian.constrained):
        raise MeshError(f"dirichlet rows {d2.shape[0]} != constrained count "
                        f"{len(laplacian.constrained)}")
    rhs = -(laplacian.a_uc @ d2)
    x = laplacian._lu.solve(np.ascontiguousarray(rhs))
    if x.ndim == 1:
        x = x[:, None]
    resid = np.linalg.norm(laplacian.a_uu @ x - rhs)
    scale = max(np.linalg.norm(rhs), np.linalg.norm(laplacian.a_uu @ x), 1e-300)
    rel = resid / scale if scale > 0 else 0.0
    if rel > POISSON_RESIDUAL_TOL and resid > 1e-14:
        raise PoissonSolveError(f"Poisson solve residual {rel:.3e} exceeds "
                                f"{POISSON_RESIDUAL_TOL:.1e}")
    return x[:, 0] if single else x


@dataclass
class Embedding:
    """Barycentric embedding of query points inside a tet mesh.

    Weights are exact barycentric coordinates of the embedded points; they sum
    to one per point and may dip below zero only by roundoff for on-face
    points.
    """

    tet_indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.tet_indices = np.asarray(self.tet_indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)


def embed(points: np.ndarray, mesh: TetMesh) -> Embedding:
    """Embed points into the mesh by locating a containing (or nearest) tet.

    Each point must lie inside some tet or within 1e-6 of one; candidates are
    ranked by their most negative barycentric weight scaled to a physical
    distance via tet altitudes.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x0 = mesh.vertices[mesh.tets[:, 0]]
    # Barycentric coordinates of every point in every tet; desk-scale meshes
    # keep this dense product small.
    local = np.einsum("tij,ptj->pti", mesh.rest_shape_inverse, pts[:, None, :] - x0[None, :, :])
    bary = np.concatenate([1.0 - local.sum(axis=2, keepdims=True), local], axis=2)
    min_w = bary.min(axis=2)

    altitudes = _tet_altitudes(mesh)
    # Distance outside a face is (-weight) times the opposite vertex altitude.
    deficit = np.where(bary < 0.0, -bary * altitudes[None, :, :], 0.0)
    dist = deficit.max(axis=2)
    best = np.argmin(dist, axis=1)
    pick = np.arange(len(pts))
    best_dist = dist[pick, best]
    if np.any(best_dist > EMBED_DISTANCE_TOL):
        worst = int(np.argmax(best_dist))
        raise MeshError(f"point {worst} lies {best_dist[worst]:.3e} outside every tet "
                        f"(tolerance {EMBED_DISTANCE_TOL:.1e})")
    # Prefer a strictly containing tet when the distance ranking ties at zero.
    inside = min_w >= -1e-13
    has_inside = inside.any(axis=1)
    inside_pick = np.argmax(inside, axis=1)
    best = np.where(has_inside, inside_pick, best)
    return Embedding(tet_indices=best, weights=bary[pick, best])


def _tet_altitudes(mesh: TetMesh) -> np.ndarray:
    """Altitude from each tet vertex to its opposite face, shape (T, 4)."""
    p = mesh.vertices[mesh.tets]
    alts = np.empty((mesh.num_tets, 4))
    for a in range(4):
        f = [i for i in range(4) if i != a]
        e1 = p[:, f[1]] - p[:, f[0]]
        e2 = p[:, f[2]] - p[:, f[0]]
        area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
        alts[:, a] = 3.0 * mesh.rest_volumes / np.maximum(area, 1e-300)
    return alts


def interpolate(embedding: Embedding, mesh: TetMesh, positions: np.ndarray) -> np.ndarray:
    """Evaluate embedded points at the given flesh vertex positions."""
    positions = np.asarray(positions, dtype=np.float64)
    corners = positions[mesh.tets[embedding.tet_indices]]
    return np.einsum("pi,pij->pj", embedding.weights, corners)


def embedding_matrix(embedding: Embedding, mesh: TetMesh) -> sp.csr_matrix:
    """Sparse (P, V) interpolation operator of an embedding."""
    n = len(embedding.tet_indices)
    rows = np.repeat(np.arange(n), 4)
    cols = mesh.tets[embedding.tet_indices].reshape(-1)
    vals = embedding.weights.reshape(-1)
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, mesh.num_vertices)).tocsr()


@dataclass
class HalfSpaceProxy:
    """Analytic half space; phi < 0 on the penetrating side of the plane."""

    normal: np.ndarray
    offset: float
    stiffness: float = 1e5

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        n = np.linalg.norm(self.normal)
        if not np.isclose(n, 1.0, atol=1e-9):
            raise ValueError(f"half-space normal must be unit length, got |n|={n}")


@dataclass
class SphereProxy:
    """Analytic sphere obstacle; phi < 0 strictly inside."""

    center: np.ndarray
    radius: float
    stiffness: float = 1e5

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")


CollisionProxy = HalfSpaceProxy | SphereProxy

# Gradient reported at a sphere center, where the true gradient is undefined.
_SPHERE_CENTER_GRADIENT = np.array([1.0, 0.0, 0.0])


def signed_distance(proxy: CollisionProxy, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Signed distance and its unit gradient at query points.

    Returns
    -------
    phi : (N,) array, negative inside the proxy.
    grad : (N, 3) array of unit gradients; at a sphere center the documented
        fixed fallback direction is returned.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if isinstance(proxy, HalfSpaceProxy):
        phi = pts @ proxy.normal - proxy.offset
        grad = np.broadcast_to(proxy.normal, pts.shape).copy()
        return phi, grad
    delta = pts - proxy.center
    r = np.linalg.norm(delta, axis=1)
    phi = r - proxy.radius
    grad = np.where(r[:, None] > 1e-300, delta / np.maximum(r, 1e-300)[:, None],
                    _SPHERE_CENTER_GRADIENT)
    return phi, grad


def signed_distance_hessian(proxy: CollisionProxy, x: np.ndarray) -> np.ndarray:
    """Hessian of the signed distance at query points, shape (N, 3, 3)."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if isinstance(proxy, HalfSpaceProxy):
        return np.zeros((len(pts), 3, 3))
    delta = pts - proxy.center
    r = np.maximum(np.linalg.norm(delta, axis=1), 1e-300)
    n = delta / r[:, None]
    eye = np.eye(3)[None, :, :]
    return (eye - n[:, :, None] * n[:, None, :]) / r[:, None, None]


def vertex_normals(surface: SurfaceMesh, positions: np.ndarray | None = None) -> np.ndarray:
    """Area-weighted unit vertex normals of a triangle mesh."""
    pos = surface.vertices if positions is None else np.asarray(positions, dtype=np.float64)
    tri = surface.triangles
    cross = np.cross(pos[tri[:, 1]] - pos[tri[:, 0]], pos[tri[:, 2]] - pos[tri[:, 0]])
    acc = np.zeros_like(pos)
    for k in range(3):
        np.add.at(acc, tri[:, k], cross)
    norms = np.linalg.norm(acc, axis=1)
    if np.any(norms < 1e-300):
        raise MeshError("degenerate vertex normal (isolated vertex or zero-area star)")
    return acc / norms[:, None]


def vertex_normal_jacobian(surface: SurfaceMesh,
                           positions: np.ndarray | None = None) -> np.ndarray:
    """Dense Jacobian of unit vertex normals with respect to vertex positions.

    Returns an array of shape (V, 3, V, 3). Desk-scale surfaces keep this
    dense form affordable and simple to chain.
    """
    pos = surface.vertices if positions is None else np.asarray(positions, dtype=np.float64)
    tri = surface.triangles
    nv = len(pos)
    acc = np.zeros((nv, 3))
    dacc = np.zeros((nv, 3, nv, 3))
    cross = np.cross(pos[tri[:, 1]] - pos[tri[:, 0]], pos[tri[:, 2]] - pos[tri[:, 0]])
    for t, (i, j, k) in enumerate(tri):
        acc[i] += cross[t]
        acc[j] += cross[t]
        acc[k] += cross[t]
        # d(cross)/dp follows from d(a x b) with skew matrices of edge vectors.
        djk = _skew(pos[k] - pos[j])
        dki = _skew(pos[i] - pos[k])
        dij = _skew(pos[j] - pos[i])
        for v in (i, j, k):
            dacc[v, :, i, :] += djk
            dacc[v, :, j, :] += dki
            dacc[v, :, k, :] += dij
    norms = np.linalg.norm(acc, axis=1)
    n = acc / norms[:, None]
    # Unit-vector chain rule: dn = (I - n n^T)/|N| dN.
    proj = (np.eye(3)[None] - n[:, :, None] * n[:, None, :]) / norms[:, None, None]
    return np.einsum("vab,vbwc->vawc", proj, dacc)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def surface_edges(surface: SurfaceMesh) -> np.ndarray:
    """Unique undirected edges of a triangle mesh, shape (E, 2) with i < j."""
    tri = surface.triangles
    e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=0)
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def grid_slab(nx: int, ny: int, nz: int, extent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and tets of a regular slab grid.

    Vertices form an (nx, ny, nz) lattice over [0, Lx] x [0, Ly] x [0, Lz],
    flattened with z fastest. Each cell splits into six positively oriented
    tets sharing the cell's main diagonal, so faces match across cells.
    """
    if nx < 2 or ny < 2 or nz < 2:
        raise MeshError("slab grid needs at least two vertices per axis")
    lx, ly, lz = np.asarray(extent, dtype=np.float64)
    xs = np.linspace(0.0, lx, nx)
    ys = np.linspace(0.0, ly, ny)
    zs = np.linspace(0.0, lz, nz)
    grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
    vertices = grid.reshape(-1, 3)

    def vid(i, j, k):
        return (i * ny + j) * nz + k

    # Kuhn subdivision: one tet per axis-order path from cell corner to corner.
    paths = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    tets = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            for k in range(nz - 1):
                for path in paths:
                    corner = np.array([i, j, k])
                    quad = [vid(*corner)]
                    for axis in path:
                        corner = corner.copy()
                        corner[axis] += 1
                        quad.append(vid(*corner))
                    tets.append(quad)
    tets = np.asarray(tets, dtype=np.int64)
    # Orient every tet positively; path parity decides the swap.
    p = vertices[tets]
    dm = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
    neg = np.linalg.det(dm) < 0
    tets[neg] = tets[neg][:, [0, 2, 1, 3]]
    return vertices, tets
