"""Procedural desk-scale test asset: a slab face with known ground truth.

Generates a regular tet slab whose top layer is bound one-to-one to a render
surface, authored bump blendshapes, embedded muscles with center-line curves,
a jaw analog splitting the constrained bottom layer, collision proxies, an
overhead camera, ground-truth lighting, synthetic plates, and roto tracks.
Everything is a deterministic function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anatomy import Muscle, curve_length
from .geometry import (HalfSpaceProxy, SphereProxy, SurfaceMesh, TetMesh,
                       embed, grid_slab, interpolate, signed_distance,
                       vertex_normals)
from .imaging import Camera, RotoConstraint, project, rasterize_surface, \
    splat_vertices, sh_irradiance
from .rig import Blendshapes, JawJoint, Rig, evaluate_surface


class AssetError(ValueError):
    """Raised when a generated asset fails its own validation."""


SHAPE_TEMPLATES = ("pucker", "smile", "bulge", "dimple", "shift", "stretch")


@dataclass
class AssetSpec:
    """Knobs for the generator; the seed fully determines the asset."""

    resolution: tuple[int, int, int] = (12, 8, 4)
    extent: tuple[float, float, float] = (0.12, 0.08, 0.04)
    num_shapes: int = 6
    num_muscles: int = 3
    jaw_pivot: tuple[float, float, float] | None = None
    seed: int = 7
    image_size: tuple[int, int] = (1280, 960)
    camera_height: float = 0.30

    def __post_init__(self):
        if min(self.resolution) < 2:
            raise AssetError("need at least two lattice vertices per axis")
        if not 1 <= self.num_shapes <= len(SHAPE_TEMPLATES):
            raise AssetError(f"supports 1..{len(SHAPE_TEMPLATES)} blendshapes")
        if not 1 <= self.num_muscles <= 4:
            raise AssetError("supports 1..4 muscles")


@dataclass
class GroundTruth:
    """Synthesis parameters behind the plates and roto tracks."""

    gamma: np.ndarray
    albedo: np.ndarray
    w_image: np.ndarray      # pose used for the posed plates and roto targets
    w_geometry: np.ndarray   # pose with jaw motion, for 3D round trips
    w_pucker: np.ndarray     # compressive pose for the volume comparison
    theta: np.ndarray
    t: np.ndarray


@dataclass
class Asset:
    """Everything generate() produces, ready for simulation and capture."""

    spec: AssetSpec
    mesh: TetMesh
    surface: SurfaceMesh
    rig: Rig
    muscles: list[Muscle]
    proxies: list
    camera: Camera
    truth: GroundTruth
    plates: dict[str, np.ndarray]
    roto: RotoConstraint
    lip_tets: np.ndarray
    lip_vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _bump(uv: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    d2 = np.sum((uv - center)**2, axis=1)
    return np.exp(-d2 / (2.0 * radius**2))


def _author_shapes(neutral: np.ndarray, extent, num_shapes: int, rng) \
        -> tuple[np.ndarray, list[str], dict]:
    """Smooth bump displacement fields on the top surface, seeded jitter.

    The pucker shape contracts a patch radially in plane (a compressive
    field); the others bend, shift, or stretch their patches. Amplitudes are
    a large fraction of the slab thickness so posed plates and roto tracks
    carry a strong signal relative to the capture regularizers.
    """
    lx, ly, lz = extent
    uv = neutral[:, :2] / np.array([lx, ly])
    deltas = np.zeros((num_shapes, len(neutral), 3))
    meta = {}
    base_amp = 0.45 * lz
    for s, name in enumerate(SHAPE_TEMPLATES[:num_shapes]):
        center = np.array([0.30 + 0.40 * rng.random(), 0.35 + 0.30 * rng.random()])
        radius = 0.26 * (1.0 + 0.3 * (rng.random() - 0.5))
        amp = base_amp * (1.0 + 0.4 * (rng.random() - 0.5))
        g = _bump(uv, center, radius)
        span = uv - center
        d = np.zeros_like(neutral)
        if name == "pucker":
            d[:, 0] = -1.2 * amp * g * span[:, 0] / radius
            d[:, 1] = -1.2 * amp * g * span[:, 1] / radius
            d[:, 2] = 0.25 * amp * g
            meta["pucker_center"] = center * np.array([lx, ly])
            meta["pucker_radius"] = radius * lx
        elif name == "smile":
            d[:, 0] = amp * g * span[:, 0] / radius
            d[:, 1] = 0.3 * amp * g * span[:, 1] / radius
            d[:, 2] = 0.4 * amp * g
        elif name == "bulge":
            # Outward swell drags the skin radially as it rises; the radial
            # part keeps the shape observable from a straight-down camera.
            d[:, 0] = 0.70 * amp * g * span[:, 0] / radius
            d[:, 1] = 0.70 * amp * g * span[:, 1] / radius
            d[:, 2] = amp * g
        elif name == "dimple":
            d[:, 0] = -0.9 * amp * g * span[:, 0] / radius
            d[:, 1] = -0.9 * amp * g * span[:, 1] / radius
            d[:, 2] = -0.8 * amp * g
        elif name == "shift":
            d[:, 1] = amp * g
        elif name == "stretch":
            d[:, 1] = 1.8 * amp * g * span[:, 1] / radius
        deltas[s] = d
    if "pucker_center" not in meta:
        meta["pucker_center"] = np.array([0.5 * lx, 0.5 * ly])
        meta["pucker_radius"] = 0.2 * lx
    return deltas, list(SHAPE_TEMPLATES[:num_shapes]), meta


def _muscle_lanes(extent, num_muscles: int, rng) -> list[np.ndarray]:
    """Polyline sample points for each muscle, strictly inside the slab."""
    lx, ly, lz = extent
    s = np.linspace(0.0, 1.0, 9)
    lanes = []
    # Bands run shallow, just under the skin: they track the surface morph
    # while the deeper flesh stays free to respond elastically.
    specs = [
        (0.30, 0.72, 0.0),   # straight band, lower y
        (0.70, 0.68, 0.0),   # straight band, upper y
        (0.50, 0.75, 0.15),  # arched band
        (0.42, 0.70, -0.10), # second arch, lower
    ]
    for lane, (fy, fz, bend) in enumerate(specs[:num_muscles]):
        jy = (rng.random() - 0.5) * 0.06
        pts = np.stack([
            (0.10 + 0.80 * s) * lx,
            (fy + jy + bend * np.sin(np.pi * s)) * ly,
            np.full_like(s, fz * lz + (rng.random() - 0.5) * 0.04 * lz)], axis=1)
        lanes.append(pts)
    return lanes


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    seg = b - a
    denom = float(seg @ seg)
    t = np.clip(((points - a) @ seg) / denom, 0.0, 1.0)
    closest = a + t[:, None] * seg
    return np.linalg.norm(points - closest, axis=1), t


def _build_muscles(mesh: TetMesh, lanes: list[np.ndarray], extent, rng) -> list[Muscle]:
    lx, ly, lz = extent
    radius = 0.14 * ly
    centroids = mesh.vertices[mesh.tets].mean(axis=1)
    muscles = []
    for index, pts in enumerate(lanes):
        best = np.full(len(centroids), np.inf)
        tangent = np.zeros((len(centroids), 3))
        for a, b in zip(pts[:-1], pts[1:]):
            dist, _ = _point_segment_distance(centroids, a, b)
            closer = dist < best
            best[closer] = dist[closer]
            tangent[closer] = b - a
        member = np.nonzero(best < radius)[0]
        if len(member) == 0:
            raise AssetError(f"muscle {index} lies outside the slab volume")
        fibers = tangent[member]
        fibers /= np.linalg.norm(fibers, axis=1)[:, None]
        vertices = np.unique(mesh.tets[member].reshape(-1))
        muscles.append(Muscle(
            name=f"band_{index}", tets=member, fibers=fibers, vertices=vertices,
            curve_rest=pts, curve_embedding=embed(pts, mesh),
            k_m=float(rng.uniform(3e4, 6e4))))
    return muscles


def _slab_camera(spec: AssetSpec) -> Camera:
    lx, ly, lz = spec.extent
    width, height = spec.image_size
    center = np.array([0.5 * lx, 0.5 * ly, spec.camera_height])
    # Look straight down: camera x follows world x, y and z flip.
    rot = np.diag([1.0, -1.0, -1.0])
    depth = spec.camera_height - lz
    # Fit the slab's long axis to ~70% of the image width.
    focal = 0.70 * width * depth / lx
    return Camera(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
                  rotation=rot, translation=-rot @ center,
                  width=width, height=height)


def _shade(surface: SurfaceMesh, positions: np.ndarray, truth_gamma, truth_albedo):
    normals = vertex_normals(surface, positions)
    irr = sh_irradiance(truth_gamma, normals)
    return np.asarray(truth_albedo) * irr[:, None]


def _make_roto(surface: SurfaceMesh, posed: np.ndarray, cam: Camera,
               nx: int, ny: int) -> RotoConstraint:
    """Barycentric correspondences over every triangle of the top grid.

    Three samples per triangle over all cells. Dense enough that the pixel
    reprojection term carries real weight against the stage-1 regularizer,
    the way tracked curves do on a full-size plate.
    """
    third = 1.0 / 3.0
    samples = [[third, third, third], [0.6, 0.2, 0.2], [0.2, 0.6, 0.2]]
    tris, bary = [], []
    for j in range(ny - 1):
        for i in range(nx - 1):
            for t in (2 * (i * (ny - 1) + j), 2 * (i * (ny - 1) + j) + 1):
                for b in samples:
                    tris.append(t)
                    bary.append(b)
    tris = np.asarray(tris, dtype=np.int64)
    bary = np.asarray(bary, dtype=np.float64)
    corners = posed[surface.triangles[tris]]
    points = np.einsum("nk,nki->ni", bary, corners)
    targets, _ = project(cam, points)
    return RotoConstraint(triangles=tris, barycentric=bary, targets=targets)


def generate(spec: AssetSpec | None = None) -> Asset:
    """Build the full synthetic asset; equal seeds give identical assets."""
    if spec is None:
        spec = AssetSpec()
    rng = np.random.default_rng(spec.seed)
    nx, ny, nz = spec.resolution
    lx, ly, lz = spec.extent
    vertices, tets = grid_slab(nx, ny, nz, spec.extent)

    def vid(i, j, k):
        return (i * ny + j) * nz + k

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    top = vid(ii, jj, nz - 1).reshape(-1)
    bottom = vid(ii, jj, 0).reshape(-1)

    surf_tris = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            v00, v10 = i * ny + j, (i + 1) * ny + j
            v01, v11 = i * ny + j + 1, (i + 1) * ny + j + 1
            surf_tris.append([v00, v10, v11])
            surf_tris.append([v00, v11, v01])
    surf_tris = np.asarray(surf_tris, dtype=np.int64)

    mesh = TetMesh(vertices=vertices, tets=tets, boundary_vertices=top,
                   boundary_triangles=top[surf_tris], inner_boundary=bottom)
    surface = SurfaceMesh(vertices=vertices[top].copy(), triangles=surf_tris)

    deltas, names, shape_meta = _author_shapes(surface.vertices, spec.extent,
                                               spec.num_shapes, rng)
    # Jaw analog: the high-x end of the slab follows the jaw frame.
    ux = surface.vertices[:, 0] / lx
    skin = _smoothstep((ux - 0.55) / 0.30)
    pivot = spec.jaw_pivot or (0.75 * lx, 0.5 * ly, -0.3 * lz)
    rig = Rig(blendshapes=Blendshapes(neutral=surface.vertices.copy(),
                                      deltas=deltas, names=names),
              jaw=JawJoint(pivot=np.asarray(pivot, dtype=np.float64)),
              skin_weights=skin)

    muscles = _build_muscles(mesh, _muscle_lanes(spec.extent, spec.num_muscles, rng),
                             spec.extent, rng)
    for m in muscles:
        round_trip = interpolate(m.curve_embedding, mesh, mesh.vertices)
        if np.max(np.abs(round_trip - m.curve_rest)) > 1e-9:
            raise AssetError(f"curve embedding round trip failed for {m.name}")
        if abs(curve_length(round_trip) - curve_length(m.curve_rest)) > 1e-10:
            raise AssetError(f"curve rest length mismatch for {m.name}")

    proxies = [
        HalfSpaceProxy(normal=np.array([0.0, 0.0, 1.0]), offset=-0.25 * lz,
                       stiffness=1e5),
        SphereProxy(center=np.array([0.5 * lx, 0.5 * ly, lz + 2.5 * lz]),
                    radius=lz, stiffness=1e5),
    ]
    for proxy in proxies:
        phi, _ = signed_distance(proxy, mesh.vertices)
        if phi.min() <= 0.0:
            raise AssetError("collision proxy touches the rest mesh")

    cam = _slab_camera(spec)

    k = spec.num_shapes
    w_image = np.zeros(k + 6)
    w_image[0] = 0.5
    if k > 1:
        w_image[1] = 0.3
    if k > 3:
        w_image[3] = 0.4
    w_geometry = w_image.copy()
    w_geometry[k:] = [0.06, -0.04, 0.03, 0.002 * lx, -0.0015 * lx, 0.001 * lx]
    w_pucker = np.zeros(k + 6)
    w_pucker[0] = 0.8
    truth = GroundTruth(
        gamma=np.array([2.5, 0.6, 0.8, 1.1, 0.0, 0.0, 0.15, 0.0, 0.1]),
        albedo=np.tile([0.62, 0.55, 0.50], (surface.num_vertices, 1)),
        w_image=w_image, w_geometry=w_geometry, w_pucker=w_pucker,
        theta=np.array([0.03, -0.05, 0.04]),
        t=np.array([0.004, -0.003, 0.002]))

    neutral_shade = _shade(surface, surface.vertices, truth.gamma, truth.albedo)
    posed = evaluate_surface(rig, w_image)
    posed_shade = _shade(surface, posed, truth.gamma, truth.albedo)
    fill = float(posed_shade.mean())
    plates = {
        "neutral_splat": splat_vertices(cam, surface.vertices, neutral_shade,
                                        background=fill),
        "neutral_raster": rasterize_surface(cam, surface.triangles,
                                            surface.vertices, neutral_shade,
                                            background=fill),
        "posed_splat": splat_vertices(cam, posed, posed_shade, background=fill),
        "posed_raster": rasterize_surface(cam, surface.triangles, posed,
                                          posed_shade, background=fill),
    }
    roto = _make_roto(surface, posed, cam, nx, ny)

    # Lip analog: the tets and surface vertices under the pucker patch.
    centroids = mesh.vertices[mesh.tets].mean(axis=1)
    pc, pr = shape_meta["pucker_center"], shape_meta["pucker_radius"]
    in_patch = np.linalg.norm(centroids[:, :2] - pc, axis=1) < pr
    lip_tets = np.nonzero(in_patch & (centroids[:, 2] > 0.4 * lz))[0]
    lip_vertices = np.nonzero(
        np.linalg.norm(surface.vertices[:, :2] - pc, axis=1) < pr)[0]
    if len(lip_tets) == 0:
        raise AssetError("pucker patch misses the tet lattice")

    return Asset(spec=spec, mesh=mesh, surface=surface, rig=rig, muscles=muscles,
                 proxies=proxies, camera=cam, truth=truth, plates=plates,
                 roto=roto, lip_tets=lip_tets, lip_vertices=lip_vertices)
