"""Camera, lighting, and image-space residuals.

A pinhole camera with world-to-camera rotation and translation, a nine
coefficient spherical harmonic irradiance model (grayscale, applied to all
three channels), a three-level blur/downsample pyramid, and the two image
residuals used by capture: vertex-sampled shading against the pyramid and
projected roto correspondences. All residuals come with analytic Jacobians,
including the chain through recomputed vertex normals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import SurfaceMesh, vertex_normal_jacobian, vertex_normals


class CameraError(ValueError):
    """Raised for invalid camera geometry or points behind the camera."""


class ImagingError(ValueError):
    """Raised for invalid imaging inputs (empty visibility, bad shapes)."""


MIN_DEPTH = 1e-9
DEFAULT_LEVEL_WEIGHTS = (1.0, 0.5, 0.25)
# Relative depth slack when comparing a vertex against its z-buffer cell.
DEPTH_TOLERANCE = 0.005


@dataclass
class Camera:
    """Pinhole camera: u = fx x/z + cx, v = fy y/z + cy in camera space."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        rtr = self.rotation @ self.rotation.T
        if not np.allclose(rtr, np.eye(3), atol=1e-8) or np.linalg.det(self.rotation) < 0:
            raise CameraError("camera rotation must be a proper rotation matrix")
        if self.fx <= 0 or self.fy <= 0 or self.width < 2 or self.height < 2:
            raise CameraError("camera intrinsics must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world space."""
        return -self.rotation.T @ self.translation


def camera_points(cam: Camera, x: np.ndarray) -> np.ndarray:
    """World points mapped into camera space, shape (N, 3)."""
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return pts @ cam.rotation.T + cam.translation


def project(cam: Camera, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (N, 2) and camera-space depths (N,) of world points.

    Raises CameraError when any point sits at or behind the camera plane
    (camera-space depth <= 1e-9).
    """
    pc = camera_points(cam, x)
    if np.any(pc[:, 2] <= MIN_DEPTH):
        bad = int(np.argmin(pc[:, 2]))
        raise CameraError(f"point {bad} at or behind the camera (depth {pc[bad, 2]:.3e})")
    uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx,
                   cam.fy * pc[:, 1] / pc[:, 2] + cam.cy], axis=1)
    return uv, pc[:, 2].copy()


def project_jacobian(cam: Camera, x: np.ndarray) -> np.ndarray:
    """d(u, v)/d(world point), shape (N, 2, 3)."""
    pc = camera_points(cam, x)
    z = pc[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise CameraError("point at or behind the camera")
    n = len(pc)
    jc = np.zeros((n, 2, 3))
    jc[:, 0, 0] = cam.fx / z
    jc[:, 0, 2] = -cam.fx * pc[:, 0] / z**2
    jc[:, 1, 1] = cam.fy / z
    jc[:, 1, 2] = -cam.fy * pc[:, 1] / z**2
    return jc @ cam.rotation


# Real spherical harmonic basis constants, bands 0-2.
_C0 = 0.282095
_C1 = 0.488603
_C2 = 1.092548
_C3 = 0.315392
_C4 = 0.546274


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """Nine-term quadratic basis in the unit normal, shape (N, 9).

    Order: constant; y, z, x linear band; xy, yz, 3z^2-1, xz, x^2-y^2.
    """
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    return np.stack([
        np.full(len(n), _C0), _C1 * y, _C1 * z, _C1 * x,
        _C2 * x * y, _C2 * y * z, _C3 * (3.0 * z**2 - 1.0), _C2 * x * z,
        _C4 * (x**2 - y**2)], axis=1)


def sh_basis_gradient(normals: np.ndarray) -> np.ndarray:
    """d(sh_basis)/d(normal), shape (N, 9, 3)."""
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    zero = np.zeros(len(n))
    g = np.zeros((len(n), 9, 3))
    g[:, 1] = np.stack([zero, np.full_like(x, _C1), zero], axis=1)
    g[:, 2] = np.stack([zero, zero, np.full_like(x, _C1)], axis=1)
    g[:, 3] = np.stack([np.full_like(x, _C1), zero, zero], axis=1)
    g[:, 4] = _C2 * np.stack([y, x, zero], axis=1)
    g[:, 5] = _C2 * np.stack([zero, z, y], axis=1)
    g[:, 6] = _C3 * np.stack([zero, zero, 6.0 * z], axis=1)
    g[:, 7] = _C2 * np.stack([z, zero, x], axis=1)
    g[:, 8] = _C4 * np.stack([2.0 * x, -2.0 * y, zero], axis=1)
    return g


def sh_irradiance(gamma: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Grayscale irradiance at unit normals, shape (N,).

    gamma holds the nine coefficients of the irradiance polynomial directly;
    the same value scales all three color channels.
    """
    gamma = np.asarray(gamma, dtype=np.float64).reshape(9)
    return sh_basis(normals) @ gamma


@dataclass
class SHLighting:
    """Lighting state for the shading residual: SH gamma plus per-vertex albedo."""

    gamma: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(9)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(-1, 3)
        if np.any(self.albedo < 0):
            raise ImagingError("albedo must be non-negative")


@dataclass
class ImagePyramid:
    """Three-level blur/downsample pyramid; level 0 is the source image."""

    levels: list[np.ndarray] = field(default_factory=list)


_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def build_pyramid(image: np.ndarray, num_levels: int = 3) -> ImagePyramid:
    """Blur (5-tap binomial, reflect boundary) and 2x downsample repeatedly.

    Level k pixel (i, j) corresponds to source pixel (2^k i, 2^k j); constant
    images stay constant at every level.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None].repeat(3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImagingError("image must be (H, W, 3)")
    levels = [img]
    for _ in range(num_levels - 1):
        blurred = ndimage.correlate1d(levels[-1], _BINOMIAL5, axis=0, mode="reflect")
        blurred = ndimage.correlate1d(blurred, _BINOMIAL5, axis=1, mode="reflect")
        levels.append(blurred[::2, ::2])
    return ImagePyramid(levels=levels)


def sample_bilinear(img: np.ndarray, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample an image at pixel coordinates.

    Returns values (N, 3) and gradients d(value)/d(u, v) of shape (N, 3, 2).
    Coordinates are clipped to the valid interpolation square.
    """
    h, w = img.shape[:2]
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    u = np.clip(uv[:, 0], 0.0, w - 1.0 - 1e-12)
    v = np.clip(uv[:, 1], 0.0, h - 1.0 - 1e-12)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    fu = (u - x0)[:, None]
    fv = (v - y0)[:, None]
    p00 = img[y0, x0]
    p01 = img[y0, x0 + 1]
    p10 = img[y0 + 1, x0]
    p11 = img[y0 + 1, x0 + 1]
    top = p00 + fu * (p01 - p00)
    bot = p10 + fu * (p11 - p10)
    vals = top + fv * (bot - top)
    du = (p01 - p00) + fv * ((p11 - p10) - (p01 - p00))
    dv = bot - top
    return vals, np.stack([du, dv], axis=2)


def vertex_visibility(cam: Camera, positions: np.ndarray, normals: np.ndarray,
                      num_levels: int = 3,
                      depth_tol: float = DEPTH_TOLERANCE) -> np.ndarray:
    """Visibility mask: front-facing, in frame at every level, depth-closest.

    Depth testing splats each candidate into its nearest pixel and keeps
    vertices within a 0.5% relative depth band of the cell minimum.
    """
    pos = np.asarray(positions, dtype=np.float64)
    pc = camera_points(cam, pos)
    z = pc[:, 2]
    ok = z > MIN_DEPTH
    u = np.where(ok, cam.fx * pc[:, 0] / np.where(ok, z, 1.0) + cam.cx, -1.0)
    v = np.where(ok, cam.fy * pc[:, 1] / np.where(ok, z, 1.0) + cam.cy, -1.0)
    margin = float(2 ** (num_levels - 1))
    ok &= (u >= 0.0) & (u <= cam.width - 1 - margin)
    ok &= (v >= 0.0) & (v <= cam.height - 1 - margin)
    view = pos - cam.center
    ok &= np.einsum("vi,vi->v", np.asarray(normals, dtype=np.float64), view) < 0.0

    zbuf = np.full((cam.height, cam.width), np.inf)
    px = np.clip(np.round(u).astype(np.int64), 0, cam.width - 1)
    py = np.clip(np.round(v).astype(np.int64), 0, cam.height - 1)
    idx = np.nonzero(ok)[0]
    np.minimum.at(zbuf, (py[idx], px[idx]), z[idx])
    ok[idx] &= z[idx] <= zbuf[py[idx], px[idx]] * (1.0 + depth_tol)
    return ok


def vertex_shading_residual(positions: np.ndarray, normals: np.ndarray,
                            lighting: SHLighting, cam: Camera,
                            pyramid: ImagePyramid,
                            level_weights=DEFAULT_LEVEL_WEIGHTS,
                            visibility: np.ndarray | None = None) -> np.ndarray:
    """Stacked shading residual over pyramid levels, shape (L * V * 3,).

    Per visible vertex, level, and channel: weight_l * (plate sample at the
    level-scaled projection - albedo * irradiance(normal)). Hidden vertices
    keep zero rows so the layout is stable. Visibility may be passed in to
    hold it fixed across an iterate; it is recomputed otherwise.
    """
    sys = shading_system(None, positions, normals, lighting, cam, pyramid,
                         level_weights, visibility, with_jacobians=False)
    return sys.residual


@dataclass
class ShadingSystem:
    """Shading residual with its analytic Jacobians at one pose."""

    residual: np.ndarray
    visibility: np.ndarray
    d_positions: np.ndarray | None = None   # (R, V, 3)
    d_gamma: np.ndarray | None = None       # (R, 9)
    d_albedo: np.ndarray | None = None      # (R, V, 3)


def shading_system(surface: SurfaceMesh | None, positions: np.ndarray,
                   normals: np.ndarray | None, lighting: SHLighting, cam: Camera,
                   pyramid: ImagePyramid, level_weights=DEFAULT_LEVEL_WEIGHTS,
                   visibility: np.ndarray | None = None,
                   with_jacobians: bool = True) -> ShadingSystem:
    """Shading residual and, when requested, its full analytic Jacobians.

    When a surface is given the normals (and their position Jacobian) are
    recomputed from the passed positions, so d_positions includes both the
    projection chain and the normal chain. Row order: level-major, then
    vertex, then channel.
    """
    pos = np.asarray(positions, dtype=np.float64)
    nv = len(pos)
    if normals is None:
        if surface is None:
            raise ImagingError("need a surface to recompute normals")
        normals = vertex_normals(surface, pos)
    if visibility is None:
        visibility = vertex_visibility(cam, pos, normals, len(pyramid.levels))
    if not visibility.any():
        raise ImagingError("no visible vertices for the shading residual")
    vis = np.nonzero(visibility)[0]
    weights = np.asarray(level_weights, dtype=np.float64)
    if len(weights) != len(pyramid.levels):
        raise ImagingError("one weight per pyramid level required")
    if lighting.albedo.shape[0] != nv:
        raise ImagingError("one albedo per vertex required")

    uv, _ = project(cam, pos[vis])
    irr = sh_irradiance(lighting.gamma, normals[vis])
    shade = lighting.albedo[vis] * irr[:, None]

    nlev = len(pyramid.levels)
    res = np.zeros((nlev, nv, 3))
    want_j = with_jacobians
    d_pos = np.zeros((nlev, nv, 3, nv, 3)) if want_j else None
    d_gamma = np.zeros((nlev, nv, 3, 9)) if want_j else None
    d_albedo = np.zeros((nlev, nv, 3, nv, 3)) if want_j else None

    if want_j:
        uv_jac = project_jacobian(cam, pos[vis])          # (Nv, 2, 3)
        basis = sh_basis(normals[vis])                    # (Nv, 9)
        dirr_dn = np.einsum("k,vkd->vd", lighting.gamma,
                            sh_basis_gradient(normals[vis]))
        if surface is not None:
            dn_dx = vertex_normal_jacobian(surface, pos)  # (V, 3, V, 3)
        else:
            dn_dx = None

    for lev, (img, w) in enumerate(zip(pyramid.levels, weights)):
        scale = float(2**lev)
        vals, grads = sample_bilinear(img, uv / scale)
        res[lev, vis] = w * (vals - shade)
        if not want_j:
            continue
        # Plate chain: d(sample)/dx = grad_uv . (1/scale) d(uv)/dx.
        plate_dx = np.einsum("vcs,vsd->vcd", grads / scale, uv_jac)
        for row, vidx in enumerate(vis):
            d_pos[lev, vidx, :, vidx, :] += w * plate_dx[row]
            if dn_dx is not None:
                # Shading chain: -albedo_ch d(irr)/dn dn/dx over the ring.
                contrib = np.einsum("d,dwe->we", dirr_dn[row], dn_dx[vidx])
                d_pos[lev, vidx, :, :, :] -= w * lighting.albedo[vidx][:, None, None] \
                    * contrib[None, :, :]
            d_gamma[lev, vidx] = -w * lighting.albedo[vidx][:, None] * basis[row][None, :]
            for ch in range(3):
                d_albedo[lev, vidx, ch, vidx, ch] = -w * irr[row]

    rows = nlev * nv * 3
    return ShadingSystem(
        residual=res.reshape(rows),
        visibility=visibility,
        d_positions=d_pos.reshape(rows, nv, 3) if want_j else None,
        d_gamma=d_gamma.reshape(rows, 9) if want_j else None,
        d_albedo=d_albedo.reshape(rows, nv, 3) if want_j else None)


@dataclass
class RotoConstraint:
    """2D tracked correspondences: surface points (triangle + barycentric) to pixels."""

    triangles: np.ndarray
    barycentric: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.barycentric = np.asarray(self.barycentric, dtype=np.float64).reshape(-1, 3)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 2)
        if not (len(self.triangles) == len(self.barycentric) == len(self.targets)):
            raise ImagingError("roto arrays must share their length")
        if np.any(self.barycentric < -1e-9) or \
                not np.allclose(self.barycentric.sum(axis=1), 1.0, atol=1e-8):
            raise ImagingError("barycentric weights must be a convex combination")

    def __len__(self):
        return len(self.triangles)


def roto_points(roto: RotoConstraint, surface_triangles: np.ndarray,
                positions: np.ndarray) -> np.ndarray:
    """World positions of the roto surface points, shape (N, 3)."""
    corners = np.asarray(positions, dtype=np.float64)[surface_triangles[roto.triangles]]
    return np.einsum("nk,nki->ni", roto.barycentric, corners)


def roto_residual(roto: RotoConstraint, surface_triangles: np.ndarray,
                  positions: np.ndarray, cam: Camera) -> np.ndarray:
    """Projected-minus-target pixel residual, shape (2 N,)."""
    pts = roto_points(roto, surface_triangles, positions)
    uv, _ = project(cam, pts)
    return (uv - roto.targets).reshape(-1)


def roto_position_jacobian(roto: RotoConstraint, surface_triangles: np.ndarray,
                           positions: np.ndarray, cam: Camera) -> np.ndarray:
    """d(roto residual)/d(vertex positions), shape (2 N, V, 3)."""
    pts = roto_points(roto, surface_triangles, positions)
    pj = project_jacobian(cam, pts)
    nv = len(positions)
    out = np.zeros((len(roto), 2, nv, 3))
    tri = surface_triangles[roto.triangles]
    for n in range(len(roto)):
        for k in range(3):
            out[n, :, tri[n, k], :] += roto.barycentric[n, k] * pj[n]
    return out.reshape(2 * len(roto), nv, 3)


def splat_vertices(cam: Camera, positions: np.ndarray, colors: np.ndarray,
                   background: float = 0.0) -> np.ndarray:
    """Normalized bilinear splat of per-vertex colors into an image.

    Pixels touched by exactly one vertex reproduce that vertex's color
    exactly under bilinear resampling at the vertex's projection, which makes
    this the reference plate for residual self-consistency checks.
    """
    uv, _ = project(cam, positions)
    img = np.zeros((cam.height, cam.width, 3))
    wsum = np.zeros((cam.height, cam.width))
    x0 = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, cam.width - 2)
    y0 = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, cam.height - 2)
    fu = uv[:, 0] - x0
    fv = uv[:, 1] - y0
    colors = np.asarray(colors, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            w = (fu if dx else 1.0 - fu) * (fv if dy else 1.0 - fv)
            np.add.at(img, (y0 + dy, x0 + dx), w[:, None] * colors)
            np.add.at(wsum, (y0 + dy, x0 + dx), w)
    hit = wsum > 1e-12
    img[hit] /= wsum[hit][:, None]
    img[~hit] = background
    return img


def rasterize_surface(cam: Camera, surface_triangles: np.ndarray,
                      positions: np.ndarray, vertex_colors: np.ndarray,
                      background: float = 0.0) -> np.ndarray:
    """Z-buffered triangle rasterization with barycentric color interpolation.

    A small software renderer for synthesizing dense, smooth plates; depth is
    interpolated affinely, which is accurate enough at desk scale.
    """
    uv, depth = project(cam, positions)
    colors = np.asarray(vertex_colors, dtype=np.float64)
    img = np.full((cam.height, cam.width, 3), background, dtype=np.float64)
    zbuf = np.full((cam.height, cam.width), np.inf)
    for tri in surface_triangles:
        p = uv[tri]
        z = depth[tri]
        c = colors[tri]
        lo = np.maximum(np.floor(p.min(axis=0)).astype(int), 0)
        hi = np.minimum(np.ceil(p.max(axis=0)).astype(int), [cam.width - 1, cam.height - 1])
        if np.any(hi < lo):
            continue
        xs = np.arange(lo[0], hi[0] + 1)
        ys = np.arange(lo[1], hi[1] + 1)
        gx, gy = np.meshgrid(xs, ys)
        det = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) \
            - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
        if abs(det) < 1e-12:
            continue
        w1 = ((gx - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (gy - p[0, 1])) / det
        w2 = ((p[1, 0] - p[0, 0]) * (gy - p[0, 1]) - (gx - p[0, 0]) * (p[1, 1] - p[0, 1])) / det
        w0 = 1.0 - w1 - w2
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        pixel_depth = w0 * z[0] + w1 * z[1] + w2 * z[2]
        py, px = gy[inside], gx[inside]
        d = pixel_depth[inside]
        closer = d < zbuf[py, px]
        py, px, d = py[closer], px[closer], d[closer]
        zbuf[py, px] = d
        shade = (w0[inside][closer, None] * c[0] + w1[inside][closer, None] * c[1]
                 + w2[inside][closer, None] * c[2])
        img[py, px] = shade
    return img
