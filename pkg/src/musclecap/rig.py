"""Blendshape and jaw-joint rig with per-vertex linear blend skinning.

The deformed surface is x(b, j) = T(j) (n + B b): blendshape deltas applied to
the neutral shape, then blended per vertex between the static cranium frame
and the single 6-DOF jaw frame. Analytic parameter Jacobians are provided for
every op so downstream solvers never need finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class RigError(ValueError):
    """Raised for malformed rig data or parameter vectors."""


def euler_xyz(angles: np.ndarray) -> np.ndarray:
    """Rotation matrix for intrinsic X-Y-Z Euler angles in radians."""
    ax, ay, az = np.asarray(angles, dtype=np.float64)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def euler_xyz_derivatives(angles: np.ndarray) -> np.ndarray:
    """Partial derivatives of euler_xyz with respect to each angle, shape (3, 3, 3)."""
    ax, ay, az = np.asarray(angles, dtype=np.float64)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    drx = np.array([[0, 0, 0], [0, -sx, -cx], [0, cx, -sx]])
    dry = np.array([[-sy, 0, cy], [0, 0, 0], [-cy, 0, -sy]])
    drz = np.array([[-sz, -cz, 0], [cz, -sz, 0], [0, 0, 0]])
    return np.stack([drx @ ry @ rz, rx @ dry @ rz, rx @ ry @ drz])


@dataclass
class Blendshapes:
    """Neutral surface plus additive per-vertex delta shapes.

    deltas has shape (K, V, 3); column k of the flattened basis matrix B is
    deltas[k] raveled.
    """

    neutral: np.ndarray
    deltas: np.ndarray
    names: list[str]

    def __post_init__(self):
        self.neutral = np.ascontiguousarray(self.neutral, dtype=np.float64)
        self.deltas = np.ascontiguousarray(self.deltas, dtype=np.float64)
        if self.deltas.ndim != 3 or self.deltas.shape[1:] != self.neutral.shape:
            raise RigError("deltas must be (K, V, 3) matching the neutral shape")
        if len(self.names) != len(self.deltas):
            raise RigError("one name per shape required")
        if len(set(self.names)) != len(self.names):
            raise RigError("shape names must be unique")

    @property
    def num_shapes(self) -> int:
        return len(self.deltas)

    @property
    def num_vertices(self) -> int:
        return len(self.neutral)

    def evaluate(self, b: np.ndarray) -> np.ndarray:
        """Pre-skinning shape n + B b."""
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (self.num_shapes,):
            raise RigError(f"expected {self.num_shapes} shape weights, got {b.shape}")
        return self.neutral + np.einsum("k,kvi->vi", b, self.deltas)


@dataclass
class JawJoint:
    """Single jaw joint: fixed pivot, 3 intrinsic XYZ Euler radians + 3 translation."""

    pivot: np.ndarray

    def __post_init__(self):
        self.pivot = np.asarray(self.pivot, dtype=np.float64).reshape(3)


def jaw_transform(jaw: JawJoint, j: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation of the jaw frame at parameters j = (rx, ry, rz, tx, ty, tz)."""
    j = np.asarray(j, dtype=np.float64)
    if j.shape != (6,):
        raise RigError(f"jaw parameters must be 6 scalars, got shape {j.shape}")
    return euler_xyz(j[:3]), j[3:].copy()


def apply_jaw(jaw: JawJoint, j: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Rigid jaw motion of points about the pivot."""
    r, t = jaw_transform(jaw, j)
    pts = np.asarray(points, dtype=np.float64)
    return (pts - jaw.pivot) @ r.T + jaw.pivot + t


def skin_transform(jaw: JawJoint, weights: np.ndarray, pre_skin: np.ndarray,
                   j: np.ndarray) -> np.ndarray:
    """Blend each point between the static frame and the jaw frame.

    x_v = (1 - w_v) p_v + w_v (R (p_v - pivot) + pivot + t). Weights of zero
    or one reproduce the static point and the rigid jaw motion exactly.
    """
    w = np.asarray(weights, dtype=np.float64)
    pts = np.asarray(pre_skin, dtype=np.float64)
    if w.shape != (len(pts),):
        raise RigError("one skin weight per point required")
    if w.size and (w.min() < 0.0 or w.max() > 1.0):
        raise RigError("skin weights must lie in [0, 1]")
    moved = apply_jaw(jaw, j, pts)
    return pts + w[:, None] * (moved - pts)


@dataclass
class ControlMap:
    """Maps an animator control vector w to rig parameters (b, j).

    The default is the identity layout w = [b, j]; subclasses may implement a
    narrower control space by overriding split and jacobian.
    """

    num_shapes: int

    @property
    def num_controls(self) -> int:
        return self.num_shapes + 6

    def split(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.num_controls,):
            raise RigError(f"expected {self.num_controls} controls, got {w.shape}")
        return w[: self.num_shapes].copy(), w[self.num_shapes :].copy()

    def jacobian(self, w: np.ndarray) -> np.ndarray:
        """d(b, j)/dw, shape (K + 6, num_controls)."""
        return np.eye(self.num_shapes + 6)


@dataclass
class Rig:
    """Complete deformation rig: shapes, jaw, per-vertex skin weights, controls."""

    blendshapes: Blendshapes
    jaw: JawJoint
    skin_weights: np.ndarray
    controls: ControlMap = field(default=None)

    def __post_init__(self):
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        if self.skin_weights.shape != (self.blendshapes.num_vertices,):
            raise RigError("one skin weight per surface vertex required")
        if self.skin_weights.min() < 0.0 or self.skin_weights.max() > 1.0:
            raise RigError("skin weights must lie in [0, 1]")
        if self.controls is None:
            self.controls = ControlMap(self.blendshapes.num_shapes)

    @property
    def num_params(self) -> int:
        return self.blendshapes.num_shapes + 6


def evaluate_surface(rig: Rig, w: np.ndarray) -> np.ndarray:
    """Deformed surface positions at control vector w."""
    b, j = rig.controls.split(w)
    pre = rig.blendshapes.evaluate(b)
    return skin_transform(rig.jaw, rig.skin_weights, pre, j)


def blend_maps(j: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-point linear maps (1 - w) I + w R(j), shape (N, 3, 3).

    These act on pre-skinning deltas: moving a pre-skinning point by d moves
    the skinned point by blend_map d.
    """
    w = np.asarray(weights, dtype=np.float64)
    r = euler_xyz(np.asarray(j, dtype=np.float64)[:3])
    eye = np.eye(3)
    return (1.0 - w)[:, None, None] * eye[None] + w[:, None, None] * r[None]


def point_shape_jacobian(j: np.ndarray, weights: np.ndarray,
                         deltas: np.ndarray) -> np.ndarray:
    """d(skinned points)/db for points with per-shape deltas, shape (N, 3, K)."""
    return np.einsum("vab,kvb->vak", blend_maps(j, weights), deltas)


def point_jaw_jacobian(jaw: JawJoint, j: np.ndarray, weights: np.ndarray,
                       pre_skin: np.ndarray) -> np.ndarray:
    """d(skinned points)/dj for the 6 jaw parameters, shape (N, 3, 6)."""
    w = np.asarray(weights, dtype=np.float64)
    j = np.asarray(j, dtype=np.float64)
    dr = euler_xyz_derivatives(j[:3])
    centered = np.asarray(pre_skin, dtype=np.float64) - jaw.pivot
    out = np.zeros((len(centered), 3, 6))
    for i in range(3):
        out[:, :, i] = w[:, None] * (centered @ dr[i].T)
        out[:, i, 3 + i] = w
    return out


def point_param_jacobian(jaw: JawJoint, weights: np.ndarray, rest: np.ndarray,
                         deltas: np.ndarray, b: np.ndarray,
                         j: np.ndarray) -> np.ndarray:
    """d(skinned points)/d(b, j) for any skinned sample set, shape (N, 3, K + 6).

    Covers surface vertices, muscle target vertices, and curve points alike:
    all are affine in b before the pose-dependent skin blend.
    """
    n = len(rest)
    k = len(deltas)
    pre = rest if k == 0 else rest + np.einsum("k,kvi->vi", b, deltas)
    out = np.zeros((n, 3, k + 6))
    if k:
        out[:, :, :k] = point_shape_jacobian(j, weights, deltas)
    out[:, :, k:] = point_jaw_jacobian(jaw, j, weights, pre)
    return out


def surface_jacobian(rig: Rig, w: np.ndarray) -> np.ndarray:
    """Full analytic Jacobian of the deformed surface, shape (3 V, num_controls).

    Rows are the raveled surface coordinates; columns follow the control
    layout. Shape columns are the blend maps applied to the delta columns,
    jaw columns differentiate the Euler rotation and translation.
    """
    b, j = rig.controls.split(w)
    nv = rig.blendshapes.num_vertices
    jac_bj = point_param_jacobian(rig.jaw, rig.skin_weights, rig.blendshapes.neutral,
                                  rig.blendshapes.deltas, b, j)
    return jac_bj.reshape(3 * nv, rig.num_params) @ rig.controls.jacobian(w)
