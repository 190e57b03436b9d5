"""Muscle anatomy: embedded tracks, morph basis precompute, activation law.

Muscle track targets and center-line curves are affine in the blendshape
weights: a harmonic volumetric morph of each surface shape is solved once,
sampled at the muscle vertices and curve points, and replayed at runtime as
target(b, j) = skin_j(rest + sum_k shape_k b_k). Activations come from the
center-line length through a clamped, corner-smoothed shortening ramp and
are therefore independent of the flesh state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry, rig as rig_mod
from .geometry import Embedding, TetMesh, VolumetricLaplacian
from .rig import JawJoint, Rig


class AnatomyError(ValueError):
    """Raised for malformed muscle definitions or basis mismatches."""


@dataclass
class Muscle:
    """One muscle: a tet subset with fibers, a center-line curve, a track stiffness.

    tets : (Tm,) indices into the flesh tets
    fibers : (Tm, 3) unit rest fiber directions, one per owned tet
    vertices : (Nm,) flesh vertex ids covered by the owned tets (track rows)
    curve_rest : (Nc, 3) rest positions of the center-line polyline
    curve_embedding : barycentric embedding of the curve in the flesh mesh
    k_m : isotropic zero-rest-length track spring stiffness
    shortening : fraction of rest length at which activation saturates
    smoothing : half width (in length units) of the activation corner rounding
    """

    name: str
    tets: np.ndarray
    fibers: np.ndarray
    vertices: np.ndarray
    curve_rest: np.ndarray
    curve_embedding: Embedding
    k_m: float
    shortening: float = 0.3
    smoothing: float | None = None

    def __post_init__(self):
        self.tets = np.asarray(self.tets, dtype=np.int64)
        self.fibers = np.asarray(self.fibers, dtype=np.float64).reshape(-1, 3)
        self.vertices = np.asarray(self.vertices, dtype=np.int64)
        self.curve_rest = np.asarray(self.curve_rest, dtype=np.float64).reshape(-1, 3)
        if len(self.fibers) != len(self.tets):
            raise AnatomyError(f"muscle {self.name}: one fiber per tet required")
        norms = np.linalg.norm(self.fibers, axis=1)
        if len(norms) and not np.allclose(norms, 1.0, atol=1e-8):
            raise AnatomyError(f"muscle {self.name}: fibers must be unit length")
        if len(self.curve_rest) < 2:
            raise AnatomyError(f"muscle {self.name}: curve needs at least 2 points")
        if self.k_m <= 0:
            raise AnatomyError(f"muscle {self.name}: k_m must be positive")
        if not 0.0 < self.shortening < 1.0:
            raise AnatomyError(f"muscle {self.name}: shortening must be in (0, 1)")


@dataclass
class ActivationCurve:
    """Length-to-activation ramp with C1 corner smoothing.

    The base ramp is a = clamp((L0 - L) / (s L0), 0, 1). Each clamp corner is
    replaced by a cubic blended over a band of width 2h placed inside the
    ramp, so a(L0) = 0 holds exactly and the curve is C1 everywhere. The
    default half width is h = 0.01 L0.
    """

    rest_length: float
    shortening: float = 0.3
    smoothing: float | None = None

    def __post_init__(self):
        if self.rest_length <= 0:
            raise AnatomyError("rest length must be positive")
        if not 0.0 < self.shortening < 1.0:
            raise AnatomyError("shortening fraction must be in (0, 1)")
        if self.smoothing is None:
            self.smoothing = 0.01 * self.rest_length
        if not 0.0 < 2.0 * self.smoothing < 0.25 * self.shortening * self.rest_length:
            raise AnatomyError("smoothing band must be positive and well inside the ramp")


def activation(curve: ActivationCurve, length: float) -> tuple[float, float]:
    """Activation and its length derivative at the given curve length.

    Returns (a, da/dL) with a in [0, 1], non-increasing and C1 in L. At and
    above the rest length the activation is exactly zero with zero slope; at
    and below (1 - s) L0 it is exactly one with zero slope.
    """
    l0, s, h = curve.rest_length, curve.shortening, curve.smoothing
    slope = 1.0 / (s * l0)          # base ramp rises this fast as L shrinks
    sat = (1.0 - s) * l0            # length at which the base ramp saturates
    if length >= l0:
        return 0.0, 0.0
    if length <= sat:
        return 1.0, 0.0
    if length >= l0 - 2.0 * h:
        # Cubic from (a=0, slope 0) at L0 to the ramp value and slope at L0-2h.
        t = (l0 - length) / (2.0 * h)
        c = 2.0 * h * slope
        return c * t * t * (2.0 - t), -c * t * (4.0 - 3.0 * t) / (2.0 * h)
    if length <= sat + 2.0 * h:
        # Mirrored cubic easing into saturation at (1-s) L0.
        t = (sat + 2.0 * h - length) / (2.0 * h)
        c = 2.0 * h * slope
        u = 1.0 - t
        return 1.0 - c * u * u * (2.0 - u), -c * u * (4.0 - 3.0 * u) / (2.0 * h)
    return (l0 - length) * slope, -slope


def curve_length(points: np.ndarray) -> float:
    """Total polyline length, the sum of segment norms."""
    pts = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def curve_length_gradient(points: np.ndarray) -> np.ndarray:
    """dL/d(points), shape (Nc, 3).

    Each interior point sees the difference of its two unit segment
    directions; endpoints see a single one.
    """
    pts = np.asarray(points, dtype=np.float64)
    seg = np.diff(pts, axis=0)
    norms = np.linalg.norm(seg, axis=1)
    if np.any(norms < 1e-300):
        raise AnatomyError("curve has a zero-length segment")
    d = seg / norms[:, None]
    grad = np.zeros_like(pts)
    grad[1:] += d
    grad[:-1] -= d
    return grad


@dataclass
class PrecomputedMuscleBasis:
    """Per-shape volumetric morph data sampled where the anatomy needs it.

    fields holds the full harmonic displacement field per shape at every
    flesh vertex (used for diagnostics and for the pure-morph volume
    comparison); the per-muscle lists hold the slices actually used at
    runtime, plus the diffused volumetric skin weights at those samples.
    """

    shape_names: list[str]
    fields: np.ndarray                    # (K, V, 3)
    vertex_weights: np.ndarray            # (V,) volumetric skin weights
    muscle_rest: list[np.ndarray]         # (Nm, 3) per muscle
    muscle_shapes: list[np.ndarray]       # (K, Nm, 3) per muscle
    muscle_weights: list[np.ndarray]      # (Nm,) per muscle
    curve_rest: list[np.ndarray]          # (Nc, 3) per muscle
    curve_shapes: list[np.ndarray]        # (K, Nc, 3) per muscle
    curve_weights: list[np.ndarray]       # (Nc,) per muscle
    rest_lengths: np.ndarray = field(init=False)

    def __post_init__(self):
        self.rest_lengths = np.array([curve_length(c) for c in self.curve_rest])

    @property
    def num_shapes(self) -> int:
        return len(self.shape_names)

    def activation_curve(self, muscle_index: int, muscle: Muscle) -> ActivationCurve:
        return ActivationCurve(rest_length=float(self.rest_lengths[muscle_index]),
                               shortening=muscle.shortening,
                               smoothing=muscle.smoothing)


def morph_fields(mesh: TetMesh, laplacian: VolumetricLaplacian, rig: Rig) -> np.ndarray:
    """Harmonic volumetric extension of every blendshape delta, shape (K, V, 3).

    Dirichlet data is the pre-skinning surface delta carried onto the outer
    boundary through the one-to-one surface binding; every non-Dirichlet
    vertex (interior and attachment side) gets the natural condition. The
    map is linear in the shape deltas and one factorized solve handles all
    shapes and coordinates at once.
    """
    k = rig.blendshapes.num_shapes
    nv = mesh.num_vertices
    pos = laplacian.position_of(mesh.boundary_vertices)
    fields = np.zeros((k, nv, 3))
    if k == 0:
        return fields
    data = np.zeros((len(laplacian.constrained), 3 * k))
    for s in range(k):
        data[pos, 3 * s: 3 * s + 3] = rig.blendshapes.deltas[s]
    interior = geometry.solve_poisson(laplacian, data)
    for s in range(k):
        fields[s, laplacian.constrained] = data[:, 3 * s: 3 * s + 3]
        fields[s, laplacian.unconstrained] = interior[:, 3 * s: 3 * s + 3]
    return fields


def volumetric_skin_weights(mesh: TetMesh, laplacian: VolumetricLaplacian,
                            rig: Rig) -> np.ndarray:
    """Diffuse the surface skin weights through the flesh volume, shape (V,)."""
    pos = laplacian.position_of(mesh.boundary_vertices)
    data = np.zeros(len(laplacian.constrained))
    data[pos] = rig.skin_weights
    w = np.empty(mesh.num_vertices)
    w[laplacian.constrained] = data
    w[laplacian.unconstrained] = geometry.solve_poisson(laplacian, data)
    # Harmonic interpolation of [0, 1] data obeys the maximum principle up to
    # solver roundoff; clip that roundoff so downstream blend maps stay valid.
    return np.clip(w, 0.0, 1.0)


def precompute_basis(mesh: TetMesh, laplacian: VolumetricLaplacian, rig: Rig,
                     muscles: list[Muscle]) -> PrecomputedMuscleBasis:
    """Build the shape-indexed muscle target and curve basis.

    Solves one Poisson problem per shape (batched on a shared factorization)
    plus one scalar solve for the volumetric skin weights, then samples both
    at each muscle's vertices and embedded curve points.
    """
    if rig.blendshapes.num_vertices != len(mesh.boundary_vertices):
        raise AnatomyError("surface vertex count must match the outer boundary binding")
    fields = morph_fields(mesh, laplacian, rig)
    weights = volumetric_skin_weights(mesh, laplacian, rig)
    k = rig.blendshapes.num_shapes
    muscle_rest, muscle_shapes, muscle_weights = [], [], []
    curve_rest, curve_shapes, curve_weights = [], [], []
    for m in muscles:
        muscle_rest.append(mesh.vertices[m.vertices].copy())
        muscle_shapes.append(fields[:, m.vertices, :].copy()
                             if k else np.zeros((0, len(m.vertices), 3)))
        muscle_weights.append(weights[m.vertices].copy())
        emb = geometry.embedding_matrix(m.curve_embedding, mesh)
        curve_rest.append(emb @ mesh.vertices)
        curve_shapes.append(np.stack([emb @ fields[s] for s in range(k)])
                            if k else np.zeros((0, len(m.curve_rest), 3)))
        # Barycentric interpolation of clipped data can overshoot [0, 1] by
        # roundoff only; clip so the blend maps stay valid.
        curve_weights.append(np.clip(np.asarray(emb @ weights), 0.0, 1.0))
    return PrecomputedMuscleBasis(
        shape_names=list(rig.blendshapes.names), fields=fields,
        vertex_weights=weights, muscle_rest=muscle_rest,
        muscle_shapes=muscle_shapes, muscle_weights=muscle_weights,
        curve_rest=curve_rest, curve_shapes=curve_shapes,
        curve_weights=curve_weights)


def _posed_samples(rest: np.ndarray, shapes: np.ndarray, weights: np.ndarray,
                   jaw: JawJoint, b: np.ndarray, j: np.ndarray) -> np.ndarray:
    pre = rest if len(shapes) == 0 else rest + np.einsum("k,kvi->vi", b, shapes)
    return rig_mod.skin_transform(jaw, weights, pre, j)


def muscle_targets(basis: PrecomputedMuscleBasis, muscle_index: int, jaw: JawJoint,
                   b: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Track target positions M_m(b, j) for one muscle, shape (Nm, 3)."""
    return _posed_samples(basis.muscle_rest[muscle_index],
                          basis.muscle_shapes[muscle_index],
                          basis.muscle_weights[muscle_index], jaw, b, j)


def muscle_curve(basis: PrecomputedMuscleBasis, muscle_index: int, jaw: JawJoint,
                 b: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Posed center-line curve points C_m(b, j) for one muscle, shape (Nc, 3)."""
    return _posed_samples(basis.curve_rest[muscle_index],
                          basis.curve_shapes[muscle_index],
                          basis.curve_weights[muscle_index], jaw, b, j)


def activations_for_pose(basis: PrecomputedMuscleBasis, muscles: list[Muscle],
                         jaw: JawJoint, b: np.ndarray,
                         j: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Activation and slope d(a)/dL of every muscle at a rig pose.

    Independent of the flesh state: lengths come from the precomputed curve
    basis alone, so these are evaluated once before the equilibrium solve.
    """
    acts = np.zeros(len(muscles))
    slopes = np.zeros(len(muscles))
    for i, m in enumerate(muscles):
        length = curve_length(muscle_curve(basis, i, jaw, b, j))
        acts[i], slopes[i] = activation(basis.activation_curve(i, m), length)
    return acts, slopes
