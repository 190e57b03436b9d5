"""Quasistatic equilibrium of the muscle-tracked flesh mesh.

Solves f_fvm + f_collision + f_tracks = 0 over the unconstrained vertices
with Newton-Raphson and a backtracking line search on the residual norm.
Constrained vertices follow the cranium/jaw skinning kinematically, track
targets and activations are fixed functions of the rig pose evaluated before
the solve, so each Newton system is symmetric and (after projection)
positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import anatomy, material, rig as rig_mod
from .anatomy import Muscle, PrecomputedMuscleBasis
from .geometry import (CollisionProxy, TetMesh, signed_distance,
                       signed_distance_hessian)
from .material import MaterialParams
from .rig import JawJoint


class SolveError(RuntimeError):
    """Raised when the Newton solve cannot reach the force tolerance."""

    def __init__(self, message: str, residual: float, tolerance: float, iterations: int):
        super().__init__(f"{message} (residual {residual:.3e}, tolerance "
                         f"{tolerance:.3e}, after {iterations} iterations)")
        self.residual = residual
        self.tolerance = tolerance
        self.iterations = iterations


@dataclass
class SolveSettings:
    """Newton solver knobs.

    The force tolerance is tolerance_scale times the system's characteristic
    force (mean per-vertex force magnitude under a 1% uniform compression of
    the rest mesh), so it tracks mesh resolution and material stiffness.
    """

    tolerance_scale: float = 1e-6
    max_iterations: int = 50
    max_backtracks: int = 25
    project: bool = True


@dataclass
class FleshSystem:
    """Everything the equilibrium and sensitivity solves need, bound together."""

    mesh: TetMesh
    jaw: JawJoint
    muscles: list[Muscle]
    basis: PrecomputedMuscleBasis
    proxies: list[CollisionProxy] = field(default_factory=list)
    params: MaterialParams = field(default_factory=MaterialParams)
    constrained: np.ndarray | None = None
    _char_force: float | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.constrained is None:
            self.constrained = self.mesh.inner_boundary.copy()
        self.constrained = np.asarray(self.constrained, dtype=np.int64)
        mask = np.zeros(self.mesh.num_vertices, dtype=bool)
        mask[self.constrained] = True
        self.unconstrained = np.nonzero(~mask)[0]

    @property
    def unconstrained_dofs(self) -> np.ndarray:
        return dof_indices(self.unconstrained)

    @property
    def constrained_dofs(self) -> np.ndarray:
        return dof_indices(self.constrained)

    def characteristic_force(self) -> float:
        """Mean per-vertex fvm force magnitude at 1% uniform compression."""
        if self._char_force is None:
            center = self.mesh.vertices.mean(axis=0)
            squeezed = center + 0.99 * (self.mesh.vertices - center)
            f = material.fvm_forces(self.mesh, squeezed, self.muscles,
                                    np.zeros(len(self.muscles)), self.params)
            self._char_force = float(np.linalg.norm(f, axis=1).mean())
        return self._char_force


def dof_indices(vertex_ids: np.ndarray) -> np.ndarray:
    """Flat x/y/z dof indices of the given vertices."""
    ids = np.asarray(vertex_ids, dtype=np.int64)
    return (3 * ids[:, None] + np.arange(3)).reshape(-1)


def constrained_positions(system: FleshSystem, j: np.ndarray) -> np.ndarray:
    """Kinematic positions of the constrained vertices at jaw parameters j.

    The jaw skin transform with the diffused volumetric weights applied to
    the constrained rest positions; at j = 0 this is the rest slice exactly.
    """
    ids = system.constrained
    if len(ids) == 0:
        return np.zeros((0, 3))
    return rig_mod.skin_transform(system.jaw, system.basis.vertex_weights[ids],
                                  system.mesh.vertices[ids], j)


def track_forces(system: FleshSystem, positions: np.ndarray,
                 targets: list[np.ndarray]) -> np.ndarray:
    """Zero-rest-length spring forces k_m (M_m - x) scattered to all vertices."""
    f = np.zeros((system.mesh.num_vertices, 3))
    for m, target in zip(system.muscles, targets):
        f[m.vertices] += m.k_m * (target - positions[m.vertices])
    return f


def collision_forces(system: FleshSystem, positions: np.ndarray) -> np.ndarray:
    """Penalty forces -k_c min(phi, 0) grad(phi) from every proxy."""
    f = np.zeros((system.mesh.num_vertices, 3))
    for proxy in system.proxies:
        phi, grad = signed_distance(proxy, positions)
        pen = np.minimum(phi, 0.0)
        f -= proxy.stiffness * pen[:, None] * grad
    return f


def total_forces(system: FleshSystem, positions: np.ndarray,
                 activations: np.ndarray, targets: list[np.ndarray]) -> np.ndarray:
    """Sum of fvm, collision, and track forces at fixed activations/targets."""
    f = material.fvm_forces(system.mesh, positions, system.muscles,
                            activations, system.params)
    f += track_forces(system, positions, targets)
    f += collision_forces(system, positions)
    return f


def total_energy(system: FleshSystem, positions: np.ndarray,
                 activations: np.ndarray, targets: list[np.ndarray]) -> float:
    """Potential whose negative gradient (over free vertices) is total_forces."""
    e = material.elastic_energy(system.mesh, positions, system.muscles,
                                activations, system.params)
    for m, target in zip(system.muscles, targets):
        e += 0.5 * m.k_m * float(np.sum((target - positions[m.vertices]) ** 2))
    for proxy in system.proxies:
        phi, _ = signed_distance(proxy, positions)
        e += 0.5 * proxy.stiffness * float(np.sum(np.minimum(phi, 0.0) ** 2))
    return e


def _collision_blocks(system: FleshSystem, positions: np.ndarray,
                      project: bool) -> sp.csr_matrix | None:
    """-d(collision force)/dx as per-vertex 3x3 blocks, optionally PSD-clamped."""
    n = 3 * system.mesh.num_vertices
    blocks = None
    touched = None
    for proxy in system.proxies:
        phi, grad = signed_distance(proxy, positions)
        active = phi < 0.0
        if not active.any():
            continue
        h = signed_distance_hessian(proxy, positions[active])
        outer = grad[active][:, :, None] * grad[active][:, None, :]
        blk = proxy.stiffness * (outer + phi[active][:, None, None] * h)
        if blocks is None:
            blocks = np.zeros((system.mesh.num_vertices, 3, 3))
            touched = np.zeros(system.mesh.num_vertices, dtype=bool)
        blocks[active] += blk
        touched |= active
    if blocks is None:
        return None
    if project:
        w, q = np.linalg.eigh(blocks[touched])
        blocks[touched] = np.einsum("viw,vw,vjw->vij", q, np.maximum(w, 0.0), q)
    ids = np.nonzero(touched)[0]
    dof = dof_indices(ids).reshape(-1, 3)
    rows = np.repeat(dof, 3, axis=1).reshape(-1)
    cols = np.tile(dof, (1, 3)).reshape(-1)
    return sp.coo_matrix((blocks[ids].reshape(-1), (rows, cols)), shape=(n, n)).tocsr()


def assemble_system_matrix(system: FleshSystem, positions: np.ndarray,
                           activations: np.ndarray, project: bool = True) -> sp.csr_matrix:
    """H = -(d total force / d positions) over all vertices, shape (3V, 3V).

    Includes the elastic tangent (eigenvalue-projected per tet when project
    is set), the collision penalty blocks, and the track spring diagonal
    k_m on every member vertex. The same assembly backs the final Newton
    step and the sensitivity solves.
    """
    h = -material.force_jacobian(system.mesh, positions, system.muscles,
                                 activations, system.params, project=project)
    coll = _collision_blocks(system, positions, project)
    if coll is not None:
        h = (h + coll).tocsr()
    n = 3 * system.mesh.num_vertices
    diag = np.zeros(n)
    for m in system.muscles:
        diag[dof_indices(m.vertices)] += m.k_m
    if diag.any():
        h = (h + sp.diags(diag)).tocsr()
    return h


@dataclass
class EquilibriumState:
    """Converged quasistatic state plus the pose data that produced it."""

    positions: np.ndarray           # (V, 3) all vertices, constrained included
    b: np.ndarray
    j: np.ndarray
    activations: np.ndarray         # (M,)
    activation_slopes: np.ndarray   # (M,) d(a)/dL at the posed curve length
    targets: list[np.ndarray]       # per-muscle track targets M_m(b, j)
    curves: list[np.ndarray]        # per-muscle posed center-line points
    curve_lengths: np.ndarray
    iterations: int
    residual_norm: float
    tolerance: float


def pose_inputs(system: FleshSystem, b: np.ndarray, j: np.ndarray):
    """Targets, curves, activations and slopes for a rig pose.

    All of it depends only on (b, j) through the precomputed basis, never on
    the flesh state, which is what lets sensitivities reuse one matrix.
    """
    basis = system.basis
    targets = [anatomy.muscle_targets(basis, i, system.jaw, b, j)
               for i in range(len(system.muscles))]
    curves = [anatomy.muscle_curve(basis, i, system.jaw, b, j)
              for i in range(len(system.muscles))]
    lengths = np.array([anatomy.curve_length(c) for c in curves])
    acts = np.zeros(len(system.muscles))
    slopes = np.zeros(len(system.muscles))
    for i, m in enumerate(system.muscles):
        acts[i], slopes[i] = anatomy.activation(basis.activation_curve(i, m),
                                                float(lengths[i]))
    return targets, curves, lengths, acts, slopes


def solve_equilibrium(system: FleshSystem, b: np.ndarray, j: np.ndarray,
                      settings: SolveSettings | None = None,
                      warm_start: np.ndarray | EquilibriumState | None = None) -> EquilibriumState:
    """Newton solve of the quasistatic force balance at a rig pose.

    Parameters
    ----------
    system : FleshSystem
    b, j : shape weights and jaw parameters
    settings : SolveSettings, optional
    warm_start : prior positions or state, optional
        Unconstrained rows seed the iteration; constrained rows are always
        re-skinned from j.

    Returns
    -------
    EquilibriumState. A state whose initial residual is already below
    tolerance reports zero iterations.

    Raises
    ------
    SolveError if the iteration cap is hit or no backtracked step reduces
    the residual.
    """
    settings = settings or SolveSettings()
    b = np.asarray(b, dtype=np.float64)
    j = np.asarray(j, dtype=np.float64)
    if b.shape != (system.basis.num_shapes,):
        raise ValueError(f"expected {system.basis.num_shapes} shape weights, got {b.shape}")
    if j.shape != (6,):
        raise ValueError("expected 6 jaw parameters")

    targets, curves, lengths, acts, slopes = pose_inputs(system, b, j)
    x = system.mesh.vertices.copy()
    if warm_start is not None:
        prev = warm_start.positions if isinstance(warm_start, EquilibriumState) else warm_start
        x[system.unconstrained] = np.asarray(prev, dtype=np.float64)[system.unconstrained]
    if len(system.constrained):
        x[system.constrained] = constrained_positions(system, j)

    tol = settings.tolerance_scale * system.characteristic_force()
    udofs = system.unconstrained_dofs

    def residual(pos):
        return total_forces(system, pos, acts, targets)[system.unconstrained]

    r = residual(x)
    rnorm = float(np.abs(r).max()) if r.size else 0.0
    iterations = 0
    while rnorm >= tol:
        if iterations >= settings.max_iterations:
            raise SolveError("Newton iteration cap reached", rnorm, tol, iterations)
        h = assemble_system_matrix(system, x, acts, project=settings.project)
        huu = h[udofs][:, udofs].tocsc()
        delta = spla.splu(huu).solve(r.reshape(-1)).reshape(-1, 3)
        base = float(np.linalg.norm(r))
        alpha = 1.0
        for _ in range(settings.max_backtracks):
            trial = x.copy()
            trial[system.unconstrained] += alpha * delta
            r_trial = residual(trial)
            if float(np.linalg.norm(r_trial)) < base:
                break
            alpha *= 0.5
        else:
            raise SolveError("line search stagnated", rnorm, tol, iterations)
        x = trial
        r = r_trial
        rnorm = float(np.abs(r).max()) if r.size else 0.0
        iterations += 1

    return EquilibriumState(positions=x, b=b.copy(), j=j.copy(), activations=acts,
                            activation_slopes=slopes, targets=targets, curves=curves,
                            curve_lengths=lengths, iterations=iterations,
                            residual_norm=rnorm, tolerance=tol)
