"""Analytic sensitivities of the quasistatic equilibrium to rig parameters.

Differentiating the force balance at a converged state gives one linear
system per parameter with a shared coefficient matrix: the same track-
augmented stiffness as the final Newton step. The right-hand sides collect
how each parameter moves the track targets, the activations (through the
center-line length), and the kinematically constrained vertices. Columns are
independent, so one factorization solves them all in a single batched call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from . import anatomy, material, rig as rig_mod
from .quasistatic import EquilibriumState, FleshSystem, assemble_system_matrix, dof_indices


class SensitivityError(RuntimeError):
    """Raised when a sensitivity solve is requested off an unconverged state."""


@dataclass
class SensitivityBlock:
    """d(unconstrained positions)/d(parameter) columns at one equilibrium.

    matrix has shape (3 |X_U|, len(indices)): by default every shape weight
    column followed by the six jaw parameters. Rows follow the unconstrained
    vertex ordering of the system that produced it. state is the
    linearization point.
    """

    matrix: np.ndarray
    param_names: list[str]
    indices: np.ndarray
    state: EquilibriumState

    @property
    def num_params(self) -> int:
        return self.matrix.shape[1]


def _target_param_jacobians(system: FleshSystem, state: EquilibriumState):
    """d(M_m)/d(b, j) and d(C_m)/d(b, j) per muscle from the precomputed basis."""
    basis = system.basis
    dm, dc = [], []
    for i in range(len(system.muscles)):
        dm.append(rig_mod.point_param_jacobian(
            system.jaw, basis.muscle_weights[i], basis.muscle_rest[i],
            basis.muscle_shapes[i], state.b, state.j))
        dc.append(rig_mod.point_param_jacobian(
            system.jaw, basis.curve_weights[i], basis.curve_rest[i],
            basis.curve_shapes[i], state.b, state.j))
    return dm, dc


def constrained_param_jacobian(system: FleshSystem, state: EquilibriumState) -> np.ndarray:
    """d(X_C)/d(b, j), shape (C, 3, K + 6); shape columns are exactly zero."""
    k = system.basis.num_shapes
    ids = system.constrained
    out = np.zeros((len(ids), 3, k + 6))
    if len(ids):
        out[:, :, k:] = rig_mod.point_jaw_jacobian(
            system.jaw, state.j, system.basis.vertex_weights[ids],
            system.mesh.vertices[ids])
    return out


def _rhs_columns(system: FleshSystem, state: EquilibriumState, h, indices: np.ndarray) -> np.ndarray:
    """Right-hand sides of H dX_U/dp = rhs for the requested parameter indices.

    Three contributions per column: track targets moving (k_m dM/dp on member
    rows), activations changing through the curve length (unit active force
    times da/dL dL/dp), and constrained vertices moving (cross-stiffness
    -H_UC dX_C/dp, non-zero for jaw parameters only).
    """
    udofs = system.unconstrained_dofs
    nu = len(udofs)
    k = system.basis.num_shapes
    rhs = np.zeros((nu, len(indices)))
    dm, dc = _target_param_jacobians(system, state)

    upos = np.full(system.mesh.num_vertices, -1, dtype=np.int64)
    upos[system.unconstrained] = np.arange(len(system.unconstrained))

    for mi, m in enumerate(system.muscles):
        # Track term: k_m dM/dp scattered to the muscle's unconstrained rows.
        local = upos[m.vertices]
        keep = local >= 0
        rows = (3 * local[keep][:, None] + np.arange(3)).reshape(-1)
        rhs[rows] += m.k_m * dm[mi][keep][:, :, indices].reshape(len(rows), -1)
        # Activation term: f_a (da/dL) (dL/dC . dC/dp).
        slope = state.activation_slopes[mi]
        if slope != 0.0:
            dl_dc = anatomy.curve_length_gradient(state.curves[mi])
            dl_dp = np.einsum("ci,cip->p", dl_dc, dc[mi][:, :, indices])
            fa = material.active_unit_forces(system.mesh, state.positions, m,
                                             system.params)
            rhs += np.outer(fa[system.unconstrained].reshape(-1), slope * dl_dp)

    if len(system.constrained):
        dxc = constrained_param_jacobian(system, state)[:, :, indices]
        huc = h[udofs][:, system.constrained_dofs]
        rhs -= huc @ dxc.reshape(-1, len(indices))
    return rhs


def rhs_for_parameter(system: FleshSystem, state: EquilibriumState, index: int,
                      h=None) -> np.ndarray:
    """Right-hand side column for one parameter (0..K-1 shapes, K..K+5 jaw)."""
    if h is None:
        h = assemble_system_matrix(system, state.positions, state.activations,
                                   project=False)
    return _rhs_columns(system, state, h, np.array([index]))[:, 0]


def solve_sensitivities(system: FleshSystem, state: EquilibriumState,
                        indices: np.ndarray | None = None) -> SensitivityBlock:
    """Solve all requested sensitivity columns on one factorization.

    The coefficient matrix is assembled at the converged state without the
    definiteness projection: a stable equilibrium makes it positive definite
    already, and the unprojected matrix is the exact linearization the
    finite-difference checks converge to.
    """
    k = system.basis.num_shapes
    names = [f"b:{n}" for n in system.basis.shape_names] + \
            [f"j:{n}" for n in ("rx", "ry", "rz", "tx", "ty", "tz")]
    if indices is None:
        indices = np.arange(k + 6)
    indices = np.asarray(indices, dtype=np.int64)
    if state.residual_norm >= state.tolerance:
        raise SensitivityError("sensitivities require a converged equilibrium")
    h = assemble_system_matrix(system, state.positions, state.activations,
                               project=False)
    udofs = system.unconstrained_dofs
    huu = h[udofs][:, udofs].tocsc()
    rhs = _rhs_columns(system, state, h, indices)
    lu = spla.splu(huu)
    cols = lu.solve(rhs) if rhs.size else rhs
    if cols.ndim == 1:
        cols = cols[:, None]
    return SensitivityBlock(matrix=cols, param_names=[names[i] for i in indices],
                            indices=indices, state=state)


def full_position_jacobian(system: FleshSystem, block: SensitivityBlock) -> np.ndarray:
    """d(all positions)/d(b, j), shape (V, 3, K + 6).

    Unconstrained rows come from the solved block; constrained rows are the
    analytic skinning derivatives (zero for shape weights).
    """
    nv = system.mesh.num_vertices
    out = np.zeros((nv, 3, block.num_params))
    out[system.unconstrained] = block.matrix.reshape(len(system.unconstrained), 3, -1)
    if len(system.constrained):
        dxc = constrained_param_jacobian(system, block.state)
        out[system.constrained] = dxc[:, :, block.indices]
    return out


def chain_to_observables(points: np.ndarray, point_param_jac: np.ndarray,
                         theta: np.ndarray, t: np.ndarray,
                         control_jacobian: np.ndarray | None = None) -> np.ndarray:
    """Jacobian of rigidly posed observable points x_R = R(theta) x + t.

    Parameters
    ----------
    points : (P, 3) observable points before the rigid transform
    point_param_jac : (P, 3, Q) their Jacobian with respect to rig parameters
    theta, t : rigid pose (intrinsic XYZ Euler radians, translation)
    control_jacobian : optional (Q, W) map from animator controls

    Returns
    -------
    (3 P, W + 6) array: control columns first, then d/d(theta), then d/d(t).
    With identity controls and identity rigid pose the control block is the
    input Jacobian unchanged.
    """
    points = np.asarray(points, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    p = len(points)
    r = rig_mod.euler_xyz(theta)
    dr = rig_mod.euler_xyz_derivatives(theta)
    jac = np.einsum("ab,pbq->paq", r, point_param_jac)
    if control_jacobian is not None:
        jac = np.einsum("paq,qw->paw", jac, control_jacobian)
    out = np.zeros((3 * p, jac.shape[2] + 6))
    out[:, : jac.shape[2]] = jac.reshape(3 * p, -1)
    for i in range(3):
        out[:, jac.shape[2] + i] = (points @ dr[i].T).reshape(-1)
        out[i::3, jac.shape[2] + 3 + i] = 1.0
    return out
