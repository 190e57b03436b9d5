"""Constitutive model and finite volume force assembly for the flesh mesh.

Each tet carries a compressible Mooney-Rivlin base with a logarithmic volume
penalty; tets inside a muscle add a tension-only passive fiber term and an
active fiber stress that is exactly linear in the activation. Forces follow
the finite volume form G = -V0 P inverse(Dm)^T per tet, and the force
Jacobian is assembled from the analytic stress tangent with optional per-tet
eigenvalue clamping so Newton systems stay solvable far from equilibrium.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import TetMesh, deformation_gradients, shape_gradients


class MaterialError(ValueError):
    """Raised for invalid material parameters or evaluation inputs."""


@dataclass
class MaterialParams:
    """Flesh material constants.

    Defaults put the active stress about an order of magnitude above the
    shear moduli so a fully activated desk muscle shortens visibly, while the
    volume penalty keeps deformations near isochoric.
    """

    mu10: float = 30000.0
    mu01: float = 10000.0
    kappa: float = 60000.0
    k_passive: float = 8000.0
    sigma_max: float = 300000.0
    clamp_sv: float = 0.2  # singular values of F never evaluated below this

    def __post_init__(self):
        for name in ("mu10", "mu01", "kappa", "k_passive", "sigma_max", "clamp_sv"):
            if getattr(self, name) <= 0:
                raise MaterialError(f"{name} must be positive")


@dataclass
class StressEval:
    """First Piola-Kirchhoff stress evaluation at one deformation gradient.

    tangent is dP/dF raveled row-major to 9x9 (row 3i+j, column 3k+l) and is
    only filled on request. active_unit is the active stress per unit
    activation, so P depends on the activation a only through + a*active_unit.
    """

    P: np.ndarray
    active_unit: np.ndarray | None = None
    tangent: np.ndarray | None = None


def clamped_gradients(params: MaterialParams, F: np.ndarray) -> np.ndarray:
    """Deformation gradients with singular values clamped at params.clamp_sv.

    Uses the rotation-variant signed SVD so inverted elements are restored to
    a nearby uninverted state. Gradients already above the clamp are returned
    unchanged (bit for bit), which keeps rest-state evaluations exact.
    """
    F = np.asarray(F, dtype=np.float64)
    sv = np.linalg.svd(F, compute_uv=False)
    det = np.linalg.det(F)
    bad = (sv[:, 2] < params.clamp_sv) | (det <= 0)
    if not bad.any():
        return F
    out = F.copy()
    u, s, vt = np.linalg.svd(F[bad])
    flip_u = np.linalg.det(u) < 0
    u[flip_u, :, 2] *= -1.0
    s[flip_u, 2] *= -1.0
    flip_v = np.linalg.det(vt) < 0
    vt[flip_v, 2, :] *= -1.0
    s[flip_v, 2] *= -1.0
    s = np.maximum(s, params.clamp_sv)
    out[bad] = u @ (s[:, :, None] * vt)
    return out


def _log_coeff(params: MaterialParams) -> float:
    # Cancels the Mooney-Rivlin rest stress so F = I is exactly stress free.
    return 2.0 * params.mu10 + 4.0 * params.mu01


def _isovol_stress(params: MaterialParams, F: np.ndarray) -> np.ndarray:
    """Isotropic stress (Mooney-Rivlin + volume penalty) for clamped gradients."""
    C = np.einsum("tpi,tpj->tij", F, F)
    i1 = np.einsum("tii->t", C)
    g = np.linalg.inv(F).transpose(0, 2, 1)
    lnj = np.log(np.linalg.det(F))
    fc = F @ C
    p = 2.0 * params.mu10 * F
    p += 2.0 * params.mu01 * (i1[:, None, None] * F - fc)
    p += (params.kappa * lnj - _log_coeff(params))[:, None, None] * g
    return p


def _fiber_stress(params: MaterialParams, F: np.ndarray, fibers: np.ndarray,
                  activation: float) -> np.ndarray:
    """Passive plus active fiber stress for one muscle's tets."""
    passive, unit = _fiber_stress_parts(params, F, fibers)
    return passive + activation * unit


def _fiber_stress_parts(params: MaterialParams, F: np.ndarray,
                        fibers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = np.einsum("tij,tj->ti", F, fibers)
    lam = np.linalg.norm(m, axis=1)
    lam = np.maximum(lam, 1e-12)
    ma = np.einsum("ti,tj->tij", m, fibers)
    rel = np.maximum(lam - 1.0, 0.0)
    passive = (params.k_passive * rel**2 / lam)[:, None, None] * ma
    unit = (params.sigma_max / lam)[:, None, None] * ma
    return passive, unit


def _isovol_energy(params: MaterialParams, F: np.ndarray) -> np.ndarray:
    C = np.einsum("tpi,tpj->tij", F, F)
    i1 = np.einsum("tii->t", C)
    i2 = 0.5 * (i1**2 - np.einsum("tij,tij->t", C, C))
    lnj = np.log(np.linalg.det(F))
    return (params.mu10 * (i1 - 3.0) + params.mu01 * (i2 - 3.0)
            - _log_coeff(params) * lnj + 0.5 * params.kappa * lnj**2)


def _fiber_energy(params: MaterialParams, F: np.ndarray, fibers: np.ndarray,
                  activation: float) -> np.ndarray:
    lam = np.linalg.norm(np.einsum("tij,tj->ti", F, fibers), axis=1)
    rel = np.maximum(lam - 1.0, 0.0)
    return params.k_passive * rel**3 / 3.0 + params.sigma_max * activation * lam


def stress(params: MaterialParams, F: np.ndarray, fiber: np.ndarray | None = None,
           activation: float = 0.0, with_tangent: bool = False) -> StressEval:
    """Evaluate the constitutive model at a single deformation gradient.

    Parameters
    ----------
    params : MaterialParams
    F : (3, 3) array
        Deformation gradient; singular values are clamped at params.clamp_sv
        before evaluation.
    fiber : (3,) unit array, optional
        Rest fiber direction; enables the passive and active terms.
    activation : float in [0, 1]
    with_tangent : bool
        Also return dP/dF as a 9x9 array.
    """
    F = np.asarray(F, dtype=np.float64).reshape(1, 3, 3)
    if not (0.0 <= activation <= 1.0):
        raise MaterialError(f"activation {activation} outside [0, 1]")
    fc = clamped_gradients(params, F)
    p = _isovol_stress(params, fc)
    unit = None
    if fiber is not None:
        fiber = np.asarray(fiber, dtype=np.float64).reshape(1, 3)
        if not np.isclose(np.linalg.norm(fiber), 1.0, atol=1e-8):
            raise MaterialError("fiber direction must be unit length")
        passive, unit_b = _fiber_stress_parts(params, fc, fiber)
        p = p + passive + activation * unit_b
        unit = unit_b[0]
    tangent = None
    if with_tangent:
        a = _isovol_tangent(params, fc)
        if fiber is not None:
            a += _fiber_tangent(params, fc, fiber, activation)
        tangent = a[0].reshape(9, 9)
    return StressEval(P=p[0], active_unit=unit, tangent=tangent)


def _isovol_tangent(params: MaterialParams, F: np.ndarray) -> np.ndarray:
    """dP/dF of the isotropic terms, shape (T, 3, 3, 3, 3)."""
    t = len(F)
    eye = np.eye(3)
    C = np.einsum("tpi,tpj->tij", F, F)
    Bt = np.einsum("tip,tjp->tij", F, F)
    g = np.linalg.inv(F).transpose(0, 2, 1)
    i1 = np.einsum("tii->t", C)
    lnj = np.log(np.linalg.det(F))
    a = np.zeros((t, 3, 3, 3, 3))
    ikjl = np.einsum("ik,jl->ijkl", eye, eye)
    a += (2.0 * params.mu10 + 2.0 * params.mu01 * i1)[:, None, None, None, None] * ikjl
    a += 4.0 * params.mu01 * np.einsum("tij,tkl->tijkl", F, F)
    a -= 2.0 * params.mu01 * np.einsum("ik,tlj->tijkl", eye, C)
    a -= 2.0 * params.mu01 * np.einsum("til,tkj->tijkl", F, F)
    a -= 2.0 * params.mu01 * np.einsum("tik,jl->tijkl", Bt, eye)
    a += (_log_coeff(params) - params.kappa * lnj)[:, None, None, None, None] \
        * np.einsum("til,tkj->tijkl", g, g)
    a += params.kappa * np.einsum("tij,tkl->tijkl", g, g)
    return a


def _fiber_tangent(params: MaterialParams, F: np.ndarray, fibers: np.ndarray,
                   activation: float | np.ndarray) -> np.ndarray:
    """dP/dF of the fiber terms for one muscle's tets."""
    eye = np.eye(3)
    m = np.einsum("tij,tj->ti", F, fibers)
    lam = np.maximum(np.linalg.norm(m, axis=1), 1e-12)
    ma = np.einsum("ti,tj->tij", m, fibers)
    rel = np.maximum(lam - 1.0, 0.0)
    act = np.broadcast_to(np.asarray(activation, dtype=np.float64), lam.shape)
    # Rank-one structure: coefficients on (m a0^T)(m a0^T) and on dik a0 a0.
    c_outer = params.k_passive * (2.0 * rel * lam - rel**2) / lam**3 \
        - params.sigma_max * act / lam**3
    c_diag = params.k_passive * rel**2 / lam + params.sigma_max * act / lam
    a = c_outer[:, None, None, None, None] * np.einsum("tij,tkl->tijkl", ma, ma)
    a += c_diag[:, None, None, None, None] * np.einsum("ik,tj,tl->tijkl", eye, fibers, fibers)
    return a


def _check_muscle_state(mesh: TetMesh, muscles, activations) -> np.ndarray:
    acts = np.zeros(len(muscles)) if activations is None else \
        np.asarray(activations, dtype=np.float64)
    if len(acts) != len(muscles):
        raise MaterialError("one activation per muscle required")
    if len(acts) and (acts.min() < 0.0 or acts.max() > 1.0):
        raise MaterialError("activations must lie in [0, 1]")
    return acts


def elastic_energy(mesh: TetMesh, positions: np.ndarray, muscles=(),
                   activations=None, params: MaterialParams = None) -> float:
    """Total elastic energy, the potential whose negative gradient is fvm_forces."""
    params = params or MaterialParams()
    acts = _check_muscle_state(mesh, muscles, activations)
    fc = clamped_gradients(params, deformation_gradients(mesh, positions))
    density = _isovol_energy(params, fc)
    for m, a in zip(muscles, acts):
        density[m.tets] += _fiber_energy(params, fc[m.tets], m.fibers, a)
    return float(np.dot(mesh.rest_volumes, density))


def fvm_forces(mesh: TetMesh, positions: np.ndarray, muscles=(),
               activations=None, params: MaterialParams = None) -> np.ndarray:
    """Finite volume nodal forces at the given positions, shape (V, 3).

    Overlapping muscles accumulate their fiber stresses on shared tets; tets
    outside every muscle carry only the isotropic terms. Per-tet nodal forces
    sum to zero, so the assembled forces have zero net sum.
    """
    params = params or MaterialParams()
    acts = _check_muscle_state(mesh, muscles, activations)
    fc = clamped_gradients(params, deformation_gradients(mesh, positions))
    p = _isovol_stress(params, fc)
    for m, a in zip(muscles, acts):
        p[m.tets] += _fiber_stress(params, fc[m.tets], m.fibers, a)
    return _scatter_forces(mesh, p)


def active_unit_forces(mesh: TetMesh, positions: np.ndarray, muscle,
                       params: MaterialParams = None) -> np.ndarray:
    """Force per unit activation of one muscle, d(fvm_forces)/d(activation)."""
    params = params or MaterialParams()
    fc = clamped_gradients(params, deformation_gradients(mesh, positions))
    p = np.zeros((mesh.num_tets, 3, 3))
    _, unit = _fiber_stress_parts(params, fc[muscle.tets], muscle.fibers)
    p[muscle.tets] = unit
    return _scatter_forces(mesh, p)


def _scatter_forces(mesh: TetMesh, p: np.ndarray) -> np.ndarray:
    g = shape_gradients(mesh)
    per_node = -mesh.rest_volumes[:, None, None] * np.einsum("tij,taj->tai", p, g)
    f = np.zeros((mesh.num_vertices, 3))
    np.add.at(f, mesh.tets.reshape(-1), per_node.reshape(-1, 3))
    return f


def force_jacobian(mesh: TetMesh, positions: np.ndarray, muscles=(),
                   activations=None, params: MaterialParams = None,
                   project: bool = True) -> sp.csr_matrix:
    """Sparse Jacobian of fvm_forces with respect to all vertex positions.

    Returns d(force)/d(x) of shape (3V, 3V); it is symmetric because every
    stress term derives from an energy. With project=True each per-tet 12x12
    block has its positive eigenvalues clamped to zero, which makes the
    assembled matrix negative semi-definite for robust Newton steps. Leave
    projection off when the exact linearization is needed.
    """
    params = params or MaterialParams()
    acts = _check_muscle_state(mesh, muscles, activations)
    fc = clamped_gradients(params, deformation_gradients(mesh, positions))
    a = _isovol_tangent(params, fc)
    for m, act in zip(muscles, acts):
        a[m.tets] += _fiber_tangent(params, fc[m.tets], m.fibers, act)
    g = shape_gradients(mesh)
    ke = -np.einsum("t,tijdl,tbj,tal->tbiad", mesh.rest_volumes, a, g, g)
    ke = ke.reshape(mesh.num_tets, 12, 12)
    if project:
        ke = 0.5 * (ke + ke.transpose(0, 2, 1))
        w, q = np.linalg.eigh(ke)
        ke = np.einsum("tiw,tw,tjw->tij", q, np.minimum(w, 0.0), q)
    dof = (3 * mesh.tets[:, :, None] + np.arange(3)[None, None, :]).reshape(-1, 12)
    rows = np.repeat(dof, 12, axis=1).reshape(-1)
    cols = np.tile(dof, (1, 12)).reshape(-1)
    n = 3 * mesh.num_vertices
    return sp.coo_matrix((ke.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()
