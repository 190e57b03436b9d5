"""Acceptance gate: ten pipeline-level checks, one verdict line each.

Every check prints `criterion N: PASS|FAIL - detail` so a test log doubles as
the sign-off sheet. The expensive capture solves come from shared session
fixtures, so this module adds mostly finite-difference sweeps on top.
"""

import time

import numpy as np

from conftest import tight_settings
from musclecap.anatomy import activation, muscle_curve, muscle_targets
from musclecap.capture import dogleg_minimize
from musclecap.geometry import deformation_gradients, solve_poisson, vertex_normals
from musclecap.imaging import sh_irradiance
from musclecap.material import (
    MaterialParams,
    elastic_energy,
    force_jacobian,
    fvm_forces,
    stress,
)
from musclecap.quasistatic import solve_equilibrium
from musclecap.rig import euler_xyz, evaluate_surface
from musclecap.sensitivity import full_position_jacobian, solve_sensitivities


def _report(capsys, criterion: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def test_criterion_01_end_to_end_gradients(system, asset, capsys):
    start = time.perf_counter()
    w = asset.truth.w_geometry
    k = system.basis.num_shapes
    settings = tight_settings()
    state = solve_equilibrium(system, w[:k], w[k:], settings=settings)
    block = solve_sensitivities(system, state)
    analytic = full_position_jacobian(system, block)[asset.mesh.boundary_vertices]
    sidx = asset.mesh.boundary_vertices
    h = 1e-6
    worst = 0.0
    for p in range(k + 6):
        wp, wm = w.copy(), w.copy()
        wp[p] += h
        wm[p] -= h
        plus = solve_equilibrium(system, wp[:k], wp[k:], settings=settings,
                                 warm_start=state)
        minus = solve_equilibrium(system, wm[:k], wm[k:], settings=settings,
                                  warm_start=state)
        fd = (plus.positions[sidx] - minus.positions[sidx]) / (2.0 * h)
        rel = np.linalg.norm(analytic[:, :, p] - fd) / max(np.linalg.norm(fd), 1e-30)
        worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 60.0
    _report(capsys, 1, ok,
            f"12 surface-jacobian columns vs FD, worst rel err {worst:.2e} "
            f"(tol 1e-3) in {elapsed:.1f} s (limit 60)")


def test_criterion_02_morph_linearity_and_pose_affinity(asset, laplacian, basis,
                                                        capsys):
    rng = np.random.default_rng(42)
    b = rng.uniform(-0.5, 0.8, basis.num_shapes)
    combo = np.einsum("k,kvi->vi", b, basis.fields)
    surf_delta = np.einsum("k,kvi->vi", b, asset.rig.blendshapes.deltas)
    data = np.zeros((len(laplacian.constrained), 3))
    data[laplacian.position_of(asset.mesh.boundary_vertices)] = surf_delta
    direct = np.zeros_like(combo)
    direct[laplacian.constrained] = data
    direct[laplacian.unconstrained] = solve_poisson(laplacian, data)
    morph_err = float(np.abs(combo - direct).max())

    j = np.array([0.05, -0.03, 0.02, 0.001, 0.0, -0.002])
    b1 = rng.uniform(-0.4, 0.7, basis.num_shapes)
    b2 = rng.uniform(-0.4, 0.7, basis.num_shapes)
    affine_err = 0.0
    for i in range(len(asset.muscles)):
        for fn in (muscle_targets, muscle_curve):
            base = fn(basis, i, asset.rig.jaw, np.zeros(basis.num_shapes), j)
            f1 = fn(basis, i, asset.rig.jaw, b1, j) - base
            f2 = fn(basis, i, asset.rig.jaw, b2, j) - base
            f12 = fn(basis, i, asset.rig.jaw, b1 + b2, j) - base
            affine_err = max(affine_err, float(np.abs(f12 - (f1 + f2)).max()))
    ok = morph_err < 1e-10 and affine_err < 1e-10
    _report(capsys, 2, ok,
            f"morph superposition err {morph_err:.2e}, pose affinity err "
            f"{affine_err:.2e} (tol 1e-10)")


def test_criterion_03_rest_equilibrium(system, capsys):
    k = system.basis.num_shapes
    state = solve_equilibrium(system, np.zeros(k), np.zeros(6))
    ok = state.iterations == 0 and state.residual_norm <= state.tolerance
    _report(capsys, 3, ok,
            f"rest pose: {state.iterations} Newton iterations, residual "
            f"{state.residual_norm:.2e} <= tolerance {state.tolerance:.2e}")


def test_criterion_04_force_energy_consistency(asset, capsys):
    mesh = asset.mesh
    muscles = asset.muscles
    acts = np.array([0.5, 0.3, 0.7])[:len(muscles)]
    rng = np.random.default_rng(11)
    pos = mesh.vertices + 0.0006 * rng.standard_normal(mesh.vertices.shape)
    sv = np.linalg.svd(deformation_gradients(mesh, pos), compute_uv=False)
    assert sv.min() > 2 * MaterialParams().clamp_sv  # state precondition

    forces = fvm_forces(mesh, pos, muscles, acts)
    h = 1e-7
    fd_f = np.zeros_like(forces)
    for v in range(mesh.num_vertices):
        for axis in range(3):
            plus, minus = pos.copy(), pos.copy()
            plus[v, axis] += h
            minus[v, axis] -= h
            fd_f[v, axis] = -(elastic_energy(mesh, plus, muscles, acts)
                              - elastic_energy(mesh, minus, muscles, acts)) / (2 * h)
    force_err = float(np.abs(forces - fd_f).max() / np.abs(forces).max())

    jac = force_jacobian(mesh, pos, muscles, acts, project=False).toarray()
    fd_j = np.zeros_like(jac)
    for v in range(mesh.num_vertices):
        for axis in range(3):
            plus, minus = pos.copy(), pos.copy()
            plus[v, axis] += h
            minus[v, axis] -= h
            col = (fvm_forces(mesh, plus, muscles, acts)
                   - fvm_forces(mesh, minus, muscles, acts)) / (2 * h)
            fd_j[:, 3 * v + axis] = col.reshape(-1)
    jac_err = float(np.linalg.norm(jac - fd_j) / np.linalg.norm(fd_j))

    net = float(np.linalg.norm(forces.sum(axis=0)) / np.abs(forces).max())
    ok = force_err < 1e-5 and jac_err < 1e-4 and net < 1e-9
    _report(capsys, 4, ok,
            f"forces vs -FD(energy) {force_err:.2e} (tol 1e-5), jacobian vs "
            f"FD(forces) {jac_err:.2e} (tol 1e-4), force sum {net:.2e} (tol 1e-9)")


def test_criterion_05_constitutive_properties(capsys):
    params = MaterialParams()
    fiber = np.array([1.0, 0.0, 0.0])
    rest_err = max(float(np.abs(stress(params, np.eye(3)).P).max()),
                   float(np.abs(stress(params, np.eye(3), fiber=fiber,
                                       activation=0.0).P).max()))

    rng = np.random.default_rng(9)
    linear_err = 0.0
    objectivity_err = 0.0
    for _ in range(5):
        f = np.eye(3) + 0.15 * rng.standard_normal((3, 3))
        base = stress(params, f, fiber=fiber, activation=0.0)
        unit = stress(params, f, fiber=fiber, activation=1.0).active_unit
        for a in (0.2, 0.55, 1.0):
            p = stress(params, f, fiber=fiber, activation=a).P
            expected = base.P + a * unit
            linear_err = max(linear_err,
                             float(np.abs(p - expected).max()
                                   / max(np.abs(expected).max(), 1.0)))
        rot = euler_xyz(rng.uniform(-1.0, 1.0, 3))
        p_rot = stress(params, rot @ f, fiber=fiber, activation=0.55).P
        p_ref = rot @ stress(params, f, fiber=fiber, activation=0.55).P
        objectivity_err = max(objectivity_err,
                              float(np.abs(p_rot - p_ref).max()
                                    / np.abs(p_ref).max()))
    ok = rest_err < 1e-12 and linear_err < 1e-12 and objectivity_err < 1e-10
    _report(capsys, 5, ok,
            f"P(I,0) {rest_err:.2e} (tol 1e-12), active linearity "
            f"{linear_err:.2e} (tol 1e-12), objectivity {objectivity_err:.2e} "
            f"(tol 1e-10)")


def test_criterion_06_geometry_round_trip(asset, sim_roundtrip, bbox_diag, capsys):
    fit = sim_roundtrip["fit"]
    rigid = sim_roundtrip["rigid_fit"]
    rigid_err = max(float(np.abs(rigid.theta - asset.truth.theta).max()),
                    float(np.abs(rigid.t - asset.truth.t).max()))
    pose_norm = float(np.linalg.norm(rigid.w))
    ok = (fit.rmse < 1e-3 * bbox_diag and rigid_err < 1e-4 and pose_norm < 1e-3)
    _report(capsys, 6, ok,
            f"posed round-trip RMSE {fit.rmse:.2e} (tol {1e-3 * bbox_diag:.2e}), "
            f"rigid recovery err {rigid_err:.2e} (tol 1e-4) with pose norm "
            f"{pose_norm:.2e} (tol 1e-3)")


def test_criterion_07_volume_preservation(pucker_fits, capsys):
    sim_change = pucker_fits["sim"].volume.total_change
    bs_change = pucker_fits["bs"].volume.total_change
    ok = abs(sim_change) < abs(bs_change)
    _report(capsys, 7, ok,
            f"pucker volume change: simulation {sim_change:.3e} vs blendshape "
            f"{bs_change:.3e} (direction asserted, magnitudes diagnostic)")


def test_criterion_08_image_round_trips(asset, image_bundle, bbox_diag, capsys):
    lighting_fit = image_bundle["lighting_fit"]
    normals = vertex_normals(asset.surface)
    fitted_shade = lighting_fit.albedo * sh_irradiance(lighting_fit.gamma,
                                                       normals)[:, None]
    true_shade = asset.truth.albedo * sh_irradiance(asset.truth.gamma,
                                                    normals)[:, None]
    light_rms = float(np.sqrt(np.mean((fitted_shade - true_shade) ** 2)))

    fit = image_bundle["fit"]
    points, _ = image_bundle["deformer"].evaluate(fit.w)
    posed_truth = evaluate_surface(asset.rig, asset.truth.w_image)
    surf_rmse = float(np.sqrt(np.mean(np.sum((points - posed_truth) ** 2, axis=1))))

    collapse = image_bundle["collapse"]
    collapse_gap = float(np.linalg.norm(collapse.w - collapse.w_initial))

    ok = (light_rms < 1e-3 and surf_rmse < 1e-2 * bbox_diag
          and collapse_gap < 1e-6)
    _report(capsys, 8, ok,
            f"lighting RMS {light_rms:.2e} (tol 1e-3), image-fit surface RMSE "
            f"{surf_rmse:.2e} (tol {1e-2 * bbox_diag:.2e}), prior collapse gap "
            f"{collapse_gap:.2e} (tol 1e-6)")


def test_criterion_09_dogleg_solver(sim_roundtrip, pucker_fits, image_bundle,
                                    capsys):
    rng = np.random.default_rng(1)
    a = rng.standard_normal((40, 8)) + 3.0 * np.eye(40, 8)
    b = rng.standard_normal(40)
    x_star = np.linalg.solve(a.T @ a, a.T @ b)
    x, lsq_report = dogleg_minimize(lambda x: (a @ x - b, a), np.zeros(8))
    lsq_err = float(np.abs(x - x_star).max())

    def rosenbrock(x):
        res = np.array([1.0 - x[0], 10.0 * (x[1] - x[0] ** 2)])
        jac = np.array([[-1.0, 0.0], [-20.0 * x[0], 10.0]])
        return res, jac

    x_r, rosen_report = dogleg_minimize(rosenbrock, np.array([-1.2, 1.0]))
    rosen_err = float(np.abs(x_r - 1.0).max())

    reports = [lsq_report, rosen_report,
               sim_roundtrip["fit"].report, sim_roundtrip["rigid_fit"].report,
               pucker_fits["sim"].report, pucker_fits["bs"].report,
               image_bundle["lighting_fit"].report]
    reports += image_bundle["fit"].stage_reports
    reports += image_bundle["collapse"].stage_reports
    monotone = all(
        np.all(np.diff(r.costs) <= 1e-12 * max(r.costs[0], 1.0)) for r in reports)
    ok = lsq_err < 1e-8 and rosen_err < 1e-6 and monotone
    _report(capsys, 9, ok,
            f"linear LSQ vs normal equations {lsq_err:.2e} (tol 1e-8), "
            f"Rosenbrock {rosen_err:.2e} (tol 1e-6), costs monotone over "
            f"{len(reports)} runs: {monotone}")


def test_criterion_10_activation_contract(asset, basis, laplacian, system,
                                          sim_roundtrip, pucker_fits, capsys):
    acts = np.concatenate([sim_roundtrip["fit"].activations,
                           pucker_fits["sim"].activations])
    in_bounds = bool(acts.min() >= 0.0 and acts.max() <= 1.0)

    curve = basis.activation_curve(0, asset.muscles[0])
    l0, s, hband = curve.rest_length, curve.shortening, curve.smoothing
    sat = (1.0 - s) * l0
    probes = np.concatenate([
        np.linspace(sat + 3 * hband, l0 - 3 * hband, 9),
        np.linspace(1.02 * l0, 1.3 * l0, 3),
        np.linspace(0.5 * sat, sat - 3 * hband, 3),
    ])
    step = 1e-3 * l0
    fd_err = 0.0
    for length in probes:
        _, da = activation(curve, length)
        ap = activation(curve, length + step)[0]
        am = activation(curve, length - step)[0]
        fd_err = max(fd_err, abs((ap - am) / (2 * step) - da))

    import dataclasses

    from musclecap.anatomy import precompute_basis
    from musclecap.quasistatic import FleshSystem
    from musclecap.rig import Blendshapes

    bs = asset.rig.blendshapes
    padded = Blendshapes(
        neutral=bs.neutral,
        deltas=np.concatenate([bs.deltas, np.zeros_like(bs.deltas[:1])]),
        names=list(bs.names) + ["null"])
    rig = dataclasses.replace(asset.rig, blendshapes=padded)
    null_basis = precompute_basis(asset.mesh, laplacian, rig, asset.muscles)
    null_system = FleshSystem(mesh=asset.mesh, jaw=rig.jaw, muscles=asset.muscles,
                              basis=null_basis, proxies=asset.proxies)
    k = basis.num_shapes
    b = np.concatenate([asset.truth.w_geometry[:k], [0.7]])
    state = solve_equilibrium(null_system, b, asset.truth.w_geometry[k:],
                              settings=tight_settings())
    block = solve_sensitivities(null_system, state)
    null_col_max = float(np.abs(block.matrix[:, k]).max())

    ok = in_bounds and fd_err < 1e-8 and null_col_max == 0.0
    _report(capsys, 10, ok,
            f"{len(acts)} fitted activations in [{acts.min():.3f}, "
            f"{acts.max():.3f}], curve slope FD err {fd_err:.2e} (tol 1e-8), "
            f"zero-delta sensitivity column max {null_col_max:.1e} (exact 0)")
