import numpy as np
import numpy.testing as npt
import pytest

from musclecap.anatomy import (
    ActivationCurve,
    AnatomyError,
    Muscle,
    activation,
    activations_for_pose,
    curve_length,
    curve_length_gradient,
    muscle_curve,
    muscle_targets,
    precompute_basis,
)
from musclecap.geometry import solve_poisson


def make_curve(l0=0.05, shortening=0.3, smoothing=None):
    return ActivationCurve(rest_length=l0, shortening=shortening, smoothing=smoothing)


def test_activation_endpoints_are_exact():
    curve = make_curve()
    l0, s = curve.rest_length, curve.shortening
    assert activation(curve, l0) == (0.0, 0.0)
    assert activation(curve, 1.5 * l0) == (0.0, 0.0)
    a, da = activation(curve, (1.0 - s) * l0)
    assert a == 1.0 and da == 0.0
    a, da = activation(curve, 0.5 * (1.0 - s) * l0)
    assert a == 1.0 and da == 0.0


def test_activation_monotone_and_bounded():
    curve = make_curve()
    lengths = np.linspace(0.3 * curve.rest_length, 1.3 * curve.rest_length, 400)
    vals = np.array([activation(curve, l)[0] for l in lengths])
    assert vals.min() >= 0.0 and vals.max() <= 1.0
    # Non-increasing in length.
    assert np.all(np.diff(vals) <= 1e-15)


def test_activation_slope_matches_fd_away_from_corners():
    curve = make_curve()
    l0, s, h = curve.rest_length, curve.shortening, curve.smoothing
    sat = (1.0 - s) * l0
    probes = np.concatenate([
        np.linspace(sat + 3 * h, l0 - 3 * h, 9),   # linear ramp
        np.linspace(1.02 * l0, 1.3 * l0, 3),       # slack
        np.linspace(0.5 * sat, sat - 3 * h, 3),    # saturated
    ])
    # The regions probed are linear or flat, so FD has no truncation error
    # and a generous step keeps roundoff far below the tolerance.
    step = 1e-3 * l0
    for length in probes:
        a, da = activation(curve, length)
        ap = activation(curve, length + step)[0]
        am = activation(curve, length - step)[0]
        assert abs((ap - am) / (2 * step) - da) < 1e-8
        # Value consistency of the returned pair under a small move.
        assert abs(activation(curve, length + step)[0] - (a + da * step)) < 1e-8


def test_activation_is_continuous_at_band_edges():
    curve = make_curve()
    l0, s, h = curve.rest_length, curve.shortening, curve.smoothing
    sat = (1.0 - s) * l0
    eps = 1e-12 * l0
    for edge in (l0, l0 - 2 * h, sat + 2 * h, sat):
        a_lo, da_lo = activation(curve, edge - eps)
        a_hi, da_hi = activation(curve, edge + eps)
        assert abs(a_lo - a_hi) < 1e-9
        assert abs(da_lo - da_hi) < 1e-4 / l0  # C1 up to the probe offset


def test_activation_curve_validates_smoothing_band():
    with pytest.raises(AnatomyError):
        ActivationCurve(rest_length=0.05, shortening=0.3, smoothing=0.01)
    with pytest.raises(AnatomyError):
        ActivationCurve(rest_length=0.05, shortening=0.3, smoothing=0.0)
    with pytest.raises(AnatomyError):
        ActivationCurve(rest_length=-1.0)


def test_curve_length_and_gradient():
    pts = np.array([[0.0, 0.0, 0.0], [0.03, 0.0, 0.0], [0.03, 0.04, 0.0]])
    npt.assert_allclose(curve_length(pts), 0.07, atol=1e-15)
    grad = curve_length_gradient(pts)
    h = 1e-7
    fd = np.zeros_like(grad)
    for v in range(3):
        for axis in range(3):
            plus = pts.copy()
            minus = pts.copy()
            plus[v, axis] += h
            minus[v, axis] -= h
            fd[v, axis] = (curve_length(plus) - curve_length(minus)) / (2 * h)
    npt.assert_allclose(grad, fd, atol=1e-8)


def test_curve_length_gradient_rejects_coincident_points():
    pts = np.zeros((2, 3))
    with pytest.raises(AnatomyError):
        curve_length_gradient(pts)


def test_muscle_validates_inputs():
    tets = np.array([0, 1])
    fibers = np.tile([1.0, 0.0, 0.0], (2, 1))
    curve = np.array([[0.0, 0.0, 0.0], [0.05, 0.0, 0.0]])
    emb = None
    with pytest.raises(AnatomyError):
        Muscle(name="m", tets=tets, fibers=2.0 * fibers, vertices=np.array([0]),
               curve_rest=curve, curve_embedding=emb, k_m=1e4)
    with pytest.raises(AnatomyError):
        Muscle(name="m", tets=tets, fibers=fibers, vertices=np.array([0]),
               curve_rest=curve, curve_embedding=emb, k_m=-1.0)
    with pytest.raises(AnatomyError):
        Muscle(name="m", tets=tets, fibers=fibers, vertices=np.array([0]),
               curve_rest=curve[:1], curve_embedding=emb, k_m=1e4)
    with pytest.raises(AnatomyError):
        Muscle(name="m", tets=tets, fibers=fibers, vertices=np.array([0]),
               curve_rest=curve, curve_embedding=emb, k_m=1e4, shortening=1.5)


def test_morph_fields_superpose_and_vanish_at_attachment(asset, laplacian, basis):
    rng = np.random.default_rng(21)
    b = rng.uniform(-0.5, 0.8, size=basis.num_shapes)
    combo = np.einsum("k,kvi->vi", b, basis.fields)
    # Direct harmonic extension of the combined boundary data.
    surf_delta = np.einsum("k,kvi->vi", b, asset.rig.blendshapes.deltas)
    lap = laplacian
    data = np.zeros((len(lap.constrained), 3))
    top = lap.position_of(asset.mesh.boundary_vertices)
    data[top] = surf_delta
    interior = solve_poisson(lap, data)
    direct = np.zeros_like(combo)
    direct[lap.constrained] = data
    direct[lap.unconstrained] = interior
    assert np.abs(combo - direct).max() < 1e-10
    # Attachment rows are identically zero for every shape.
    assert np.abs(basis.fields[:, asset.mesh.inner_boundary, :]).max() == 0.0


def test_volumetric_skin_weights_interpolate_rig_weights(asset, basis):
    mesh = asset.mesh
    w = basis.vertex_weights
    assert w.min() >= 0.0 and w.max() <= 1.0
    npt.assert_array_equal(w[mesh.boundary_vertices], asset.rig.skin_weights)
    npt.assert_array_equal(w[mesh.inner_boundary], 0.0)


def test_basis_curve_samples_match_rest_geometry(asset, basis):
    for i, m in enumerate(asset.muscles):
        npt.assert_allclose(basis.curve_rest[i], m.curve_rest, atol=1e-9)
        assert abs(basis.rest_lengths[i] - curve_length(m.curve_rest)) < 1e-10


def test_muscle_targets_at_rest_pose_are_rest_positions(asset, basis):
    zeros_b = np.zeros(basis.num_shapes)
    zeros_j = np.zeros(6)
    for i, m in enumerate(asset.muscles):
        targets = muscle_targets(basis, i, asset.rig.jaw, zeros_b, zeros_j)
        npt.assert_allclose(targets, basis.muscle_rest[i], atol=1e-15)


def test_targets_and_curves_affine_in_shape_weights(asset, basis):
    # At a fixed jaw pose the map b -> sample positions is affine, so
    # superposition around the zero-shape value holds to roundoff.
    rng = np.random.default_rng(8)
    j = np.array([0.05, -0.03, 0.02, 0.001, 0.0, -0.002])
    b1 = rng.uniform(-0.4, 0.7, basis.num_shapes)
    b2 = rng.uniform(-0.4, 0.7, basis.num_shapes)
    jaw = asset.rig.jaw
    for i in range(len(asset.muscles)):
        for fn in (muscle_targets, muscle_curve):
            base = fn(basis, i, jaw, np.zeros(basis.num_shapes), j)
            f1 = fn(basis, i, jaw, b1, j) - base
            f2 = fn(basis, i, jaw, b2, j) - base
            f12 = fn(basis, i, jaw, b1 + b2, j) - base
            assert np.abs(f12 - (f1 + f2)).max() < 1e-10


def test_activations_zero_at_rest_pose(asset, basis):
    acts, slopes = activations_for_pose(basis, asset.muscles, asset.rig.jaw,
                                        np.zeros(basis.num_shapes), np.zeros(6))
    npt.assert_array_equal(acts, 0.0)
    npt.assert_array_equal(slopes, 0.0)


def test_precompute_rejects_mismatched_surface(asset, laplacian):
    import dataclasses

    bad_bs = dataclasses.replace(
        asset.rig.blendshapes,
        neutral=asset.rig.blendshapes.neutral[:-1],
        deltas=asset.rig.blendshapes.deltas[:, :-1, :],
    )
    bad_rig = dataclasses.replace(asset.rig, blendshapes=bad_bs,
                                  skin_weights=asset.rig.skin_weights[:-1])
    with pytest.raises(AnatomyError):
        precompute_basis(asset.mesh, laplacian, bad_rig, asset.muscles)
