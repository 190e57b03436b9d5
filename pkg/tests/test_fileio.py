"""Round trips for every on-disk format; hashes and result payloads."""

import json

import numpy as np
import numpy.testing as npt
import pytest

from musclecap import fileio
from musclecap.capture import BlendshapeDeformer, fit_geometry
from musclecap.rig import evaluate_surface


def test_obj_round_trip_exact(tmp_path):
    rng = np.random.default_rng(3)
    verts = rng.standard_normal((17, 3))
    faces = rng.integers(0, 17, size=(9, 3))
    path = tmp_path / "plain.obj"
    fileio.write_obj(path, verts, faces)
    back_v, back_f, back_c = fileio.read_obj(path)
    npt.assert_array_equal(back_v, verts)
    npt.assert_array_equal(back_f, faces)
    assert back_c is None


def test_obj_round_trip_with_colors(tmp_path):
    rng = np.random.default_rng(4)
    verts = rng.standard_normal((11, 3))
    faces = rng.integers(0, 11, size=(6, 3))
    colors = rng.random((11, 3))
    path = tmp_path / "colored.obj"
    fileio.write_obj(path, verts, faces, colors=colors)
    back_v, back_f, back_c = fileio.read_obj(path)
    npt.assert_array_equal(back_v, verts)
    npt.assert_array_equal(back_f, faces)
    npt.assert_array_equal(back_c, colors)


def test_obj_without_vertices_rejected(tmp_path):
    path = tmp_path / "empty.obj"
    path.write_text("# nothing here\n")
    with pytest.raises(fileio.FileFormatError):
        fileio.read_obj(path)


def test_image_round_trip_quantization(tmp_path):
    rng = np.random.default_rng(5)
    img = rng.random((12, 10, 3))
    path = tmp_path / "img.png"
    fileio.save_image(path, img)
    back = fileio.load_image(path)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 255.0 + 1e-12


def test_image_values_clipped(tmp_path):
    img = np.array([[[-0.2, 0.5, 1.7]]])
    path = tmp_path / "clip.png"
    fileio.save_image(path, img)
    back = fileio.load_image(path)
    npt.assert_allclose(back[0, 0], [0.0, 0.5, 1.0], atol=0.5 / 255.0)


def test_asset_round_trip(tmp_path, asset):
    out = tmp_path / "asset"
    fileio.save_asset(out, asset)
    back = fileio.load_asset(out)

    npt.assert_array_equal(back.mesh.vertices, asset.mesh.vertices)
    npt.assert_array_equal(back.mesh.tets, asset.mesh.tets)
    npt.assert_array_equal(back.mesh.boundary_vertices, asset.mesh.boundary_vertices)
    npt.assert_array_equal(back.mesh.inner_boundary, asset.mesh.inner_boundary)
    npt.assert_array_equal(back.surface.vertices, asset.surface.vertices)
    npt.assert_array_equal(back.surface.triangles, asset.surface.triangles)
    npt.assert_array_equal(back.rig.blendshapes.neutral, asset.rig.blendshapes.neutral)
    npt.assert_array_equal(back.rig.blendshapes.deltas, asset.rig.blendshapes.deltas)
    assert back.rig.blendshapes.names == asset.rig.blendshapes.names
    npt.assert_array_equal(back.rig.jaw.pivot, asset.rig.jaw.pivot)
    npt.assert_array_equal(back.rig.skin_weights, asset.rig.skin_weights)

    assert len(back.muscles) == len(asset.muscles)
    for m_b, m_a in zip(back.muscles, asset.muscles):
        assert m_b.name == m_a.name and m_b.k_m == m_a.k_m
        npt.assert_array_equal(m_b.tets, m_a.tets)
        npt.assert_array_equal(m_b.fibers, m_a.fibers)
        npt.assert_array_equal(m_b.curve_rest, m_a.curve_rest)
        npt.assert_array_equal(m_b.curve_embedding.tet_indices,
                               m_a.curve_embedding.tet_indices)
        npt.assert_array_equal(m_b.curve_embedding.weights,
                               m_a.curve_embedding.weights)

    assert len(back.proxies) == len(asset.proxies)
    assert back.camera.fx == asset.camera.fx
    assert back.camera.width == asset.camera.width
    npt.assert_array_equal(back.camera.rotation, asset.camera.rotation)
    npt.assert_array_equal(back.camera.translation, asset.camera.translation)
    npt.assert_array_equal(back.roto.triangles, asset.roto.triangles)
    npt.assert_array_equal(back.roto.barycentric, asset.roto.barycentric)
    npt.assert_array_equal(back.roto.targets, asset.roto.targets)
    npt.assert_array_equal(back.truth.w_geometry, asset.truth.w_geometry)
    npt.assert_array_equal(back.truth.gamma, asset.truth.gamma)
    npt.assert_array_equal(back.lip_tets, asset.lip_tets)
    npt.assert_array_equal(back.lip_vertices, asset.lip_vertices)

    # Plates go through 8-bit PNG, everything else is lossless.
    assert set(back.plates) == set(asset.plates)
    for name in asset.plates:
        assert np.max(np.abs(back.plates[name] - asset.plates[name])) \
            <= 0.5 / 255.0 + 1e-12


def test_load_asset_rejects_non_asset_dir(tmp_path):
    with pytest.raises(fileio.FileFormatError):
        fileio.load_asset(tmp_path)


def test_basis_round_trip(tmp_path, basis):
    path = tmp_path / "basis.npz"
    fileio.save_basis(path, basis)
    back = fileio.load_basis(path)
    assert back.shape_names == basis.shape_names
    npt.assert_array_equal(back.fields, basis.fields)
    npt.assert_array_equal(back.vertex_weights, basis.vertex_weights)
    assert len(back.muscle_rest) == len(basis.muscle_rest)
    for i in range(len(basis.muscle_rest)):
        npt.assert_array_equal(back.muscle_rest[i], basis.muscle_rest[i])
        npt.assert_array_equal(back.muscle_shapes[i], basis.muscle_shapes[i])
        npt.assert_array_equal(back.muscle_weights[i], basis.muscle_weights[i])
        npt.assert_array_equal(back.curve_rest[i], basis.curve_rest[i])
        npt.assert_array_equal(back.curve_shapes[i], basis.curve_shapes[i])
        npt.assert_array_equal(back.curve_weights[i], basis.curve_weights[i])


def test_missing_basis_rejected(tmp_path):
    with pytest.raises(fileio.FileFormatError):
        fileio.load_basis(tmp_path / "nope.npz")


def test_asset_hash_stable_and_sensitive(tmp_path, asset):
    dir_a = tmp_path / "a"
    dir_b = tmp_path / "b"
    fileio.save_asset(dir_a, asset)
    fileio.save_asset(dir_b, asset)
    hash_a = fileio.asset_hash(dir_a)
    assert hash_a == fileio.asset_hash(dir_b)

    truth_path = dir_b / "truth.json"
    payload = fileio.load_json(truth_path)
    payload["theta"][0] += 1.0
    fileio.save_json(truth_path, payload)
    assert fileio.asset_hash(dir_b) != hash_a


def test_asset_hash_ignores_basis_cache(tmp_path, asset):
    out = tmp_path / "asset"
    fileio.save_asset(out, asset)
    before = fileio.asset_hash(out)
    (out / "basis.npz").write_bytes(b"cache bytes")
    assert fileio.asset_hash(out) == before


def test_fit_result_payload_serializes(asset, basis):
    deformer = BlendshapeDeformer(asset.rig, mesh=asset.mesh, basis=basis,
                                  lip_tets=asset.lip_tets)
    target = evaluate_surface(asset.rig, np.zeros_like(asset.truth.w_geometry))
    fit = fit_geometry(target, deformer)
    payload = fileio.fit_result_payload(fit)
    text = json.dumps(payload)
    back = json.loads(text)
    assert back["w"] == list(np.asarray(fit.w))
    assert back["rmse"] == fit.rmse
    assert back["report"]["iterations"] == fit.report.iterations
    assert "term_norms" in back and "volume" in back
