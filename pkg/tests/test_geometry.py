import numpy as np
import numpy.testing as npt
import pytest

from musclecap.geometry import (
    HalfSpaceProxy,
    MeshError,
    SphereProxy,
    SurfaceMesh,
    TetMesh,
    assemble_laplacian,
    deformation_gradients,
    embed,
    embedding_matrix,
    grid_slab,
    interpolate,
    shape_gradients,
    signed_distance,
    signed_distance_hessian,
    solve_poisson,
    surface_edges,
    vertex_normal_jacobian,
    vertex_normals,
)


from _meshes import make_grid_surface, make_slab


def test_grid_slab_volume_matches_box():
    extent = (0.12, 0.08, 0.04)
    mesh = make_slab(5, 4, 3, extent)
    assert np.all(mesh.rest_volumes > 0)
    npt.assert_allclose(mesh.total_volume(), np.prod(extent), rtol=1e-12)


def test_grid_slab_rejects_single_layer():
    with pytest.raises(MeshError):
        grid_slab(1, 3, 3, np.array([1.0, 1.0, 1.0]))


def test_mesh_rejects_inverted_tet():
    verts, tets = grid_slab(2, 2, 2, np.array([1.0, 1.0, 1.0]))
    tets = tets.copy()
    tets[0] = tets[0][[0, 2, 1, 3]]
    with pytest.raises(MeshError, match="volume"):
        TetMesh(vertices=verts, tets=tets,
                boundary_vertices=np.array([1]),
                boundary_triangles=np.zeros((0, 3), dtype=np.int64),
                inner_boundary=np.array([0]))


def test_mesh_rejects_overlapping_boundaries():
    verts, tets = grid_slab(2, 2, 2, np.array([1.0, 1.0, 1.0]))
    with pytest.raises(MeshError, match="disjoint"):
        TetMesh(vertices=verts, tets=tets,
                boundary_vertices=np.array([0, 1]),
                boundary_triangles=np.zeros((0, 3), dtype=np.int64),
                inner_boundary=np.array([1]))


def test_mesh_rejects_out_of_range_indices():
    verts, tets = grid_slab(2, 2, 2, np.array([1.0, 1.0, 1.0]))
    with pytest.raises(MeshError):
        TetMesh(vertices=verts, tets=tets,
                boundary_vertices=np.array([99]),
                boundary_triangles=np.zeros((0, 3), dtype=np.int64),
                inner_boundary=np.array([0]))


def test_deformation_gradient_identity_at_rest():
    mesh = make_slab(3, 3, 3, (0.1, 0.1, 0.1))
    f = deformation_gradients(mesh, mesh.vertices)
    npt.assert_allclose(f, np.broadcast_to(np.eye(3), f.shape), atol=1e-13)


def test_deformation_gradient_recovers_linear_map():
    mesh = make_slab(3, 3, 3, (0.1, 0.1, 0.1))
    a = np.array([[1.1, 0.2, 0.0], [0.0, 0.9, 0.1], [0.05, 0.0, 1.2]])
    f = deformation_gradients(mesh, mesh.vertices @ a.T)
    npt.assert_allclose(f, np.broadcast_to(a, f.shape), atol=1e-12)


def test_shape_gradient_rows_sum_to_zero():
    mesh = make_slab(4, 3, 3, (0.12, 0.08, 0.04))
    g = shape_gradients(mesh)
    scale = np.abs(g).max()
    assert np.abs(g.sum(axis=1)).max() < 1e-12 * scale


def test_laplacian_row_sums_vanish_and_interior_block_is_spd():
    mesh = make_slab(4, 3, 3, (0.12, 0.08, 0.04))
    constrained = np.concatenate([mesh.boundary_vertices, mesh.inner_boundary])
    lap = assemble_laplacian(mesh, constrained)
    row_sums = np.asarray(lap.matrix.sum(axis=1)).ravel()
    assert np.abs(row_sums).max() < 1e-12 * np.abs(lap.matrix.data).max()
    w = np.linalg.eigvalsh(lap.a_uu.toarray())
    assert w.min() > 0


def test_harmonic_extension_reproduces_z_linear_fields():
    # Fields linear in z are harmonic, lie in the FE space, and satisfy the
    # natural zero-flux condition on the free side walls, so the Dirichlet
    # solve between top and bottom must reproduce them at interior vertices.
    mesh = make_slab(5, 4, 4, (0.12, 0.08, 0.04))
    constrained = np.concatenate([mesh.boundary_vertices, mesh.inner_boundary])
    lap = assemble_laplacian(mesh, constrained)
    field = mesh.vertices[:, 2:] * np.array([2.0, -4.5]) + np.array([0.7, -0.2])
    interior = solve_poisson(lap, field[lap.constrained])
    npt.assert_allclose(interior, field[lap.unconstrained], rtol=0, atol=1e-10)


def test_harmonic_extension_obeys_maximum_principle():
    mesh = make_slab(5, 4, 4, (0.12, 0.08, 0.04))
    constrained = np.concatenate([mesh.boundary_vertices, mesh.inner_boundary])
    lap = assemble_laplacian(mesh, constrained)
    rng = np.random.default_rng(3)
    data = rng.uniform(-1.0, 2.0, size=len(lap.constrained))
    interior = solve_poisson(lap, data)
    assert interior.min() >= data.min() - 1e-9
    assert interior.max() <= data.max() + 1e-9


def test_stacked_poisson_solve_matches_per_column_exactly():
    mesh = make_slab(4, 4, 3, (0.12, 0.08, 0.04))
    constrained = np.concatenate([mesh.boundary_vertices, mesh.inner_boundary])
    lap = assemble_laplacian(mesh, constrained)
    rng = np.random.default_rng(11)
    data = rng.standard_normal((len(lap.constrained), 5))
    stacked = solve_poisson(lap, data)
    for c in range(5):
        npt.assert_array_equal(stacked[:, c], solve_poisson(lap, data[:, c]))


def test_laplacian_rejects_bad_constrained_sets():
    mesh = make_slab(3, 3, 3, (0.1, 0.1, 0.1))
    with pytest.raises(MeshError, match="non-empty"):
        assemble_laplacian(mesh, np.array([], dtype=np.int64))
    with pytest.raises(MeshError, match="duplicates"):
        assemble_laplacian(mesh, np.array([0, 0]))
    # Vertex 13 is the interior center of the 3x3x3 lattice.
    with pytest.raises(MeshError, match="boundary"):
        assemble_laplacian(mesh, np.array([13]))


def test_embedding_round_trip_is_exact():
    mesh = make_slab(4, 3, 3, (0.12, 0.08, 0.04))
    rng = np.random.default_rng(5)
    pts = rng.uniform(0.01, 0.03, size=(20, 3)) * np.array([3.5, 2.2, 1.1])
    emb = embed(pts, mesh)
    npt.assert_allclose(emb.weights.sum(axis=1), 1.0, atol=1e-12)
    npt.assert_allclose(interpolate(emb, mesh, mesh.vertices), pts, atol=1e-12)


def test_embedding_follows_linear_deformation():
    mesh = make_slab(4, 3, 3, (0.12, 0.08, 0.04))
    pts = np.array([[0.05, 0.03, 0.01], [0.11, 0.07, 0.035]])
    emb = embed(pts, mesh)
    a = np.array([[1.2, 0.1, 0.0], [0.0, 0.8, 0.2], [0.0, 0.0, 1.1]])
    moved = interpolate(emb, mesh, mesh.vertices @ a.T)
    npt.assert_allclose(moved, pts @ a.T, atol=1e-12)


def test_embedding_matrix_matches_interpolate():
    mesh = make_slab(4, 3, 3, (0.12, 0.08, 0.04))
    rng = np.random.default_rng(7)
    pts = rng.uniform(0.005, 0.035, size=(15, 3)) * np.array([3.0, 2.0, 1.0])
    emb = embed(pts, mesh)
    mat = embedding_matrix(emb, mesh)
    pos = mesh.vertices + 0.01 * rng.standard_normal(mesh.vertices.shape)
    npt.assert_allclose(mat @ pos, interpolate(emb, mesh, pos), atol=1e-14)


def test_embedding_rejects_outside_points():
    mesh = make_slab(3, 3, 3, (0.1, 0.1, 0.1))
    with pytest.raises(MeshError, match="outside"):
        embed(np.array([[0.05, 0.05, 0.2]]), mesh)


def test_half_space_signed_distance():
    proxy = HalfSpaceProxy(normal=np.array([0.0, 0.0, 1.0]), offset=-0.01)
    pts = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -0.03]])
    phi, grad = signed_distance(proxy, pts)
    npt.assert_allclose(phi, [0.01, -0.02], atol=1e-15)
    npt.assert_allclose(grad, [[0, 0, 1.0], [0, 0, 1.0]], atol=1e-15)
    npt.assert_allclose(signed_distance_hessian(proxy, pts), 0.0, atol=1e-15)


def test_sphere_signed_distance_derivatives_match_fd():
    proxy = SphereProxy(center=np.array([0.1, -0.2, 0.3]), radius=0.05)
    rng = np.random.default_rng(2)
    pts = proxy.center + rng.uniform(-0.08, 0.08, size=(8, 3))
    phi, grad = signed_distance(proxy, pts)
    npt.assert_allclose(phi, np.linalg.norm(pts - proxy.center, axis=1) - 0.05,
                        atol=1e-14)
    hess = signed_distance_hessian(proxy, pts)
    h = 1e-6
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        phi_p, grad_p = signed_distance(proxy, pts + step)
        phi_m, grad_m = signed_distance(proxy, pts - step)
        npt.assert_allclose((phi_p - phi_m) / (2 * h), grad[:, axis], atol=1e-7)
        npt.assert_allclose((grad_p - grad_m) / (2 * h), hess[:, :, axis], atol=1e-4)


def test_sphere_rejects_nonpositive_radius():
    with pytest.raises(ValueError):
        SphereProxy(center=np.zeros(3), radius=0.0)
    with pytest.raises(ValueError):
        HalfSpaceProxy(normal=np.array([0.0, 0.0, 2.0]), offset=0.0)


def test_vertex_normals_flat_grid_point_up():
    surf = make_grid_surface(4, 0.01, bump=0.0)
    n = vertex_normals(surf)
    npt.assert_allclose(n, np.broadcast_to([0.0, 0.0, 1.0], n.shape), atol=1e-12)


def test_vertex_normal_jacobian_matches_fd():
    surf = make_grid_surface(3, 0.01, bump=0.002)
    jac = vertex_normal_jacobian(surf)
    h = 1e-7
    fd = np.zeros_like(jac)
    for v in range(surf.num_vertices):
        for axis in range(3):
            plus = surf.vertices.copy()
            minus = surf.vertices.copy()
            plus[v, axis] += h
            minus[v, axis] -= h
            fd[:, :, v, axis] = (vertex_normals(surf, plus)
                                 - vertex_normals(surf, minus)) / (2 * h)
    scale = np.abs(jac).max()
    assert np.abs(jac - fd).max() < 1e-5 * scale


def test_surface_edges_unique_and_sorted():
    surf = make_grid_surface(3, 0.01)
    edges = surf.triangles.shape[0]
    e = surface_edges(surf)
    assert np.all(e[:, 0] < e[:, 1])
    assert len(np.unique(e, axis=0)) == len(e)
    # Euler count for a 2x2-cell triangulated disk: 9 verts, 8 tris, 16 edges.
    assert edges == 8 and len(e) == 16
