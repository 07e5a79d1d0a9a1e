import numpy as np
import pytest

from granst.errors import MeshError
from granst.spatial_mesh import (
    element_sizes,
    make_mesh,
    node_adjacency,
    node_spacing,
    read_mesh,
    rect_mesh_from_coords,
    rect_mesh_with_obstacle,
    triangle_areas,
    uniform_rect_mesh,
    write_mesh,
)


def test_uniform_mesh_counts_and_area():
    m = uniform_rect_mesh(2.0, 1.0, 5, 3)
    assert m.n_nodes == 15
    assert m.n_triangles == 16
    assert triangle_areas(m).sum() == pytest.approx(2.0, rel=1e-14)
    assert np.all(triangle_areas(m) > 0)


def test_paper_scale_column_mesh_counts():
    # 276 x 56 grid on 5.5 x 1.1: the a=0.5 production mesh
    m = uniform_rect_mesh(5.5, 1.1, 276, 56)
    assert m.n_nodes == 15456
    assert m.n_triangles == 30250


def test_boundary_tags_complete():
    m = uniform_rect_mesh(1.0, 1.0, 4, 4)
    for tag, expected in (("left", 3), ("right", 3), ("bottom", 3), ("top", 3)):
        assert len(m.facets_with_tag(tag)) == expected


def test_alternating_diagonals():
    m = uniform_rect_mesh(1.0, 1.0, 3, 3)
    # cell (0,0) uses the 00-11 diagonal, cell (1,0) the 10-01 one
    t = {tuple(sorted(tri)) for tri in m.triangles.tolist()}
    assert tuple(sorted((0, 3, 4))) in t          # nodes (0,0),(1,0),(1,1) of cell 0
    assert tuple(sorted((3, 6, 1))) in t or tuple(sorted((6, 7, 1))) not in t


def test_validation_rejects_degenerate_triangle():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(MeshError, match="degenerate spatial element"):
        make_mesh(nodes, [[0, 1, 2]], np.empty((0, 2)), [])


def test_validation_rejects_duplicate_nodes():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1e-15, 0.0]])
    tris = [[0, 1, 2], [1, 3, 2]]
    with pytest.raises(MeshError):
        make_mesh(nodes, tris, _derived_facets(tris), ["x"] * 4)


def test_validation_rejects_untagged_boundary():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(MeshError, match="boundary facet mismatch"):
        make_mesh(nodes, [[0, 1, 2]], [[0, 1]], ["bottom"])


def _derived_facets(tris):
    tris = np.asarray(tris)
    e = np.sort(tris[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    u, c = np.unique(e, axis=0, return_counts=True)
    return u[c == 1]


def test_canonicalization_flips_orientation():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    m = make_mesh(nodes, [[0, 2, 1]], [[0, 1], [1, 2], [2, 0]], ["a", "b", "c"])
    assert triangle_areas(m)[0] > 0


def test_mesh_file_roundtrip(tmp_path):
    m = uniform_rect_mesh(2.0, 1.0, 7, 4)
    path = tmp_path / "box.mesh"
    write_mesh(m, path)
    m2 = read_mesh(path)
    np.testing.assert_allclose(m2.nodes, m.nodes, atol=0)
    np.testing.assert_array_equal(m2.triangles, m.triangles)
    assert set(map(tuple, np.sort(m2.facets, axis=1).tolist())) == \
        set(map(tuple, np.sort(m.facets, axis=1).tolist()))


def test_graded_mesh_spacing():
    xs = np.concatenate([np.linspace(0, 1, 17), np.linspace(1, 3, 9)[1:]])
    ys = np.linspace(0, 1, 9)
    m = rect_mesh_from_coords(xs, ys)
    assert triangle_areas(m).sum() == pytest.approx(3.0, rel=1e-13)
    h = node_spacing(m)
    assert h.min() > 0
    assert element_sizes(m).max() > 1.9 * element_sizes(m).min()


def test_obstacle_mesh():
    xs = np.linspace(0.0, 3.0, 61)      # h = 0.05, obstacle edges on grid lines
    ys = np.linspace(0.0, 1.4, 29)
    m = rect_mesh_with_obstacle(xs, ys, (2.3, 2.35), (0.0, 0.3))
    assert triangle_areas(m).sum() == pytest.approx(3.0 * 1.4 - 0.05 * 0.3, rel=1e-12)
    left = m.facets_with_tag("obstacle_left")
    assert len(left) == 6               # 0.3 / 0.05
    # upstream face sits on x = 2.3
    np.testing.assert_allclose(m.nodes[left.ravel(), 0], 2.3, atol=1e-12)
    assert len(m.facets_with_tag("obstacle_top")) == 1
    assert len(m.facets_with_tag("obstacle_right")) == 6
    m.validate()


def test_node_adjacency_symmetric():
    m = uniform_rect_mesh(1.0, 1.0, 4, 4)
    indptr, indices = node_adjacency(m)
    adj = {(i, j) for i in range(m.n_nodes) for j in indices[indptr[i]:indptr[i + 1]]}
    assert all((j, i) in adj for i, j in adj)
    assert all(i != j for i, j in adj)
