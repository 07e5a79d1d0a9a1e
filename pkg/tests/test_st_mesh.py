import numpy as np
import pytest

from granst.errors import ConfigurationError
from granst.spatial_mesh import make_mesh, triangle_areas, uniform_rect_mesh
from granst.st_mesh import (
    build_sst,
    conformity_check,
    extrude_fst,
    prism_volumes,
    tet_volumes,
)


def unit_square():
    return uniform_rect_mesh(1.0, 1.0, 2, 2)


def single_triangle():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return make_mesh(nodes, [[0, 1, 2]], [[0, 1], [1, 2], [2, 0]],
                     ["bottom", "hyp", "left"])


def graded_levels(mesh, rng, max_level=5):
    """Random admissible level field: seeds at max, decay by 1 per ring."""
    lv = np.ones(mesh.n_nodes, dtype=np.int64)
    seeds = rng.choice(mesh.n_nodes, size=max(1, mesh.n_nodes // 20), replace=False)
    lv[seeds] = rng.integers(1, max_level + 1, size=len(seeds))
    edges = mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    for _ in range(max_level + 1):
        a = np.maximum(lv[edges[:, 0]], lv[edges[:, 1]] - 1)
        np.maximum.at(lv, edges[:, 0], a)
        b = np.maximum(lv[edges[:, 1]], lv[edges[:, 0]] - 1)
        np.maximum.at(lv, edges[:, 1], b)
    return lv


def test_fst_two_triangle_square():
    slab = extrude_fst(unit_square(), 0.0, 0.1)
    assert slab.n_elements == 2
    assert slab.n_nodes == 8
    assert prism_volumes(slab.st_nodes, slab.elements).sum() == pytest.approx(0.1, rel=1e-14)
    assert conformity_check(slab).ok


def test_fst_reference_triangle():
    slab = extrude_fst(single_triangle(), 0.0, 1.0)
    assert slab.n_elements == 1
    assert prism_volumes(slab.st_nodes, slab.elements)[0] == pytest.approx(0.5, rel=1e-14)


def test_fst_paper_scale_counts():
    mesh = uniform_rect_mesh(5.5, 1.1, 276, 56)
    slab = extrude_fst(mesh, 0.0, 0.02)
    assert slab.n_nodes == 30912
    assert slab.n_elements == 30250


def test_fst_lateral_facets_are_quads():
    slab = extrude_fst(unit_square(), 0.0, 0.5)
    assert slab.facet_nodes.shape == (4, 4)
    # each quad spans t_lo on its first two nodes and t_hi on the last two
    t = slab.st_nodes[slab.facet_nodes, 2]
    np.testing.assert_allclose(t[:, :2], 0.0, atol=0)
    np.testing.assert_allclose(t[:, 2:], 0.5, atol=0)


def test_sst_uniform_level_one():
    mesh = unit_square()
    slab = build_sst(mesh, 0.0, 0.1, np.ones(mesh.n_nodes, dtype=int))
    assert slab.n_elements == 6
    assert tet_volumes(slab.st_nodes, slab.elements).sum() == pytest.approx(0.1, rel=1e-13)
    assert conformity_check(slab).ok


def test_sst_levels_311():
    mesh = single_triangle()
    slab = build_sst(mesh, 0.0, 1.0, np.array([3, 1, 1]))
    assert slab.n_elements == 5
    vols = tet_volumes(slab.st_nodes, slab.elements)
    assert np.all(vols > 0)
    assert vols.sum() == pytest.approx(0.5, rel=1e-12)
    # lateral strip on an edge with levels (3, 1) carries 4 triangles,
    # on a (1, 1) edge 2 triangles
    tags = slab.facet_tags
    assert np.count_nonzero(tags == "bottom") == 4   # edge (0, 1), levels (3, 1)
    assert np.count_nonzero(tags == "left") == 4     # edge (2, 0), levels (1, 3)
    assert np.count_nonzero(tags == "hyp") == 2      # edge (1, 2), levels (1, 1)
    assert conformity_check(slab).ok


def test_sst_traces_match_fst():
    mesh = uniform_rect_mesh(1.0, 1.0, 4, 3)
    rng = np.random.default_rng(3)
    lv = graded_levels(mesh, rng)
    sst = build_sst(mesh, 0.2, 0.3, lv)
    fst = extrude_fst(mesh, 0.2, 0.3)
    np.testing.assert_allclose(sst.st_nodes[sst.lower_trace],
                               fst.st_nodes[fst.lower_trace], atol=0)
    np.testing.assert_allclose(sst.st_nodes[sst.upper_trace],
                               fst.st_nodes[fst.upper_trace], atol=0)


def test_sst_grading_guard_is_opt_in():
    mesh = unit_square()
    lv = np.array([1, 3, 1, 1])
    with pytest.raises(ConfigurationError, match="differ by more than 1"):
        build_sst(mesh, 0.0, 0.1, lv, max_level_jump=1)
    # without the guard arbitrary fields still build conforming slabs
    slab = build_sst(mesh, 0.0, 0.1, lv)
    assert conformity_check(slab).ok


def test_sst_rejects_bad_levels():
    mesh = unit_square()
    with pytest.raises(ConfigurationError, match=">= 1"):
        build_sst(mesh, 0.0, 0.1, np.zeros(mesh.n_nodes, dtype=int))
    with pytest.raises(ConfigurationError, match="one entry per spatial node"):
        build_sst(mesh, 0.0, 0.1, np.ones(2, dtype=int))


def test_sst_fuzz_conformity():
    rng = np.random.default_rng(11)
    mesh = uniform_rect_mesh(2.0, 1.0, 9, 5)
    areas = triangle_areas(mesh)
    for _ in range(10):
        lv = graded_levels(mesh, rng)
        slab = build_sst(mesh, 0.0, 0.05, lv)
        rep = conformity_check(slab)
        assert rep.ok, rep.messages
        vols = tet_volumes(slab.st_nodes, slab.elements)
        per_prism = np.zeros(mesh.n_triangles)
        np.add.at(per_prism, slab.element_prism, vols)
        np.testing.assert_allclose(per_prism, areas * 0.05, rtol=1e-12)


def test_sst_deterministic():
    mesh = uniform_rect_mesh(1.0, 1.0, 5, 4)
    lv = graded_levels(mesh, np.random.default_rng(0))
    a = build_sst(mesh, 0.0, 0.1, lv)
    b = build_sst(mesh, 0.0, 0.1, lv)
    np.testing.assert_array_equal(a.elements, b.elements)
    np.testing.assert_allclose(a.st_nodes, b.st_nodes, atol=0)


def test_conformity_detects_perturbed_node():
    mesh = unit_square()
    slab = build_sst(mesh, 0.0, 0.1, np.ones(mesh.n_nodes, dtype=int))
    slab.st_nodes[slab.upper_trace[0], 2] = 0.3   # push above t_hi
    rep = conformity_check(slab)
    assert not rep.ok
    assert len(rep.bad_elements) > 0


def test_element_count_scales_with_levels():
    mesh = unit_square()
    for L in (2, 3, 5):
        slab = build_sst(mesh, 0.0, 0.1, np.full(mesh.n_nodes, L, dtype=int))
        assert slab.n_elements == 6 * L
        assert conformity_check(slab).ok
