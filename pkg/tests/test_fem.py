import numpy as np
import pytest
import scipy.sparse as sp

from granst.errors import ConvergenceError
from granst.fem import (
    PrismBasis,
    TetBasis,
    SparseSystem,
    apply_dirichlet,
    assemble,
    basis_for,
    element_dofs,
    element_quadrature,
    prism_geometry,
    solve_linear,
    tet_geometry,
)
from granst.spatial_mesh import uniform_rect_mesh
from granst.st_mesh import build_sst, extrude_fst, tet_volumes


def test_quadrature_weight_sums():
    for kind, ref_vol in (("prism", 0.5), ("simplex", 1.0 / 6.0)):
        _, w = element_quadrature(kind)
        assert w.sum() == pytest.approx(ref_vol, rel=1e-15)


@pytest.mark.parametrize("basis", [PrismBasis(), TetBasis()], ids=["prism", "tet"])
def test_partition_of_unity(basis):
    for pt, _ in basis.quadrature:
        vals = basis.eval(pt)
        assert vals.sum() == pytest.approx(1.0, abs=1e-14)
        assert np.abs(basis.grad(pt).sum(axis=0)).max() < 1e-12


def test_prism_quadrature_integrates_element_volume():
    mesh = uniform_rect_mesh(2.0, 1.0, 4, 3)
    slab = extrude_fst(mesh, 0.0, 0.25)
    grads, areas, dts = prism_geometry(slab)
    # integrating 1 with |J| = 2 * area * dt over reference weights (sum 1/2)
    _, w = element_quadrature("prism")
    vols = w.sum() * 2.0 * areas * dts
    assert vols.sum() == pytest.approx(2.0 * 0.25, rel=1e-14)


def test_tet_geometry_volumes_match_determinant():
    mesh = uniform_rect_mesh(1.0, 1.0, 3, 3)
    slab = build_sst(mesh, 0.0, 0.2, np.full(mesh.n_nodes, 2))
    _, vols = tet_geometry(slab)
    np.testing.assert_allclose(vols, tet_volumes(slab.st_nodes, slab.elements),
                               rtol=1e-13)
    assert vols.sum() == pytest.approx(0.2, rel=1e-13)


def test_linear_field_reproduction():
    # interpolate f = a + b x + c y + d t at nodes, check value and gradient
    # at quadrature points through the physical geometry maps
    a, b, c, d = 0.7, -1.3, 2.1, 0.9
    mesh = uniform_rect_mesh(1.5, 1.0, 4, 4)

    fst = extrude_fst(mesh, 0.1, 0.35)
    f = a + b * fst.st_nodes[:, 0] + c * fst.st_nodes[:, 1] + d * fst.st_nodes[:, 2]
    grads, areas, dts = prism_geometry(fst)
    basis = PrismBasis()
    fe = f[fst.elements]
    for pt, _ in basis.quadrature:
        N = basis.eval(pt)
        val = fe @ N
        xq = fst.st_nodes[fst.elements[:, :3], :2]  # triangle corners
        tri = np.array([1.0 - pt[0] - pt[1], pt[0], pt[1]])
        x = np.einsum("eki,k->ei", xq, tri)
        t = fst.t_lo + pt[2] * dts
        expected = a + b * x[:, 0] + c * x[:, 1] + d * t
        np.testing.assert_allclose(val, expected, atol=1e-13)
        # spatial gradient: bottom and top nodes share the triangle gradients
        gx = np.einsum("ek,ekj->ej", fe[:, :3] * (1 - pt[2]) + 0.0, grads) \
            + np.einsum("ek,ekj->ej", fe[:, 3:] * pt[2] + 0.0, grads)
        np.testing.assert_allclose(gx[:, 0], b, atol=1e-12)
        np.testing.assert_allclose(gx[:, 1], c, atol=1e-12)
        dt_part = (fe[:, 3:] - fe[:, :3]) @ tri / dts
        np.testing.assert_allclose(dt_part, d, atol=1e-12)

    sst = build_sst(mesh, 0.1, 0.35, np.full(mesh.n_nodes, 3))
    f = a + b * sst.st_nodes[:, 0] + c * sst.st_nodes[:, 1] + d * sst.st_nodes[:, 2]
    grads, _ = tet_geometry(sst)
    fe = f[sst.elements]
    g = np.einsum("ek,ekj->ej", fe, grads)
    np.testing.assert_allclose(g[:, 0], b, atol=1e-11)
    np.testing.assert_allclose(g[:, 1], c, atol=1e-11)
    np.testing.assert_allclose(g[:, 2], d, atol=1e-11)


def test_assemble_identity_scatter():
    mesh = uniform_rect_mesh(1.0, 1.0, 2, 2)
    slab = extrude_fst(mesh, 0.0, 1.0)

    def kernel(s):
        E = s.n_elements
        local = np.tile(np.eye(6)[None], (E, 1, 1))
        return local, np.zeros((E, 6))

    sys = assemble(slab, kernel, n_comp=1)
    A = sys.matrix().toarray()
    # shared nodes accumulate one contribution per incident element
    counts = np.zeros(slab.n_nodes)
    for el in slab.elements:
        counts[el] += 1.0
    np.testing.assert_allclose(np.diag(A), counts, atol=0)


def test_mass_matrix_row_sums_give_volume():
    mesh = uniform_rect_mesh(2.0, 1.0, 5, 4)
    slab = extrude_fst(mesh, 0.0, 0.3)
    grads, areas, dts = prism_geometry(slab)
    basis = PrismBasis()

    def kernel(s):
        E = s.n_elements
        local = np.zeros((E, 6, 6))
        for pt, w in basis.quadrature:
            N = basis.eval(pt)
            local += (w * 2.0 * areas * dts)[:, None, None] * np.outer(N, N)[None]
        return local, np.zeros((E, 6))

    sys = assemble(slab, kernel, n_comp=1)
    total = sys.matrix().sum()
    assert total == pytest.approx(2.0 * 0.3, rel=1e-12)


def test_element_dofs_interleaved():
    el = np.array([[2, 5, 7]])
    d = element_dofs(el, 3)
    np.testing.assert_array_equal(d[0], [6, 7, 8, 15, 16, 17, 21, 22, 23])


def test_solve_identity():
    n = 40
    A = sp.eye(n, format="csr")
    b = np.linspace(-2, 3, n)
    x, info = solve_linear((A, b), tol=1e-12)
    np.testing.assert_allclose(x, b, atol=1e-12)


def test_solve_1d_laplacian_manufactured():
    # -u'' = pi^2 sin(pi x), u(0) = u(1) = 0 -> u = sin(pi x)
    n = 200
    h = 1.0 / (n + 1)
    main = np.full(n, 2.0 / h)
    off = np.full(n - 1, -1.0 / h)
    A = sp.diags([off, main, off], [-1, 0, 1], format="csr")
    x = np.linspace(h, 1.0 - h, n)
    b = np.pi ** 2 * np.sin(np.pi * x) * h
    u, info = solve_linear((A, b), tol=1e-10)
    exact = np.sin(np.pi * x)
    assert np.abs(u - exact).max() < 5e-4  # discretization error at this h


def test_solve_singular_row_raises():
    A = sp.eye(5, format="csr").tolil()
    A[2, 2] = 0.0
    b = np.ones(5)
    with pytest.raises(ConvergenceError, match="singular system|stagnated"):
        solve_linear((A.tocsr(), b), tol=1e-10)


def test_solve_warm_start():
    rng = np.random.default_rng(0)
    n = 80
    A = sp.diags([np.full(n - 1, -1.0), np.full(n, 4.0), np.full(n - 1, -1.0)],
                 [-1, 0, 1], format="csr")
    b = rng.standard_normal(n)
    x_cold, info_cold = solve_linear((A, b), tol=1e-12)
    x_warm, info_warm = solve_linear((A, b), tol=1e-12, x0=x_cold,
                                     precond=info_cold["precond"])
    np.testing.assert_allclose(x_warm, x_cold, atol=1e-10)
    assert info_warm["iterations"] <= info_cold["iterations"]


def test_apply_dirichlet_elimination():
    n = 6
    A = sp.diags([np.full(n - 1, -1.0), np.full(n, 2.0), np.full(n - 1, -1.0)],
                 [-1, 0, 1], format="csr")
    rhs = np.zeros(n)
    idx = np.array([0, n - 1])
    vals = np.array([1.0, 3.0])
    A2, r2 = apply_dirichlet(A, rhs, idx, vals)
    x, _ = solve_linear((A2, r2), tol=1e-12)
    assert x[0] == pytest.approx(1.0, abs=1e-12)
    assert x[-1] == pytest.approx(3.0, abs=1e-12)
    # interior solves the constrained Laplace problem: linear ramp
    np.testing.assert_allclose(x, np.linspace(1.0, 3.0, n), atol=1e-9)


def test_basis_for_dispatch():
    assert basis_for("FST").kind == "prism"
    assert basis_for("SST").kind == "simplex"


def test_matrix_market_export(tmp_path):
    sys = SparseSystem(n_nodes=2, n_comp=1, rows=np.array([0, 1]),
                       cols=np.array([0, 1]), vals=np.array([1.0, 2.0]),
                       rhs=np.zeros(2))
    path = tmp_path / "sys.mtx"
    sys.export_matrix_market(path)
    from scipy.io import mmread
    M = mmread(str(path)).tocsr()
    assert M[0, 0] == 1.0 and M[1, 1] == 2.0
