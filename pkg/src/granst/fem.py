"""FEM core shared by the flow and level-set solvers.

P1P1 interpolation on 3d6n prisms (triangle x time tensor basis) and 3d4n
simplices. Provides reference bases and quadrature, per-element geometry
arrays consumed by the assembly kernels, a COO-scatter global assembler with
deterministic summation order, and a right-preconditioned restarted GMRES
solve with an ILU factorization that callers may reuse across nonlinear
iterations.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, gmres, spilu, splu

from .errors import ConvergenceError, MeshError
from .st_mesh import SpaceTimeSlab

__all__ = [
    "element_quadrature",
    "PrismBasis",
    "TetBasis",
    "basis_for",
    "prism_geometry",
    "tet_geometry",
    "SparseSystem",
    "assemble",
    "apply_dirichlet",
    "make_ilu",
    "solve_linear",
]

_SQ3 = 1.0 / np.sqrt(3.0)
# 3-point midpoint rule on the reference triangle (degree 2) x 2-point Gauss
_TRI_PTS = np.array([[0.5, 0.0], [0.5, 0.5], [0.0, 0.5]])
_TRI_W = np.array([1.0 / 6.0] * 3)
_TIME_PTS = np.array([0.5 * (1.0 - _SQ3), 0.5 * (1.0 + _SQ3)])
_TIME_W = np.array([0.5, 0.5])

# 4-point degree-2 rule on the reference tetrahedron
_TET_A = (5.0 + 3.0 * np.sqrt(5.0)) / 20.0
_TET_B = (5.0 - np.sqrt(5.0)) / 20.0


def element_quadrature(kind: str):
    """Reference quadrature rule (points, weights); weights sum to the
    reference volume (1/2 for the prism, 1/6 for the simplex)."""
    if kind == "prism":
        pts = np.array([[x, y, s] for s in _TIME_PTS for (x, y) in _TRI_PTS])
        w = np.array([tw * sw for sw in _TIME_W for tw in _TRI_W])
        return pts, w
    if kind == "simplex":
        # barycentric permutations of (a, b, b, b) with the first coordinate
        # dropped; point 0 carries the a in the dropped slot
        pts = np.full((4, 3), _TET_B)
        for k in range(3):
            pts[k + 1, k] = _TET_A
        w = np.full(4, 1.0 / 24.0)
        return pts, w
    raise ValueError(f"unknown element kind '{kind}'")


class PrismBasis:
    """Tensor P1 basis on the reference prism: triangle (xi, eta), time s."""

    kind = "prism"
    n_basis = 6

    def __init__(self):
        self.quadrature = list(zip(*element_quadrature("prism")))

    @staticmethod
    def eval(point):
        xi, eta, s = point
        tri = np.array([1.0 - xi - eta, xi, eta])
        return np.concatenate([tri * (1.0 - s), tri * s])

    @staticmethod
    def grad(point):
        """Reference gradients d/d(xi, eta, s), shape (6, 3)."""
        xi, eta, s = point
        tri = np.array([1.0 - xi - eta, xi, eta])
        dtri = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        g = np.zeros((6, 3))
        g[:3, :2] = dtri * (1.0 - s)
        g[3:, :2] = dtri * s
        g[:3, 2] = -tri
        g[3:, 2] = tri
        return g


class TetBasis:
    kind = "simplex"
    n_basis = 4

    def __init__(self):
        self.quadrature = list(zip(*element_quadrature("simplex")))

    @staticmethod
    def eval(point):
        xi, eta, ze = point
        return np.array([1.0 - xi - eta - ze, xi, eta, ze])

    @staticmethod
    def grad(point):
        return np.array([[-1.0, -1.0, -1.0],
                         [1.0, 0.0, 0.0],
                         [0.0, 1.0, 0.0],
                         [0.0, 0.0, 1.0]])


def basis_for(slab_or_kind):
    kind = getattr(slab_or_kind, "kind", slab_or_kind)
    return PrismBasis() if kind == "FST" or kind == "prism" else TetBasis()


def prism_geometry(slab: SpaceTimeSlab):
    """Per-prism constants: P1 triangle gradients (E,3,2), areas, dt.

    Valid because FST prisms are straight extrusions: spatial gradients are
    time-independent and the temporal derivative is +-N_tri/dt.
    """
    tris = slab.spatial.triangles
    n = slab.spatial.nodes
    p0, p1, p2 = n[tris[:, 0]], n[tris[:, 1]], n[tris[:, 2]]
    d1, d2 = p1 - p0, p2 - p0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    if (det <= 0).any():
        raise MeshError("degenerate spatial element in prism geometry")
    grads = np.empty((len(tris), 3, 2))
    grads[:, 1, 0] = d2[:, 1] / det
    grads[:, 1, 1] = -d2[:, 0] / det
    grads[:, 2, 0] = -d1[:, 1] / det
    grads[:, 2, 1] = d1[:, 0] / det
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    areas = 0.5 * det
    dts = np.full(len(tris), slab.dt)
    return grads, areas, dts


def tet_geometry(slab: SpaceTimeSlab):
    """Per-simplex space-time gradients (E,4,3) and volumes (E,)."""
    x = slab.st_nodes
    el = slab.elements
    p0 = x[el[:, 0]]
    J = np.stack([x[el[:, k]] - p0 for k in (1, 2, 3)], axis=1)  # (E,3,3) rows
    det = (J[:, 0, 0] * (J[:, 1, 1] * J[:, 2, 2] - J[:, 1, 2] * J[:, 2, 1])
           - J[:, 0, 1] * (J[:, 1, 0] * J[:, 2, 2] - J[:, 1, 2] * J[:, 2, 0])
           + J[:, 0, 2] * (J[:, 1, 0] * J[:, 2, 1] - J[:, 1, 1] * J[:, 2, 0]))
    if (det <= 0).any():
        raise MeshError(f"tangled space-time element: {int(np.argmin(det))}")
    inv = np.empty_like(J)  # inverse transpose of J, scaled by det
    a, b, c = J[:, 0], J[:, 1], J[:, 2]
    inv[:, :, 0] = np.cross(b, c)
    inv[:, :, 1] = np.cross(c, a)
    inv[:, :, 2] = np.cross(a, b)
    inv /= det[:, None, None]
    # rows of inv are now grad(xi), grad(eta), grad(zeta)... transposed layout:
    # inv[:, i, j] = d(ref_j)/d(x_i); basis gradients follow
    grads = np.empty((len(el), 4, 3))
    grads[:, 1] = inv[:, :, 0]
    grads[:, 2] = inv[:, :, 1]
    grads[:, 3] = inv[:, :, 2]
    grads[:, 0] = -grads[:, 1] - grads[:, 2] - grads[:, 3]
    return grads, det / 6.0


@dataclass
class SparseSystem:
    """COO triplets plus rhs; dof (node, comp) -> n_comp * node + comp."""

    n_nodes: int
    n_comp: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    rhs: np.ndarray
    _csr: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def n_dofs(self) -> int:
        return self.n_nodes * self.n_comp

    def matrix(self) -> sp.csr_matrix:
        if self._csr is None:
            coo = sp.coo_matrix((self.vals, (self.rows, self.cols)),
                                shape=(self.n_dofs, self.n_dofs))
            self._csr = coo.tocsr()
        return self._csr

    def export_matrix_market(self, path):
        from scipy.io import mmwrite
        mmwrite(str(path), self.matrix())


def element_dofs(elements: np.ndarray, n_comp: int) -> np.ndarray:
    """(E, k*n_comp) interleaved dof ids for each element."""
    e = np.asarray(elements)
    return (e[:, :, None] * n_comp + np.arange(n_comp)).reshape(len(e), -1)


def assemble(slab: SpaceTimeSlab, kernel, n_comp: int) -> SparseSystem:
    """Scatter a per-element kernel into the global system.

    ``kernel(slab)`` returns (local, rhs_local) with local shaped
    (E, k, k) and rhs_local (E, k), k = nodes_per_element * n_comp, ordered
    like element_dofs. Summation order is fixed by element order, so the
    result is independent of how the kernel parallelized its work.
    """
    local, rhs_local = kernel(slab)
    edofs = element_dofs(slab.elements, n_comp)
    k = edofs.shape[1]
    if local.shape != (len(edofs), k, k):
        raise MeshError("unmapped degree of freedom: kernel block size mismatch")
    rows = np.repeat(edofs, k, axis=1).ravel()
    cols = np.tile(edofs, (1, k)).ravel()
    rhs = np.zeros(slab.n_nodes * n_comp)
    np.add.at(rhs, edofs.ravel(), rhs_local.ravel())
    return SparseSystem(n_nodes=slab.n_nodes, n_comp=n_comp,
                        rows=rows, cols=cols, vals=local.ravel(), rhs=rhs)


class AssemblyPattern:
    """Precomputed scatter map from stacked element entries to CSR slots.

    Building the CSR sparsity (sort + dedup of the element-block triplets)
    dominates repeated assembly, but it only depends on the mesh and dof
    layout.  This class does that work once; each nonlinear iteration then
    reduces freshly computed values into the fixed structure with a single
    deterministic ``bincount`` pass.

    Parameters
    ----------
    rows, cols : ndarray
        Triplet coordinates of every element-block entry, in a fixed order.
    n_dofs : int
        Global system size.
    """

    def __init__(self, rows: np.ndarray, cols: np.ndarray, n_dofs: int):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= n_dofs
                          or cols.min() < 0 or cols.max() >= n_dofs):
            raise MeshError("unmapped degree of freedom: triplet index out of range")
        order = np.lexsort((cols, rows))
        rs, cs = rows[order], cols[order]
        if rows.size:
            new_group = np.empty(rows.size, dtype=bool)
            new_group[0] = True
            new_group[1:] = (rs[1:] != rs[:-1]) | (cs[1:] != cs[:-1])
            group_id = np.cumsum(new_group) - 1
        else:
            new_group = np.zeros(0, dtype=bool)
            group_id = np.zeros(0, dtype=np.int64)
        self.n_dofs = int(n_dofs)
        self.slot = np.empty(rows.size, dtype=np.int64)
        self.slot[order] = group_id
        self.nnz = int(group_id[-1]) + 1 if rows.size else 0
        self.indices = cs[new_group].astype(np.int32)
        counts = np.bincount(rs[new_group], minlength=n_dofs)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)

    def matrix(self, vals: np.ndarray) -> sp.csr_matrix:
        """CSR matrix from one stacked value array (same order as rows/cols)."""
        data = np.bincount(self.slot, weights=vals, minlength=self.nnz)
        return sp.csr_matrix((data, self.indices, self.indptr),
                             shape=(self.n_dofs, self.n_dofs))


def scatter_rhs(n_dofs: int, dofs: np.ndarray, local: np.ndarray) -> np.ndarray:
    """Accumulate per-element right-hand-side blocks into a global vector."""
    rhs = np.zeros(n_dofs)
    np.add.at(rhs, np.asarray(dofs).ravel(), np.asarray(local).ravel())
    return rhs


def block_triplets(edofs: np.ndarray):
    """Row and column triplet coordinates for dense (E, k, k) blocks laid out
    in row-major order, matching ``local.ravel()``."""
    k = edofs.shape[1]
    rows = np.repeat(edofs, k, axis=1).ravel()
    cols = np.tile(edofs, (1, k)).ravel()
    return rows, cols


def apply_dirichlet(A: sp.csr_matrix, rhs: np.ndarray, idx: np.ndarray,
                    values: np.ndarray):
    """Eliminate constrained dofs symmetrically: rows and columns are zeroed,
    the diagonal set to 1, and the constraint load moved to the rhs."""
    n = A.shape[0]
    free = np.ones(n)
    free[idx] = 0.0
    g = np.zeros(n)
    g[idx] = values
    rhs = free * (rhs - A @ g)
    rhs[idx] = values
    D = sp.diags(free)
    A = D @ A @ D + sp.diags(1.0 - free)
    return A.tocsr(), rhs


class _ScaledILU:
    """ILU of the symmetrically equilibrated matrix D A D, D = diag(A)^-1/2.

    Viscosity contrasts across the interface put many decades between
    matrix rows; equilibrating first makes the ILU drop tolerance
    meaningful and the factorization usable as a preconditioner for the
    original system (A^-1 ~ D (DAD)^-1 D).
    """

    def __init__(self, A, drop_tol, fill_factor):
        d = np.abs(A.diagonal())
        self.dinv = 1.0 / np.sqrt(np.maximum(d, 1e-300))
        scale = sp.diags(self.dinv)
        self.ilu = spilu((scale @ A @ scale).tocsc(), drop_tol=drop_tol,
                         fill_factor=fill_factor)

    def solve(self, v):
        return self.dinv * self.ilu.solve(self.dinv * v)


def make_ilu(A: sp.csr_matrix, drop_tol=1e-5, fill_factor=20.0):
    try:
        return _ScaledILU(A, drop_tol=drop_tol, fill_factor=fill_factor)
    except RuntimeError as exc:
        raise ConvergenceError(f"ILU factorization failed: {exc}") from exc


class ReusableLU:
    """Direct sparse solver that reuses its factorization across a family
    of slowly changing systems.

    The factorization (complete LU of the symmetrically equilibrated
    matrix) is kept between calls; each new system is first attacked by
    iterative refinement preconditioned with the stale factors, which costs
    one matvec and one pair of triangular solves per sweep.  When
    refinement stops contracting, the current matrix is refactored and
    solved directly, so the returned solution satisfies
    ``||b - A x|| <= tol * ||b||``; with ``allow_stale`` the caller may
    instead accept the best refined iterate whenever refinement made clear
    progress, trading accuracy for factorization reuse.

    Equilibration keeps the reduced-pivoting symmetric-mode factorization
    stable across the many decades of viscosity contrast, and roughly
    halves the fill of the default column ordering.
    """

    def __init__(self, *, max_sweeps: int = 20, min_drop: float = 0.7):
        self.max_sweeps = max_sweeps
        self.min_drop = min_drop
        self.factorizations = 0
        self._lu = None
        self._dinv = None

    def _factor(self, A):
        d = np.abs(A.diagonal())
        if (d == 0.0).any():
            raise ConvergenceError(
                f"singular system: zero diagonal at row {int(np.argmin(d))}")
        self._dinv = 1.0 / np.sqrt(d)
        scale = sp.diags(self._dinv)
        try:
            self._lu = splu((scale @ A @ scale).tocsc(),
                            permc_spec="MMD_AT_PLUS_A",
                            diag_pivot_thresh=0.01,
                            options={"SymmetricMode": True})
        except RuntimeError as exc:
            self._lu = None
            raise ConvergenceError(f"LU factorization failed: {exc}") from exc
        self.factorizations += 1

    def _apply(self, v):
        return self._dinv * self._lu.solve(self._dinv * v)

    def solve(self, A, b, x0=None, *, tol: float = 1e-8, r0=None,
              allow_stale: bool = False):
        """Solve A x = b, refining from ``x0`` when factors are cached.

        Returns ``(x, sweeps)`` where ``sweeps`` counts refinement passes
        (0 for a fresh direct solve).  ``r0`` may pass in a precomputed
        residual ``b - A @ x0`` to save one matvec.  ``allow_stale``
        accepts a partially refined iterate (residual reduced at least
        4x from the start) instead of refactoring.
        """
        bn = np.linalg.norm(b)
        if bn == 0.0:
            return np.zeros_like(b), 0
        if self._lu is None or x0 is None \
                or self._dinv.shape[0] != A.shape[0]:
            self._factor(A)
            return self._apply(b), 0
        x = np.asarray(x0, dtype=float).copy()
        r = b - A @ x if r0 is None else r0
        rn0 = rn = np.linalg.norm(r)
        target = tol * bn
        sweeps = 0
        while rn > target and sweeps < self.max_sweeps:
            dx = self._apply(r)
            x += dx
            r_new = b - A @ x
            rn_new = np.linalg.norm(r_new)
            sweeps += 1
            if rn_new > rn:
                x -= dx    # diverging sweep: keep the best iterate
                break
            stalled = rn_new > self.min_drop * rn
            r, rn = r_new, rn_new
            if stalled:
                break    # factors too stale for this matrix
        if rn <= target or (allow_stale and rn <= 0.25 * rn0):
            return x, sweeps
        self._factor(A)
        return self._apply(b), sweeps


def solve_linear(system, tol: float = 1e-8, max_iter: int = 400,
                 precond=None, x0=None, restart: int = 60):
    """Right-preconditioned GMRES(restart) on A x = b.

    ``system`` is a SparseSystem or a (csr_matrix, rhs) pair. The true
    residual is checked after the solve; stagnation raises ConvergenceError
    with the achieved residual. Passing ``precond`` (an object with a
    .solve(v) method, e.g. a cached ILU) skips refactorization.
    """
    if isinstance(system, SparseSystem):
        A, b = system.matrix(), system.rhs
    else:
        A, b = system

    nnz_per_row = np.diff(A.indptr)
    if (nnz_per_row == 0).any():
        raise ConvergenceError(
            f"singular system: empty equation row {int(np.argmin(nnz_per_row))}")

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), {"iterations": 0, "precond": precond}

    if precond is None:
        precond = make_ilu(A)

    it = {"n": 0}

    def count(_):
        it["n"] += 1

    # warm start by shifting: solve A dx = b - A x0 in the preconditioned
    # variable, which works for right preconditioning without access to M
    base = np.zeros_like(b) if x0 is None else np.asarray(x0, dtype=float)
    r0 = b if x0 is None else b - A @ base
    op = LinearOperator(A.shape, matvec=lambda v: A @ precond.solve(v))
    cycles = max(1, int(np.ceil(max_iter / restart)))
    rtol = min(1.0, tol * bnorm / max(np.linalg.norm(r0), 1e-300))
    y, _ = gmres(op, r0, rtol=rtol, atol=0.0, restart=restart,
                 maxiter=cycles, callback=count, callback_type="pr_norm")
    x = base + precond.solve(y)
    res = np.linalg.norm(b - A @ x) / bnorm
    if res > 10.0 * tol:
        raise ConvergenceError(
            f"linear solve stagnated: relative residual {res:.3e} after "
            f"{it['n']} iterations (target {tol:.1e})", residual=res)
    return x, {"iterations": it["n"], "precond": precond, "residual": res}
