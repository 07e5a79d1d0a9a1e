"""Stabilized space-time solver for the two-phase momentum/continuity system.

Each time slab is solved as one coupled space-time problem: Galerkin terms
for transient, convection, viscous stress, and pressure/divergence coupling;
a temporal jump term that weakly enforces continuity with the previous slab;
GLS least-squares stabilization allowing equal-order P1P1 interpolation plus
a grad-div term; and wall models (no-slip, free-slip, Navier slip with a
level-set-dependent friction coefficient).

The nonlinear loop is a Picard iteration: convection velocity and granular
viscosity are frozen at the latest iterate, with under-relaxation applied to
the viscosity between iterates.  The linear systems are solved by restarted
GMRES with an ILU preconditioner factored once per slab and reused across
iterations.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import fem, kernels, spatial_mesh
from .errors import ConfigurationError, ConvergenceError
from .levelset import FluidPair, fluid_properties
from .st_mesh import SpaceTimeSlab

log = logging.getLogger("granst.ns_solver")

__all__ = [
    "Dirichlet", "Neumann", "Slip", "NavierSlip",
    "SolutionState", "SlabStats", "SlabContext",
    "compute_taus", "build_slab_context", "assemble_slab",
    "apply_navier_slip", "nonlinear_solve", "hydrostatic_pressure",
]

_TINY = 1e-300


# ---------------------------------------------------------------------------
# boundary conditions

@dataclass(frozen=True)
class Dirichlet:
    """Prescribed velocity. ``g`` is an (x, y, t) -> (ux, uy) callable or a
    constant 2-tuple."""
    g: Callable | Sequence[float] = (0.0, 0.0)


@dataclass(frozen=True)
class Neumann:
    """Prescribed traction on the lateral slab surface (constant per tag)."""
    traction: Sequence[float] = (0.0, 0.0)


@dataclass(frozen=True)
class Slip:
    """Free slip: zero normal velocity, zero tangential traction."""


@dataclass(frozen=True)
class NavierSlip:
    """Zero normal velocity plus tangential friction t.sigma.n = -beta u_t.

    The coefficient is evaluated from the level set at each boundary
    quadrature point: ``beta_near`` within ``band`` of the interface,
    ``beta_far`` elsewhere.
    """
    beta_far: float = 0.0
    beta_near: float = 0.0
    band: float = 0.0

    def __post_init__(self):
        if not (self.beta_far >= self.beta_near >= 0.0):
            raise ConfigurationError(
                "navier slip requires beta_far >= beta_near >= 0, got "
                f"beta_far={self.beta_far}, beta_near={self.beta_near}")


# ---------------------------------------------------------------------------
# solution containers

@dataclass
class SolutionState:
    """Nodal (u, p) on one slab with trace accessors."""
    slab: SpaceTimeSlab
    u: np.ndarray
    p: np.ndarray

    def validate(self):
        if not (np.isfinite(self.u).all() and np.isfinite(self.p).all()):
            raise ConvergenceError("solution state contains non-finite values")

    @property
    def lower_u(self) -> np.ndarray:
        return self.u[self.slab.lower_trace]

    @property
    def upper_u(self) -> np.ndarray:
        return self.u[self.slab.upper_trace]

    @property
    def lower_p(self) -> np.ndarray:
        return self.p[self.slab.lower_trace]

    @property
    def upper_p(self) -> np.ndarray:
        return self.p[self.slab.upper_trace]

    def vector(self) -> np.ndarray:
        x = np.empty(3 * len(self.p))
        x[0::3] = self.u[:, 0]
        x[1::3] = self.u[:, 1]
        x[2::3] = self.p
        return x

    @classmethod
    def from_vector(cls, slab: SpaceTimeSlab, x: np.ndarray) -> "SolutionState":
        u = np.column_stack([x[0::3], x[1::3]])
        return cls(slab=slab, u=u, p=x[2::3].copy())


@dataclass
class SlabStats:
    """Per-slab solver diagnostics."""
    slab_id: int = 0
    iterations: int = 0
    linear_iterations: int = 0
    residuals: list = field(default_factory=list)
    t_formation: float = 0.0
    t_solution: float = 0.0
    converged: bool = False


# ---------------------------------------------------------------------------
# stabilization

def compute_taus(u_norm, eta, rho, dt_e, h_e):
    """Element stabilization parameters.

    Parameters
    ----------
    u_norm, eta, rho : array_like
        Element convection speed, viscosity, and density.
    dt_e, h_e : array_like
        Element temporal extent and spatial size.

    Returns
    -------
    (tau_m, tau_c, tau_l)
        Momentum, continuity (grad-div), and level-set advection
        parameters: ``tau_m = ((2/dt)^2 + (2|u|/h)^2 + (4 nu/h^2)^2)^-1/2``,
        ``tau_c = h^2 / (4 tau_m)``, and ``tau_l`` from the first two terms.
    """
    u_norm = np.asarray(u_norm, dtype=float)
    eta = np.asarray(eta, dtype=float)
    rho = np.asarray(rho, dtype=float)
    dt_e = np.asarray(dt_e, dtype=float)
    h_e = np.asarray(h_e, dtype=float)
    if np.any(dt_e <= 0.0) or np.any(h_e <= 0.0):
        raise ConfigurationError("stabilization requires dt_e > 0 and h_e > 0")
    t_term = (2.0 / dt_e) ** 2
    a_term = (2.0 * u_norm / h_e) ** 2
    d_term = (4.0 * (eta / rho) / h_e ** 2) ** 2
    tau_m = (t_term + a_term + d_term) ** -0.5
    tau_c = h_e ** 2 / (4.0 * tau_m)
    tau_l = (t_term + a_term) ** -0.5
    return tau_m, tau_c, tau_l


# ---------------------------------------------------------------------------
# slab context: geometry, static terms, and constraint sets built once per slab

@dataclass
class SlabContext:
    slab: SpaceTimeSlab
    fluids: FluidPair
    gravity: tuple
    pattern: fem.AssemblyPattern
    edofs: np.ndarray
    geom: tuple
    h_e: np.ndarray
    dt_e: np.ndarray
    rho_el: np.ndarray
    phi_el: np.ndarray
    static_vals: np.ndarray
    static_rhs: np.ndarray
    dir_idx: np.ndarray
    dir_vals: np.ndarray
    n_dofs: int
    body_q: tuple | None = None    # (fx, fy) at quadrature points, (Q, E)


def _facet_ids_for_tag(slab: SpaceTimeSlab, tag: str) -> np.ndarray:
    ids = np.where(slab.facet_tags == tag)[0]
    return ids


def _normal_axis(normals: np.ndarray, tag: str) -> np.ndarray:
    """Component index (0/1) pinned by a slip wall; axis-aligned only."""
    ax = np.abs(normals)
    axis = (ax[:, 1] > ax[:, 0]).astype(int)
    aligned = np.maximum(ax[:, 0], ax[:, 1]) > 1.0 - 1e-9
    if not aligned.all():
        raise ConfigurationError(
            f"slip boundary '{tag}' is not axis-aligned; strong normal "
            "constraints are only supported on axis-aligned walls")
    return axis


def _face_geometry(slab: SpaceTimeSlab, ids: np.ndarray):
    """Face node ids, areas, shape values at face quadrature points, and the
    level-set value at those points (slab-constant in time)."""
    spatial = slab.spatial
    edges = spatial.facets[slab.facet_edge[ids]]
    p0 = spatial.nodes[edges[:, 0]]
    p1 = spatial.nodes[edges[:, 1]]
    length = np.linalg.norm(p1 - p0, axis=1)
    tangent = (p1 - p0) / length[:, None]
    if slab.kind == "FST":
        nodes = slab.facet_nodes[ids]                       # (B, 4)
        area = length * slab.dt
        g = 0.5 - 0.5 / np.sqrt(3.0)
        qp = [(x, s) for s in (g, 1.0 - g) for x in (g, 1.0 - g)]
        shp = np.array([[(1 - x) * (1 - s), x * (1 - s), x * s, (1 - x) * s]
                        for x, s in qp])                    # (4 qp, 4)
        wq = np.full(len(qp), 0.25)
        xi_q = np.array([x for x, _ in qp])
    else:
        nodes = slab.facet_nodes[ids]                       # (B, 3)
        sp_id = slab.spatial_id[nodes]
        xi = (sp_id == edges[:, [1]]).astype(float) * length[:, None]
        tt = slab.st_nodes[nodes, 2]
        d1 = np.stack([xi[:, 1] - xi[:, 0], tt[:, 1] - tt[:, 0]], axis=1)
        d2 = np.stack([xi[:, 2] - xi[:, 0], tt[:, 2] - tt[:, 0]], axis=1)
        area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        shp = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
        wq = np.full(3, 1.0 / 3.0)
        xi_q = None
    return nodes, area, tangent, shp, wq, xi_q, edges, length


def _face_phi(slab, nodes, shp, xi_q, edges, length, phi_sp):
    """phi interpolated at face quadrature points, shape (B, n_qp)."""
    if slab.kind == "FST":
        phi_i = phi_sp[edges[:, 0]]
        phi_j = phi_sp[edges[:, 1]]
        frac = xi_q[None, :]
        return phi_i[:, None] * (1.0 - frac) + phi_j[:, None] * frac
    phi_n = phi_sp[slab.spatial_id[nodes]]                  # (B, 3)
    return phi_n @ shp.T


def navier_slip_terms(slab: SpaceTimeSlab, facet_ids: np.ndarray,
                      bc: NavierSlip, phi_sp: np.ndarray):
    """Triplets of the tangential Robin term for the given boundary faces.

    Returns (rows, cols, vals) in velocity dof numbering; the strong
    normal constraint is handled separately by the caller.
    """
    nodes, area, tangent, shp, wq, xi_q, edges, length = _face_geometry(slab, facet_ids)
    phi_q = _face_phi(slab, nodes, shp, xi_q, edges, length, phi_sp)
    beta_q = np.where(np.abs(phi_q) < bc.band, bc.beta_near, bc.beta_far)
    # face mass with beta folded in: (B, k, k)
    m = np.einsum("eq,q,qa,qb->eab", beta_q, wq, shp, shp, optimize=True) \
        * area[:, None, None]
    tt = np.einsum("bc,bd->bcd", tangent, tangent)          # (B, 2, 2)
    k = nodes.shape[1]
    dof = 3 * nodes                                          # x-component dof base
    rows_l, cols_l, vals_l = [], [], []
    for c in range(2):
        for d in range(2):
            rows_l.append(np.repeat(dof + c, k, axis=1).ravel())
            cols_l.append(np.tile(dof + d, (1, k)).ravel())
            vals_l.append((m * tt[:, c, d][:, None, None]).ravel())
    return (np.concatenate(rows_l), np.concatenate(cols_l),
            np.concatenate(vals_l))


def apply_navier_slip(system, slab: SpaceTimeSlab, tag: str, bc: NavierSlip,
                      phi_sp: np.ndarray):
    """Add the Navier-slip wall model for one boundary tag to an assembled
    (matrix, rhs) pair: tangential Robin term plus the strong zero-normal
    constraint."""
    A, rhs = system
    ids = _facet_ids_for_tag(slab, tag)
    rows, cols, vals = navier_slip_terms(slab, ids, bc, phi_sp)
    n = A.shape[0]
    A = (A + sp.coo_matrix((vals, (rows, cols)), shape=(n, n))).tocsr()
    axis = _normal_axis(slab.facet_normals[ids], tag)
    pin = np.unique(3 * slab.facet_nodes[ids] + axis[:, None])
    return fem.apply_dirichlet(A, rhs, pin, np.zeros(len(pin)))


def _boundary_sets(slab: SpaceTimeSlab, bcs: Mapping, phi_sp: np.ndarray,
                   pin_pressure: bool):
    """Dirichlet constraints, static Robin triplets, and static Neumann rhs."""
    mesh_tags = set(slab.facet_tags.tolist())
    spec_tags = set(bcs)
    missing = sorted(mesh_tags - spec_tags)
    unknown = sorted(spec_tags - mesh_tags)
    if missing:
        raise ConfigurationError(
            f"boundary tags without a condition: {', '.join(missing)}")
    if unknown:
        raise ConfigurationError(
            f"boundary conditions reference unknown tags: {', '.join(unknown)}")

    n_dofs = 3 * slab.n_nodes
    dir_mask = np.zeros(n_dofs, dtype=bool)
    dir_vals = np.zeros(n_dofs)
    rows = [np.zeros(0, dtype=np.int64)]
    cols = [np.zeros(0, dtype=np.int64)]
    vals = [np.zeros(0)]
    rhs = np.zeros(n_dofs)

    def set_dirichlet(idx, values):
        dir_mask[idx] = True
        dir_vals[idx] = values

    for tag in sorted(bcs):
        bc = bcs[tag]
        ids = _facet_ids_for_tag(slab, tag)
        if ids.size == 0:
            continue
        st_nodes = np.unique(slab.facet_nodes[ids])
        if isinstance(bc, Dirichlet):
            g = bc.g
            if callable(g):
                gv = np.array([g(x, y, t) for x, y, t in slab.st_nodes[st_nodes]],
                              dtype=float)
            else:
                gv = np.broadcast_to(np.asarray(g, dtype=float),
                                     (len(st_nodes), 2))
            set_dirichlet(3 * st_nodes, gv[:, 0])
            set_dirichlet(3 * st_nodes + 1, gv[:, 1])
        elif isinstance(bc, Neumann):
            nodes, area, _, shp, wq, _, _, _ = _face_geometry(slab, ids)
            load = np.einsum("q,qa->a", wq, shp) * area[:, None]   # (B, k)
            h = np.asarray(bc.traction, dtype=float)
            np.add.at(rhs, (3 * nodes).ravel(), (load * h[0]).ravel())
            np.add.at(rhs, (3 * nodes + 1).ravel(), (load * h[1]).ravel())
        elif isinstance(bc, (Slip, NavierSlip)):
            # pin the normal component on every face node (strong n.u = 0)
            axis = _normal_axis(slab.facet_normals[ids], tag)
            pin = np.unique(3 * slab.facet_nodes[ids] + axis[:, None])
            set_dirichlet(pin, 0.0)
            if isinstance(bc, NavierSlip):
                r, c, v = navier_slip_terms(slab, ids, bc, phi_sp)
                rows.append(r)
                cols.append(c)
                vals.append(v)
        else:
            raise ConfigurationError(
                f"unsupported boundary condition for tag '{tag}': {bc!r}")

    if pin_pressure:
        scores = slab.spatial.nodes[:, 0] + slab.spatial.nodes[:, 1]
        corner = int(np.argmax(scores))
        layers = np.where(slab.spatial_id == corner)[0]
        set_dirichlet(3 * layers + 2, 0.0)

    dir_idx = np.where(dir_mask)[0]
    return (dir_idx, dir_vals[dir_idx],
            np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
            rhs)


def build_slab_context(slab: SpaceTimeSlab, phi_sp: np.ndarray,
                       fluids: FluidPair, bcs: Mapping, gravity,
                       u_minus: np.ndarray, *, heaviside_scale: float = 1.5,
                       pin_pressure: bool = True) -> SlabContext:
    """Precompute everything about a slab that survives Picard iterations.

    Parameters
    ----------
    phi_sp : ndarray, shape (n_spatial,)
        Level set at the slab's lower time level; fluid properties are held
        fixed over the slab.
    u_minus : ndarray, shape (n_spatial, 2)
        Upper-trace velocity of the previous slab (initial condition for
        the first one); enters the temporal jump term.
    gravity : 2-sequence or callable
        Body force per unit mass; a callable (x, y, t) -> (fx, fy) is
        sampled at the element quadrature points.
    heaviside_scale : float
        Density smoothing half-width in multiples of the local node
        spacing (0 = sharp interface).
    """
    spatial = slab.spatial
    if heaviside_scale > 0.0:
        eps = heaviside_scale * spatial_mesh.node_spacing(spatial)
    else:
        eps = np.zeros(spatial.n_nodes)
    rho_sp, _ = fluid_properties(phi_sp, fluids, eps)
    rho_st = rho_sp[slab.spatial_id]
    phi_st = phi_sp[slab.spatial_id]

    if slab.kind == "FST":
        tri_grads, areas, dts = fem.prism_geometry(slab)
        geom = (tri_grads, areas, dts)
        h_e = spatial_mesh.element_sizes(spatial)
        dt_e = np.full(slab.n_elements, slab.dt)
    else:
        grads, vols = fem.tet_geometry(slab)
        geom = (grads, vols)
        h_e = spatial_mesh.element_sizes(spatial)[slab.element_prism]
        tt = slab.st_nodes[slab.elements, 2]
        dt_e = tt.max(axis=1) - tt.min(axis=1)

    edofs = fem.element_dofs(slab.elements, 3)
    rows, cols = fem.block_triplets(edofs)
    n_dofs = 3 * slab.n_nodes

    # temporal jump term: 2D mass (with density) on the lower trace
    tris = spatial.triangles
    mj = kernels.tri_mass_blocks(spatial_mesh.triangle_areas(spatial), rho_sp[tris])
    lt = slab.lower_trace[tris]                              # (T, 3) st nodes
    jr, jc, jv = [], [], []
    static_rhs = np.zeros(n_dofs)
    for c in range(2):
        dof = 3 * lt + c
        r, cc = fem.block_triplets(dof)
        jr.append(r)
        jc.append(cc)
        jv.append(mj.ravel())
        load = np.einsum("tab,tb->ta", mj, u_minus[tris, c], optimize=True)
        np.add.at(static_rhs, dof.ravel(), load.ravel())

    dir_idx, dir_vals, br, bc_, bv, brhs = _boundary_sets(
        slab, bcs, phi_sp, pin_pressure)
    static_rhs += brhs

    all_rows = np.concatenate([rows, *jr, br])
    all_cols = np.concatenate([cols, *jc, bc_])
    static_vals = np.concatenate([*jv, bv])
    pattern = fem.AssemblyPattern(all_rows, all_cols, n_dofs)

    if callable(gravity):
        body_q = _body_at_quadrature(slab, gravity)
        grav = (0.0, 0.0)
    else:
        body_q = None
        grav = tuple(gravity)

    return SlabContext(slab=slab, fluids=fluids, gravity=grav,
                       pattern=pattern, edofs=edofs, geom=geom, h_e=h_e,
                       dt_e=dt_e, rho_el=rho_st[slab.elements],
                       phi_el=phi_st[slab.elements], static_vals=static_vals,
                       static_rhs=static_rhs, dir_idx=dir_idx,
                       dir_vals=dir_vals, n_dofs=n_dofs, body_q=body_q)


def _body_at_quadrature(slab: SpaceTimeSlab, force: Callable):
    """Evaluate a body-force callable (x, y, t) -> (fx, fy) at every element
    quadrature point; returns two (Q, E) arrays."""
    coords = slab.st_nodes[slab.elements]                    # (E, k, 3)
    basis = fem.basis_for(slab.kind)
    fx, fy = [], []
    for pt, _ in basis.quadrature:
        xyz = np.einsum("ekd,k->ed", coords, basis.eval(pt), optimize=True)
        vals = np.array([force(x, y, t) for x, y, t in xyz], dtype=float)
        fx.append(vals[:, 0])
        fy.append(vals[:, 1])
    return np.array(fx), np.array(fy)


# ---------------------------------------------------------------------------
# assembly and the nonlinear loop

def _evaluate_viscosity(ctx: SlabContext, x: np.ndarray) -> np.ndarray:
    """Viscosity at all quadrature points from the current iterate."""
    slab = ctx.slab
    u = np.column_stack([x[0::3], x[1::3]])
    p = x[2::3]
    u_el = u[slab.elements]
    p_el = p[slab.elements]
    params = ctx.fluids.heavy_rheology
    eta_l = ctx.fluids.eta_L
    if slab.kind == "FST":
        tri_grads, _, dts = ctx.geom
        eta_q = kernels.viscosity_qp_prism(tri_grads, dts, u_el, p_el,
                                           ctx.phi_el, params, eta_l)
    else:
        grads, _ = ctx.geom
        eta_q = kernels.viscosity_qp_tet(grads, u_el, p_el, ctx.phi_el,
                                         params, eta_l)
    if not np.isfinite(eta_q).all():
        q, e = np.argwhere(~np.isfinite(eta_q))[0]
        raise ConvergenceError(
            f"rheology evaluation failed at element {e}: non-finite "
            f"viscosity (quadrature point {q}, "
            f"u range [{np.abs(u_el[e]).max():.3e}], "
            f"p range [{p_el[e].min():.3e}, {p_el[e].max():.3e}])")
    return eta_q


def _assemble_iterate(ctx: SlabContext, x: np.ndarray, eta_q: np.ndarray,
                      include_convection: bool, backend=None):
    """One Picard iterate's linear system (Dirichlet already applied)."""
    slab = ctx.slab
    kb = backend if hasattr(backend, "ns_prism_blocks") \
        else kernels.get_backend(backend)
    u = np.column_stack([x[0::3], x[1::3]])
    if include_convection:
        u_el = u[slab.elements]
    else:
        u_el = np.zeros((slab.n_elements, slab.elements.shape[1], 2))
    u_norm = np.linalg.norm(u_el, axis=2).mean(axis=1)
    eta_el = eta_q.mean(axis=0)
    rho_mean = ctx.rho_el.mean(axis=1)
    tau_m, tau_c, _ = compute_taus(u_norm, eta_el, rho_mean, ctx.dt_e, ctx.h_e)
    fx, fy = ctx.body_q if ctx.body_q is not None else ctx.gravity

    if slab.kind == "FST":
        tri_grads, areas, dts = ctx.geom
        K, R = kb.ns_prism_blocks(tri_grads, areas, dts, u_el, ctx.rho_el,
                                  eta_q, tau_m, tau_c, fx, fy)
    else:
        grads, vols = ctx.geom
        K, R = kb.ns_tet_blocks(grads, vols, u_el, ctx.rho_el, eta_q,
                                tau_m, tau_c, fx, fy)

    vals = np.concatenate([K.ravel(), ctx.static_vals])
    A = ctx.pattern.matrix(vals)
    rhs = fem.scatter_rhs(ctx.n_dofs, ctx.edofs, R) + ctx.static_rhs
    return fem.apply_dirichlet(A, rhs, ctx.dir_idx, ctx.dir_vals)


def assemble_slab(slab: SpaceTimeSlab, state_guess: SolutionState,
                  u_minus_prev: np.ndarray, phi, fluids: FluidPair,
                  bcs: Mapping, gravity, *, ctx: SlabContext | None = None,
                  eta_q: np.ndarray | None = None,
                  include_convection: bool = True, backend=None,
                  heaviside_scale: float = 1.5, pin_pressure: bool = True):
    """Assemble one slab's linear system at a given iterate.

    Returns the (matrix, rhs) pair with boundary conditions applied, ready
    for :func:`granst.fem.solve_linear`.  ``phi`` is the spatial level set
    at the slab's lower time level.  When ``eta_q`` is omitted the
    viscosity is evaluated fresh from ``state_guess``.
    """
    phi_sp = np.asarray(getattr(phi, "values", phi), dtype=float)
    if phi_sp.shape[0] == slab.n_nodes and slab.n_nodes != slab.spatial.n_nodes:
        phi_sp = phi_sp[slab.lower_trace]
    if ctx is None:
        ctx = build_slab_context(slab, phi_sp, fluids, bcs, gravity,
                                 np.asarray(u_minus_prev, dtype=float),
                                 heaviside_scale=heaviside_scale,
                                 pin_pressure=pin_pressure)
    x = state_guess.vector()
    if eta_q is None:
        eta_q = _evaluate_viscosity(ctx, x)
    return _assemble_iterate(ctx, x, eta_q, include_convection, backend)


def hydrostatic_pressure(coords: np.ndarray, phi: np.ndarray,
                         fluids: FluidPair, gravity) -> np.ndarray:
    """Bootstrap pressure rho_H * |g| * depth for heavy nodes, 0 for light.

    Depth is measured along gravity from the highest heavy node, which is
    exact for a flat free surface and a serviceable first iterate
    otherwise.
    """
    g = np.asarray(gravity, dtype=float)
    gnorm = float(np.linalg.norm(g))
    phi = np.asarray(phi, dtype=float)
    p = np.zeros(len(phi))
    heavy = phi < 0.0
    if gnorm == 0.0 or not heavy.any():
        return p
    height = np.asarray(coords)[:, :2] @ (-g / gnorm)
    depth = height[heavy].max() - height
    p[heavy] = fluids.rho_H * gnorm * np.maximum(depth[heavy], 0.0)
    return p


class _Anderson:
    """Windowed Anderson mixing over fixed-point iterates.

    Given the iterate ``x`` and the map value ``g = G(x)``, extrapolates
    the next iterate from the last ``m`` update directions.  The memory is
    dropped whenever the fixed-point residual ``g - x`` grows well past the
    best seen, which keeps the extrapolation from amplifying the strongly
    nonlinear first steps of a slab.
    """

    def __init__(self, m: int = 4):
        self.m = m
        self._dx: list = []
        self._df: list = []
        self._x_prev = None
        self._f_prev = None
        self._f_best = np.inf

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        f = g - x
        fn = np.linalg.norm(f)
        if fn > 2.0 * self._f_best and self._dx:
            self._dx.clear()
            self._df.clear()
            self._f_prev = None
        self._f_best = min(self._f_best, fn)
        if self._f_prev is not None:
            self._dx.append(x - self._x_prev)
            self._df.append(f - self._f_prev)
            if len(self._dx) > self.m:
                self._dx.pop(0)
                self._df.pop(0)
        self._x_prev = x
        self._f_prev = f
        if not self._dx:
            return g
        dF = np.column_stack(self._df)
        dX = np.column_stack(self._dx)
        gamma, *_ = np.linalg.lstsq(dF, f, rcond=None)
        return g - (dX + dF) @ gamma


def nonlinear_solve(slab: SpaceTimeSlab, u_minus_prev: np.ndarray, phi,
                    fluids: FluidPair, bcs: Mapping, gravity, *,
                    p_prev_upper: np.ndarray | None = None,
                    state_guess: SolutionState | None = None,
                    u_guess: np.ndarray | None = None,
                    include_convection: bool = True,
                    max_iters: int = 30, inc_tol: float = 1e-6,
                    res_tol: float = 1e-8, lin_tol: float = 1e-8,
                    backend=None, heaviside_scale: float = 1.5,
                    pin_pressure: bool = True, slab_id: int = 0,
                    ctx: SlabContext | None = None,
                    linear: fem.ReusableLU | None = None):
    """Solve one slab by Anderson-accelerated Picard iteration.

    Convection velocity and viscosity are re-evaluated at the latest
    iterate each pass and the resulting fixed point is extrapolated with
    windowed Anderson mixing.  Each linear system is solved through
    ``linear`` (a shared :class:`granst.fem.ReusableLU`), so consecutive
    iterations and consecutive slabs reuse one sparse factorization for as
    long as it keeps contracting.  ``u_guess`` seeds the first iterate's
    velocity (e.g. a temporal extrapolation); the jump term always uses
    ``u_minus_prev``.

    Converged when either gate holds:

    * the equation residual ``||b - A x||`` of the incoming iterate drops
      below ``res_tol * ||b||`` (detects exactly reproduced states), or
    * the fixed-point increments of velocity and pressure both fall below
      ``inc_tol``, measured in the RMS norm relative to the current
      velocity and pressure scales.  The velocity scale is floored at one
      percent of the free-fall speed ``|g| dt`` so a slab that comes to
      rest converges rather than chasing roundoff.

    Returns
    -------
    (SolutionState, SlabStats)

    Raises
    ------
    ConvergenceError
        If ``max_iters`` is exceeded; the message carries the per-iteration
        increment history so a driver may retry with a halved slab.
    """
    u_minus_prev = np.asarray(u_minus_prev, dtype=float)
    phi_sp = np.asarray(getattr(phi, "values", phi), dtype=float)
    if phi_sp.shape[0] == slab.n_nodes and slab.n_nodes != slab.spatial.n_nodes:
        phi_sp = phi_sp[slab.lower_trace]
    if ctx is None:
        ctx = build_slab_context(slab, phi_sp, fluids, bcs, gravity,
                                 u_minus_prev, heaviside_scale=heaviside_scale,
                                 pin_pressure=pin_pressure)
    kb = kernels.get_backend(backend)

    if state_guess is not None:
        x = state_guess.vector()
    else:
        u_start = u_minus_prev if u_guess is None \
            else np.asarray(u_guess, dtype=float)
        u0 = u_start[slab.spatial_id]
        if p_prev_upper is not None:
            p0 = np.asarray(p_prev_upper, dtype=float)[slab.spatial_id]
        elif callable(gravity):
            p0 = np.zeros(slab.n_nodes)
        else:
            phi_st = phi_sp[slab.spatial_id]
            p0 = hydrostatic_pressure(slab.st_nodes, phi_st, fluids, gravity)
        x = np.empty(3 * slab.n_nodes)
        x[0::3] = u0[:, 0]
        x[1::3] = u0[:, 1]
        x[2::3] = p0
    x[ctx.dir_idx] = ctx.dir_vals

    if callable(gravity):
        u_floor = 0.0
    else:
        u_floor = 0.01 * float(np.hypot(*gravity)) * (slab.t_hi - slab.t_lo)
    lin = linear if linear is not None else fem.ReusableLU()
    anderson = _Anderson()

    stats = SlabStats(slab_id=slab_id)
    for it in range(1, max_iters + 1):
        stats.iterations = it
        tic = time.perf_counter()
        eta_q = _evaluate_viscosity(ctx, x)
        A, b = _assemble_iterate(ctx, x, eta_q, include_convection, kb)
        stats.t_formation += time.perf_counter() - tic

        r0 = b - A @ x
        res = np.linalg.norm(r0) / max(np.linalg.norm(b), _TINY)
        if res <= res_tol:
            stats.residuals.append(float(res))
            stats.converged = True
            break

        # inexact Picard: each linear solve only needs to land well below
        # the current nonlinear residual, which lets a slightly stale
        # factorization serve many iterations; far from the convergence
        # gate a partially refined solve is good enough too
        tol_k = max(lin_tol, 0.02 * res)
        coarse = not stats.residuals or stats.residuals[-1] > 10.0 * inc_tol
        tic = time.perf_counter()
        g = lin.solve(A, b, x0=x, tol=tol_k, r0=r0, allow_stale=coarse)
        stats.t_solution += time.perf_counter() - tic
        gx, sweeps = g
        stats.linear_iterations += sweeps

        f = gx - x
        u_scale = max(np.sqrt((gx[0::3] ** 2 + gx[1::3] ** 2).mean()),
                      u_floor, _TINY)
        p_scale = max(np.sqrt((gx[2::3] ** 2).mean()), _TINY)
        du = np.sqrt((f[0::3] ** 2 + f[1::3] ** 2).mean()) / u_scale
        dp = np.sqrt((f[2::3] ** 2).mean()) / p_scale
        stats.residuals.append(float(max(du, dp)))
        if du < inc_tol and dp < inc_tol:
            x = gx
            stats.converged = True
            break
        x = anderson.step(x, gx)
        x[ctx.dir_idx] = ctx.dir_vals

    if not stats.converged:
        hist = ", ".join(f"{r:.3e}" for r in stats.residuals)
        raise ConvergenceError(
            f"slab {slab_id} failed to converge after {max_iters} nonlinear "
            f"iterations (increment history: {hist}); consider retrying with "
            "a halved slab size", history=stats.residuals)

    log.info("slab=%d iters=%d linear_iters=%d residual=%.3e "
             "formation_s=%.3f solution_s=%.3f", slab_id, stats.iterations,
             stats.linear_iterations, stats.residuals[-1],
             stats.t_formation, stats.t_solution)
    state = SolutionState.from_vector(slab, x)
    state.validate()
    return state, stats
