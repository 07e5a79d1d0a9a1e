import numpy as np
import pytest

from granst import ns_solver as ns
from granst.errors import ConfigurationError, ConvergenceError
from granst.levelset import FluidPair
from granst.ns_solver import (
    Dirichlet,
    NavierSlip,
    Neumann,
    Slip,
    SolutionState,
    compute_taus,
    hydrostatic_pressure,
    nonlinear_solve,
)
from granst.rheology import RheologyParams
from granst.spatial_mesh import make_mesh, triangle_areas, uniform_rect_mesh
from granst.st_mesh import extrude_fst


def newtonian(eta, rho=1.0):
    """Single-phase Newtonian fluid, realized as the light phase."""
    return FluidPair(rho_H=2.0 * rho, rho_L=rho, eta_L=eta,
                     heavy_rheology=RheologyParams())


def all_light(mesh):
    return np.full(mesh.n_nodes, 10.0)


def march(mesh, bcs, fluids, gravity, phi, dts, u0=None, **kw):
    """March through consecutive flat slabs; returns the final state."""
    u = np.zeros((mesh.n_nodes, 2)) if u0 is None else np.asarray(u0, float)
    p_up = None
    state = None
    t = 0.0
    for k, dt in enumerate(dts):
        slab = extrude_fst(mesh, t, t + dt)
        state, _ = nonlinear_solve(slab, u, phi, fluids, bcs, gravity,
                                   p_prev_upper=p_up, slab_id=k, **kw)
        u = state.upper_u
        p_up = state.upper_p
        t += dt
    return state


# ---------------------------------------------------------------------------
# stabilization parameters

def test_tau_temporal_limit():
    tau_m, tau_c, tau_l = compute_taus(0.0, 0.0, 1.0, 0.1, 0.5)
    assert tau_m == pytest.approx(0.05, rel=1e-14)
    assert tau_l == pytest.approx(0.05, rel=1e-14)
    assert tau_c == pytest.approx(1.25, rel=1e-14)


def test_tau_advective_limit():
    tau_m, _, tau_l = compute_taus(1.0, 0.0, 1.0, 1e9, 0.2)
    assert tau_m == pytest.approx(0.1, rel=1e-10)
    assert tau_l == pytest.approx(0.1, rel=1e-10)


def test_tau_mixed_frozen():
    tau_m, tau_c, tau_l = compute_taus(2.0, 0.04, 1.0, 0.1, 0.2)
    assert tau_m == pytest.approx(0.03500700210070024, rel=1e-14)
    assert tau_c == pytest.approx(0.2856571371417141, rel=1e-14)
    assert tau_l == pytest.approx(0.035355339059327376, rel=1e-14)


def test_tau_vectorized_matches_scalar():
    u = np.array([0.0, 1.0, 2.0])
    eta = np.array([0.0, 0.01, 0.04])
    rho = np.ones(3)
    dt = np.array([0.1, 0.5, 0.1])
    h = np.array([0.5, 0.2, 0.2])
    tm, tc, tl = compute_taus(u, eta, rho, dt, h)
    for i in range(3):
        si = compute_taus(u[i], eta[i], rho[i], dt[i], h[i])
        assert tm[i] == pytest.approx(si[0], rel=1e-15)
        assert tc[i] == pytest.approx(si[1], rel=1e-15)
        assert tl[i] == pytest.approx(si[2], rel=1e-15)


def test_tau_rejects_degenerate_extents():
    with pytest.raises(ConfigurationError):
        compute_taus(1.0, 0.1, 1.0, 0.0, 0.5)
    with pytest.raises(ConfigurationError):
        compute_taus(1.0, 0.1, 1.0, 0.1, -0.5)


# ---------------------------------------------------------------------------
# exact solutions the discretization must reproduce

def test_rest_state_is_a_fixed_point():
    mesh = uniform_rect_mesh(1.0, 1.0, 8, 8)
    bcs = {t: Dirichlet((0.0, 0.0)) for t in ("left", "right", "top", "bottom")}
    slab = extrude_fst(mesh, 0.0, 0.2)
    state, stats = nonlinear_solve(slab, np.zeros((mesh.n_nodes, 2)),
                                   all_light(mesh), newtonian(0.3), bcs,
                                   (0.0, 0.0))
    assert stats.iterations == 1
    assert stats.linear_iterations == 0
    assert np.abs(state.u).max() == 0.0
    assert np.abs(state.p).max() == 0.0


def test_couette_profile_is_exact():
    mesh = uniform_rect_mesh(1.0, 1.0, 10, 10)
    profile = lambda x, y, t: (y, 0.0)
    bcs = {"top": Dirichlet((1.0, 0.0)), "bottom": Dirichlet((0.0, 0.0)),
           "left": Dirichlet(profile), "right": Dirichlet(profile)}
    u0 = np.column_stack([mesh.nodes[:, 1], np.zeros(mesh.n_nodes)])
    fluids = newtonian(0.5)
    phi = all_light(mesh)

    u = u0
    p_up = None
    for k in range(2):
        slab = extrude_fst(mesh, 0.25 * k, 0.25 * (k + 1))
        state, stats = nonlinear_solve(slab, u, phi, fluids, bcs, (0.0, 0.0),
                                       p_prev_upper=p_up, slab_id=k)
        assert stats.iterations == 1           # already the fixed point
        assert stats.linear_iterations == 0
        u = state.upper_u
        p_up = state.upper_p

    assert np.abs(u[:, 0] - mesh.nodes[:, 1]).max() < 1e-9
    assert np.abs(u[:, 1]).max() < 1e-9
    assert np.abs(p_up).max() < 1e-9


def test_couette_restart_is_deterministic():
    mesh = uniform_rect_mesh(1.0, 1.0, 6, 6)
    profile = lambda x, y, t: (y, 0.0)
    bcs = {"top": Dirichlet((1.0, 0.0)), "bottom": Dirichlet((0.0, 0.0)),
           "left": Dirichlet(profile), "right": Dirichlet(profile)}
    u0 = np.column_stack([mesh.nodes[:, 1], np.zeros(mesh.n_nodes)])
    slab = extrude_fst(mesh, 0.0, 0.25)
    args = (slab, u0, all_light(mesh), newtonian(0.5), bcs, (0.0, 0.0))
    s1, _ = nonlinear_solve(*args)
    s2, _ = nonlinear_solve(*args)
    assert np.array_equal(s1.u, s2.u)
    assert np.array_equal(s1.p, s2.p)


def test_couette_transient_reaches_steady_state():
    mesh = uniform_rect_mesh(1.0, 1.0, 10, 10)
    profile = lambda x, y, t: (y, 0.0)
    bcs = {"top": Dirichlet((1.0, 0.0)), "bottom": Dirichlet((0.0, 0.0)),
           "left": Dirichlet(profile), "right": Dirichlet(profile)}
    state = march(mesh, bcs, newtonian(1.0), (0.0, 0.0), all_light(mesh),
                  [0.2] * 10)
    u = state.upper_u
    assert np.abs(u[:, 0] - mesh.nodes[:, 1]).max() < 1e-6
    assert np.abs(u[:, 1]).max() < 1e-6


def test_galilean_uniform_translation():
    mesh = uniform_rect_mesh(1.0, 1.0, 10, 10)
    v = 3.0
    bcs = {"left": Dirichlet((v, 0.0)), "right": Dirichlet((v, 0.0)),
           "top": Slip(), "bottom": Slip()}
    u0 = np.column_stack([np.full(mesh.n_nodes, v), np.zeros(mesh.n_nodes)])
    state = march(mesh, bcs, newtonian(0.2), (0.0, 0.0), all_light(mesh),
                  [0.25] * 2, u0=u0)
    assert np.abs(state.upper_u[:, 0] - v).max() < 1e-9
    assert np.abs(state.upper_u[:, 1]).max() < 1e-9
    assert np.abs(state.upper_p).max() < 1e-9


def test_degenerate_clamp_reduces_to_newtonian():
    # A granular phase whose viscosity clamp pins eta to 0.5 must reproduce
    # the Newtonian cavity flow with eta = 0.5.
    mesh = uniform_rect_mesh(1.0, 1.0, 10, 10)
    bcs = {"top": Dirichlet((1.0, 0.0)), "bottom": Dirichlet((0.0, 0.0)),
           "left": Dirichlet((0.0, 0.0)), "right": Dirichlet((0.0, 0.0))}
    gran = RheologyParams(eta_min=0.5, eta_max=0.5 * (1.0 + 1e-12))
    heavy_fluids = FluidPair(rho_H=1.0, rho_L=0.5, eta_L=0.5,
                             heavy_rheology=gran)
    light_fluids = newtonian(0.5)

    slab = extrude_fst(mesh, 0.0, 0.2)
    u0 = np.zeros((mesh.n_nodes, 2))
    sA, _ = nonlinear_solve(slab, u0, -all_light(mesh), heavy_fluids, bcs,
                            (0.0, 0.0))
    sB, _ = nonlinear_solve(slab, u0, all_light(mesh), light_fluids, bcs,
                            (0.0, 0.0))
    scale = np.abs(sB.u).max()
    assert np.abs(sA.u - sB.u).max() < 1e-6 * scale
    assert np.abs(sA.p - sB.p).max() < 1e-6 * max(np.abs(sB.p).max(), 1.0)


# ---------------------------------------------------------------------------
# hydrostatics

def test_hydrostatic_pressure_bootstrap():
    coords = np.array([[0.0, 0.0], [0.0, 0.5], [0.0, 1.0]])
    phi = np.array([-1.0, -0.1, 1.0])
    fluids = FluidPair(rho_H=2.0, rho_L=1e-3, eta_L=1e-3,
                       heavy_rheology=RheologyParams())
    p = hydrostatic_pressure(coords, phi, fluids, (0.0, -3.0))
    assert p[2] == 0.0                        # light
    assert p[1] == pytest.approx(0.0)         # surface-level heavy node
    assert p[0] == pytest.approx(2.0 * 3.0 * 0.5)


def test_heavy_layer_stays_hydrostatic():
    mesh = uniform_rect_mesh(1.0, 1.0, 20, 20)
    phi = mesh.nodes[:, 1] - 0.6
    gran = RheologyParams(mu_s=0.32, mu_2=0.60, I_0=0.4,
                          d=0.012114317043433485, rho_g=1.0, I1_N=0.0136306,
                          eta_min=2e-3, eta_max=1e3)
    fluids = FluidPair(rho_H=1.0, rho_L=1e-3, eta_L=5e-2, heavy_rheology=gran)
    bcs = {t: Slip() for t in ("left", "right", "top", "bottom")}
    state = march(mesh, bcs, fluids, (0.0, -1.0), phi, [0.1] * 5)

    u = state.upper_u
    assert np.hypot(u[:, 0], u[:, 1]).max() < 1e-3

    # pressure against rho_H * g * depth, away from the interface band
    interior = phi < -0.075
    p_exact = 0.6 - mesh.nodes[:, 1]
    err = np.abs(state.upper_p[interior] - p_exact[interior])
    assert err.max() / p_exact[interior].max() < 0.02


# ---------------------------------------------------------------------------
# wall models

def test_navier_slip_high_beta_recovers_no_slip():
    mesh = uniform_rect_mesh(1.0, 1.0, 10, 10)
    profile = lambda x, y, t: (y, 0.0)
    bcs = {"top": Dirichlet((1.0, 0.0)),
           "bottom": NavierSlip(beta_far=1e12, beta_near=1e12, band=0.0),
           "left": Dirichlet(profile), "right": Dirichlet(profile)}
    u0 = np.column_stack([mesh.nodes[:, 1], np.zeros(mesh.n_nodes)])
    state = march(mesh, bcs, newtonian(0.5), (0.0, 0.0), all_light(mesh),
                  [0.25] * 2, u0=u0)
    u = state.upper_u
    bottom = mesh.nodes[:, 1] < 1e-12
    assert np.abs(u[bottom, 0]).max() < 1e-6          # wall velocity killed
    assert np.abs(u[:, 0] - mesh.nodes[:, 1]).max() < 1e-6


def test_navier_slip_zero_beta_is_free_slip():
    # Uniform horizontal body force with free-slip walls: the exact solution
    # u = (t, 0) is linear in time, so the slab reproduces it to solver tol.
    mesh = uniform_rect_mesh(1.0, 1.0, 8, 8)
    ramp = lambda x, y, t: (t, 0.0)
    common = {"left": Dirichlet(ramp), "right": Dirichlet(ramp)}
    u_final = {}
    for name, wall in (("navier0", NavierSlip(0.0, 0.0, 0.0)), ("slip", Slip())):
        bcs = dict(common, top=wall, bottom=wall)
        state = march(mesh, bcs, newtonian(0.4), (1.0, 0.0), all_light(mesh),
                      [0.2] * 2)
        u_final[name] = state.upper_u
    for u in u_final.values():
        assert np.abs(u[:, 0] - 0.4).max() < 1e-8     # walls do not resist
        assert np.abs(u[:, 1]).max() < 1e-9
    assert np.abs(u_final["navier0"] - u_final["slip"]).max() < 1e-12


def test_slip_requires_axis_aligned_wall():
    # Shear the mesh so the "bottom" facets are no longer axis aligned.
    mesh = uniform_rect_mesh(1.0, 1.0, 4, 4)
    nodes = mesh.nodes.copy()
    nodes[:, 1] += 0.3 * nodes[:, 0]
    sheared = make_mesh(nodes, mesh.triangles, mesh.facets, mesh.facet_tags)
    slab = extrude_fst(sheared, 0.0, 0.1)
    bcs = {"top": Slip(), "bottom": Slip(),
           "left": Dirichlet((0.0, 0.0)), "right": Dirichlet((0.0, 0.0))}
    with pytest.raises(ConfigurationError, match="axis-aligned"):
        nonlinear_solve(slab, np.zeros((sheared.n_nodes, 2)),
                        all_light(sheared), newtonian(0.1), bcs, (0.0, 0.0))


def test_boundary_tags_must_be_covered():
    mesh = uniform_rect_mesh(1.0, 1.0, 4, 4)
    slab = extrude_fst(mesh, 0.0, 0.1)
    bcs = {"top": Slip(), "bottom": Slip(), "left": Slip()}
    with pytest.raises(ConfigurationError, match="right"):
        nonlinear_solve(slab, np.zeros((mesh.n_nodes, 2)), all_light(mesh),
                        newtonian(0.1), bcs, (0.0, 0.0))
    bcs = {"top": Slip(), "bottom": Slip(), "left": Slip(), "right": Slip(),
           "lid": Slip()}
    with pytest.raises(ConfigurationError, match="lid"):
        nonlinear_solve(slab, np.zeros((mesh.n_nodes, 2)), all_light(mesh),
                        newtonian(0.1), bcs, (0.0, 0.0))


# ---------------------------------------------------------------------------
# jump term wiring

def test_jump_load_matches_mass_matrix():
    # Changing only the previous-slab trace changes the rhs by the
    # density-weighted spatial mass matrix applied to the trace difference.
    mesh = uniform_rect_mesh(1.0, 1.0, 6, 6)
    slab = extrude_fst(mesh, 0.0, 0.1)
    fluids = newtonian(0.3, rho=2.0)
    phi = all_light(mesh)
    bcs = {t: Neumann((0.0, 0.0)) for t in ("left", "right", "top", "bottom")}

    rng = np.random.default_rng(7)
    du = rng.standard_normal((mesh.n_nodes, 2))
    guess = SolutionState.from_vector(slab, np.zeros(3 * slab.n_nodes))

    a1, b1 = ns.assemble_slab(slab, guess, np.zeros((mesh.n_nodes, 2)),
                              phi, fluids, bcs, (0.0, 0.0))
    a2, b2 = ns.assemble_slab(slab, guess, du, phi, fluids, bcs, (0.0, 0.0))
    assert abs(a1 - a2).max() < 1e-13

    # oracle: consistent P1 mass matrix, scaled by the density
    areas = triangle_areas(mesh)
    m = np.zeros((mesh.n_nodes, mesh.n_nodes))
    for tri, ar in zip(mesh.triangles, areas):
        for i, a in enumerate(tri):
            for j, b in enumerate(tri):
                m[a, b] += ar / 6.0 if i == j else ar / 12.0
    expected = 2.0 * m @ du

    db = b2 - b1
    lower = slab.lower_trace
    got = np.column_stack([db[3 * lower], db[3 * lower + 1]])
    assert np.abs(got - expected).max() < 1e-12

    rest = db.copy()
    rest[3 * lower] = 0.0
    rest[3 * lower + 1] = 0.0
    assert np.abs(rest).max() < 1e-12    # nothing else moved


# ---------------------------------------------------------------------------
# temporal accuracy

def test_linear_in_time_data_is_reproduced_exactly():
    # Walls prescribing u = sin(t) (a, b) are sampled at the slab's time
    # layers, and a slab-constant pressure absorbs the transient residual of
    # the nodal interpolant, so the discrete solution hits the layer values
    # to solver precision regardless of slab width.
    mesh = uniform_rect_mesh(1.0, 1.0, 10, 10)
    a, b = 0.3, 0.7
    g = lambda x, y, t: (a * np.sin(t), b * np.sin(t))
    bcs = {t: Dirichlet(g) for t in ("left", "right", "top", "bottom")}
    state = march(mesh, bcs, newtonian(1.0), (0.0, 0.0), all_light(mesh),
                  [0.1] * 10, include_convection=False, lin_tol=1e-12,
                  res_tol=1e-11, inc_tol=1e-10)
    exact = np.array([a, b]) * np.sin(1.0)
    assert np.abs(state.upper_u - exact).max() < 1e-10


def rotational_stokes_error(mesh, dt, t_final=1.0):
    """Endpoint velocity error for the manufactured solution
    u = sin(t) (y, -x), p = 0, driven by the body force cos(t) (y, -x).

    The force field is rotational (not a pressure gradient), so its
    temporal curvature cannot be absorbed by the pressure; the fields are
    spatially linear and divergence free, so the endpoint error is purely
    temporal.
    """
    walls = lambda x, y, t: (np.sin(t) * y, -np.sin(t) * x)
    force = lambda x, y, t: (np.cos(t) * y, -np.cos(t) * x)
    bcs = {t: Dirichlet(walls) for t in ("left", "right", "top", "bottom")}
    n = round(t_final / dt)
    state = march(mesh, bcs, newtonian(1.0), force, all_light(mesh),
                  [dt] * n, include_convection=False, lin_tol=1e-12,
                  res_tol=1e-11, inc_tol=1e-10)
    exact = np.sin(t_final) * np.column_stack([mesh.nodes[:, 1],
                                               -mesh.nodes[:, 0]])
    return np.abs(state.upper_u - exact).max()


def test_temporal_order_unsteady_stokes():
    mesh = uniform_rect_mesh(1.0, 1.0, 10, 10)
    widths = [0.025, 0.0125, 0.00625]
    errors = np.array([rotational_stokes_error(mesh, dt) for dt in widths])
    assert np.all(errors[1:] < errors[:-1])
    slope = np.polyfit(np.log(widths), np.log(errors), 1)[0]
    assert slope >= 1.8, f"temporal order {slope:.2f} below 1.8 ({errors})"


# ---------------------------------------------------------------------------
# failure reporting

def test_nonconvergence_reports_history():
    mesh = uniform_rect_mesh(1.0, 1.0, 8, 8)
    bcs = {"top": Dirichlet((1.0, 0.0)), "bottom": Dirichlet((0.0, 0.0)),
           "left": Dirichlet((0.0, 0.0)), "right": Dirichlet((0.0, 0.0))}
    slab = extrude_fst(mesh, 0.0, 0.2)
    with pytest.raises(ConvergenceError, match="halved slab") as exc:
        nonlinear_solve(slab, np.zeros((mesh.n_nodes, 2)), all_light(mesh),
                        newtonian(0.05), bcs, (0.0, 0.0), max_iters=1)
    assert len(exc.value.history) == 1
