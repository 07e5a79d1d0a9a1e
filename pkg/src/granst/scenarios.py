"""Benchmark scenarios: granular column collapse and inclined dam break.

Preset builders assemble everything one experiment needs (mesh, initial
interface, fluid pair, boundary conditions, slab schedule) into a
:class:`ScenarioConfig`; :func:`run` advances it slab by slab with the
staggered scheme (flow solve, then interface transport) and records the
verification diagnostics: flow-front position, impact force on the
obstacle, and wall-clock cost split into system formation and system
solution.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import fem
from . import st_mesh
from . import ns_solver as ns
from .errors import ConfigurationError, ConvergenceError
from .levelset import (FluidPair, advect_slab, heavy_area,
                       mark_interface_band, redistance)
from .rheology import RheologyParams
from .spatial_mesh import (SpatialMesh, rect_mesh_from_coords,
                           rect_mesh_with_obstacle, uniform_rect_mesh)

__all__ = [
    "SlabSchedule", "ScenarioConfig", "SlabRecord", "TimeSeries",
    "RunResult", "setup_column", "setup_dam_break", "flow_front",
    "impact_force", "impact_time", "run", "performance_table",
    "graded_coords", "corner_signed_distance",
]

logger = logging.getLogger(__name__)

COLUMN_MODES = ("FST_fine", "FST_coarse", "SST")


# ---------------------------------------------------------------------------
# configuration containers

@dataclass(frozen=True)
class SlabSchedule:
    """Temporal discretization of one run.

    Parameters
    ----------
    kind : str
        "FST" (extruded prisms) or "SST" (simplices with temporal
        refinement around the interface).
    dt : float
        Slab width in solver time units.
    n_slabs : int
        Number of slabs to the final time.
    max_levels : int
        Temporal elements per slab at the interface (SST refinement);
        1 keeps the slab unrefined.
    band_halfwidth : float
        Spatial halfwidth of the refinement seed band around phi = 0.
    """
    kind: str
    dt: float
    n_slabs: int
    max_levels: int = 1
    band_halfwidth: float = 0.0

    def __post_init__(self):
        if self.kind not in ("FST", "SST"):
            raise ConfigurationError(f"unknown slab kind {self.kind!r}")
        if self.dt <= 0 or self.n_slabs < 1:
            raise ConfigurationError("slab schedule needs dt > 0, n_slabs >= 1")
        if self.max_levels < 1:
            raise ConfigurationError("max_levels must be >= 1")
        if self.kind == "SST" and self.max_levels > 1 \
                and self.band_halfwidth <= 0:
            raise ConfigurationError(
                "SST temporal refinement needs band_halfwidth > 0")


@dataclass
class ScenarioConfig:
    """Fully resolved scenario: geometry, physics, schedule, diagnostics.

    ``L0`` and ``t_star`` are the characteristic length and time used to
    normalize the reported front position (x / L0) and row times
    (t / t_star); both default to 1 so raw units pass through.
    """
    name: str
    label: str
    mesh: SpatialMesh
    phi0: np.ndarray
    fluids: FluidPair
    bcs: dict
    gravity: tuple
    schedule: SlabSchedule
    L0: float = 1.0
    t_star: float = 1.0
    redistance_every: int = 10
    obstacle_tag: str | None = None
    heaviside_scale: float = 1.5
    max_iters: int = 60
    inc_tol: float = 3e-4
    res_tol: float = 1e-8
    lin_tol: float = 1e-6

    def __post_init__(self):
        self.phi0 = np.asarray(self.phi0, dtype=float)
        errors = []
        if self.phi0.shape != (self.mesh.n_nodes,):
            errors.append("phi0 length does not match the mesh")
        if self.L0 <= 0 or self.t_star <= 0:
            errors.append("L0 and t_star must be positive")
        if self.redistance_every < 1:
            errors.append("redistance_every must be >= 1")
        if self.obstacle_tag is not None \
                and self.obstacle_tag not in self.mesh.facet_tags:
            errors.append(f"no facets tagged {self.obstacle_tag!r}")
        if errors:
            raise ConfigurationError("; ".join(errors))

    @property
    def t_final(self) -> float:
        return self.schedule.dt * self.schedule.n_slabs


# ---------------------------------------------------------------------------
# geometry helpers

def graded_coords(h_fine: float, fine_stop: float, total: float,
                  n_coarse: int) -> np.ndarray:
    """1D coordinates: uniform spacing h_fine on [0, fine_stop], then
    n_coarse geometrically growing cells reaching exactly ``total``.

    The stretch ratio solves h * sum(r^k, k=1..n) = total - fine_stop, so
    the first coarse cell blends continuously with the fine region.
    """
    n_fine = round(fine_stop / h_fine)
    if abs(n_fine * h_fine - fine_stop) > 1e-9 * fine_stop:
        raise ConfigurationError(
            f"fine_stop {fine_stop} is not a multiple of h_fine {h_fine}")
    xs = np.linspace(0.0, fine_stop, n_fine + 1)
    if n_coarse == 0:
        if abs(fine_stop - total) > 1e-12 * total:
            raise ConfigurationError("no coarse cells but total > fine_stop")
        return xs
    length = total - fine_stop
    if length <= 0:
        raise ConfigurationError("total must exceed fine_stop")

    def gap(r):
        return h_fine * r * (r ** n_coarse - 1.0) / (r - 1.0) - length

    if abs(n_coarse * h_fine - length) < 1e-12 * length:
        ratio = 1.0
        tail = fine_stop + h_fine * np.arange(1, n_coarse + 1)
    else:
        lo, hi = (1.0 + 1e-12, 50.0) if length > n_coarse * h_fine \
            else (1e-3, 1.0 - 1e-12)
        ratio = brentq(gap, lo, hi)
        tail = fine_stop + np.cumsum(h_fine * ratio ** np.arange(1, n_coarse + 1))
    tail[-1] = total    # kill roundoff on the outer boundary
    return np.concatenate([xs, tail])


def corner_signed_distance(nodes: np.ndarray, bx: float,
                           by: float) -> np.ndarray:
    """Signed distance to the free surface of a block {x<=bx, y<=by}.

    The block leans against the left wall and the floor, so only the two
    free faces (and their corner arc) count as interface; wall-backed
    faces carry no zero crossing.  Negative inside (heavy fluid).
    """
    dx = nodes[:, 0] - bx
    dy = nodes[:, 1] - by
    inside = np.maximum(dx, dy)
    outside = np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
    return np.where((dx <= 0) & (dy <= 0), inside, outside)


# ---------------------------------------------------------------------------
# presets

_COLUMN = {
    0.5: dict(Ng=3407, eta_min_mult=20.0, L0=1.0),
    6.26: dict(Ng=6036, eta_min_mult=200.0, L0=0.1),
}
_COLUMN_DOMAIN = (5.5, 1.1)
_COLUMN_I1N = 0.0136306    # well-posedness knot scanned for (0.32, 0.60, 0.4)
_DAM_I1N = 0.01            # pragmatic knot; see rheology notes


def _column_mesh(a: float, paper_scale: bool) -> SpatialMesh:
    lx, ly = _COLUMN_DOMAIN
    if paper_scale:
        nx, ny = (276, 56) if a == 0.5 else (1101, 221)
        return uniform_rect_mesh(lx, ly, nx, ny)
    if a == 0.5:
        # fine h = L0/64 over the collapse region (runout ends near 2.2),
        # stretched fringe beyond
        h = 1.0 / 64.0
        xs = graded_coords(h, 2.3125, lx, 12)
        ys = graded_coords(h, 0.546875, ly, 7)
    else:
        h = 0.01    # ten cells across the thin column (L0 = 0.1)
        xs = graded_coords(h, 1.25, lx, 16)
        ys = graded_coords(h, 0.66, ly, 6)
    return rect_mesh_from_coords(xs, ys)


def setup_column(a: float = 0.5, mode: str = "SST", *,
                 paper_scale: bool = False) -> ScenarioConfig:
    """Column-collapse preset for aspect ratio ``a`` in {0.5, 6.26}.

    Modes: "FST_fine" (normalized slab 0.02, 250 slabs), "FST_coarse"
    (0.1, 50 slabs), "SST" (0.1, 50 slabs, five temporal levels at the
    interface, effective 0.02 there).  Slab widths are stated in
    normalized time t / sqrt(H0 / g) and converted to solver time here.
    """
    if a not in _COLUMN:
        raise ConfigurationError(
            f"unknown column aspect ratio {a!r}; presets: {sorted(_COLUMN)}")
    modes = {m.lower(): m for m in COLUMN_MODES}
    if str(mode).lower() not in modes:
        raise ConfigurationError(
            f"unknown column mode {mode!r}; expected one of {COLUMN_MODES}")
    mode = modes[str(mode).lower()]

    p = _COLUMN[a]
    L0 = p["L0"]
    H0 = a * L0
    g = 1.0
    rho_H = 1.0
    eta_L = 1e-4 * np.sqrt(g) * L0 ** 1.5 * rho_H
    d = H0 / np.sqrt(a * p["Ng"])
    rheo = RheologyParams(mu_s=0.32, mu_2=0.60, I_0=0.4, d=d, rho_g=rho_H,
                          I1_N=_COLUMN_I1N, eta_min=p["eta_min_mult"] * eta_L,
                          eta_max=1000.0)
    fluids = FluidPair(rho_H=rho_H, rho_L=1e-3, eta_L=eta_L,
                       heavy_rheology=rheo)

    mesh = _column_mesh(a, paper_scale)
    h_fine = (0.02 if a == 0.5 else 0.005) if paper_scale \
        else (1.0 / 64.0 if a == 0.5 else 0.01)
    phi0 = corner_signed_distance(mesh.nodes, L0, H0)
    bcs = {
        "left": ns.Slip(), "right": ns.Slip(), "top": ns.Slip(),
        "bottom": ns.NavierSlip(beta_far=1e6, beta_near=1e-2,
                                band=2.0 * h_fine),
    }

    t_star = float(np.sqrt(H0 / g))
    t_final_norm = 5.0
    if mode == "FST_fine":
        sched = SlabSchedule("FST", 0.02 * t_star, round(t_final_norm / 0.02))
        label = "FST dt=0.02"
    elif mode == "FST_coarse":
        sched = SlabSchedule("FST", 0.1 * t_star, round(t_final_norm / 0.1))
        label = "FST dt=0.1"
    else:
        sched = SlabSchedule("SST", 0.1 * t_star, round(t_final_norm / 0.1),
                             max_levels=5, band_halfwidth=3.0 * h_fine)
        label = "SST dt=0.1-0.02"
    return ScenarioConfig(
        name=f"column_a{a}", label=label, mesh=mesh, phi0=phi0,
        fluids=fluids, bcs=bcs, gravity=(0.0, -g), schedule=sched,
        L0=L0, t_star=t_star)


def _dam_mesh(paper_scale: bool) -> SpatialMesh:
    if paper_scale:
        xs = np.concatenate([
            np.linspace(0.0, 2.3, 369),
            np.linspace(2.3, 2.35, 9)[1:],
            np.linspace(2.35, 3.0, 105)[1:],
        ])
        ys = graded_coords(0.005, 0.5, 1.4, 47)
    else:
        # h = 0.0125 hits the obstacle lines 2.3 and 2.35; the splash
        # pocket behind the obstacle and the sky are graded out
        xs = graded_coords(0.0125, 2.4, 3.0, 10)
        ys = graded_coords(0.0125, 0.45, 1.4, 8)
    return rect_mesh_with_obstacle(xs, ys, (2.3, 2.35), (0.0, 0.3))


def setup_dam_break(mode: str = "SST", *,
                    paper_scale: bool = False) -> ScenarioConfig:
    """Inclined dam-break preset: sand box released down a 45-degree
    flume against a rigid obstacle.

    Simulated in the flume-aligned frame, so the geometry stays
    axis-aligned and gravity is rotated to (g, -g) / sqrt(2).  The
    upstream obstacle face is tagged for the impact-force integral.
    """
    if str(mode).upper() != "SST":
        raise ConfigurationError(f"unknown dam-break mode {mode!r}; only SST")
    g = 9.81
    gravity = (g / np.sqrt(2.0), -g / np.sqrt(2.0))
    rho_H = 1379.0
    eta_L = 1.8e-5
    rheo = RheologyParams(mu_s=0.7, mu_2=0.93, I_0=0.6, d=0.0009,
                          rho_g=rho_H, I1_N=_DAM_I1N, eta_min=20.0 * eta_L,
                          eta_max=1e5)
    fluids = FluidPair(rho_H=rho_H, rho_L=1.25, eta_L=eta_L,
                       heavy_rheology=rheo)

    mesh = _dam_mesh(paper_scale)
    phi0 = corner_signed_distance(mesh.nodes, 0.5, 0.3)
    noslip = ns.Dirichlet((0.0, 0.0))
    bcs = {
        "left": noslip, "bottom": noslip, "obstacle_left": noslip,
        "obstacle_right": noslip, "obstacle_top": noslip,
        "top": ns.Slip(), "right": ns.Slip(),
    }
    if paper_scale:
        sched = SlabSchedule("SST", 0.001, 1400, max_levels=5,
                             band_halfwidth=3.0 * 0.005)
    else:
        sched = SlabSchedule("SST", 0.004, 350, max_levels=5,
                             band_halfwidth=3.0 * 0.0125)
    return ScenarioConfig(
        name="dam_break", label="SST dt=0.001-0.0002" if paper_scale
        else "SST dt=0.004-0.0008", mesh=mesh, phi0=phi0, fluids=fluids,
        bcs=bcs, gravity=gravity, schedule=sched,
        obstacle_tag="obstacle_left")


# ---------------------------------------------------------------------------
# diagnostics

def _mesh_edges(mesh: SpatialMesh) -> np.ndarray:
    tris = mesh.triangles
    edges = np.sort(tris[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    return np.unique(edges, axis=0)


def flow_front(phi, mesh: SpatialMesh, L0: float = 1.0) -> float:
    """Front position: max x over heavy nodes and all edge zero
    crossings of phi, divided by ``L0``.

    An all-light field has no front; the domain minimum is returned with
    a logged notice so callers can spot the degenerate case.
    """
    phi = np.asarray(getattr(phi, "values", phi), dtype=float)
    if phi.shape[0] != mesh.n_nodes:
        raise ConfigurationError("phi length does not match the mesh")
    x = mesh.nodes[:, 0]
    heavy = phi <= 0    # nodes exactly on the interface count as front
    if not heavy.any():
        logger.info("flow_front: no heavy fluid in the field")
        return float(x.min()) / L0
    best = x[heavy].max()
    edges = _mesh_edges(mesh)
    fa, fb = phi[edges[:, 0]], phi[edges[:, 1]]
    cross = (fa * fb) < 0
    if cross.any():
        t = fa[cross] / (fa[cross] - fb[cross])
        xc = x[edges[cross, 0]] * (1.0 - t) + x[edges[cross, 1]] * t
        best = max(best, xc.max())
    return float(best) / L0


def impact_force(p: np.ndarray, mesh: SpatialMesh,
                 tag: str = "obstacle_left") -> float:
    """Pressure integral over the tagged wall (trapezoidal per facet),
    i.e. the force per unit depth the flow exerts on the obstacle."""
    p = np.asarray(p, dtype=float)
    sel = mesh.facet_tags == tag
    if not sel.any():
        raise ConfigurationError(f"no facets tagged {tag!r}")
    fac = mesh.facets[sel]
    a, b = mesh.nodes[fac[:, 0]], mesh.nodes[fac[:, 1]]
    lengths = np.hypot(*(b - a).T)
    return float(np.sum(0.5 * (p[fac[:, 0]] + p[fac[:, 1]]) * lengths))


def impact_time(series: "TimeSeries", threshold: float = 0.01):
    """First time the force column exceeds ``threshold`` times its
    eventual maximum; None when the force stays at zero."""
    f = np.array([r.force for r in series.rows])
    if len(f) == 0 or f.max() <= 0:
        return None
    idx = int(np.argmax(f > threshold * f.max()))
    return series.rows[idx].t


# ---------------------------------------------------------------------------
# run loop

@dataclass
class SlabRecord:
    t: float
    t_norm: float
    front: float
    force: float
    n_nonlinear: int
    t_formation_s: float
    t_solution_s: float


@dataclass
class TimeSeries:
    """Per-slab diagnostic rows, CSV-serializable."""
    rows: list = field(default_factory=list)

    COLUMNS = ("t", "t_norm", "front", "force", "n_nonlinear",
               "t_formation_s", "t_solution_s")

    def write_csv(self, path, deterministic: bool = False):
        """Write all rows; the determinism flag zeroes the wall-clock
        columns so identical runs produce byte-identical files."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for r in self.rows:
                tf, ts = (0.0, 0.0) if deterministic \
                    else (r.t_formation_s, r.t_solution_s)
                fh.write("%.17g,%.17g,%.17g,%.17g,%d,%.17g,%.17g\n"
                         % (r.t, r.t_norm, r.front, r.force,
                            r.n_nonlinear, tf, ts))

    @classmethod
    def read_csv(cls, path) -> "TimeSeries":
        data = np.genfromtxt(path, delimiter=",", names=True)
        rows = [SlabRecord(float(d["t"]), float(d["t_norm"]),
                           float(d["front"]), float(d["force"]),
                           int(d["n_nonlinear"]), float(d["t_formation_s"]),
                           float(d["t_solution_s"]))
                for d in np.atleast_1d(data)]
        return cls(rows=rows)


@dataclass
class RunResult:
    """Everything a scenario run produces besides side-effect output."""
    config: ScenarioConfig
    series: TimeSeries
    state: ns.SolutionState
    phi: np.ndarray
    node_counts: list
    element_counts: list
    t_formation: float
    t_solution: float
    initial_area: float
    final_area: float

    def performance_row(self) -> dict:
        return {
            "label": self.config.label,
            "time_steps": self.config.schedule.n_slabs,
            "nodes_per_step": float(np.mean(self.node_counts)),
            "elements_per_step": float(np.mean(self.element_counts)),
            "t_formation_s": self.t_formation,
            "t_solution_s": self.t_solution,
        }


def _build_slab(config: ScenarioConfig, t_lo: float, t_hi: float,
                phi: np.ndarray):
    sched = config.schedule
    if sched.kind == "FST":
        return st_mesh.extrude_fst(config.mesh, t_lo, t_hi)
    levels = mark_interface_band(config.mesh, phi, sched.band_halfwidth,
                                 sched.max_levels)
    return st_mesh.build_sst(config.mesh, t_lo, t_hi, levels,
                             max_level_jump=1)


def _advance(config, t_lo, t_hi, u_prev, p_prev, phi, depth, slab_id,
             backend, lin=None, u_guess=None):
    """Solve flow then advect the interface over [t_lo, t_hi]; on
    nonlinear failure, split the window once per remaining depth."""
    slab = _build_slab(config, t_lo, t_hi, phi)
    try:
        state, stats = ns.nonlinear_solve(
            slab, u_prev, phi, config.fluids, config.bcs, config.gravity,
            p_prev_upper=p_prev, u_guess=u_guess,
            max_iters=config.max_iters, inc_tol=config.inc_tol,
            res_tol=config.res_tol, lin_tol=config.lin_tol,
            heaviside_scale=config.heaviside_scale, slab_id=slab_id,
            backend=backend, linear=lin)
    except ConvergenceError as err:
        if depth <= 0:
            raise ConvergenceError(
                f"slab {slab_id} over t=[{t_lo:g}, {t_hi:g}] failed after "
                f"retries: {err}") from err
        logger.warning("slab %d did not converge; retrying with halved "
                       "width", slab_id)
        mid = 0.5 * (t_lo + t_hi)
        st1, phi1, rec1 = _advance(config, t_lo, mid, u_prev, p_prev, phi,
                                   depth - 1, slab_id, backend, lin)
        st2, phi2, rec2 = _advance(config, mid, t_hi, st1.upper_u,
                                   st1.upper_p, phi1, depth - 1, slab_id,
                                   backend, lin)
        return st2, phi2, rec1 + rec2
    fld = advect_slab(slab, state.u, phi, slab_id=slab_id, backend=backend)
    return state, fld.upper, [stats]


def run(config: ScenarioConfig, *, on_slab=None, dump_every: int = 0,
        backend=None, max_retries: int = 2) -> RunResult:
    """Advance a scenario to its final time.

    Parameters
    ----------
    config : ScenarioConfig
        Scenario produced by a preset (possibly with overrides).
    on_slab : callable, optional
        ``on_slab(i, state, phi)`` invoked per dumped slab for field
        output; ``dump_every`` sets the cadence (0 disables, the final
        slab is always dumped when a callback is given).
    backend : str or module, optional
        Kernel backend override passed to the solvers.
    max_retries : int
        Recursive slab halvings allowed before a convergence failure
        propagates.

    Returns
    -------
    RunResult
        Time series, final state and interface, per-slab mesh sizes, and
        accumulated formation / solution wall-clock times.
    """
    mesh = config.mesh
    sched = config.schedule
    edges = np.linspace(0.0, config.t_final, sched.n_slabs + 1)
    phi = config.phi0.copy()
    u_prev = np.zeros((mesh.n_nodes, 2))
    u_prev2 = None
    p_prev = None
    lin = fem.ReusableLU()
    area0 = heavy_area(mesh, phi)

    series = TimeSeries()
    series.rows.append(SlabRecord(0.0, 0.0, flow_front(phi, mesh, config.L0),
                                  0.0, 0, 0.0, 0.0))
    node_counts: list = []
    element_counts: list = []
    state = None
    t_formation = t_solution = 0.0

    for i in range(sched.n_slabs):
        t0 = time.perf_counter()
        # linear extrapolation from the two previous traces seeds the
        # nonlinear iteration much closer to the new slab's fixed point
        u_guess = None if u_prev2 is None else 2.0 * u_prev - u_prev2
        state, phi, stats_list = _advance(
            config, edges[i], edges[i + 1], u_prev, p_prev, phi,
            max_retries, i, backend, lin, u_guess)
        if (i + 1) % config.redistance_every == 0:
            phi = redistance(phi, mesh)
        u_prev2 = u_prev
        u_prev = state.upper_u
        p_prev = state.upper_p

        front = flow_front(phi, mesh, config.L0)
        force = impact_force(state.upper_p, mesh, config.obstacle_tag) \
            if config.obstacle_tag else 0.0
        tf = sum(s.t_formation for s in stats_list)
        ts = sum(s.t_solution for s in stats_list)
        t_formation += tf
        t_solution += ts
        series.rows.append(SlabRecord(
            float(edges[i + 1]), float(edges[i + 1] / config.t_star), front,
            force, sum(s.iterations for s in stats_list), tf, ts))
        node_counts.append(state.slab.n_nodes)
        element_counts.append(state.slab.n_elements)

        if on_slab is not None and dump_every > 0 \
                and ((i + 1) % dump_every == 0 or i == sched.n_slabs - 1):
            on_slab(i, state, phi)
        if (i + 1) % 10 == 0 or i == sched.n_slabs - 1:
            logger.info("%s: slab %d/%d front=%.3f wall=%.2fs", config.name,
                        i + 1, sched.n_slabs, front,
                        time.perf_counter() - t0)

    return RunResult(config=config, series=series, state=state, phi=phi,
                     node_counts=node_counts, element_counts=element_counts,
                     t_formation=t_formation, t_solution=t_solution,
                     initial_area=area0, final_area=heavy_area(mesh, phi))


def performance_table(results) -> str:
    """Plain-text performance table (one row per run) with the step
    count, mean mesh sizes, and the formation / solution times."""
    header = (f"{'discretization':<22}{'time steps':>12}{'nodes/step':>14}"
              f"{'elements/step':>16}{'formation [s]':>15}"
              f"{'solution [s]':>14}")
    lines = [header, "-" * len(header)]
    items = results.items() if hasattr(results, "items") else \
        ((r.config.label, r) for r in results)
    for label, res in items:
        row = res.performance_row()
        lines.append(f"{label:<22}{row['time_steps']:>12d}"
                     f"{row['nodes_per_step']:>14.1f}"
                     f"{row['elements_per_step']:>16.1f}"
                     f"{row['t_formation_s']:>15.2f}"
                     f"{row['t_solution_s']:>14.2f}")
    return "\n".join(lines)
