"""Microbenchmark comparing the element-kernel backends.

Times the four block builders on a synthetic slab pair (one flat, one
simplex) for every available backend and reports per-kernel timings plus
the speedup of the compiled backend over the numpy reference.  Exposed on
the command line as ``granst bench``.
"""
from __future__ import annotations

import time

import numpy as np

from . import fem, kernels, st_mesh
from .spatial_mesh import uniform_rect_mesh

KERNELS = ("ns_prism_blocks", "ns_tet_blocks", "ls_prism_blocks",
           "ls_tet_blocks")


def _workloads(n: int, seed: int = 0):
    """Argument tuples for the four kernels on an n-by-n spatial grid."""
    rng = np.random.default_rng(seed)
    mesh = uniform_rect_mesh(1.0, 1.0, n, n)
    fst = st_mesh.extrude_fst(mesh, 0.0, 0.05)
    levels = 1 + (rng.random(len(mesh.nodes)) < 0.3).astype(int)
    sst = st_mesh.build_sst(mesh, 0.0, 0.05, levels)

    tri_grads, areas, dts = fem.prism_geometry(fst)
    Ep = len(areas)
    grads, vols = fem.tet_geometry(sst)
    Et = len(vols)

    def fields(E, k):
        return (rng.normal(size=(E, k, 2)), rng.uniform(0.5, 2.0, (E, k)),
                rng.uniform(1e-3, 5.0, (k, E)), rng.uniform(1e-3, 0.2, E),
                rng.uniform(1e-3, 0.5, E))

    u_p, rho_p, eta_p, tm_p, tc_p = fields(Ep, 6)
    u_t, rho_t, eta_t, tm_t, tc_t = fields(Et, 4)
    return {
        "ns_prism_blocks": (tri_grads, areas, dts, u_p, rho_p, eta_p,
                            tm_p, tc_p, 0.0, -9.81),
        "ns_tet_blocks": (grads, vols, u_t, rho_t, eta_t, tm_t, tc_t,
                          0.0, -9.81),
        "ls_prism_blocks": (tri_grads, areas, dts, u_p, tm_p),
        "ls_tet_blocks": (grads, vols, u_t, tm_t),
    }, {"prisms": Ep, "tets": Et}


def run_bench(n: int = 48, repeats: int = 5, backends=None) -> dict:
    """Time every kernel on every backend; returns a result dictionary.

    Parameters
    ----------
    n : int
        Spatial grid resolution (n x n squares, 2 n^2 prisms).
    repeats : int
        Timing repetitions per kernel; the minimum is reported.
    backends : sequence of str, optional
        Backend names to include; defaults to all available.

    Returns
    -------
    dict
        Keys: "sizes" (element counts), "timings" mapping backend ->
        kernel -> seconds, and "speedup" mapping kernel -> reference
        time / compiled time (present when both backends ran).
    """
    names = tuple(backends) if backends else kernels.available_backends()
    work, sizes = _workloads(n)
    timings: dict = {}
    for name in names:
        mod = kernels.get_backend(name)
        per = {}
        for kname in KERNELS:
            func = getattr(mod, kname)
            args = work[kname]
            func(*args)    # warm up (first call may JIT caches, allocators)
            best = min(_time_once(func, args) for _ in range(repeats))
            per[kname] = best
        timings[name] = per
    result = {"n": n, "sizes": sizes, "timings": timings}
    if "fast" in timings and "pure" in timings:
        result["speedup"] = {
            k: timings["pure"][k] / timings["fast"][k] for k in KERNELS}
    return result


def _time_once(func, args) -> float:
    t0 = time.perf_counter()
    func(*args)
    return time.perf_counter() - t0


def format_table(result: dict) -> str:
    """Human-readable table for one run_bench result."""
    sizes = result["sizes"]
    lines = [
        f"kernel benchmark: {sizes['prisms']} prisms, {sizes['tets']} tets",
        f"{'kernel':<18}" + "".join(
            f"{name + ' [ms]':>14}" for name in result["timings"])
        + ("{:>10}".format("speedup") if "speedup" in result else ""),
    ]
    for kname in KERNELS:
        row = f"{kname:<18}"
        for per in result["timings"].values():
            row += f"{per[kname] * 1e3:>14.3f}"
        if "speedup" in result:
            row += f"{result['speedup'][kname]:>9.1f}x"
        lines.append(row)
    return "\n".join(lines)
