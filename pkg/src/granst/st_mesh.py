"""Space-time slab construction.

A slab Q_n spans the spatial mesh times [t_n, t_n+1]. Two discretizations are
supported:

* FST: every spatial triangle is extruded into one 6-node prism (3d6n).
* SST: every prism column is subdivided into 4-node simplices (3d4n). The
  vertical edge over spatial node i carries node_levels[i] equal temporal
  intervals, so elements near the interface can be refined in time without
  touching the rest of the slab.

The SST subdivision sweeps each prism bottom-up, always advancing the column
whose next point has the smallest (time, spatial node id) key and emitting the
tetrahedron formed by the pre-advance front and the new point. The induced
triangulation of a lateral face depends only on the two columns that span it,
which makes faces of neighboring prisms match for any admissible level
assignment (adjacent levels may differ by at most 1).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, MeshError
from .spatial_mesh import SpatialMesh, oriented_facets, triangle_areas

__all__ = [
    "SpaceTimeSlab",
    "extrude_fst",
    "build_sst",
    "conformity_check",
    "ConformityReport",
]


@dataclass
class SpaceTimeSlab:
    kind: str                     # "FST" | "SST"
    t_lo: float
    t_hi: float
    spatial: SpatialMesh
    st_nodes: np.ndarray          # (M, 3): x, y, t
    spatial_id: np.ndarray        # (M,) source spatial node of each st node
    elements: np.ndarray          # (E, 6) prisms or (E, 4) tets
    element_prism: np.ndarray     # (E,) source triangle of each element
    lower_trace: np.ndarray       # (N_sp,) st node id at t_lo per spatial node
    upper_trace: np.ndarray       # (N_sp,) st node id at t_hi per spatial node
    facet_nodes: np.ndarray       # (B, 4) quads (FST) or (B, 3) triangles (SST)
    facet_tags: np.ndarray        # (B,)
    facet_normals: np.ndarray     # (B, 2) spatial outward normal
    facet_edge: np.ndarray        # (B,) source boundary-facet index
    node_levels: np.ndarray | None = field(default=None)

    @property
    def n_nodes(self) -> int:
        return self.st_nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def dt(self) -> float:
        return self.t_hi - self.t_lo


def extrude_fst(spatial: SpatialMesh, t_lo: float, t_hi: float) -> SpaceTimeSlab:
    """One 6-node prism per triangle; st node count is twice the spatial count."""
    if not t_hi > t_lo:
        raise ConfigurationError(f"slab needs t_hi > t_lo, got [{t_lo}, {t_hi}]")
    areas = triangle_areas(spatial)
    if (areas <= 0).any():
        raise MeshError(f"degenerate spatial element: triangle {int(np.argmin(areas))}")
    n = spatial.n_nodes
    st_nodes = np.empty((2 * n, 3))
    st_nodes[:n, :2] = spatial.nodes
    st_nodes[n:, :2] = spatial.nodes
    st_nodes[:n, 2] = t_lo
    st_nodes[n:, 2] = t_hi
    tris = spatial.triangles
    elements = np.hstack([tris, tris + n]).astype(np.int64)
    ofacets, normals = oriented_facets(spatial)
    quads = np.column_stack([ofacets[:, 0], ofacets[:, 1],
                             ofacets[:, 1] + n, ofacets[:, 0] + n])
    return SpaceTimeSlab(
        kind="FST", t_lo=t_lo, t_hi=t_hi, spatial=spatial,
        st_nodes=st_nodes,
        spatial_id=np.concatenate([np.arange(n), np.arange(n)]),
        elements=elements,
        element_prism=np.arange(spatial.n_triangles, dtype=np.int64),
        lower_trace=np.arange(n, dtype=np.int64),
        upper_trace=np.arange(n, dtype=np.int64) + n,
        facet_nodes=quads,
        facet_tags=spatial.facet_tags.copy(),
        facet_normals=normals,
        facet_edge=np.arange(len(ofacets), dtype=np.int64),
    )


def _column_layout(levels, t_lo, dt, spatial_nodes):
    """st node coordinates for per-column temporal subdivisions.

    Column i holds levels[i] + 1 points; offsets[i] is its first st node id.
    """
    counts = levels + 1
    offsets = np.zeros(len(levels) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    m = offsets[-1]
    st_nodes = np.empty((m, 3))
    spatial_id = np.empty(m, dtype=np.int64)
    for i in range(len(levels)):
        a, L = offsets[i], levels[i]
        st_nodes[a:a + L + 1, :2] = spatial_nodes[i]
        st_nodes[a:a + L + 1, 2] = t_lo + dt * np.arange(L + 1) / L
        spatial_id[a:a + L + 1] = i
    return st_nodes, spatial_id, offsets


def _merge_order(cols, levels):
    """Advance order for a set of columns: (k+1)/L key, ties by node id.

    Returns the list of column positions (indices into cols) in sweep order.
    """
    heap = sorted(range(len(cols)), key=lambda q: cols[q])
    state = [0] * len(cols)
    order = []
    while True:
        best, best_key = -1, None
        for q in heap:
            if state[q] >= levels[q]:
                continue
            key = ((state[q] + 1) / levels[q], cols[q])
            if best_key is None or key < best_key:
                best, best_key = q, key
        if best < 0:
            return order
        state[best] += 1
        order.append(best)


def build_sst(spatial: SpatialMesh, t_lo: float, t_hi: float,
              node_levels, max_level_jump: int | None = None) -> SpaceTimeSlab:
    """Subdivide each prism column into simplices honoring per-node levels.

    The construction is conforming for arbitrary level fields. Passing
    ``max_level_jump`` additionally rejects level fields whose adjacent nodes
    differ by more than that (the band marker produces fields with jump 1, so
    drivers use it as a cheap input sanity check).
    """
    if not t_hi > t_lo:
        raise ConfigurationError(f"slab needs t_hi > t_lo, got [{t_lo}, {t_hi}]")
    levels = np.asarray(node_levels, dtype=np.int64)
    if levels.shape != (spatial.n_nodes,):
        raise ConfigurationError("node_levels must carry one entry per spatial node")
    if (levels < 1).any():
        raise ConfigurationError("temporal refinement levels must be >= 1")
    tris = spatial.triangles
    tl = levels[tris]
    if max_level_jump is not None:
        jump = np.abs(tl[:, [0, 1, 2]] - tl[:, [1, 2, 0]])
        if (jump > max_level_jump).any():
            bad = int(np.argmax((jump > max_level_jump).any(axis=1)))
            raise ConfigurationError(
                f"adjacent temporal levels differ by more than {max_level_jump} at triangle {bad}")

    dt = t_hi - t_lo
    st_nodes, spatial_id, offsets = _column_layout(levels, t_lo, dt, spatial.nodes)

    counts = tl.sum(axis=1)                      # La + Lb + Lc tets per prism
    tet_off = np.zeros(len(tris) + 1, dtype=np.int64)
    np.cumsum(counts, out=tet_off[1:])
    elements = np.empty((tet_off[-1], 4), dtype=np.int64)
    element_prism = np.repeat(np.arange(len(tris), dtype=np.int64), counts)

    uniform1 = (tl == 1).all(axis=1)
    _fill_uniform1(tris[uniform1], tet_off[:-1][uniform1], offsets, elements)

    for e in np.nonzero(~uniform1)[0]:
        _sweep_prism(tris[e], tl[e], offsets, elements, tet_off[e])

    lower = offsets[:-1].copy()
    upper = offsets[1:] - 1

    ofacets, normals = oriented_facets(spatial)
    fnodes, ftags, fnorm, fedge = [], [], [], []
    for k, (i, j) in enumerate(ofacets):
        tri_faces = _face_strip(int(i), int(j), int(levels[i]), int(levels[j]), offsets)
        for f in tri_faces:
            fnodes.append(f)
            ftags.append(spatial.facet_tags[k])
            fnorm.append(normals[k])
            fedge.append(k)

    return SpaceTimeSlab(
        kind="SST", t_lo=t_lo, t_hi=t_hi, spatial=spatial,
        st_nodes=st_nodes, spatial_id=spatial_id,
        elements=elements, element_prism=element_prism,
        lower_trace=lower, upper_trace=upper,
        facet_nodes=np.asarray(fnodes, dtype=np.int64).reshape(-1, 3),
        facet_tags=np.asarray(ftags, dtype=np.str_),
        facet_normals=np.asarray(fnorm, dtype=float).reshape(-1, 2),
        facet_edge=np.asarray(fedge, dtype=np.int64),
        node_levels=levels,
    )


def _fill_uniform1(tris, starts, offsets, elements):
    """Vectorized 3-tet split of unrefined prisms (all levels 1).

    The sweep advances the three columns in global id order at the shared
    time 1.0; each step pairs the advanced column with the current front of
    the other two, listed in CCW succession from the advanced one.
    """
    if len(tris) == 0:
        return
    lo = offsets[tris]                          # (P, 3) bottom point per corner
    hi = lo + 1
    order = np.argsort(tris, axis=1)            # id-sorted advance order
    rows = np.arange(len(tris))
    # front height per column: 1 once advanced in an earlier step
    front = np.zeros((len(tris), 3), dtype=np.int64)
    for step in range(3):
        adv = order[:, step]
        b = (adv + 1) % 3
        c = (adv + 2) % 3
        tet = np.column_stack([
            lo[rows, adv],
            np.where(front[rows, b] == 1, hi[rows, b], lo[rows, b]),
            np.where(front[rows, c] == 1, hi[rows, c], lo[rows, c]),
            hi[rows, adv],
        ])
        elements[starts + step] = tet
        front[rows, adv] = 1


def _sweep_prism(tri, tlv, offsets, elements, start):
    """General staircase sweep for one prism; writes its tets in order."""
    cols = [int(tri[0]), int(tri[1]), int(tri[2])]
    L = [int(tlv[0]), int(tlv[1]), int(tlv[2])]
    base = [int(offsets[c]) for c in cols]
    state = [0, 0, 0]
    k = start
    for q in _merge_order(cols, L):
        b, c = (q + 1) % 3, (q + 2) % 3
        elements[k, 0] = base[q] + state[q]
        elements[k, 1] = base[b] + state[b]
        elements[k, 2] = base[c] + state[c]
        elements[k, 3] = base[q] + state[q] + 1
        state[q] += 1
        k += 1


def _face_strip(i, j, Li, Lj, offsets):
    """Triangulation of the lateral quad spanned by columns i and j.

    Mirrors the element sweep restricted to the two columns, so the strip is
    exactly the set of faces the adjacent prism elements expose on this quad.
    """
    order = _merge_order([i, j], [Li, Lj])
    base = [offsets[i], offsets[j]]
    state = [0, 0]
    out = []
    for q in order:
        o = 1 - q
        out.append((base[q] + state[q], base[o] + state[o], base[q] + state[q] + 1))
        state[q] += 1
    return out


def tet_volumes(st_nodes, tets):
    p0 = st_nodes[tets[:, 0]]
    d1 = st_nodes[tets[:, 1]] - p0
    d2 = st_nodes[tets[:, 2]] - p0
    d3 = st_nodes[tets[:, 3]] - p0
    det = (d1[:, 0] * (d2[:, 1] * d3[:, 2] - d2[:, 2] * d3[:, 1])
           - d1[:, 1] * (d2[:, 0] * d3[:, 2] - d2[:, 2] * d3[:, 0])
           + d1[:, 2] * (d2[:, 0] * d3[:, 1] - d2[:, 1] * d3[:, 0]))
    return det / 6.0


def prism_volumes(st_nodes, prisms):
    # straight extrusion: area of the bottom triangle times the height
    p0 = st_nodes[prisms[:, 0]]
    d1 = st_nodes[prisms[:, 1]] - p0
    d2 = st_nodes[prisms[:, 2]] - p0
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    height = st_nodes[prisms[:, 3], 2] - p0[:, 2]
    return area * height


@dataclass
class ConformityReport:
    ok: bool
    messages: list
    bad_elements: list

    def __bool__(self):
        return self.ok


def conformity_check(slab: SpaceTimeSlab) -> ConformityReport:
    """Face sharing, volume conservation, orientation, and bounds checks."""
    msgs, bad = [], []
    nodes = slab.st_nodes
    tol_t = 1e-12 * max(abs(slab.t_lo), abs(slab.t_hi), slab.dt)

    out_of_bounds = (nodes[:, 2] < slab.t_lo - tol_t) | (nodes[:, 2] > slab.t_hi + tol_t)
    if out_of_bounds.any():
        hit = np.isin(slab.elements, np.nonzero(out_of_bounds)[0]).any(axis=1)
        ids = np.nonzero(hit)[0].tolist()
        bad += ids
        msgs.append(f"{len(ids)} elements touch nodes outside [t_lo, t_hi]")

    areas = triangle_areas(slab.spatial)
    target = float(areas.sum()) * slab.dt

    if slab.kind == "FST":
        vols = prism_volumes(nodes, slab.elements)
    else:
        vols = tet_volumes(nodes, slab.elements)
    neg = np.nonzero(vols <= 0)[0]
    if neg.size:
        bad += neg.tolist()
        msgs.append(f"tangled space-time element: ids {neg[:10].tolist()}")

    rel = abs(float(vols.sum()) - target) / target
    if rel > 1e-10:
        msgs.append(f"slab volume off by relative {rel:.3e}")

    if slab.kind == "SST":
        per_prism = np.zeros(slab.spatial.n_triangles)
        np.add.at(per_prism, slab.element_prism, vols)
        prism_target = areas * slab.dt
        perr = np.abs(per_prism - prism_target) / prism_target
        worst = np.nonzero(perr > 1e-12)[0]
        if worst.size:
            msgs.append(f"per-prism volume defect at triangles {worst[:10].tolist()}")

        faces = np.concatenate([
            slab.elements[:, [0, 1, 2]], slab.elements[:, [0, 1, 3]],
            slab.elements[:, [0, 2, 3]], slab.elements[:, [1, 2, 3]],
        ])
        faces = np.sort(faces, axis=1)
        uniq, counts = np.unique(faces, axis=0, return_counts=True)
        if (counts > 2).any():
            msgs.append("face shared by more than two simplices")
        exposed = uniq[counts == 1]
        t = nodes[:, 2]
        on_lo = np.abs(t[exposed] - slab.t_lo).max(axis=1) < tol_t
        on_hi = np.abs(t[exposed] - slab.t_hi).max(axis=1) < tol_t
        lateral = ~(on_lo | on_hi)
        if lateral.any():
            sp = slab.spatial_id[exposed[lateral]]
            bset = {tuple(sorted(e)) for e in slab.spatial.facets.tolist()}
            for row in np.sort(sp, axis=1):
                pair = (int(row[0]), int(row[-1]))
                if len(np.unique(row)) != 2 or tuple(sorted(pair)) not in bset:
                    msgs.append("hanging interior face detected")
                    break

    return ConformityReport(ok=not msgs, messages=msgs, bad_elements=sorted(set(bad)))
