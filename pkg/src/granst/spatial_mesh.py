"""2D simplicial spatial meshes: data structure, validation, builders, file IO.

The mesh file format is plain text with '#' comments:

    nodes <N>
    <x> <y>                (N lines)
    triangles <T>
    <i> <j> <k>            (T lines, zero-based node ids)
    facets <B>
    <i> <j> <tag>          (B lines, boundary edges)

Node ids are dense, zero-based and strictly ordered; triangles are stored with
positive (counter-clockwise) orientation.
"""

from dataclasses import dataclass

import numpy as np

from .errors import MeshError

__all__ = [
    "SpatialMesh",
    "make_mesh",
    "read_mesh",
    "write_mesh",
    "rect_mesh_from_coords",
    "uniform_rect_mesh",
    "rect_mesh_with_obstacle",
    "triangle_areas",
    "element_sizes",
    "node_spacing",
    "node_adjacency",
    "oriented_facets",
]


@dataclass
class SpatialMesh:
    nodes: np.ndarray        # (N, 2) float64
    triangles: np.ndarray    # (T, 3) int64, CCW
    facets: np.ndarray       # (B, 2) int64, boundary edges
    facet_tags: np.ndarray   # (B,) unicode tags

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def facets_with_tag(self, tag: str) -> np.ndarray:
        return self.facets[self.facet_tags == tag]

    def validate(self):
        """Raise MeshError on the first structural defect found."""
        nodes, tris = self.nodes, self.triangles
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError("nodes must be an (N, 2) array")
        if not np.isfinite(nodes).all():
            raise MeshError("non-finite node coordinates")
        if tris.min(initial=0) < 0 or tris.max(initial=-1) >= len(nodes):
            raise MeshError("triangle refers to a node id out of range")

        areas = triangle_areas(self)
        scale = max(np.ptp(nodes[:, 0]), np.ptp(nodes[:, 1]), 1e-300)
        bad = np.nonzero(areas <= 1e-14 * scale * scale)[0]
        if bad.size:
            raise MeshError(f"degenerate spatial element: triangle {bad[0]}")
        if (areas <= 0).any():
            raise MeshError("negatively oriented triangle (canonicalize first)")

        # near-duplicate nodes at 1e-12 of the coordinate scale
        key = np.round(nodes / (1e-12 * scale)).astype(np.int64)
        if len(np.unique(key, axis=0)) != len(nodes):
            raise MeshError("duplicate nodes within tolerance")

        # every boundary edge of the triangulation must be tagged exactly once
        edges = np.sort(tris[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        if (counts > 2).any():
            raise MeshError("non-manifold edge shared by more than two triangles")
        derived = uniq[counts == 1]
        tagged = np.sort(np.asarray(self.facets), axis=1)
        if len(tagged) != len(np.unique(tagged, axis=0)):
            raise MeshError("duplicate boundary facet")
        d = {tuple(e) for e in derived}
        t = {tuple(e) for e in tagged}
        if d != t:
            missing = d - t
            extra = t - d
            raise MeshError(
                f"boundary facet mismatch: {len(missing)} untagged, {len(extra)} not on boundary"
            )
        return self


def make_mesh(nodes, triangles, facets, facet_tags) -> SpatialMesh:
    """Canonicalize (flip negative triangles) and validate."""
    nodes = np.ascontiguousarray(nodes, dtype=np.float64)
    tris = np.ascontiguousarray(triangles, dtype=np.int64)
    x, y = nodes[:, 0], nodes[:, 1]
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    signed = (x[b] - x[a]) * (y[c] - y[a]) - (x[c] - x[a]) * (y[b] - y[a])
    flip = signed < 0
    tris[flip] = tris[flip][:, ::-1]
    mesh = SpatialMesh(
        nodes=nodes,
        triangles=tris,
        facets=np.ascontiguousarray(facets, dtype=np.int64).reshape(-1, 2),
        facet_tags=np.asarray(facet_tags, dtype=np.str_),
    )
    return mesh.validate()


def triangle_areas(mesh: SpatialMesh) -> np.ndarray:
    n, t = mesh.nodes, mesh.triangles
    d1 = n[t[:, 1]] - n[t[:, 0]]
    d2 = n[t[:, 2]] - n[t[:, 0]]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def element_sizes(mesh: SpatialMesh) -> np.ndarray:
    """Per-triangle size h_e: the longest edge."""
    n, t = mesh.nodes, mesh.triangles
    e01 = np.linalg.norm(n[t[:, 1]] - n[t[:, 0]], axis=1)
    e12 = np.linalg.norm(n[t[:, 2]] - n[t[:, 1]], axis=1)
    e20 = np.linalg.norm(n[t[:, 0]] - n[t[:, 2]], axis=1)
    return np.maximum(np.maximum(e01, e12), e20)


def node_spacing(mesh: SpatialMesh) -> np.ndarray:
    """Per-node mesh size: mean length of incident edges."""
    n, t = mesh.nodes, mesh.triangles
    pairs = t[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    L = np.linalg.norm(n[pairs[:, 0]] - n[pairs[:, 1]], axis=1)
    total = np.zeros(len(n))
    count = np.zeros(len(n))
    for col in (0, 1):
        np.add.at(total, pairs[:, col], L)
        np.add.at(count, pairs[:, col], 1.0)
    return total / np.maximum(count, 1.0)


def node_adjacency(mesh: SpatialMesh):
    """Node-to-node adjacency as (indptr, indices), CSR style, sorted ids."""
    t = mesh.triangles
    pairs = t[:, [0, 1, 1, 2, 2, 0, 1, 0, 2, 1, 0, 2]].reshape(-1, 2)
    pairs = np.unique(pairs, axis=0)
    indptr = np.zeros(mesh.n_nodes + 1, dtype=np.int64)
    np.add.at(indptr, pairs[:, 0] + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, pairs[:, 1].copy()


def oriented_facets(mesh: SpatialMesh):
    """Boundary facets oriented CCW (interior on the left) with outward normals.

    Returns (facets, normals): facets is mesh.facets with rows flipped where
    needed so each directed edge matches its owning triangle's traversal;
    normals is the (B, 2) array of unit outward normals.
    """
    t = mesh.triangles
    directed = set(map(tuple, t[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2).tolist()))
    out = mesh.facets.copy()
    for k, (i, j) in enumerate(out):
        if (i, j) in directed:
            continue
        if (j, i) in directed:
            out[k] = (j, i)
        else:
            raise MeshError(f"facet ({i}, {j}) not an edge of any triangle")
    tang = mesh.nodes[out[:, 1]] - mesh.nodes[out[:, 0]]
    normals = np.column_stack([tang[:, 1], -tang[:, 0]])
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    return out, normals


def _rect_tags(nodes, facets, lx, ly, extra=()):
    """Tag rectangle boundary edges by midpoint location."""
    mid = 0.5 * (nodes[facets[:, 0]] + nodes[facets[:, 1]])
    tol = 1e-9 * max(lx, ly)
    tags = np.full(len(facets), "interior", dtype="U32")
    tags[np.abs(mid[:, 0]) < tol] = "left"
    tags[np.abs(mid[:, 0] - lx) < tol] = "right"
    tags[np.abs(mid[:, 1]) < tol] = "bottom"
    tags[np.abs(mid[:, 1] - ly) < tol] = "top"
    for name, predicate in extra:
        tags[predicate(mid)] = name
    if (tags == "interior").any():
        raise MeshError("untagged boundary facet in rectangle builder")
    return tags


def _boundary_edges_of(triangles):
    edges = np.sort(triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return uniq[counts == 1]


def rect_mesh_from_coords(xs, ys, extra_tagging=()) -> SpatialMesh:
    """Tensor-product triangulation of [xs[0], xs[-1]] x [ys[0], ys[-1]].

    Cell diagonals alternate with (i + j) parity so the mesh carries no
    preferred direction.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    nx, ny = len(xs), len(ys)
    if nx < 2 or ny < 2:
        raise MeshError("need at least 2 grid lines per direction")
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return i * ny + j

    i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    i, j = i.ravel(), j.ravel()
    n00, n10 = nid(i, j), nid(i + 1, j)
    n11, n01 = nid(i + 1, j + 1), nid(i, j + 1)
    even = (i + j) % 2 == 0
    tris = np.empty((len(i) * 2, 3), dtype=np.int64)
    tris[0::2] = np.where(even[:, None],
                          np.column_stack([n00, n10, n11]),
                          np.column_stack([n00, n10, n01]))
    tris[1::2] = np.where(even[:, None],
                          np.column_stack([n00, n11, n01]),
                          np.column_stack([n10, n11, n01]))
    facets = _boundary_edges_of(tris)
    lx, ly = xs[-1] - xs[0], ys[-1] - ys[0]
    shifted = nodes - np.array([xs[0], ys[0]])
    mesh = SpatialMesh(nodes=nodes, triangles=tris, facets=facets,
                       facet_tags=_rect_tags(shifted, facets, lx, ly, extra_tagging))
    return mesh.validate()


def uniform_rect_mesh(lx, ly, nx, ny) -> SpatialMesh:
    """Uniform grid with nx x ny nodes on [0, lx] x [0, ly]."""
    return rect_mesh_from_coords(np.linspace(0.0, lx, nx), np.linspace(0.0, ly, ny))


def rect_mesh_with_obstacle(xs, ys, hole_x, hole_y) -> SpatialMesh:
    """Tensor mesh with a rectangular hole (an internal obstacle).

    The hole boundary [hole_x[0], hole_x[1]] x [hole_y[0], hole_y[1]] must lie
    on grid lines; cells inside are removed and the exposed edges are tagged
    obstacle_left / obstacle_top / obstacle_right (the hole touches the bottom
    wall, so its bottom edge keeps the "bottom" tag).
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    for v, arr, nm in ((hole_x[0], xs, "x0"), (hole_x[1], xs, "x1"),
                       (hole_y[1], ys, "y1")):
        if np.abs(arr - v).min() > 1e-9 * np.ptp(arr):
            raise MeshError(f"obstacle edge {nm}={v} not on a grid line")
    full = rect_mesh_from_coords(xs, ys)
    cent = full.nodes[full.triangles].mean(axis=1)
    tol = 1e-12
    inside = ((cent[:, 0] > hole_x[0] - tol) & (cent[:, 0] < hole_x[1] + tol)
              & (cent[:, 1] > hole_y[0] - tol) & (cent[:, 1] < hole_y[1] + tol))
    tris = full.triangles[~inside]
    used = np.unique(tris)
    remap = -np.ones(full.n_nodes, dtype=np.int64)
    remap[used] = np.arange(len(used))
    nodes = full.nodes[used]
    tris = remap[tris]
    facets = _boundary_edges_of(tris)

    tol_g = 1e-9 * max(np.ptp(xs), np.ptp(ys))

    def on_obstacle(which):
        def pred(mid):
            if which == "left":
                return (np.abs(mid[:, 0] - hole_x[0]) < tol_g) & (mid[:, 1] < hole_y[1] + tol_g) \
                    & (mid[:, 1] > hole_y[0] - tol_g)
            if which == "right":
                return (np.abs(mid[:, 0] - hole_x[1]) < tol_g) & (mid[:, 1] < hole_y[1] + tol_g) \
                    & (mid[:, 1] > hole_y[0] - tol_g)
            return (np.abs(mid[:, 1] - hole_y[1]) < tol_g) & (mid[:, 0] > hole_x[0] - tol_g) \
                & (mid[:, 0] < hole_x[1] + tol_g)
        return pred

    # shift for _rect_tags which expects the box anchored at the origin
    shifted = nodes - np.array([xs[0], ys[0]])
    lx, ly = xs[-1] - xs[0], ys[-1] - ys[0]
    mid = 0.5 * (shifted[facets[:, 0]] + shifted[facets[:, 1]])
    tags = np.full(len(facets), "interior", dtype="U32")
    tags[np.abs(mid[:, 0]) < tol_g] = "left"
    tags[np.abs(mid[:, 0] - lx) < tol_g] = "right"
    tags[np.abs(mid[:, 1]) < tol_g] = "bottom"
    tags[np.abs(mid[:, 1] - ly) < tol_g] = "top"
    hx = (hole_x[0] - xs[0], hole_x[1] - xs[0])
    hy = (hole_y[0] - ys[0], hole_y[1] - ys[0])
    for name, which in (("obstacle_left", "left"), ("obstacle_right", "right"),
                        ("obstacle_top", "top")):
        def pred(mid, which=which):
            if which == "left":
                return (np.abs(mid[:, 0] - hx[0]) < tol_g) & (mid[:, 1] < hy[1] + tol_g)
            if which == "right":
                return (np.abs(mid[:, 0] - hx[1]) < tol_g) & (mid[:, 1] < hy[1] + tol_g)
            return (np.abs(mid[:, 1] - hy[1]) < tol_g) & (mid[:, 0] > hx[0] - tol_g) \
                & (mid[:, 0] < hx[1] + tol_g)
        sel = pred(mid) & (tags == "interior")
        tags[sel] = name
    if (tags == "interior").any():
        raise MeshError("untagged boundary facet in obstacle builder")
    mesh = SpatialMesh(nodes=nodes, triangles=tris, facets=facets, facet_tags=tags)
    return mesh.validate()


def write_mesh(mesh: SpatialMesh, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"nodes {mesh.n_nodes}\n")
        for x, y in mesh.nodes:
            f.write("%.17g %.17g\n" % (x, y))
        f.write(f"triangles {mesh.n_triangles}\n")
        for a, b, c in mesh.triangles:
            f.write(f"{a} {b} {c}\n")
        f.write(f"facets {len(mesh.facets)}\n")
        for (a, b), tag in zip(mesh.facets, mesh.facet_tags):
            f.write(f"{a} {b} {tag}\n")


def read_mesh(path) -> SpatialMesh:
    with open(path, encoding="utf-8") as f:
        lines = [ln.split("#", 1)[0].strip() for ln in f]
    lines = [ln for ln in lines if ln]
    pos = 0

    def expect(word):
        nonlocal pos
        parts = lines[pos].split()
        if len(parts) != 2 or parts[0] != word:
            raise MeshError(f"mesh file: expected '{word} <count>' at item {pos}, got '{lines[pos]}'")
        pos += 1
        return int(parts[1])

    n = expect("nodes")
    nodes = np.array([[float(v) for v in lines[pos + k].split()] for k in range(n)])
    pos += n
    t = expect("triangles")
    tris = np.array([[int(v) for v in lines[pos + k].split()] for k in range(t)], dtype=np.int64)
    pos += t
    b = expect("facets")
    facets = np.empty((b, 2), dtype=np.int64)
    tags = []
    for k in range(b):
        i, j, tag = lines[pos + k].split()
        facets[k] = (int(i), int(j))
        tags.append(tag)
    return make_mesh(nodes, tris, facets, tags)
