"""Triangle meshes with explicit facet skeletons for the benchmark domains.

Conventions used throughout the package:

- Cells are counterclockwise vertex triples, so every cell area is positive.
- The local facets of cell (v0, v1, v2) are (v0, v1), (v1, v2), (v2, v0),
  i.e. facet ``f`` starts at local vertex ``f``.
- A facet stores its endpoints as (lo, hi) with lo < hi (global indices);
  its canonical parameterization runs from lo to hi, t in [0, 1].
- ``cell_facet_orient[c, f]`` is +1 when the cell traverses the facet in
  canonical direction, -1 otherwise.
- ``facet_cells[e]`` lists the adjacent cells, lower cell index first;
  the second entry is -1 on boundary facets.  The canonical facet normal
  is the outward normal of the first (lower-indexed) adjacent cell.

Meshes are immutable after construction (arrays are write-protected), so
they are safe to share across concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Raised for degenerate or inconsistent geometry."""


_LOCAL_FACETS = ((0, 1), (1, 2), (2, 0))


@dataclass(frozen=True)
class AffineMap:
    """Affine change of variables from the reference triangle to a cell.

    ``x = jacobian @ xi + translation`` with det = |jacobian| = 2 * area.
    """

    jacobian: np.ndarray
    translation: np.ndarray
    det: float

    @property
    def inverse_jacobian(self) -> np.ndarray:
        j = self.jacobian
        return np.array([[j[1, 1], -j[0, 1]], [-j[1, 0], j[0, 0]]]) / self.det

    def to_physical(self, ref_points: np.ndarray) -> np.ndarray:
        return ref_points @ self.jacobian.T + self.translation

    def to_reference(self, phys_points: np.ndarray) -> np.ndarray:
        return (phys_points - self.translation) @ self.inverse_jacobian.T


@dataclass(frozen=True)
class Mesh:
    """2D simplicial mesh with an explicit facet skeleton."""

    vertices: np.ndarray      # (V, 2) float
    cells: np.ndarray         # (C, 3) int, counterclockwise
    facets: np.ndarray        # (E, 2) int, (lo, hi)
    cell_facets: np.ndarray   # (C, 3) int, facet index of local facet f
    cell_facet_orient: np.ndarray  # (C, 3) int, +-1
    facet_cells: np.ndarray   # (E, 2) int, -1 marks missing neighbor
    boundary_flags: np.ndarray  # (E,) bool

    def __post_init__(self):
        for arr in (self.vertices, self.cells, self.facets, self.cell_facets,
                    self.cell_facet_orient, self.facet_cells,
                    self.boundary_flags):
            arr.setflags(write=False)

    # ---- sizes -----------------------------------------------------------
    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def num_facets(self) -> int:
        return self.facets.shape[0]

    # ---- geometry --------------------------------------------------------
    def cell_vertices(self, cell: int) -> np.ndarray:
        return self.vertices[self.cells[cell]]

    def cell_areas(self) -> np.ndarray:
        v = self.vertices[self.cells]
        d1 = v[:, 1] - v[:, 0]
        d2 = v[:, 2] - v[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def facet_lengths(self) -> np.ndarray:
        p = self.vertices[self.facets]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    def facet_points(self, facet: int, t: np.ndarray) -> np.ndarray:
        """Physical points at canonical parameters t in [0, 1]."""
        lo, hi = self.facets[facet]
        a = self.vertices[lo]
        return a + np.outer(t, self.vertices[hi] - a)

    def outward_normal(self, cell: int, local_facet: int) -> np.ndarray:
        """Unit outward normal of ``cell`` on its local facet."""
        la, lb = _LOCAL_FACETS[local_facet]
        pa = self.vertices[self.cells[cell, la]]
        pb = self.vertices[self.cells[cell, lb]]
        d = pb - pa
        n = np.array([d[1], -d[0]])
        return n / np.linalg.norm(n)

    def canonical_normal(self, facet: int) -> np.ndarray:
        """Outward normal of the lower-indexed adjacent cell."""
        cell = self.facet_cells[facet, 0]
        f = int(np.where(self.cell_facets[cell] == facet)[0][0])
        return self.outward_normal(cell, f)

    def mesh_size(self) -> float:
        """Twice the largest inscribed-circle radius over all cells."""
        v = self.vertices[self.cells]
        a = np.linalg.norm(v[:, 1] - v[:, 0], axis=1)
        b = np.linalg.norm(v[:, 2] - v[:, 1], axis=1)
        c = np.linalg.norm(v[:, 0] - v[:, 2], axis=1)
        s = 0.5 * (a + b + c)
        r = self.cell_areas() / s
        return float(2.0 * r.max())


def _build_skeleton(vertices: np.ndarray, cells: np.ndarray) -> Mesh:
    vertices = np.ascontiguousarray(vertices, dtype=float)
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    v = vertices[cells]
    d1 = v[:, 1] - v[:, 0]
    d2 = v[:, 2] - v[:, 0]
    areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    if np.any(areas <= 0):
        bad = int(np.argmax(areas <= 0))
        raise GeometryError(
            f"cell {bad} has non-positive area {areas[bad]:.3e}; "
            "cells must be counterclockwise")

    facet_index: dict[tuple[int, int], int] = {}
    facets: list[tuple[int, int]] = []
    facet_cells: list[list[int]] = []
    nc = cells.shape[0]
    cell_facets = np.empty((nc, 3), dtype=np.int64)
    cell_facet_orient = np.empty((nc, 3), dtype=np.int64)
    for c in range(nc):
        for f, (la, lb) in enumerate(_LOCAL_FACETS):
            a, b = int(cells[c, la]), int(cells[c, lb])
            key = (a, b) if a < b else (b, a)
            e = facet_index.get(key)
            if e is None:
                e = len(facets)
                facet_index[key] = e
                facets.append(key)
                facet_cells.append([c])
            else:
                if len(facet_cells[e]) == 2:
                    raise GeometryError(
                        f"facet {key} is shared by more than two cells")
                facet_cells[e].append(c)
            cell_facets[c, f] = e
            cell_facet_orient[c, f] = 1 if a < b else -1

    nf = len(facets)
    fc = np.full((nf, 2), -1, dtype=np.int64)
    for e, adj in enumerate(facet_cells):
        fc[e, : len(adj)] = adj
    boundary = fc[:, 1] < 0
    return Mesh(vertices=vertices, cells=cells,
                facets=np.asarray(facets, dtype=np.int64),
                cell_facets=cell_facets,
                cell_facet_orient=cell_facet_orient,
                facet_cells=fc, boundary_flags=boundary)


def _split_square(i00: int, i10: int, i01: int, i11: int,
                  diagonal: str) -> list[tuple[int, int, int]]:
    # "main" splits along the (lower-left, upper-right) segment, which is
    # what "from top right to bottom left" also denotes; "anti" splits
    # along (upper-left, lower-right).
    if diagonal == "main":
        return [(i00, i10, i11), (i00, i11, i01)]
    return [(i00, i10, i01), (i10, i11, i01)]


_DIAGONAL_ALIASES = {
    "main": "main",
    "lower-left-to-upper-right": "main",
    "upper-right-to-lower-left": "main",
    "anti": "anti",
    "upper-left-to-lower-right": "anti",
    "lower-right-to-upper-left": "anti",
}


def _grid_triangles(nx: int, ny: int, x: np.ndarray, y: np.ndarray,
                    diagonal: str) -> Mesh:
    vid = lambda i, j: j * (nx + 1) + i
    verts = np.empty(((nx + 1) * (ny + 1), 2))
    for j in range(ny + 1):
        for i in range(nx + 1):
            verts[vid(i, j)] = (x[i], y[j])
    cells = []
    for j in range(ny):
        for i in range(nx):
            cells.extend(_split_square(vid(i, j), vid(i + 1, j),
                                       vid(i, j + 1), vid(i + 1, j + 1),
                                       diagonal))
    return _build_skeleton(verts, np.asarray(cells))


def gen_structured_square(n: int, bbox: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0),
                          diagonal: str = "lower-left-to-upper-right") -> Mesh:
    """Structured n-by-n triangulation of an axis-aligned rectangle.

    Each of the n^2 squares is split in two along the chosen diagonal,
    giving 2*n^2 cells and (n+1)^2 vertices.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    x0, y0, x1, y1 = bbox
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate bbox {bbox}")
    try:
        diag = _DIAGONAL_ALIASES[diagonal]
    except KeyError:
        raise ValueError(f"unknown diagonal {diagonal!r}") from None
    return _grid_triangles(n, n, np.linspace(x0, x1, n + 1),
                           np.linspace(y0, y1, n + 1), diag)


def gen_lshape(n: int) -> Mesh:
    """L-shaped domain (-1,1)^2 minus [0,1)x(-1,0], n squares per unit edge.

    Built on the global lattice so the three unit squares share vertices
    exactly; yields 6*n^2 cells with the reentrant corner (0, 0) always a
    mesh vertex.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    m = 2 * n
    coords = np.linspace(-1.0, 1.0, m + 1)
    keep_vertex = np.zeros((m + 1, m + 1), dtype=bool)
    squares = []
    for j in range(m):
        for i in range(m):
            if i >= n and j <= n - 1:   # removed quadrant [0,1) x (-1,0]
                continue
            squares.append((i, j))
            for di in (0, 1):
                for dj in (0, 1):
                    keep_vertex[i + di, j + dj] = True
    index = np.full((m + 1, m + 1), -1, dtype=np.int64)
    verts = []
    for j in range(m + 1):
        for i in range(m + 1):
            if keep_vertex[i, j]:
                index[i, j] = len(verts)
                verts.append((coords[i], coords[j]))
    cells = []
    for i, j in squares:
        cells.extend(_split_square(index[i, j], index[i + 1, j],
                                   index[i, j + 1], index[i + 1, j + 1],
                                   "main"))
    return _build_skeleton(np.asarray(verts, dtype=float), np.asarray(cells))


def gen_strip(l: int) -> Mesh:
    """Hartmann channel strip (0, 0.025) x (-1, 1) at refinement level l.

    l columns by 80*l rows of squares, each split along the main diagonal
    (the top-right to bottom-left segment), giving 160*l^2 cells.
    """
    if l < 1:
        raise ValueError(f"l must be >= 1, got {l}")
    nx, ny = l, 80 * l
    return _grid_triangles(nx, ny, np.linspace(0.0, 0.025, nx + 1),
                           np.linspace(-1.0, 1.0, ny + 1), "main")


def uniform_refine(m: Mesh) -> Mesh:
    """Split every triangle into four by connecting edge midpoints."""
    nv = m.num_vertices
    mid = nv + np.arange(m.num_facets)
    verts = np.vstack([m.vertices,
                       0.5 * (m.vertices[m.facets[:, 0]] + m.vertices[m.facets[:, 1]])])
    cells = []
    for c in range(m.num_cells):
        v0, v1, v2 = m.cells[c]
        m01 = mid[m.cell_facets[c, 0]]
        m12 = mid[m.cell_facets[c, 1]]
        m20 = mid[m.cell_facets[c, 2]]
        cells.extend([(v0, m01, m20), (v1, m12, m01),
                      (v2, m20, m12), (m01, m12, m20)])
    return _build_skeleton(verts, np.asarray(cells))


def affine_map(m: Mesh, cell: int) -> AffineMap:
    """Map taking the reference triangle {(0,0),(1,0),(0,1)} onto a cell."""
    p = m.cell_vertices(cell)
    jac = np.column_stack([p[1] - p[0], p[2] - p[0]])
    det = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
    if det <= 0:
        raise GeometryError(f"cell {cell} is degenerate (det={det:.3e})")
    return AffineMap(jacobian=jac, translation=p[0].copy(), det=float(det))


# ---- plain-text mesh I/O --------------------------------------------------

def write_mesh(m: Mesh, path: str) -> None:
    """Write the counts-header text format (dim/vertices/cells sections)."""
    with open(path, "w") as fh:
        fh.write("dim 2\n")
        fh.write(f"vertices {m.num_vertices}\n")
        for x, y in m.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        fh.write(f"cells {m.num_cells}\n")
        for v0, v1, v2 in m.cells:
            fh.write(f"{int(v0)} {int(v1)} {int(v2)}\n")


def read_mesh(path: str) -> Mesh:
    with open(path) as fh:
        tokens = fh.read().split()
    pos = 0

    def take(*expect):
        nonlocal pos
        out = tokens[pos:pos + len(expect)]
        pos += len(expect)
        return out

    tag, dim = take("dim", None)
    if tag != "dim" or dim != "2":
        raise ValueError(f"expected 'dim 2' header, got {tag} {dim}")
    tag, nv = take("vertices", None)
    if tag != "vertices":
        raise ValueError("expected 'vertices N' section")
    nv = int(nv)
    verts = np.array(tokens[pos:pos + 2 * nv], dtype=float).reshape(nv, 2)
    pos += 2 * nv
    tag, nc = take("cells", None)
    if tag != "cells":
        raise ValueError("expected 'cells M' section")
    nc = int(nc)
    cells = np.array(tokens[pos:pos + 3 * nc], dtype=np.int64).reshape(nc, 3)
    pos += 3 * nc
    if pos != len(tokens):
        raise ValueError("trailing data in mesh file")
    return _build_skeleton(verts, cells)
