"""Global trace-space layouts for the HDG and E-HDG variants.

The four facet fields are blocked uhat | phat | bhat | rhat, vector fields
component-major.  phat and rhat live in the facet-discontinuous scalar
space in both variants (k+1 dofs per facet, in canonical facet order).
uhat and bhat components use the same discontinuous layout under HDG and
the continuous layout under E-HDG: one dof per skeleton vertex (numbered
first) plus k-1 interior dofs per facet, so continuity is by nodal
identification of the facet-basis endpoint nodes.

``facet_scalar_dofs[e]`` lists, for either scalar layout, the k+1 global
scalar indices of facet e in canonical order (t = 0 at the low vertex).
Element gathers concatenate those rows over the cell's three facets for
all six scalar components, which is exactly the local facet-trial/test
ordering used by the local solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .basis import ReferenceElement
from .mesh import Mesh


class Variant(str, Enum):
    HDG = "hdg"
    EHDG = "ehdg"


FIELDS = ("uhat", "phat", "bhat", "rhat")


def _disc_table(num_facets: int, k: int) -> np.ndarray:
    return np.arange(num_facets * (k + 1)).reshape(num_facets, k + 1)


def _cont_table(m: Mesh, k: int) -> np.ndarray:
    nv = m.num_vertices
    table = np.empty((m.num_facets, k + 1), dtype=np.int64)
    table[:, 0] = m.facets[:, 0]
    table[:, k] = m.facets[:, 1]
    if k > 1:
        inner = nv + np.arange(m.num_facets * (k - 1)).reshape(m.num_facets, k - 1)
        table[:, 1:k] = inner
    return table


@dataclass
class DofLayout:
    """Global numbering of the facet unknowns for one mesh/degree/variant."""

    mesh: Mesh
    k: int
    variant: Variant
    vec_table: np.ndarray      # (E, k+1) scalar dofs for uhat/bhat components
    disc_table: np.ndarray     # (E, k+1) scalar dofs for phat/rhat
    n_vec_scalar: int
    n_disc_scalar: int
    offsets: dict = field(default_factory=dict)
    total: int = 0
    cell_gather: np.ndarray | None = None   # (C, 18*(k+1))

    def __post_init__(self):
        nv, nd = self.n_vec_scalar, self.n_disc_scalar
        self.offsets = {
            "uhat": (0, 2 * nv),
            "phat": (2 * nv, nd),
            "bhat": (2 * nv + nd, 2 * nv),
            "rhat": (4 * nv + nd, nd),
        }
        self.total = 4 * nv + 2 * nd
        self.cell_gather = self._build_gather()

    # ---- numbering helpers -------------------------------------------------
    def field_slice(self, name: str) -> slice:
        off, size = self.offsets[name]
        return slice(off, off + size)

    def facet_dofs(self, name: str, facet: int, comp: int = 0) -> np.ndarray:
        """Global dofs of one facet of one scalar component, canonical order."""
        off, _ = self.offsets[name]
        if name in ("uhat", "bhat"):
            return off + comp * self.n_vec_scalar + self.vec_table[facet]
        return off + self.disc_table[facet]

    def _build_gather(self) -> np.ndarray:
        m, k = self.mesh, self.k
        nfc = k + 1
        out = np.empty((m.num_cells, 18 * nfc), dtype=np.int64)
        for c in range(m.num_cells):
            cols = []
            for name, ncomp in (("uhat", 2), ("phat", 1), ("bhat", 2), ("rhat", 1)):
                for comp in range(ncomp):
                    for f in range(3):
                        cols.append(self.facet_dofs(name, m.cell_facets[c, f], comp))
            out[c] = np.concatenate(cols)
        return out

    # ---- boundary dofs -----------------------------------------------------
    def boundary_scalar_dofs(self, continuous: bool) -> np.ndarray:
        bf = np.nonzero(self.mesh.boundary_flags)[0]
        table = self.vec_table if continuous else self.disc_table
        return np.unique(table[bf].ravel())

    def boundary_dofs(self, name: str) -> np.ndarray:
        """Global dofs of one field supported on the boundary skeleton."""
        off, _ = self.offsets[name]
        if name in ("uhat", "bhat"):
            scal = self.boundary_scalar_dofs(self.variant is Variant.EHDG)
            return np.concatenate([off + scal, off + self.n_vec_scalar + scal])
        scal = self.boundary_scalar_dofs(False)
        return off + scal

    def pinned_pressure_dof(self) -> int:
        """First phat dof of the lowest-indexed boundary facet."""
        first = int(np.nonzero(self.mesh.boundary_flags)[0][0])
        off, _ = self.offsets["phat"]
        return int(off + self.disc_table[first, 0])


def build_dof_layout(m: Mesh, k: int, v: Variant) -> DofLayout:
    if k < 1:
        raise ValueError(f"degree must be >= 1, got {k}")
    v = Variant(v)
    disc = _disc_table(m.num_facets, k)
    if v is Variant.EHDG:
        vec = _cont_table(m, k)
        n_vec = m.num_vertices + (k - 1) * m.num_facets
    else:
        vec = disc
        n_vec = m.num_facets * (k + 1)
    return DofLayout(mesh=m, k=k, variant=v, vec_table=vec, disc_table=disc,
                     n_vec_scalar=n_vec, n_disc_scalar=m.num_facets * (k + 1))


def count_global_dofs(layout: DofLayout) -> dict:
    """Per-field and total trace-space sizes (the globally coupled unknowns)."""
    counts = {name: size for name, (_, size) in layout.offsets.items()}
    counts["total"] = layout.total
    return counts


def boundary_dof_values(layout: DofLayout, m: Mesh, refel: ReferenceElement,
                        u_D, b_D) -> tuple[np.ndarray, np.ndarray]:
    """L2-project Dirichlet data onto the boundary trace dofs.

    Returns (values, dofs): ``values`` is a full-length facet vector that is
    zero except at the returned boundary ``dofs``; rhat boundary dofs are
    included with value 0.  HDG projects facet by facet; E-HDG solves the
    boundary mass-matrix system of the continuous trace space.
    """
    values = np.zeros(layout.total)
    tq, wq = refel.facet_rule.points, refel.facet_rule.weights
    fb = refel.facet_vals                      # (nqf, k+1)
    bf = np.nonzero(m.boundary_flags)[0]
    mass1 = fb.T @ (fb * wq[:, None])          # unit-length facet mass

    for name, data in (("uhat", u_D), ("bhat", b_D)):
        if layout.variant is Variant.HDG:
            for e in bf:
                length = np.linalg.norm(np.diff(m.vertices[m.facets[e]], axis=0))
                pts = m.facet_points(e, tq)
                vals = np.asarray(data(pts))
                rhs = fb.T @ (vals * (wq * length)[:, None])   # (k+1, 2)
                sol = np.linalg.solve(mass1 * length, rhs)
                for comp in range(2):
                    values[layout.facet_dofs(name, e, comp)] = sol[:, comp]
        else:
            bscal = layout.boundary_scalar_dofs(True)
            pos = {int(d): i for i, d in enumerate(bscal)}
            nb = len(bscal)
            mass = np.zeros((nb, nb))
            rhs = np.zeros((nb, 2))
            for e in bf:
                length = np.linalg.norm(np.diff(m.vertices[m.facets[e]], axis=0))
                idx = np.array([pos[int(d)] for d in layout.vec_table[e]])
                pts = m.facet_points(e, tq)
                vals = np.asarray(data(pts))
                mass[np.ix_(idx, idx)] += mass1 * length
                rhs[idx] += fb.T @ (vals * (wq * length)[:, None])
            sol = np.linalg.solve(mass, rhs)
            off, _ = layout.offsets[name]
            for comp in range(2):
                values[off + comp * layout.n_vec_scalar + bscal] = sol[:, comp]

    dofs = np.concatenate([layout.boundary_dofs("uhat"),
                           layout.boundary_dofs("bhat"),
                           layout.boundary_dofs("rhat")])
    return values, np.unique(dofs)
