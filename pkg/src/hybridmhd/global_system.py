"""Condensed global trace system: assembly, direct solve, diagnostics.

The global unknowns are the facet dofs of ``DofLayout``.  Row g of the
assembled matrix is the flux-continuity (interior) or boundary-constraint
equation tested with the trace basis function of dof g, so rows and
columns share one index space.  Dirichlet data enters by strong
elimination: uhat/bhat boundary dofs carry their projected values, rhat
boundary dofs carry zero (default mode), and one phat dof is pinned to
zero to fix the pressure gauge; eliminated columns move to the right-hand
side and the matching rows are dropped.

``solve_monolithic`` assembles the same equations without condensation
(all element-local dofs kept) and acts as the testing oracle for the
condensed path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .basis import ReferenceElement
from .local_solver import (
    CellGeometryCache,
    CondensedBlock,
    ConvectiveFields,
    LocalAssembler,
    LocalIndexMap,
    PhysParams,
    assemble_local,
    condense,
    reconstruct_local,
)
from .mesh import Mesh
from .spaces import DofLayout

logger = logging.getLogger(__name__)


class SingularSystemError(RuntimeError):
    """Condensed system factorization failed."""


@dataclass
class SparseSystem:
    """Square system over the free facet dofs plus elimination bookkeeping."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    free: np.ndarray
    eliminated: np.ndarray
    eliminated_values: np.ndarray
    total: int
    pinned_dof: int


@dataclass
class FieldState:
    """All local coefficient vectors plus the facet solution vector."""

    mesh: Mesh
    layout: DofLayout
    refel: ReferenceElement
    locals_: np.ndarray     # (C, n_loc) in the local ordering (L,u,p,J,b,r)
    facet: np.ndarray       # (layout.total,)

    @property
    def idx(self) -> LocalIndexMap:
        return LocalIndexMap(self.refel)

    def coeffs(self, field: str) -> np.ndarray:
        """Local coefficients of one field: L -> (C,4,nk), u/b -> (C,2,nk),
        J -> (C,nk), p/r -> (C,mp)."""
        idx = self.idx
        nk, mp = idx.nk, idx.mp
        C = self.locals_.shape[0]
        if field == "L":
            return self.locals_[:, 0:4 * nk].reshape(C, 4, nk)
        if field == "u":
            return self.locals_[:, idx.u[0].start:idx.u[1].stop].reshape(C, 2, nk)
        if field == "p":
            return self.locals_[:, idx.p]
        if field == "J":
            return self.locals_[:, idx.J]
        if field == "b":
            return self.locals_[:, idx.b[0].start:idx.b[1].stop].reshape(C, 2, nk)
        if field == "r":
            return self.locals_[:, idx.r]
        raise KeyError(field)

    def facet_coeffs(self, name: str, facet: int, comp: int = 0) -> np.ndarray:
        return self.facet[self.layout.facet_dofs(name, facet, comp)]

    def copy(self) -> "FieldState":
        return FieldState(self.mesh, self.layout, self.refel,
                          self.locals_.copy(), self.facet.copy())


def _eliminated_dofs(layout: DofLayout, rhat_mode: str) -> np.ndarray:
    dofs = [layout.boundary_dofs("uhat"), layout.boundary_dofs("bhat")]
    if rhat_mode == "strong-zero":
        dofs.append(layout.boundary_dofs("rhat"))
    elif rhat_mode != "normal-constraint":
        raise ValueError(f"unknown rhat boundary mode {rhat_mode!r}")
    dofs.append(np.array([layout.pinned_pressure_dof()]))
    return np.unique(np.concatenate(dofs))


def assemble_global(m: Mesh, layout: DofLayout, blocks: list[CondensedBlock],
                    bvalues: np.ndarray, rhat_mode: str = "strong-zero") -> SparseSystem:
    """Reduce the per-element condensed blocks into the free-dof system."""
    total = layout.total
    gather = layout.cell_gather
    nf = gather.shape[1]
    ne = len(blocks)
    rows = np.empty(ne * nf * nf, dtype=np.int64)
    cols = np.empty_like(rows)
    data = np.empty(ne * nf * nf)
    rhs = np.zeros(total)
    for blk in blocks:
        gidx = gather[blk.cell]
        s = blk.cell * nf * nf
        rows[s:s + nf * nf] = np.repeat(gidx, nf)
        cols[s:s + nf * nf] = np.tile(gidx, nf)
        data[s:s + nf * nf] = blk.S.ravel()
        np.add.at(rhs, gidx, blk.g)
    mat = sp.coo_matrix((data, (rows, cols)), shape=(total, total)).tocsr()

    elim = _eliminated_dofs(layout, rhat_mode)
    free_mask = np.ones(total, dtype=bool)
    free_mask[elim] = False
    free = np.nonzero(free_mask)[0]
    vals = bvalues[elim]
    reduced = mat[free][:, free]
    rhs_f = rhs[free] - mat[free][:, elim] @ vals
    return SparseSystem(matrix=reduced.tocsr(), rhs=rhs_f, free=free,
                        eliminated=elim, eliminated_values=vals, total=total,
                        pinned_dof=layout.pinned_pressure_dof())


def solve_condensed(system: SparseSystem) -> np.ndarray:
    """Sparse-LU solve; returns the full facet vector (eliminated dofs filled)."""
    try:
        lu = spla.splu(system.matrix.tocsc())
        sol = lu.solve(system.rhs)
        sol += lu.solve(system.rhs - system.matrix @ sol)   # one refinement step
    except RuntimeError as exc:
        raise SingularSystemError(
            "condensed system is singular; likely causes: stabilization "
            "parameters too small (alpha1 <= sup|w|/2 or beta <= 0) or a "
            "missing pressure gauge") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularSystemError("condensed solve produced non-finite values")
    rnorm = np.linalg.norm(system.matrix @ sol - system.rhs)
    bnorm = np.linalg.norm(system.rhs)
    if bnorm > 0 and rnorm / bnorm > 1e-10:
        logger.warning("condensed solve residual %.3e above tolerance", rnorm / bnorm)
    full = np.zeros(system.total)
    full[system.free] = sol
    full[system.eliminated] = system.eliminated_values
    return full


def reconstruct_state(m: Mesh, layout: DofLayout, refel: ReferenceElement,
                      blocks: list[CondensedBlock], facet: np.ndarray) -> FieldState:
    from threadpoolctl import threadpool_limits

    idx = LocalIndexMap(refel)
    locals_ = np.empty((m.num_cells, idx.n_loc))
    gather = layout.cell_gather
    with threadpool_limits(limits=1):
        for blk in blocks:
            locals_[blk.cell] = reconstruct_local(blk, facet[gather[blk.cell]])
    return FieldState(mesh=m, layout=layout, refel=refel,
                      locals_=locals_, facet=facet)


def post_normalize_pressure(state: FieldState, m: Mesh) -> FieldState:
    """Shift p and phat so the discrete pressure has zero mean; in place."""
    refel = state.refel
    geom_w = refel.vol_rule.weights
    v = m.vertices[m.cells]
    d1 = v[:, 1] - v[:, 0]
    d2 = v[:, 2] - v[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    p = state.coeffs("p")
    pvals = p @ refel.vol_vals_p.T                       # (C, nq)
    integral = float(np.einsum("cq,q,c->", pvals, geom_w, det))
    area = float(0.5 * det.sum())
    mean = integral / area
    idx = state.idx
    state.locals_[:, idx.p] -= mean                       # nodal basis: constant shift
    state.facet[state.layout.field_slice("phat")] -= mean
    return state


# ---------------------------------------------------------------------------
# solver driver building blocks
# ---------------------------------------------------------------------------

def build_condensed_blocks(m: Mesh, refel: ReferenceElement,
                           params: PhysParams, conv: ConvectiveFields,
                           forcing, rhat_mode: str = "strong-zero",
                           geom: CellGeometryCache | None = None,
                           threads: int = 1,
                           assembler: LocalAssembler | None = None) -> list[CondensedBlock]:
    # the element blocks are tiny; BLAS-internal threading only adds
    # handshake overhead here, so it is capped and any parallelism comes
    # from the element-level worker pool
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        if assembler is None:
            assembler = LocalAssembler(m, refel, params, forcing=forcing,
                                       rhat_normal_bc=(rhat_mode == "normal-constraint"),
                                       geom=geom)

        def one(cell: int) -> CondensedBlock:
            return condense(assembler.assemble(cell, conv))

        cells = range(m.num_cells)
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                blocks = list(pool.map(one, cells))
        else:
            blocks = [one(c) for c in cells]
    return blocks


def dump_matrix(system: SparseSystem, path: str) -> None:
    """Coordinate-format text dump (row col value, 0-based)."""
    coo = system.matrix.tocoo()
    with open(path, "w") as fh:
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v!r}\n")


# ---------------------------------------------------------------------------
# monolithic (uncondensed) oracle
# ---------------------------------------------------------------------------

def solve_monolithic(m: Mesh, layout: DofLayout, refel: ReferenceElement,
                     params: PhysParams, conv: ConvectiveFields, forcing,
                     bvalues: np.ndarray, rhat_mode: str = "strong-zero") -> FieldState:
    """Assemble local + trace equations as one sparse system and solve.

    Testing oracle for the condensed path; restricted to small problems.
    """
    if m.num_cells > 32 or refel.k > 2:
        raise ValueError("monolithic oracle is limited to <= 32 cells and k <= 2")
    geom = CellGeometryCache(m, refel)
    idx = LocalIndexMap(refel)
    nloc, nfac = idx.n_loc, idx.n_fac
    nc = m.num_cells
    foff = nc * nloc
    total = foff + layout.total
    gather = layout.cell_gather
    rhat_normal = rhat_mode == "normal-constraint"

    rows, cols, data = [], [], []
    rhs = np.zeros(total)

    def add(rr, cc, block):
        rows.append(np.repeat(rr, len(cc)))
        cols.append(np.tile(cc, len(rr)))
        data.append(np.asarray(block).ravel())

    for c in range(nc):
        lm = assemble_local(m, c, refel, params, conv, forcing=forcing,
                            rhat_normal_bc=rhat_normal, geom=geom)
        loc = c * nloc + np.arange(nloc)
        fac = foff + gather[c]
        add(loc, loc, lm.A)
        add(loc, fac, lm.B)
        add(fac, loc, lm.C)
        add(fac, fac, lm.D)
        rhs[loc] += lm.F

    mat = sp.coo_matrix((np.concatenate(data),
                         (np.concatenate(rows), np.concatenate(cols))),
                        shape=(total, total)).tocsr()

    elim = foff + _eliminated_dofs(layout, rhat_mode)
    vals = bvalues[elim - foff]
    free_mask = np.ones(total, dtype=bool)
    free_mask[elim] = False
    free = np.nonzero(free_mask)[0]
    rhs_f = rhs[free] - mat[free][:, elim] @ vals
    try:
        sol = spla.splu(mat[free][:, free].tocsc()).solve(rhs_f)
    except RuntimeError as exc:
        raise SingularSystemError("monolithic system is singular") from exc
    full = np.zeros(total)
    full[free] = sol
    full[elim] = vals
    state = FieldState(mesh=m, layout=layout, refel=refel,
                       locals_=full[:foff].reshape(nc, nloc).copy(),
                       facet=full[foff:].copy())
    return post_normalize_pressure(state, m)


# ---------------------------------------------------------------------------
# diagnostics (divergence, jumps, boundary traces)
# ---------------------------------------------------------------------------

def divergence_inf(state: FieldState, field: str = "u",
                   geom: CellGeometryCache | None = None) -> tuple[float, float]:
    """(max |div field_h|, max |field_h|) over all 2k+3 quadrature points."""
    refel = state.refel
    if geom is None:
        geom = CellGeometryCache(state.mesh, refel)
    coeffs = state.coeffs(field)                      # (C, 2, nk)
    max_div = 0.0
    max_val = 0.0
    for c in range(state.mesh.num_cells):
        G = geom.phys_grads(c)                        # (nq, nk, 2)
        div = coeffs[c, 0] @ G[:, :, 0].T + coeffs[c, 1] @ G[:, :, 1].T
        vals = coeffs[c] @ refel.vol_vals.T           # (2, nq)
        max_div = max(max_div, float(np.abs(div).max()))
        max_val = max(max_val, float(np.abs(vals).max()))
    return max_div, max_val


def normal_jump_inf(state: FieldState, field: str = "u") -> float:
    """Max interior-facet jump of the normal component at facet quad points."""
    m = state.mesh
    refel = state.refel
    coeffs = state.coeffs(field)
    worst = 0.0
    for e in range(m.num_facets):
        if m.boundary_flags[e]:
            continue
        n = m.canonical_normal(e)
        sides = []
        for c in m.facet_cells[e]:
            f = int(np.where(m.cell_facets[c] == e)[0][0])
            o = int(m.cell_facet_orient[c, f])
            T = refel.trace_vals[f][o]
            sides.append(T @ coeffs[c].T)            # (nqf, 2)
        jump = (sides[0] - sides[1]) @ n
        worst = max(worst, float(np.abs(jump).max()))
    return worst


def boundary_trace_mismatch(state: FieldState, field: str = "u") -> float:
    """Max |field_h.n - fieldhat_h.n| over boundary facet quad points."""
    m = state.mesh
    refel = state.refel
    coeffs = state.coeffs(field)
    hat = "uhat" if field == "u" else "bhat"
    fb = refel.facet_vals
    worst = 0.0
    for e in np.nonzero(m.boundary_flags)[0]:
        c = int(m.facet_cells[e, 0])
        f = int(np.where(m.cell_facets[c] == e)[0][0])
        o = int(m.cell_facet_orient[c, f])
        n = m.canonical_normal(e)
        vol = (refel.trace_vals[f][o] @ coeffs[c].T) @ n
        hat_vals = np.column_stack([fb @ state.facet_coeffs(hat, e, 0),
                                    fb @ state.facet_coeffs(hat, e, 1)]) @ n
        worst = max(worst, float(np.abs(vol - hat_vals).max()))
    return worst
