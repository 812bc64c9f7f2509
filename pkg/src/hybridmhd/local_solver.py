"""Element-local assembly, auxiliary elimination, and static condensation.

Unknowns on one element (local ordering used everywhere):

    L (2x2 gradient-type tensor, components (0,0),(0,1),(1,0),(1,1)),
    u (velocity), p (pressure, degree k-1), J (scalar current),
    b (magnetic field), r (magnetic pressure, degree k-1),

followed by the facet values of the element's three facets blocked
uhat | phat | bhat | rhat, vector fields component-major, each component
holding the three facets' k+1 canonical nodal values.  This matches
``DofLayout.cell_gather`` exactly.

2D cross-product conventions (planar vectors embedded with zero third
component; all terms below are derived mechanically from that embedding):

    n x b        = n1*b2 - n2*b1                       (scalar)
    d x s        = s * (d2, -d1)      for scalar s     (vector)
    n x s        = s * (n2, -n1)      for scalar s     (vector)
    curl(vector) = db2/dx - db1/dy                     (scalar)
    curl(scalar) = (da/dy, -da/dx)                     (vector)

The normal flux carried by the facet terms is

    F1.n = -uhat (x) n
    F2.n = -L n + m u + phat n + (kappa/2) d x (n x (b + bhat)) + alpha1 (u - uhat)
    F3.n = u . n
    F4.n = -(n x bhat)
    F5.n = n x J + rhat n - (kappa/2) n x ((u + uhat) x d)
           + (beta1 T + beta2 N)(b - bhat)
    F6.n = b . n

with m = w.n, N = n (x) n, T = I - N.  Besides the local equations, each
element also contributes the facet-tested rows of the flux-continuity /
boundary-constraint system; those rows share the facet dof indexing, with
the boundary-only terms (uhat.n against pressure tests, bhat.n against
magnetic-pressure tests in the normal-constraint mode) added on boundary
facets.

All operations here are pure per-element computations; callers may run
them element-parallel and reduce the results themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .basis import ReferenceElement
from .mesh import Mesh


class SingularLocalSolveError(RuntimeError):
    """Local block could not be factorized (stabilization too weak?)."""


@dataclass(frozen=True)
class PhysParams:
    """Physical and stabilization parameters of the linearized system."""

    re: float
    rm: float
    kappa: float
    alpha1: float = 125.0
    beta1: float = 1.0
    beta2: float = 1.0

    def __post_init__(self):
        if self.re <= 0 or self.rm <= 0 or self.kappa <= 0:
            raise ValueError("Re, Rm and kappa must be positive")
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("beta1 and beta2 must be positive")

    @property
    def ha(self) -> float:
        return math.sqrt(self.kappa * self.re * self.rm)


class ConvectiveFields:
    """Advecting velocity w and magnetic field d of the linearized terms.

    The base class is the zero pair.  Facet evaluations must be
    single-valued on every facet; implementations get the physical facet
    quadrature points in canonical facet order.
    """

    def w_volume(self, cell: int, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(x)

    def m_facet(self, cell: int, local_facet: int, x: np.ndarray,
                n: np.ndarray) -> np.ndarray:
        return np.zeros(x.shape[0])

    def d_volume(self, cell: int, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(x)

    def d_grad_volume(self, cell: int, x: np.ndarray) -> np.ndarray:
        return np.zeros((x.shape[0], 2, 2))

    def d_facet(self, cell: int, local_facet: int, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(x)

    def sup_w(self, mesh: Mesh, refel: ReferenceElement) -> float:
        return 0.0


class PrescribedFields(ConvectiveFields):
    """Analytic (hence skeleton-continuous) w and d closures."""

    def __init__(self, w=None, d=None, d_grad=None):
        self._w = w
        self._d = d
        self._d_grad = d_grad

    def w_volume(self, cell, x):
        return np.asarray(self._w(x)) if self._w else np.zeros_like(x)

    def m_facet(self, cell, local_facet, x, n):
        if self._w is None:
            return np.zeros(x.shape[0])
        return np.asarray(self._w(x)) @ n

    def d_volume(self, cell, x):
        return np.asarray(self._d(x)) if self._d else np.zeros_like(x)

    def d_grad_volume(self, cell, x):
        if self._d_grad is None:
            if self._d is not None:
                raise ValueError("prescribed d requires d_grad for assembly")
            return np.zeros((x.shape[0], 2, 2))
        return np.asarray(self._d_grad(x))

    def d_facet(self, cell, local_facet, x):
        return self.d_volume(cell, x)

    def sup_w(self, mesh, refel):
        if self._w is None:
            return 0.0
        pts = _all_volume_points(mesh, refel)
        vals = np.asarray(self._w(pts.reshape(-1, 2)))
        return float(np.linalg.norm(vals, axis=1).max())


def _all_volume_points(mesh: Mesh, refel: ReferenceElement) -> np.ndarray:
    v = mesh.vertices[mesh.cells]                     # (C, 3, 2)
    q = refel.vol_rule.points                         # (nq, 2)
    lam = np.column_stack([1.0 - q.sum(axis=1), q])   # barycentric (nq, 3)
    return np.einsum("qk,cki->cqi", lam, v)


# ---------------------------------------------------------------------------
# numerical flux (pointwise reference implementation)
# ---------------------------------------------------------------------------

def eval_numerical_flux(L, u, p, J, b, r, uhat, phat, bhat, rhat,
                        n, m, d, params: PhysParams) -> dict:
    """Normal flux components at one facet point.

    ``p`` and ``r`` take no part (the flux carries their traces phat and
    rhat instead); they are accepted so the argument list mirrors the full
    local state.  Returns the six components keyed "F1".."F6".
    """
    L = np.asarray(L, dtype=float)
    u = np.asarray(u, dtype=float)
    b = np.asarray(b, dtype=float)
    uhat = np.asarray(uhat, dtype=float)
    bhat = np.asarray(bhat, dtype=float)
    n = np.asarray(n, dtype=float)
    d = np.asarray(d, dtype=float)
    kap = params.kappa
    sigma = n[0] * (b + bhat)[1] - n[1] * (b + bhat)[0]       # n x (b + bhat)
    tau = (u + uhat)[0] * d[1] - (u + uhat)[1] * d[0]         # (u + uhat) x d
    rot = np.array([n[1], -n[0]])                             # n x (scalar 1)
    db = b - bhat
    f2 = (-L @ n + m * u + phat * n
          + 0.5 * kap * sigma * np.array([d[1], -d[0]])
          + params.alpha1 * (u - uhat))
    f5 = (J * rot + rhat * n - 0.5 * kap * tau * rot
          + params.beta1 * db + (params.beta2 - params.beta1) * (db @ n) * n)
    return {
        "F1": -np.outer(uhat, n),
        "F2": f2,
        "F3": float(u @ n),
        "F4": -(n[0] * bhat[1] - n[1] * bhat[0]),
        "F5": f5,
        "F6": float(b @ n),
    }


# ---------------------------------------------------------------------------
# local index bookkeeping
# ---------------------------------------------------------------------------

class LocalIndexMap:
    """Slices of the local and facet dof vectors for one degree."""

    def __init__(self, refel: ReferenceElement):
        nk, mp, nf = refel.dim, refel.dim_p, refel.dim_facet
        self.nk, self.mp, self.nf = nk, mp, nf
        self.n_loc = 9 * nk + 2 * mp
        self.n_fac = 18 * nf
        off = 0
        self.L = []
        for _ in range(4):
            self.L.append(slice(off, off + nk))
            off += nk
        self.u = [slice(off, off + nk), slice(off + nk, off + 2 * nk)]
        off += 2 * nk
        self.p = slice(off, off + mp)
        off += mp
        self.J = slice(off, off + nk)
        off += nk
        self.b = [slice(off, off + nk), slice(off + nk, off + 2 * nk)]
        off += 2 * nk
        self.r = slice(off, off + mp)
        self.aux = np.r_[np.arange(0, 4 * nk), np.arange(self.J.start, self.J.stop)]
        rest_mask = np.ones(self.n_loc, dtype=bool)
        rest_mask[self.aux] = False
        self.rest = np.nonzero(rest_mask)[0]
        # positions of the remaining fields inside the reduced (u,p,b,r) vector
        self.red_u = [slice(0, nk), slice(nk, 2 * nk)]
        self.red_p = slice(2 * nk, 2 * nk + mp)
        self.red_b = [slice(2 * nk + mp, 3 * nk + mp), slice(3 * nk + mp, 4 * nk + mp)]
        self.red_r = slice(4 * nk + mp, 4 * nk + 2 * mp)
        # facet blocks: uhat c0|c1, phat, bhat c0|c1, rhat; 3 facets each
        base = {"uhat": 0, "phat": 6 * nf, "bhat": 9 * nf, "rhat": 15 * nf}
        self._fbase = base

    def fdof(self, field: str, comp: int, local_facet: int) -> slice:
        start = self._fbase[field] + comp * 3 * self.nf + local_facet * self.nf
        return slice(start, start + self.nf)

    def L_slice(self, i: int, j: int) -> slice:
        return self.L[2 * i + j]


@dataclass
class LocalMatrices:
    """Element-local system and its couplings to the facet unknowns.

    A x + B y = F are the local equations; C x + D y are the element's
    contributions to the facet-tested global rows (same indexing as y).
    """

    cell: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    F: np.ndarray
    idx: LocalIndexMap
    reduced: bool = False
    aux_recovery: tuple | None = None


@dataclass
class CondensedBlock:
    """Schur complement S = D - C A^-1 B over the element's facet dofs."""

    cell: int
    S: np.ndarray
    g: np.ndarray
    lu: tuple
    B: np.ndarray
    F: np.ndarray
    idx: LocalIndexMap
    aux_recovery: tuple | None


class CellGeometryCache:
    """Vectorized per-mesh geometry shared by all element assemblies."""

    def __init__(self, mesh: Mesh, refel: ReferenceElement):
        self.mesh = mesh
        self.refel = refel
        v = mesh.vertices[mesh.cells]
        jac = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=-1)  # (C,2,2)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1]
        inv[:, 0, 1] = -jac[:, 0, 1]
        inv[:, 1, 0] = -jac[:, 1, 0]
        inv[:, 1, 1] = jac[:, 0, 0]
        inv /= det[:, None, None]
        self.jac, self.det, self.jac_inv = jac, det, inv
        self.xq = _all_volume_points(mesh, refel)                  # (C,nq,2)
        self.wq = refel.vol_rule.weights[None, :] * det[:, None]   # (C,nq)
        # facet data per (cell, local facet)
        C = mesh.num_cells
        self.normals = np.empty((C, 3, 2))
        self.lengths = np.empty((C, 3))
        tq = refel.facet_rule.points
        self.xf = np.empty((C, 3, len(tq), 2))
        for f, (la, lb) in enumerate(((0, 1), (1, 2), (2, 0))):
            pa = v[:, la]
            pb = v[:, lb]
            d = pb - pa
            le = np.linalg.norm(d, axis=1)
            self.lengths[:, f] = le
            self.normals[:, f, 0] = d[:, 1] / le
            self.normals[:, f, 1] = -d[:, 0] / le
        for c in range(C):
            for f in range(3):
                e = mesh.cell_facets[c, f]
                self.xf[c, f] = mesh.facet_points(e, tq)

    def phys_grads(self, cell: int) -> np.ndarray:
        return np.einsum("qmj,ji->qmi", self.refel.vol_grads, self.jac_inv[cell])

    def phys_grads_p(self, cell: int) -> np.ndarray:
        return np.einsum("qmj,ji->qmi", self.refel.vol_grads_p, self.jac_inv[cell])


def assemble_local(mesh: Mesh, cell: int, refel: ReferenceElement,
                   params: PhysParams, conv: ConvectiveFields,
                   forcing=None, rhat_normal_bc: bool = False,
                   geom: CellGeometryCache | None = None) -> LocalMatrices:
    """Discretize the six local equations and the facet-tested rows."""
    if geom is None:
        geom = CellGeometryCache(mesh, refel)
    idx = LocalIndexMap(refel)
    nk, mp = idx.nk, idx.mp
    re_, kap = params.re, params.kappa
    a1, b1_, b2_ = params.alpha1, params.beta1, params.beta2

    A = np.zeros((idx.n_loc, idx.n_loc))
    B = np.zeros((idx.n_loc, idx.n_fac))
    Cm = np.zeros((idx.n_fac, idx.n_loc))
    D = np.zeros((idx.n_fac, idx.n_fac))
    F = np.zeros(idx.n_loc)

    W = geom.wq[cell]
    xq = geom.xq[cell]
    Vk = refel.vol_vals
    Vp = refel.vol_vals_p
    G = geom.phys_grads(cell)
    Gp = geom.phys_grads_p(cell)

    wvol = conv.w_volume(cell, xq)
    dvol = conv.d_volume(cell, xq)
    dgrad = conv.d_grad_volume(cell, xq)

    def vmat(X, Y, c=None):
        wgt = W if c is None else W * c
        return X.T @ (Y * wgt[:, None])

    Mk = vmat(Vk, Vk)
    Cj = [vmat(G[:, :, j], Vk) for j in range(2)]       # test-grad x trial-val
    Dj = [vmat(G[:, :, j], Vp) for j in range(2)]
    Wc = vmat(G[:, :, 0] * wvol[:, 0:1] + G[:, :, 1] * wvol[:, 1:2], Vk)

    # (a) tensor test rows: Re (L, G) + (u, div G) - <uhat (x) n, G>
    for i in range(2):
        for j in range(2):
            sl = idx.L_slice(i, j)
            A[sl, sl] += re_ * Mk
            A[sl, idx.u[i]] += Cj[j]

    # curl(v x d) helper arrays; s_i is the scalar e_i x d
    s_comp = (dvol[:, 1], -dvol[:, 0])
    ds_comp = (dgrad[:, 1, :], -dgrad[:, 0, :])
    gcurl = (-G[:, :, 1], G[:, :, 0])                    # curl(phi e_i), scalar

    # (b) velocity test rows
    for i in range(2):
        ui = idx.u[i]
        for j in range(2):
            A[ui, idx.L_slice(i, j)] += Cj[j]
        A[ui, idx.p] -= Dj[i]
        A[ui, ui] -= Wc
        si, dsi = s_comp[i], ds_comp[i]
        Zy = G[:, :, 1] * si[:, None] + Vk * dsi[:, 1][:, None]
        Zx = G[:, :, 0] * si[:, None] + Vk * dsi[:, 0][:, None]
        A[ui, idx.b[0]] += kap * vmat(Zy, Vk)
        A[ui, idx.b[1]] -= kap * vmat(Zx, Vk)

    # (c) pressure test rows: (div u, q) after integration by parts
    for i in range(2):
        A[idx.p, idx.u[i]] -= vmat(Gp[:, :, i], Vk)

    # (d) scalar current test rows
    A[idx.J, idx.J] += (params.rm / kap) * Mk
    A[idx.J, idx.b[0]] -= Cj[1]
    A[idx.J, idx.b[1]] += Cj[0]

    # (e) magnetic test rows
    for i in range(2):
        bi = idx.b[i]
        A[bi, idx.J] += vmat(gcurl[i], Vk)
        A[bi, idx.r] -= Dj[i]
        A[bi, idx.u[0]] -= kap * vmat(gcurl[i] * dvol[:, 1][:, None], Vk)
        A[bi, idx.u[1]] += kap * vmat(gcurl[i] * dvol[:, 0][:, None], Vk)

    # (f) magnetic pressure test rows
    for i in range(2):
        A[idx.r, idx.b[i]] -= vmat(Gp[:, :, i], Vk)

    if forcing is not None:
        g_fn, f_fn = forcing
        gq = np.asarray(g_fn(xq))
        fq = np.asarray(f_fn(xq))
        for i in range(2):
            F[idx.u[i]] += Vk.T @ (W * gq[:, i])
            F[idx.b[i]] += Vk.T @ (W * fq[:, i])

    # ---- facet terms -------------------------------------------------------
    tw = refel.facet_rule.weights
    Fb = refel.facet_vals
    for f in range(3):
        e = mesh.cell_facets[cell, f]
        o = int(mesh.cell_facet_orient[cell, f])
        n = geom.normals[cell, f]
        om = tw * geom.lengths[cell, f]
        T = refel.trace_vals[f][o]
        Tp = refel.trace_vals_p[f][o]
        xf = geom.xf[cell, f]
        mq = conv.m_facet(cell, f, xf, n)
        df = conv.d_facet(cell, f, xf)
        on_boundary = bool(mesh.boundary_flags[e])

        def fmat(X, Y, c=None):
            wgt = om if c is None else om * c
            return X.T @ (Y * wgt[:, None])

        MTT = fmat(T, T)
        MTF = fmat(T, Fb)
        MFF = fmat(Fb, Fb)
        MPT = fmat(Tp, T)
        ATTm = fmat(T, T, mq)
        AFTm = fmat(Fb, T, mq)
        KTT = [fmat(T, T, df[:, 0]), fmat(T, T, df[:, 1])]
        KTF = [fmat(T, Fb, df[:, 0]), fmat(T, Fb, df[:, 1])]
        KFT = [KTF[0].T, KTF[1].T]
        KFF = [fmat(Fb, Fb, df[:, 0]), fmat(Fb, Fb, df[:, 1])]
        rot = (n[1], -n[0])
        dvec = lambda tab, i: tab[1] if i == 0 else -tab[0]   # (d2, -d1)_i

        for i in range(2):
            # (a) tensor rows, facet part
            for j in range(2):
                B[idx.L_slice(i, j), idx.fdof("uhat", i, f)] -= n[j] * MTF
            # (b) velocity rows
            ui = idx.u[i]
            for j in range(2):
                A[ui, idx.L_slice(i, j)] -= n[j] * MTT
            A[ui, ui] += ATTm + a1 * MTT
            B[ui, idx.fdof("uhat", i, f)] -= a1 * MTF
            B[ui, idx.fdof("phat", 0, f)] += n[i] * MTF
            A[ui, idx.b[0]] += 0.5 * kap * (-n[1]) * dvec(KTT, i)
            A[ui, idx.b[1]] += 0.5 * kap * n[0] * dvec(KTT, i)
            B[ui, idx.fdof("bhat", 0, f)] += 0.5 * kap * (-n[1]) * dvec(KTF, i)
            B[ui, idx.fdof("bhat", 1, f)] += 0.5 * kap * n[0] * dvec(KTF, i)
            # (c) pressure rows
            A[idx.p, idx.u[i]] += n[i] * MPT
            # (e) magnetic rows
            bi = idx.b[i]
            A[bi, idx.J] += rot[i] * MTT
            B[bi, idx.fdof("rhat", 0, f)] += n[i] * MTF
            A[bi, idx.u[0]] -= 0.5 * kap * rot[i] * KTT[1]
            A[bi, idx.u[1]] += 0.5 * kap * rot[i] * KTT[0]
            B[bi, idx.fdof("uhat", 0, f)] -= 0.5 * kap * rot[i] * KTF[1]
            B[bi, idx.fdof("uhat", 1, f)] += 0.5 * kap * rot[i] * KTF[0]
            for j in range(2):
                beta_ij = b1_ * (i == j) + (b2_ - b1_) * n[i] * n[j]
                A[bi, idx.b[j]] += beta_ij * MTT
                B[bi, idx.fdof("bhat", j, f)] -= beta_ij * MTF
            # (f) magnetic pressure rows
            A[idx.r, idx.b[i]] += n[i] * MPT

        # (d) scalar current rows
        B[idx.J, idx.fdof("bhat", 0, f)] += n[1] * MTF
        B[idx.J, idx.fdof("bhat", 1, f)] -= n[0] * MTF

        # ---- facet-tested global rows --------------------------------------
        for i in range(2):
            ur = idx.fdof("uhat", i, f)
            for j in range(2):
                Cm[ur, idx.L_slice(i, j)] -= n[j] * MTF.T
            Cm[ur, idx.u[i]] += AFTm + a1 * MTF.T
            Cm[ur, idx.b[0]] += 0.5 * kap * (-n[1]) * dvec(KFT, i)
            Cm[ur, idx.b[1]] += 0.5 * kap * n[0] * dvec(KFT, i)
            D[ur, idx.fdof("uhat", i, f)] -= a1 * MFF
            D[ur, idx.fdof("phat", 0, f)] += n[i] * MFF
            D[ur, idx.fdof("bhat", 0, f)] += 0.5 * kap * (-n[1]) * dvec(KFF, i)
            D[ur, idx.fdof("bhat", 1, f)] += 0.5 * kap * n[0] * dvec(KFF, i)

            br = idx.fdof("bhat", i, f)
            Cm[br, idx.J] += rot[i] * MTF.T
            Cm[br, idx.u[0]] -= 0.5 * kap * rot[i] * KFT[1]
            Cm[br, idx.u[1]] += 0.5 * kap * rot[i] * KFT[0]
            for j in range(2):
                beta_ij = b1_ * (i == j) + (b2_ - b1_) * n[i] * n[j]
                Cm[br, idx.b[j]] += beta_ij * MTF.T
                D[br, idx.fdof("bhat", j, f)] -= beta_ij * MFF
            D[br, idx.fdof("rhat", 0, f)] += n[i] * MFF
            D[br, idx.fdof("uhat", 0, f)] -= 0.5 * kap * rot[i] * KFF[1]
            D[br, idx.fdof("uhat", 1, f)] += 0.5 * kap * rot[i] * KFF[0]

        pr = idx.fdof("phat", 0, f)
        rr = idx.fdof("rhat", 0, f)
        for i in range(2):
            Cm[pr, idx.u[i]] += n[i] * MTF.T
            Cm[rr, idx.b[i]] += n[i] * MTF.T
        if on_boundary:
            # boundary constraint rows <(u - uhat).n, rho> and, in the
            # normal-constraint mode, <(b - bhat).n, gamma>
            for i in range(2):
                D[pr, idx.fdof("uhat", i, f)] -= n[i] * MFF
                if rhat_normal_bc:
                    D[rr, idx.fdof("bhat", i, f)] -= n[i] * MFF

    return LocalMatrices(cell=cell, A=A, B=B, C=Cm, D=D, F=F, idx=idx)


class LocalAssembler:
    """Incremental per-element assembly for repeated (Picard) solves.

    The convective fields enter only the velocity/magnetic rows of the
    reduced system, whereas the auxiliary (L, J) rows are independent of
    (w, d); the construction therefore assembles each element once with
    zero convective fields, eliminates L and J, and caches the reduced
    static blocks.  ``assemble(cell, conv)`` adds the (w, d)-dependent
    volume and facet terms on top of a copy.  The forcing is bound at
    construction (it is fixed across Picard iterations).
    """

    def __init__(self, mesh: Mesh, refel: ReferenceElement, params: PhysParams,
                 forcing=None, rhat_normal_bc: bool = False,
                 geom: CellGeometryCache | None = None):
        from threadpoolctl import threadpool_limits

        self.mesh = mesh
        self.refel = refel
        self.params = params
        self.geom = geom if geom is not None else CellGeometryCache(mesh, refel)
        self.idx = LocalIndexMap(refel)
        zero = ConvectiveFields()
        with threadpool_limits(limits=1):   # tiny blocks, see global_system
            self._static = [
                eliminate_auxiliary(assemble_local(mesh, c, refel, params, zero,
                                                   forcing=forcing,
                                                   rhat_normal_bc=rhat_normal_bc,
                                                   geom=self.geom))
                for c in range(mesh.num_cells)
            ]

    def assemble(self, cell: int, conv: ConvectiveFields) -> LocalMatrices:
        base = self._static[cell]
        if isinstance(conv, ConvectiveFields) and type(conv) is ConvectiveFields:
            return base
        lm = LocalMatrices(cell=cell, A=base.A.copy(), B=base.B.copy(),
                           C=base.C.copy(), D=base.D.copy(), F=base.F,
                           idx=base.idx, reduced=True,
                           aux_recovery=base.aux_recovery)
        self._add_convective_terms(lm, conv)
        return lm

    def _add_convective_terms(self, lm: LocalMatrices, conv: ConvectiveFields):
        cell = lm.cell
        geom, refel, idx = self.geom, self.refel, self.idx
        kap = self.params.kappa
        mesh = self.mesh
        A, B, Cm, D = lm.A, lm.B, lm.C, lm.D
        W = geom.wq[cell]
        xq = geom.xq[cell]
        Vk = refel.vol_vals
        G = geom.phys_grads(cell)
        wvol = conv.w_volume(cell, xq)
        dvol = conv.d_volume(cell, xq)
        dgrad = conv.d_grad_volume(cell, xq)

        def vmat(X, c=None):
            wgt = W if c is None else W * c
            return X.T @ (Vk * wgt[:, None])

        Wc = vmat(G[:, :, 0] * wvol[:, 0:1] + G[:, :, 1] * wvol[:, 1:2])
        s_comp = (dvol[:, 1], -dvol[:, 0])
        ds_comp = (dgrad[:, 1, :], -dgrad[:, 0, :])
        gcurl = (-G[:, :, 1], G[:, :, 0])
        for i in range(2):
            ui, bi = idx.red_u[i], idx.red_b[i]
            A[ui, ui] -= Wc
            si, dsi = s_comp[i], ds_comp[i]
            Zy = G[:, :, 1] * si[:, None] + Vk * dsi[:, 1][:, None]
            Zx = G[:, :, 0] * si[:, None] + Vk * dsi[:, 0][:, None]
            A[ui, idx.red_b[0]] += kap * vmat(Zy)
            A[ui, idx.red_b[1]] -= kap * vmat(Zx)
            A[bi, idx.red_u[0]] -= kap * vmat(gcurl[i] * dvol[:, 1][:, None])
            A[bi, idx.red_u[1]] += kap * vmat(gcurl[i] * dvol[:, 0][:, None])

        tw = refel.facet_rule.weights
        Fb = refel.facet_vals
        for f in range(3):
            o = int(mesh.cell_facet_orient[cell, f])
            n = geom.normals[cell, f]
            om = tw * geom.lengths[cell, f]
            T = refel.trace_vals[f][o]
            xf = geom.xf[cell, f]
            mq = conv.m_facet(cell, f, xf, n)
            df = conv.d_facet(cell, f, xf)

            def fmat(X, Y, c):
                return X.T @ (Y * (om * c)[:, None])

            ATTm = fmat(T, T, mq)
            AFTm = fmat(Fb, T, mq)
            KTT = [fmat(T, T, df[:, 0]), fmat(T, T, df[:, 1])]
            KTF = [fmat(T, Fb, df[:, 0]), fmat(T, Fb, df[:, 1])]
            KFF = [fmat(Fb, Fb, df[:, 0]), fmat(Fb, Fb, df[:, 1])]
            rot = (n[1], -n[0])
            dvec = lambda tab, i: tab[1] if i == 0 else -tab[0]
            for i in range(2):
                ui, bi = idx.red_u[i], idx.red_b[i]
                A[ui, ui] += ATTm
                A[ui, idx.red_b[0]] += 0.5 * kap * (-n[1]) * dvec(KTT, i)
                A[ui, idx.red_b[1]] += 0.5 * kap * n[0] * dvec(KTT, i)
                B[ui, idx.fdof("bhat", 0, f)] += 0.5 * kap * (-n[1]) * dvec(KTF, i)
                B[ui, idx.fdof("bhat", 1, f)] += 0.5 * kap * n[0] * dvec(KTF, i)
                A[bi, idx.red_u[0]] -= 0.5 * kap * rot[i] * KTT[1]
                A[bi, idx.red_u[1]] += 0.5 * kap * rot[i] * KTT[0]
                B[bi, idx.fdof("uhat", 0, f)] -= 0.5 * kap * rot[i] * KTF[1]
                B[bi, idx.fdof("uhat", 1, f)] += 0.5 * kap * rot[i] * KTF[0]

                ur = idx.fdof("uhat", i, f)
                Cm[ur, ui] += AFTm
                Cm[ur, idx.red_b[0]] += 0.5 * kap * (-n[1]) * dvec(KTF, i).T
                Cm[ur, idx.red_b[1]] += 0.5 * kap * n[0] * dvec(KTF, i).T
                D[ur, idx.fdof("bhat", 0, f)] += 0.5 * kap * (-n[1]) * dvec(KFF, i)
                D[ur, idx.fdof("bhat", 1, f)] += 0.5 * kap * n[0] * dvec(KFF, i)
                br = idx.fdof("bhat", i, f)
                Cm[br, idx.red_u[0]] -= 0.5 * kap * rot[i] * KTF[1].T
                Cm[br, idx.red_u[1]] += 0.5 * kap * rot[i] * KTF[0].T
                D[br, idx.fdof("uhat", 0, f)] -= 0.5 * kap * rot[i] * KFF[1]
                D[br, idx.fdof("uhat", 1, f)] += 0.5 * kap * rot[i] * KFF[0]


def eliminate_auxiliary(lm: LocalMatrices) -> LocalMatrices:
    """Remove L and J through their block-diagonal mass equations."""
    if lm.reduced:
        return lm
    aux, rest = lm.idx.aux, lm.idx.rest
    A_aa = lm.A[np.ix_(aux, aux)]
    A_ar = lm.A[np.ix_(aux, rest)]
    A_ra = lm.A[np.ix_(rest, aux)]
    B_a = lm.B[aux]
    F_a = lm.F[aux]
    lu = lu_factor(A_aa)
    X_ar = lu_solve(lu, A_ar)
    X_aB = lu_solve(lu, B_a)
    X_aF = lu_solve(lu, F_a)
    return LocalMatrices(
        cell=lm.cell,
        A=lm.A[np.ix_(rest, rest)] - A_ra @ X_ar,
        B=lm.B[rest] - A_ra @ X_aB,
        C=lm.C[:, rest] - lm.C[:, aux] @ X_ar,
        D=lm.D - lm.C[:, aux] @ X_aB,
        F=lm.F[rest] - A_ra @ X_aF,
        idx=lm.idx,
        reduced=True,
        aux_recovery=(lu, A_ar, B_a, F_a),
    )


class _ScaledLU:
    """Row/column-equilibrated dense LU with one iterative-refinement step.

    The local blocks mix mass terms of size h^2 with kappa-weighted facet
    terms of size kappa*h; equilibration plus a refinement step keeps the
    local solves near machine accuracy across that spread.
    """

    def __init__(self, A: np.ndarray, context: str = ""):
        self.A = A
        r = np.abs(A).max(axis=1)
        if r.min() <= 0:
            raise SingularLocalSolveError(f"zero row in local block {context}")
        self.dr = 1.0 / r
        As = A * self.dr[:, None]
        c = np.abs(As).max(axis=0)
        self.dc = 1.0 / np.where(c > 0, c, 1.0)
        try:
            self.lu = lu_factor(As * self.dc[None, :])
        except np.linalg.LinAlgError as exc:
            raise SingularLocalSolveError(f"singular local block {context}") from exc
        if np.abs(np.diag(self.lu[0])).min() < 1e-300:
            raise SingularLocalSolveError(
                f"singular local block {context}: the parameter conditions "
                "(alpha1 > sup|w|/2, beta1, beta2 > 0) are likely violated")

    def solve(self, rhs: np.ndarray, refine: bool = True) -> np.ndarray:
        x = self.dc[:, None] * lu_solve(self.lu, self.dr[:, None] * rhs) \
            if rhs.ndim == 2 else \
            self.dc * lu_solve(self.lu, self.dr * rhs)
        if refine:
            res = rhs - self.A @ x
            if rhs.ndim == 2:
                x = x + self.dc[:, None] * lu_solve(self.lu, self.dr[:, None] * res)
            else:
                x = x + self.dc * lu_solve(self.lu, self.dr * res)
        return x


def condense(lm: LocalMatrices) -> CondensedBlock:
    """Schur-complement the remaining local dofs onto the facet dofs."""
    lu = _ScaledLU(lm.A, context=f"on cell {lm.cell}")
    AinvB = lu.solve(lm.B)
    AinvF = lu.solve(lm.F)
    return CondensedBlock(cell=lm.cell, S=lm.D - lm.C @ AinvB,
                          g=-(lm.C @ AinvF), lu=lu, B=lm.B, F=lm.F,
                          idx=lm.idx, aux_recovery=lm.aux_recovery)


def reconstruct_local(cb: CondensedBlock, facet_values: np.ndarray) -> np.ndarray:
    """Recover the full local vector (L, u, p, J, b, r) from facet values."""
    x = cb.lu.solve(cb.F - cb.B @ facet_values)
    if cb.aux_recovery is None:
        return x
    lu_aux, A_ar, B_a, F_a = cb.aux_recovery
    x_aux = lu_solve(lu_aux, F_a - A_ar @ x - B_a @ facet_values)
    out = np.empty(cb.idx.n_loc)
    out[cb.idx.rest] = x
    out[cb.idx.aux] = x_aux
    return out
