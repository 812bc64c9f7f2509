"""Reference-element nodal bases, facet traces, and quadrature rules.

The cell basis is a nodal Lagrange basis of P_k on the reference triangle
{(0,0), (1,0), (0,1)} with equispaced nodes, constructed through a
well-conditioned orthogonal (Koornwinder-Dubiner) modal Vandermonde.
Facet bases are nodal Lagrange on the unit interval with the endpoints as
nodes, so facet continuity reduces to identifying endpoint nodes.

Trace tables hold cell-basis values at the facet quadrature points for
each of the three local facets in both facet orientations: orientation +1
walks the facet in its canonical (low-vertex to high-vertex) direction,
orientation -1 walks it backwards.

Quadrature: collapsed-coordinate Gauss-Legendre x Gauss-Jacobi product
rules on the triangle (all weights positive, exact for the requested total
degree) and Gauss-Legendre on the interval, both mapped to the reference
domains.  Assembly and error norms use exactness order 2k+3 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import eval_jacobi, gammaln

MAX_DEGREE = 6
MAX_QUAD_ORDER = 15

_EDGE_ENDPOINTS = ((0, 1), (1, 2), (2, 0))
_REF = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Points (reference coordinates) and positive weights."""

    domain: str               # "triangle" or "interval"
    points: np.ndarray        # (n, 2) on the triangle, (n,) on [0, 1]
    weights: np.ndarray       # (n,), sums to the reference measure
    exactness_order: int

    def __post_init__(self):
        self.points.setflags(write=False)
        self.weights.setflags(write=False)


def _gauss_jacobi_10(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Jacobi nodes/weights on [-1, 1] for the weight (1 - x)."""
    from scipy.special import roots_jacobi

    x, w = roots_jacobi(n, 1.0, 0.0)
    return x, w


@lru_cache(maxsize=None)
def quadrature_rule(domain: str, order: int) -> QuadratureRule:
    """Rule integrating all polynomials of total degree <= ``order``."""
    if not 1 <= order <= MAX_QUAD_ORDER:
        raise ValueError(
            f"unsupported quadrature order {order} (supported: 1..{MAX_QUAD_ORDER})")
    n = order // 2 + 1                     # 2n - 1 >= order
    if domain == "interval":
        x, w = leggauss(n)
        return QuadratureRule("interval", (x + 1.0) / 2.0, w / 2.0, order)
    if domain == "triangle":
        xa, wa = leggauss(n)
        xb, wb = _gauss_jacobi_10(n)
        A, B = np.meshgrid(xa, xb, indexing="ij")
        # collapsed map: the (1 - b) Duffy Jacobian is absorbed by the
        # Jacobi weight, so every weight stays positive
        x = (1.0 + A) * (1.0 - B) / 4.0
        y = (1.0 + B) / 2.0
        w = np.outer(wa, wb) / 8.0
        pts = np.column_stack([x.ravel(), y.ravel()])
        return QuadratureRule("triangle", pts, w.ravel(), order)
    raise ValueError(f"unknown quadrature domain {domain!r}")


# ---------------------------------------------------------------------------
# orthogonal modal basis on the triangle (Koornwinder-Dubiner)
# ---------------------------------------------------------------------------

def _jacobi_norm(n: int, alpha: float, beta: float) -> float:
    # L2 norm of the classical Jacobi polynomial on [-1, 1]
    if n == 0 and alpha + beta + 1 == 0:  # not reached for our (alpha, beta)
        raise ValueError
    ln = ((alpha + beta + 1) * np.log(2)
          + gammaln(n + alpha + 1) + gammaln(n + beta + 1)
          - np.log(2 * n + alpha + beta + 1)
          - gammaln(n + alpha + beta + 1) - gammaln(n + 1))
    return float(np.exp(0.5 * ln))


def _njacobi(x: np.ndarray, n: int, alpha: float, beta: float) -> np.ndarray:
    return eval_jacobi(n, alpha, beta, x) / _jacobi_norm(n, alpha, beta)


def _dnjacobi(x: np.ndarray, n: int, alpha: float, beta: float) -> np.ndarray:
    if n == 0:
        return np.zeros_like(x)
    return (np.sqrt(n * (n + alpha + beta + 1))
            * _njacobi(x, n - 1, alpha + 1, beta + 1))


def _collapse(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # our triangle -> (r, s) in the (-1,-1),(1,-1),(-1,1) triangle -> (a, b)
    r = 2.0 * x - 1.0
    s = 2.0 * y - 1.0
    denom = 1.0 - s
    regular = np.abs(denom) > 1e-14
    a = np.where(regular, 2.0 * (1.0 + r) / np.where(regular, denom, 1.0) - 1.0, -1.0)
    return a, s


def _modal_pairs(k: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(k + 1) for j in range(k + 1 - i)]


def _modal_values(points: np.ndarray, k: int) -> np.ndarray:
    a, b = _collapse(points[:, 0], points[:, 1])
    out = np.empty((points.shape[0], len(_modal_pairs(k))))
    for col, (i, j) in enumerate(_modal_pairs(k)):
        out[:, col] = (np.sqrt(2.0) * _njacobi(a, i, 0.0, 0.0)
                       * _njacobi(b, j, 2 * i + 1.0, 0.0) * (1.0 - b) ** i)
    return out


def _modal_grads(points: np.ndarray, k: int) -> np.ndarray:
    """Gradients w.r.t. our reference coordinates; shape (n, nmodes, 2)."""
    a, b = _collapse(points[:, 0], points[:, 1])
    pairs = _modal_pairs(k)
    out = np.empty((points.shape[0], len(pairs), 2))
    for col, (i, j) in enumerate(pairs):
        fa = _njacobi(a, i, 0.0, 0.0)
        dfa = _dnjacobi(a, i, 0.0, 0.0)
        gb = _njacobi(b, j, 2 * i + 1.0, 0.0)
        dgb = _dnjacobi(b, j, 2 * i + 1.0, 0.0)
        half1mb = 0.5 * (1.0 - b)
        dmodedr = dfa * gb
        dmodeds = dfa * gb * 0.5 * (1.0 + a)
        if i > 0:
            dmodedr = dmodedr * half1mb ** (i - 1)
            dmodeds = dmodeds * half1mb ** (i - 1)
        tmp = dgb * half1mb ** i
        if i > 0:
            tmp = tmp - 0.5 * i * gb * half1mb ** (i - 1)
        dmodeds = dmodeds + fa * tmp
        scale = 2.0 ** (i + 0.5)
        # d/dx = 2 d/dr, d/dy = 2 d/ds on our unit-leg triangle
        out[:, col, 0] = 2.0 * scale * dmodedr
        out[:, col, 1] = 2.0 * scale * dmodeds
    return out


def _equispaced_nodes(k: int) -> np.ndarray:
    if k == 0:
        return np.array([[1.0 / 3.0, 1.0 / 3.0]])
    return np.array([(i / k, j / k)
                     for j in range(k + 1) for i in range(k + 1 - j)])


class _NodalTriangleBasis:
    """Nodal Lagrange basis of P_k on the reference triangle."""

    def __init__(self, k: int):
        self.k = k
        self.dim = (k + 1) * (k + 2) // 2
        self.nodes = _equispaced_nodes(k)
        vand = _modal_values(self.nodes, k)
        self._coeff = np.linalg.inv(vand)   # modal -> nodal

    def values(self, points: np.ndarray) -> np.ndarray:
        return _modal_values(points, self.k) @ self._coeff

    def grads(self, points: np.ndarray) -> np.ndarray:
        g = _modal_grads(points, self.k)
        return np.einsum("qmi,mn->qni", g, self._coeff)


class _NodalIntervalBasis:
    """Nodal Lagrange basis of P_k on [0, 1]; nodes t_i = i/k incl. endpoints."""

    def __init__(self, k: int):
        self.k = k
        self.dim = k + 1
        self.nodes = np.linspace(0.0, 1.0, k + 1)
        vand = self._legendre(self.nodes)
        self._coeff = np.linalg.inv(vand)

    def _legendre(self, t: np.ndarray) -> np.ndarray:
        x = 2.0 * np.asarray(t) - 1.0
        out = np.empty((x.shape[0], self.dim))
        for n in range(self.dim):
            out[:, n] = eval_jacobi(n, 0.0, 0.0, x)
        return out

    def values(self, t: np.ndarray) -> np.ndarray:
        return self._legendre(t) @ self._coeff


def _edge_ref_points(local_facet: int, s: np.ndarray) -> np.ndarray:
    a, b = _EDGE_ENDPOINTS[local_facet]
    return _REF[a] + np.outer(s, _REF[b] - _REF[a])


@dataclass(frozen=True)
class ReferenceElement:
    """Degree-k reference data: bases, traces, and 2k+3 quadrature tables.

    ``vol_*`` tables are evaluated at the volume quadrature points,
    ``trace_*[f][o]`` at the facet quadrature points of local facet f in
    orientation o (keys +1/-1).  The ``*_p`` variants belong to the
    degree k-1 basis used for the pressure-like fields.
    """

    k: int
    cell_basis: _NodalTriangleBasis
    cell_basis_p: _NodalTriangleBasis    # degree k-1
    facet_basis: _NodalIntervalBasis
    vol_rule: QuadratureRule
    facet_rule: QuadratureRule
    vol_vals: np.ndarray                 # (nq, nk)
    vol_grads: np.ndarray                # (nq, nk, 2) reference gradients
    vol_vals_p: np.ndarray
    vol_grads_p: np.ndarray
    trace_vals: dict
    trace_vals_p: dict
    facet_vals: np.ndarray               # (nqf, k+1) at canonical points

    @property
    def dim(self) -> int:
        return self.cell_basis.dim

    @property
    def dim_p(self) -> int:
        return self.cell_basis_p.dim

    @property
    def dim_facet(self) -> int:
        return self.facet_basis.dim


@lru_cache(maxsize=None)
def build_reference_element(k: int) -> ReferenceElement:
    if not 1 <= k <= MAX_DEGREE:
        raise ValueError(f"unsupported degree {k} (supported: 1..{MAX_DEGREE})")
    cell = _NodalTriangleBasis(k)
    cell_p = _NodalTriangleBasis(k - 1)
    facet = _NodalIntervalBasis(k)
    vol = quadrature_rule("triangle", 2 * k + 3)
    frule = quadrature_rule("interval", 2 * k + 3)
    t = frule.points
    trace_vals = {}
    trace_vals_p = {}
    for f in range(3):
        trace_vals[f] = {}
        trace_vals_p[f] = {}
        for o, s in ((1, t), (-1, 1.0 - t)):
            pts = _edge_ref_points(f, s)
            trace_vals[f][o] = cell.values(pts)
            trace_vals_p[f][o] = cell_p.values(pts)
    return ReferenceElement(
        k=k, cell_basis=cell, cell_basis_p=cell_p, facet_basis=facet,
        vol_rule=vol, facet_rule=frule,
        vol_vals=cell.values(vol.points), vol_grads=cell.grads(vol.points),
        vol_vals_p=cell_p.values(vol.points), vol_grads_p=cell_p.grads(vol.points),
        trace_vals=trace_vals, trace_vals_p=trace_vals_p,
        facet_vals=facet.values(t),
    )
