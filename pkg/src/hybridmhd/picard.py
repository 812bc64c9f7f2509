"""Linear solve driver and Picard fixed-point driver.

``solve_linear`` solves one linearized system for prescribed convective
fields.  ``solve_nonlinear`` iterates the linear map (w, d) -> (u, b):
iteration i advects with the previous iterate, using the element fields
for the volume terms, the element trace of u for m = w.n (single-valued
because the discrete velocity is H(div)-conforming), and the previous
facet unknown bhat for the facet values of d (single-valued by
construction).  The initial guess is zero and the stopping rule is

    max( |u_i - u_{i-1}| / |u_i| , |b_i - b_{i-1}| / |b_i| ) < epsilon

in L2 norms.  A configurable absolute floor ``atol`` makes the rule
well-defined when a field is numerically zero (the relative criterion is
0/0 there); the default 0 keeps the pure relative rule.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .basis import ReferenceElement
from .global_system import (
    FieldState,
    assemble_global,
    build_condensed_blocks,
    post_normalize_pressure,
    reconstruct_state,
    solve_condensed,
)
from .local_solver import CellGeometryCache, ConvectiveFields, PhysParams
from .mesh import Mesh
from .spaces import DofLayout

logger = logging.getLogger(__name__)


class StabilizationError(ValueError):
    """alpha1 fails the sampled well-posedness bound alpha1 > sup|w|/2."""


@dataclass
class PicardConfig:
    epsilon: float = 1e-10
    max_iter: int = 100
    damping: float = 1.0
    atol: float = 0.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must be in (0, 1]")


@dataclass
class PicardHistory:
    changes_u: list = field(default_factory=list)
    changes_b: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0


class PicardConvection(ConvectiveFields):
    """Previous-iterate FE fields as the advecting pair (w, d)."""

    def __init__(self, mesh: Mesh, layout: DofLayout, refel: ReferenceElement,
                 u_coeffs: np.ndarray, b_coeffs: np.ndarray, facet: np.ndarray,
                 geom: CellGeometryCache):
        self.mesh = mesh
        self.layout = layout
        self.refel = refel
        self.u = u_coeffs          # (C, 2, nk)
        self.b = b_coeffs
        self.facet = facet
        self.geom = geom

    def w_volume(self, cell, x):
        return self.refel.vol_vals @ self.u[cell].T

    def m_facet(self, cell, local_facet, x, n):
        o = int(self.mesh.cell_facet_orient[cell, local_facet])
        T = self.refel.trace_vals[local_facet][o]
        return (T @ self.u[cell].T) @ n

    def d_volume(self, cell, x):
        return self.refel.vol_vals @ self.b[cell].T

    def d_grad_volume(self, cell, x):
        G = self.geom.phys_grads(cell)                 # (nq, nk, 2)
        return np.einsum("qnj,in->qij", G, self.b[cell])

    def d_facet(self, cell, local_facet, x):
        e = self.mesh.cell_facets[cell, local_facet]
        fb = self.refel.facet_vals
        return np.column_stack(
            [fb @ self.facet[self.layout.facet_dofs("bhat", e, comp)]
             for comp in range(2)])

    def sup_w(self, mesh, refel):
        vals = np.einsum("qn,cin->ciq", refel.vol_vals, self.u)
        return float(np.sqrt((vals ** 2).sum(axis=1)).max())


def field_l2_norm(mesh: Mesh, refel: ReferenceElement,
                  coeffs: np.ndarray) -> float:
    """L2 norm of a vector FE field given its (C, 2, nk) coefficients."""
    v = mesh.vertices[mesh.cells]
    d1 = v[:, 1] - v[:, 0]
    d2 = v[:, 2] - v[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    vals = np.einsum("qn,cin->ciq", refel.vol_vals, coeffs)
    return float(np.sqrt(np.einsum("ciq,q,c->", vals ** 2,
                                   refel.vol_rule.weights, det)))


def _linear_solve(m, layout, refel, params, conv, forcing, bvalues,
                  rhat_mode, geom, threads=1, timings=None,
                  assembler=None) -> FieldState:
    t0 = time.perf_counter()
    blocks = build_condensed_blocks(m, refel, params, conv, forcing,
                                    rhat_mode=rhat_mode, geom=geom,
                                    threads=threads, assembler=assembler)
    system = assemble_global(m, layout, blocks, bvalues, rhat_mode=rhat_mode)
    t1 = time.perf_counter()
    facet = solve_condensed(system)
    t2 = time.perf_counter()
    state = reconstruct_state(m, layout, refel, blocks, facet)
    post_normalize_pressure(state, m)
    t3 = time.perf_counter()
    if timings is not None:
        timings["assembly"] = timings.get("assembly", 0.0) + (t1 - t0)
        timings["solve"] = timings.get("solve", 0.0) + (t2 - t1)
        timings["reconstruct"] = timings.get("reconstruct", 0.0) + (t3 - t2)
    return state


def solve_linear(m: Mesh, layout: DofLayout, refel: ReferenceElement,
                 params: PhysParams, conv: ConvectiveFields, forcing,
                 bvalues: np.ndarray, rhat_mode: str = "strong-zero",
                 threads: int = 1, timings: dict | None = None) -> FieldState:
    """One linearized MHD solve with prescribed convective fields."""
    sup = conv.sup_w(m, refel)
    if params.alpha1 <= 0.5 * sup:
        raise StabilizationError(
            f"alpha1 = {params.alpha1} fails alpha1 > sup|w|/2 = {0.5 * sup:.3g}")
    geom = CellGeometryCache(m, refel)
    return _linear_solve(m, layout, refel, params, conv, forcing, bvalues,
                         rhat_mode, geom, threads=threads, timings=timings)


def solve_nonlinear(m: Mesh, layout: DofLayout, refel: ReferenceElement,
                    params: PhysParams, forcing, bvalues: np.ndarray,
                    cfg: PicardConfig | None = None,
                    rhat_mode: str = "strong-zero", threads: int = 1,
                    timings: dict | None = None) -> tuple[FieldState, PicardHistory]:
    """Picard iteration on the linearized solver, zero initial guess."""
    cfg = cfg or PicardConfig()
    geom = CellGeometryCache(m, refel)
    from .local_solver import LocalAssembler

    assembler = LocalAssembler(m, refel, params, forcing=forcing,
                               rhat_normal_bc=(rhat_mode == "normal-constraint"),
                               geom=geom)
    history = PicardHistory()
    conv: ConvectiveFields = ConvectiveFields()        # zero initial guess
    prev_u = prev_b = None
    conv_u = conv_b = None
    state = None
    for it in range(1, cfg.max_iter + 1):
        sup = conv.sup_w(m, refel)
        if params.alpha1 <= 0.5 * sup:
            logger.warning("Picard iteration %d: alpha1 = %g <= sup|w|/2 = %g; "
                           "proceeding anyway", it, params.alpha1, 0.5 * sup)
        state = _linear_solve(m, layout, refel, params, conv, forcing, bvalues,
                              rhat_mode, geom, threads=threads, timings=timings,
                              assembler=assembler)
        u = state.coeffs("u").copy()
        b = state.coeffs("b").copy()
        history.iterations = it
        if prev_u is not None:
            nu = field_l2_norm(m, refel, u)
            nb = field_l2_norm(m, refel, b)
            du = field_l2_norm(m, refel, u - prev_u)
            db = field_l2_norm(m, refel, b - prev_b)
            history.changes_u.append(du / nu if nu > 0 else (0.0 if du == 0 else np.inf))
            history.changes_b.append(db / nb if nb > 0 else (0.0 if db == 0 else np.inf))
            ok_u = du <= max(cfg.epsilon * nu, cfg.atol)
            ok_b = db <= max(cfg.epsilon * nb, cfg.atol)
            logger.info("Picard %d: rel change u %.3e b %.3e",
                        it, history.changes_u[-1], history.changes_b[-1])
            if ok_u and ok_b:
                history.converged = True
                break
        prev_u, prev_b = u, b
        if cfg.damping < 1.0 and conv_u is not None:
            conv_u = cfg.damping * u + (1.0 - cfg.damping) * conv_u
            conv_b = cfg.damping * b + (1.0 - cfg.damping) * conv_b
        else:
            conv_u, conv_b = u, b
        conv = PicardConvection(m, layout, refel, conv_u, conv_b,
                                state.facet.copy(), geom)
    if not history.converged:
        logger.warning("Picard did not converge in %d iterations "
                       "(last changes u %.3e b %.3e)", history.iterations,
                       history.changes_u[-1] if history.changes_u else np.nan,
                       history.changes_b[-1] if history.changes_b else np.nan)
    return state, history
