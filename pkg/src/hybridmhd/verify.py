"""Manufactured solutions, forcing construction, error norms, rate studies.

Forcing terms are built from hand-coded analytic derivatives of the exact
fields by evaluating the linearized momentum/induction residuals

    g = -(1/Re) lap(u) + grad(p) + (w . grad) u + kappa d x (curl b)
    f = (kappa/Rm) curl(curl b) + grad(r) - kappa curl(u x d)

with the case's prescribed (w, d); the derivative tables are validated
against finite differences by the test suite.  Pressure errors are
measured gauge-aligned (the mean of the pointwise difference is removed
with the run's own quadrature) because the discrete pressure is
normalized to zero mean while a stated exact pressure need not be.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .basis import build_reference_element
from .global_system import FieldState, divergence_inf
from .local_solver import CellGeometryCache, PhysParams, PrescribedFields
from .mesh import Mesh, gen_lshape, gen_strip, gen_structured_square
from .picard import PicardConfig, solve_linear, solve_nonlinear
from .spaces import DofLayout, Variant, build_dof_layout, boundary_dof_values, count_global_dofs


@dataclass
class ManufacturedCase:
    """Exact fields, their derivatives, and matching forcing for one benchmark."""

    name: str
    params: PhysParams
    p0: float
    mesh_for_level: callable
    u: callable                 # (n,2)
    grad_u: callable            # (n,2,2), [i,j] = d u_i / d x_j
    lap_u: callable             # (n,2)
    p: callable                 # (n,)
    grad_p: callable            # (n,2)
    b: callable                 # (n,2)
    curl_b: callable            # (n,)
    grad_curl_b: callable       # (n,2)
    r: callable                 # (n,)
    g: callable                 # (n,2)
    f: callable                 # (n,2)
    w: callable | None          # prescribed advecting velocity (None = 0)
    d: callable | None          # prescribed magnetic field (None = 0)
    d_grad: callable | None
    nonlinear: bool = False

    def conv(self) -> PrescribedFields:
        return PrescribedFields(w=self.w, d=self.d, d_grad=self.d_grad)


def _zeros_scalar(x):
    return np.zeros(x.shape[0])


def _zeros_vec(x):
    return np.zeros_like(x)


def make_linear_forcing(params: PhysParams, u, grad_u, lap_u, grad_p, grad_r,
                        curl_b, grad_curl_b, w, d, d_grad):
    """Residual-evaluated (g, f) for the linearized system with given (w, d)."""
    kap, re_, rm = params.kappa, params.re, params.rm

    def g_fn(x):
        gu = np.asarray(grad_u(x))
        wv = np.asarray(w(x)) if w else np.zeros((x.shape[0], 2))
        dv = np.asarray(d(x)) if d else np.zeros((x.shape[0], 2))
        cb = np.asarray(curl_b(x))
        adv = np.einsum("nij,nj->ni", gu, wv)
        coupling = kap * cb[:, None] * np.column_stack([dv[:, 1], -dv[:, 0]])
        return -np.asarray(lap_u(x)) / re_ + np.asarray(grad_p(x)) + adv + coupling

    def f_fn(x):
        gcb = np.asarray(grad_curl_b(x))
        curlcurl = np.column_stack([gcb[:, 1], -gcb[:, 0]])
        uv = np.asarray(u(x))
        gu = np.asarray(grad_u(x))
        dv = np.asarray(d(x)) if d else np.zeros((x.shape[0], 2))
        gd = np.asarray(d_grad(x)) if d_grad else np.zeros((x.shape[0], 2, 2))
        # s = u x d; curl s = (ds/dy, -ds/dx)
        s_x = (gu[:, 0, 0] * dv[:, 1] + uv[:, 0] * gd[:, 1, 0]
               - gu[:, 1, 0] * dv[:, 0] - uv[:, 1] * gd[:, 0, 0])
        s_y = (gu[:, 0, 1] * dv[:, 1] + uv[:, 0] * gd[:, 1, 1]
               - gu[:, 1, 1] * dv[:, 0] - uv[:, 1] * gd[:, 0, 1])
        curl_s = np.column_stack([s_y, -s_x])
        return (kap / rm) * curlcurl + np.asarray(grad_r(x)) - kap * curl_s

    return g_fn, f_fn


# ---------------------------------------------------------------------------
# smooth vortex on the unit square
# ---------------------------------------------------------------------------

def _poly_factors(t):
    """(P, P', P'', P''') for P = t^2 (t-1)^2."""
    P = t ** 4 - 2 * t ** 3 + t ** 2
    P1 = 4 * t ** 3 - 6 * t ** 2 + 2 * t
    P2 = 12 * t ** 2 - 12 * t + 2
    P3 = 24 * t - 12
    return P, P1, P2, P3


def _smooth_tables(x):
    xs, ys = x[:, 0], x[:, 1]
    P, P1, P2, P3 = _poly_factors(xs)
    ex = np.exp(xs)
    X = ex * P
    X1 = ex * (P + P1)
    X2 = ex * (P + 2 * P1 + P2)
    X3 = ex * (P + 3 * P1 + 3 * P2 + P3)
    Y, Y1, Y2, Y3 = _poly_factors(ys)
    return X, X1, X2, X3, Y, Y1, Y2, Y3


def case_smooth2d(params: PhysParams, p0: float = 1.0,
                  nonlinear: bool = False) -> ManufacturedCase:
    """Divergence-free vortex pair (b = u) with p = p0 sin(pi x) sin(pi y)."""

    def u(x):
        X, X1, _, _, Y, Y1, _, _ = _smooth_tables(x)
        return np.column_stack([X * Y1, -X1 * Y])

    def grad_u(x):
        X, X1, X2, _, Y, Y1, Y2, _ = _smooth_tables(x)
        out = np.empty((x.shape[0], 2, 2))
        out[:, 0, 0] = X1 * Y1
        out[:, 0, 1] = X * Y2
        out[:, 1, 0] = -X2 * Y
        out[:, 1, 1] = -X1 * Y1
        return out

    def lap_u(x):
        X, X1, X2, X3, Y, Y1, Y2, Y3 = _smooth_tables(x)
        return np.column_stack([X2 * Y1 + X * Y3, -X3 * Y - X1 * Y2])

    def p(x):
        return p0 * np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])

    def grad_p(x):
        sx, sy = np.sin(np.pi * x[:, 0]), np.sin(np.pi * x[:, 1])
        cx, cy = np.cos(np.pi * x[:, 0]), np.cos(np.pi * x[:, 1])
        return p0 * np.pi * np.column_stack([cx * sy, sx * cy])

    def curl_b(x):
        X, _, X2, _, Y, _, Y2, _ = _smooth_tables(x)
        return -X2 * Y - X * Y2

    def grad_curl_b(x):
        X, X1, X2, X3, Y, Y1, Y2, Y3 = _smooth_tables(x)
        return np.column_stack([-X3 * Y - X1 * Y2, -X2 * Y1 - X * Y3])

    g_fn, f_fn = make_linear_forcing(params, u, grad_u, lap_u, grad_p,
                                     _zeros_vec, curl_b, grad_curl_b,
                                     w=u, d=u, d_grad=grad_u)
    return ManufacturedCase(
        name="nonlinear-smooth2d" if nonlinear else "smooth2d",
        params=params, p0=p0,
        mesh_for_level=lambda lvl: gen_structured_square(2 ** (lvl - 1)),
        u=u, grad_u=grad_u, lap_u=lap_u, p=p, grad_p=grad_p,
        b=u, curl_b=curl_b, grad_curl_b=grad_curl_b, r=_zeros_scalar,
        g=g_fn, f=f_fn, w=u, d=u, d_grad=grad_u, nonlinear=nonlinear)


# ---------------------------------------------------------------------------
# singular corner solution on the L-shaped domain
# ---------------------------------------------------------------------------

SINGULAR_LAMBDA = 0.54448373678246
SINGULAR_OMEGA = 1.5 * np.pi


def _psi_derivs(phi: np.ndarray, nmax: int = 4) -> list[np.ndarray]:
    """[psi, psi', ..., psi^(nmax)] of the corner stream-function profile."""
    lam = SINGULAR_LAMBDA
    a1, a2 = 1.0 + lam, 1.0 - lam
    clw = math.cos(lam * SINGULAR_OMEGA)
    out = []
    for n in range(nmax + 1):
        shift = 0.5 * n * np.pi
        term = (clw * (a1 ** (n - 1) * np.sin(a1 * phi + shift)
                       - a2 ** (n - 1) * np.sin(a2 * phi + shift))
                - a1 ** n * np.cos(a1 * phi + shift)
                + a2 ** n * np.cos(a2 * phi + shift))
        out.append(term)
    return out


def _polar_coords(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rho = np.hypot(x[:, 0], x[:, 1])
    if np.any(rho == 0):
        raise ValueError("singular case cannot be evaluated at the corner rho = 0")
    phi = np.arctan2(x[:, 1], x[:, 0])
    phi = np.where(phi < 0, phi + 2 * np.pi, phi)   # branch [0, 3*pi/2]
    return rho, phi


def _polar_value(rho, phi, m, B):
    return rho ** m * B


def _polar_grad(rho, phi, m, B, B1):
    c, s = np.cos(phi), np.sin(phi)
    fx = rho ** (m - 1) * (m * c * B - s * B1)
    fy = rho ** (m - 1) * (m * s * B + c * B1)
    return np.column_stack([fx, fy])


def _polar_second(rho, phi, m, B, B1, B2):
    """(F_xx, F_xy, F_yy) for F = rho^m B(phi)."""
    c, s = np.cos(phi), np.sin(phi)
    C = m * c * B - s * B1
    C1 = -m * s * B + (m - 1) * c * B1 - s * B2
    D = m * s * B + c * B1
    D1 = m * c * B + (m - 1) * s * B1 + c * B2
    rm2 = rho ** (m - 2)
    fxx = rm2 * ((m - 1) * c * C - s * C1)
    fxy = rm2 * ((m - 1) * s * C + c * C1)
    fyy = rm2 * ((m - 1) * s * D + c * D1)
    return fxx, fxy, fyy


def _singular_A(phi, comp: int, order: int) -> np.ndarray:
    """Angular profile A_comp of u and its first two derivatives."""
    lam = SINGULAR_LAMBDA
    a1 = 1.0 + lam
    p0, p1, p2, p3 = _psi_derivs(phi, 3)[:4]
    c, s = np.cos(phi), np.sin(phi)
    if comp == 0:
        if order == 0:
            return a1 * s * p0 + c * p1
        if order == 1:
            return a1 * c * p0 + (a1 - 1) * s * p1 + c * p2
        return -a1 * s * p0 + (2 * a1 - 1) * c * p1 + (a1 - 2) * s * p2 + c * p3
    if order == 0:
        return -a1 * c * p0 + s * p1
    if order == 1:
        return a1 * s * p0 - (a1 - 1) * c * p1 + s * p2
    return a1 * c * p0 + (2 * a1 - 1) * s * p1 + (2 - a1) * c * p2 + s * p3


def case_singular2d(params: PhysParams) -> ManufacturedCase:
    """Corner singularity on the L-shape; w = 0 and d = (-1, 1) prescribed."""
    lam = SINGULAR_LAMBDA
    a1 = 1.0 + lam

    def u(x):
        rho, phi = _polar_coords(x)
        return np.column_stack([_polar_value(rho, phi, lam, _singular_A(phi, i, 0))
                                for i in range(2)])

    def grad_u(x):
        rho, phi = _polar_coords(x)
        out = np.empty((x.shape[0], 2, 2))
        for i in range(2):
            out[:, i, :] = _polar_grad(rho, phi, lam, _singular_A(phi, i, 0),
                                       _singular_A(phi, i, 1))
        return out

    def lap_u(x):
        rho, phi = _polar_coords(x)
        out = np.empty((x.shape[0], 2))
        for i in range(2):
            fxx, _, fyy = _polar_second(rho, phi, lam, _singular_A(phi, i, 0),
                                        _singular_A(phi, i, 1),
                                        _singular_A(phi, i, 2))
            out[:, i] = fxx + fyy
        return out

    def _Bp(phi, order):
        psis = _psi_derivs(phi, 4)
        num = a1 ** 2 * psis[1 + order] + psis[3 + order]
        return -num / (1.0 - lam)

    def p(x):
        rho, phi = _polar_coords(x)
        return _polar_value(rho, phi, lam - 1.0, _Bp(phi, 0))

    def grad_p(x):
        rho, phi = _polar_coords(x)
        return _polar_grad(rho, phi, lam - 1.0, _Bp(phi, 0), _Bp(phi, 1))

    def b(x):
        rho, phi = _polar_coords(x)
        B = np.sin(2.0 * phi / 3.0)
        B1 = (2.0 / 3.0) * np.cos(2.0 * phi / 3.0)
        return _polar_grad(rho, phi, 2.0 / 3.0, B, B1)

    d_const = lambda x: np.tile([-1.0, 1.0], (x.shape[0], 1))
    g_fn, f_fn = make_linear_forcing(params, u, grad_u, lap_u, grad_p,
                                     _zeros_vec, _zeros_scalar, _zeros_vec,
                                     w=None, d=d_const, d_grad=None)
    return ManufacturedCase(
        name="singular2d", params=params, p0=0.0,
        mesh_for_level=lambda lvl: gen_lshape(2 ** (lvl - 1)),
        u=u, grad_u=grad_u, lap_u=lap_u, p=p, grad_p=grad_p,
        b=b, curl_b=_zeros_scalar, grad_curl_b=_zeros_vec, r=_zeros_scalar,
        g=g_fn, f=f_fn, w=None, d=d_const,
        d_grad=lambda x: np.zeros((x.shape[0], 2, 2)), nonlinear=False)


# ---------------------------------------------------------------------------
# Hartmann channel flow
# ---------------------------------------------------------------------------

def hartmann_pressure_constant(params: PhysParams) -> float:
    """Zero-mean constant of the Hartmann pressure, from the y-integral of
    S(y)^2 with S = sinh(Ha y)/sinh(Ha) - y over (-1, 1)."""
    ha = params.ha
    sh = math.sinh(ha)
    I = ((math.sinh(2 * ha) / (2 * ha) - 1.0) / sh ** 2
         - (4.0 / sh) * (math.cosh(ha) / ha - sh / ha ** 2) + 2.0 / 3.0)
    return I / (4.0 * params.kappa)


def case_hartmann(params: PhysParams) -> ManufacturedCase:
    """Hartmann duct flow driven by g = (1, 0) with f = 0; solved nonlinearly."""
    ha = params.ha
    kap = params.kappa
    cu = params.re / (ha * math.tanh(ha))
    ch, sh = math.cosh(ha), math.sinh(ha)
    pconst = hartmann_pressure_constant(params)

    def _S(y, order=0):
        if order == 0:
            return np.sinh(ha * y) / sh - y
        if order == 1:
            return ha * np.cosh(ha * y) / sh - 1.0
        return ha ** 2 * np.sinh(ha * y) / sh

    def u(x):
        y = x[:, 1]
        return np.column_stack([cu * (1.0 - np.cosh(ha * y) / ch),
                                np.zeros_like(y)])

    def grad_u(x):
        y = x[:, 1]
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 1] = -cu * ha * np.sinh(ha * y) / ch
        return out

    def lap_u(x):
        y = x[:, 1]
        return np.column_stack([-cu * ha ** 2 * np.cosh(ha * y) / ch,
                                np.zeros_like(y)])

    def p(x):
        return -_S(x[:, 1]) ** 2 / (2 * kap) + pconst

    def grad_p(x):
        y = x[:, 1]
        return np.column_stack([np.zeros_like(y), -_S(y) * _S(y, 1) / kap])

    def b(x):
        y = x[:, 1]
        return np.column_stack([_S(y) / kap, np.ones_like(y)])

    def grad_b(x):
        y = x[:, 1]
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 1] = _S(y, 1) / kap
        return out

    def curl_b(x):
        return -_S(x[:, 1], 1) / kap

    def grad_curl_b(x):
        y = x[:, 1]
        return np.column_stack([np.zeros_like(y), -_S(y, 2) / kap])

    g_fn = lambda x: np.tile([1.0, 0.0], (x.shape[0], 1))
    f_fn = _zeros_vec
    return ManufacturedCase(
        name="hartmann", params=params, p0=0.0,
        mesh_for_level=gen_strip,
        u=u, grad_u=grad_u, lap_u=lap_u, p=p, grad_p=grad_p,
        b=b, curl_b=curl_b, grad_curl_b=grad_curl_b, r=_zeros_scalar,
        g=g_fn, f=f_fn, w=u, d=b, d_grad=grad_b, nonlinear=True)


CASE_BUILDERS = {
    "smooth2d": lambda params, p0: case_smooth2d(params, p0, nonlinear=False),
    "nonlinear-smooth2d": lambda params, p0: case_smooth2d(params, p0, nonlinear=True),
    "singular2d": lambda params, p0: case_singular2d(params),
    "hartmann": lambda params, p0: case_hartmann(params),
}


# ---------------------------------------------------------------------------
# error norms and convergence studies
# ---------------------------------------------------------------------------

@dataclass
class ErrorReport:
    level: int
    h: float
    cells: int
    dofs: dict
    err_L_scaled: float
    err_u: float
    err_p: float
    err_J_scaled: float
    err_b: float
    err_r: float
    divinf_u: float
    divinf_b: float
    scale_u: float = 0.0        # max |u_h| at the quadrature points
    scale_b: float = 0.0
    timings: dict = field(default_factory=dict)
    picard: dict | None = None


def error_norms(state: FieldState, case: ManufacturedCase, m: Mesh,
                layout: DofLayout) -> ErrorReport:
    """L2 field errors and max-norm divergence errors of a solved state.

    The L and J errors are measured in the scaled variables Re*L (exact:
    grad u) and (Rm/kappa)*J (exact: curl b); the pressure error removes
    the mean of the pointwise difference (gauge alignment, since the
    discrete pressure is normalized to zero mean).
    """
    refel = state.refel
    geom = CellGeometryCache(m, refel)
    params = case.params
    Vk, Vp = refel.vol_vals, refel.vol_vals_p
    Lc = state.coeffs("L")
    uc = state.coeffs("u")
    pc = state.coeffs("p")
    Jc = state.coeffs("J")
    bc = state.coeffs("b")
    rc = state.coeffs("r")
    accL = accu = accp1 = accp2 = accJ = accb = accr = area = 0.0
    for c in range(m.num_cells):
        x, W = geom.xq[c], geom.wq[c]
        uh = uc[c] @ Vk.T
        bh = bc[c] @ Vk.T
        Lh = Lc[c] @ Vk.T                      # (4, nq): rows (00,01,10,11)
        Jh = Jc[c] @ Vk.T
        ph = pc[c] @ Vp.T
        rh = rc[c] @ Vp.T
        gu = np.asarray(case.grad_u(x)).reshape(-1, 4).T   # rows (00,01,10,11)
        accL += float((W * ((params.re * Lh - gu) ** 2).sum(axis=0)).sum())
        accu += float((W * ((uh - np.asarray(case.u(x)).T) ** 2).sum(axis=0)).sum())
        accb += float((W * ((bh - np.asarray(case.b(x)).T) ** 2).sum(axis=0)).sum())
        accJ += float((W * ((params.rm / params.kappa) * Jh
                            - np.asarray(case.curl_b(x))) ** 2).sum())
        accr += float((W * (rh - np.asarray(case.r(x))) ** 2).sum())
        dp = ph - np.asarray(case.p(x))
        accp1 += float((W * dp).sum())
        accp2 += float((W * dp ** 2).sum())
        area += float(W.sum())
    errp = math.sqrt(max(accp2 - accp1 ** 2 / area, 0.0))
    div_u, scale_u = divergence_inf(state, "u", geom=geom)
    div_b, scale_b = divergence_inf(state, "b", geom=geom)
    return ErrorReport(
        level=0, h=m.mesh_size(), cells=m.num_cells,
        dofs=count_global_dofs(layout),
        err_L_scaled=math.sqrt(accL), err_u=math.sqrt(accu), err_p=errp,
        err_J_scaled=math.sqrt(accJ), err_b=math.sqrt(accb),
        err_r=math.sqrt(accr), divinf_u=div_u, divinf_b=div_b,
        scale_u=scale_u, scale_b=scale_b)


RATE_FIELDS = ("err_L_scaled", "err_u", "err_p", "err_J_scaled", "err_b", "err_r")


def run_case(case: ManufacturedCase, level: int, k: int, variant: Variant,
             rhat_mode: str = "strong-zero", nonlinear: bool | None = None,
             picard: PicardConfig | None = None, threads: int = 1):
    """Solve one level of a manufactured case; returns (state, report, history)."""
    m = case.mesh_for_level(level)
    refel = build_reference_element(k)
    layout = build_dof_layout(m, k, variant)
    bvalues, _ = boundary_dof_values(layout, m, refel, case.u, case.b)
    timings: dict = {}
    history = None
    if nonlinear is None:
        nonlinear = case.nonlinear
    if nonlinear:
        state, history = solve_nonlinear(m, layout, refel, case.params,
                                         (case.g, case.f), bvalues,
                                         cfg=picard, rhat_mode=rhat_mode,
                                         threads=threads, timings=timings)
    else:
        state = solve_linear(m, layout, refel, case.params, case.conv(),
                             (case.g, case.f), bvalues, rhat_mode=rhat_mode,
                             threads=threads, timings=timings)
    report = error_norms(state, case, m, layout)
    report.level = level
    report.timings = timings
    if history is not None:
        report.picard = {"iterations": history.iterations,
                         "converged": history.converged,
                         "changes_u": history.changes_u,
                         "changes_b": history.changes_b}
    return state, report, history


def convergence_rates(reports: list[ErrorReport]) -> dict:
    """Observed rates from the last two levels, normalized by the h ratio."""
    if len(reports) < 2:
        raise ValueError("need at least two levels for a rate")
    r0, r1 = reports[-2], reports[-1]
    ratio = math.log(r0.h / r1.h)
    rates = {}
    for name in RATE_FIELDS:
        e0, e1 = getattr(r0, name), getattr(r1, name)
        if e0 <= 0 or e1 <= 0:
            rates[name] = float("nan")
        else:
            rates[name] = math.log(e0 / e1) / ratio
    return rates


def convergence_study(case: ManufacturedCase, k: int, levels: list[int],
                      variant: Variant, rhat_mode: str = "strong-zero",
                      nonlinear: bool | None = None,
                      picard: PicardConfig | None = None,
                      threads: int = 1) -> tuple[list[ErrorReport], dict]:
    if len(levels) < 2:
        raise ValueError("need at least two levels")
    reports = []
    for lvl in levels:
        _, rep, _ = run_case(case, lvl, k, variant, rhat_mode=rhat_mode,
                             nonlinear=nonlinear, picard=picard, threads=threads)
        reports.append(rep)
    return reports, convergence_rates(reports)
