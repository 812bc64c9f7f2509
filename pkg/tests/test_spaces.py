"""Trace-space layouts, dof counting, and boundary projection."""

import numpy as np
import pytest

from hybridmhd.basis import build_reference_element
from hybridmhd.mesh import gen_structured_square
from hybridmhd.spaces import (
    Variant,
    boundary_dof_values,
    build_dof_layout,
    count_global_dofs,
)

rng = np.random.default_rng(11)

MESHES = [gen_structured_square(2 ** i) for i in range(5)]

# frozen reference totals for the square-mesh family (2..512 cells)
HDG_TOTALS = {1: [60, 192, 672, 2496, 9600],
              2: [90, 288, 1008, 3744, 14400],
              3: [120, 384, 1344, 4992, 19200],
              4: [150, 480, 1680, 6240, 24000]}
EHDG_TOTALS = {1: [36, 100, 324, 1156, 4356],
               2: [66, 196, 660, 2404, 9156],
               3: [96, 292, 996, 3652, 13956],
               4: [126, 388, 1332, 4900, 18756]}


class TestCounts:
    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_reference_totals(self, k):
        hdg = [count_global_dofs(build_dof_layout(m, k, Variant.HDG))["total"]
               for m in MESHES]
        ehdg = [count_global_dofs(build_dof_layout(m, k, Variant.EHDG))["total"]
                for m in MESHES]
        assert hdg == HDG_TOTALS[k]
        assert ehdg == EHDG_TOTALS[k]

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    @pytest.mark.parametrize("mesh", MESHES)
    def test_closed_forms(self, mesh, k):
        V, E = mesh.num_vertices, mesh.num_facets
        hdg = count_global_dofs(build_dof_layout(mesh, k, Variant.HDG))["total"]
        ehdg = count_global_dofs(build_dof_layout(mesh, k, Variant.EHDG))["total"]
        assert hdg == 6 * (k + 1) * E
        assert ehdg == 4 * (V + (k - 1) * E) + 2 * (k + 1) * E

    def test_two_cell_per_field(self):
        lay = build_dof_layout(MESHES[0], 1, Variant.HDG)
        c = count_global_dofs(lay)
        assert (c["uhat"], c["phat"], c["bhat"], c["rhat"]) == (20, 10, 20, 10)
        lay = build_dof_layout(MESHES[0], 1, Variant.EHDG)
        c = count_global_dofs(lay)
        assert (c["uhat"], c["phat"], c["bhat"], c["rhat"]) == (8, 10, 8, 10)

    def test_reduction_percentage(self):
        hdg = HDG_TOTALS[1][-1]
        ehdg = EHDG_TOTALS[1][-1]
        assert f"{(ehdg - hdg) / hdg * 100.0:.2f}" == "-54.62"

    def test_scheme_named_18756(self):
        m = MESHES[-1]
        assert count_global_dofs(build_dof_layout(m, 4, Variant.EHDG))["total"] \
            == 2 * (289 + 3 * 800) * 2 + 2 * 800 * 5 == 18756


class TestLayout:
    def test_gather_matches_facet_dofs(self):
        m = MESHES[1]
        lay = build_dof_layout(m, 2, Variant.EHDG)
        k1 = lay.k + 1
        for c in (0, 3, 5):
            gathered = lay.cell_gather[c]
            pos = 0
            for name, ncomp in (("uhat", 2), ("phat", 1), ("bhat", 2), ("rhat", 1)):
                for comp in range(ncomp):
                    for f in range(3):
                        expect = lay.facet_dofs(name, m.cell_facets[c, f], comp)
                        assert np.array_equal(gathered[pos:pos + k1], expect)
                        pos += k1

    def test_ehdg_vertex_identification(self):
        # facets sharing a vertex share its continuous dof (endpoint node)
        m = MESHES[2]
        lay = build_dof_layout(m, 3, Variant.EHDG)
        for v in range(m.num_vertices):
            incident = [(e, 0 if m.facets[e, 0] == v else -1)
                        for e in range(m.num_facets) if v in m.facets[e]]
            dofs = {int(lay.vec_table[e][pos]) for e, pos in incident}
            assert len(dofs) == 1

    def test_hdg_facets_independent(self):
        lay = build_dof_layout(MESHES[1], 2, Variant.HDG)
        seen = set()
        for e in range(MESHES[1].num_facets):
            dofs = set(map(int, lay.vec_table[e]))
            assert not dofs & seen
            seen |= dofs

    def test_pinned_dof_is_boundary_phat(self):
        m = MESHES[1]
        lay = build_dof_layout(m, 1, Variant.EHDG)
        pin = lay.pinned_pressure_dof()
        off, size = lay.offsets["phat"]
        assert off <= pin < off + size
        first_bdy = int(np.nonzero(m.boundary_flags)[0][0])
        assert pin == off + lay.disc_table[first_bdy, 0]


class TestEhdgContinuity:
    def test_assembled_trace_function_continuous_at_vertices(self):
        m = MESHES[2]
        k = 3
        lay = build_dof_layout(m, k, Variant.EHDG)
        refel = build_reference_element(k)
        coeffs = rng.standard_normal(lay.n_vec_scalar)
        ends = refel.facet_basis.values(np.array([0.0, 1.0]))
        value_at_vertex = {}
        for e in range(m.num_facets):
            vals = ends @ coeffs[lay.vec_table[e]]
            for pos, v in enumerate(m.facets[e]):
                v = int(v)
                if v in value_at_vertex:
                    assert vals[pos] == pytest.approx(value_at_vertex[v], abs=1e-13)
                else:
                    value_at_vertex[v] = vals[pos]


class TestBoundaryProjection:
    @pytest.mark.parametrize("variant", [Variant.HDG, Variant.EHDG])
    def test_zero_data(self, variant):
        m = MESHES[1]
        refel = build_reference_element(2)
        lay = build_dof_layout(m, 2, variant)
        zero = lambda x: np.zeros((len(x), 2))
        vals, dofs = boundary_dof_values(lay, m, refel, zero, zero)
        assert np.abs(vals).max() == 0.0
        assert len(dofs) > 0

    @pytest.mark.parametrize("variant", [Variant.HDG, Variant.EHDG])
    def test_constant_data(self, variant):
        m = MESHES[1]
        refel = build_reference_element(2)
        lay = build_dof_layout(m, 2, variant)
        uD = lambda x: np.tile([1.0, 0.0], (len(x), 1))
        zero = lambda x: np.zeros((len(x), 2))
        vals, _ = boundary_dof_values(lay, m, refel, uD, zero)
        off, _ = lay.offsets["uhat"]
        bscal = lay.boundary_scalar_dofs(variant is Variant.EHDG)
        assert np.abs(vals[off + bscal] - 1.0).max() < 1e-12
        assert np.abs(vals[off + lay.n_vec_scalar + bscal]).max() < 1e-12

    @pytest.mark.parametrize("variant", [Variant.HDG, Variant.EHDG])
    def test_degree_k_polynomial_reproduced(self, variant):
        m = MESHES[1]
        k = 2
        refel = build_reference_element(k)
        lay = build_dof_layout(m, k, variant)
        uD = lambda x: np.column_stack([x[:, 0] ** 2 - x[:, 1], x[:, 0] * x[:, 1] + 2.0])
        zero = lambda x: np.zeros((len(x), 2))
        vals, _ = boundary_dof_values(lay, m, refel, uD, zero)
        tq = refel.facet_rule.points
        fb = refel.facet_vals
        for e in np.nonzero(m.boundary_flags)[0]:
            pts = m.facet_points(e, tq)
            exact = uD(pts)
            for comp in range(2):
                got = fb @ vals[lay.facet_dofs("uhat", e, comp)]
                assert np.abs(got - exact[:, comp]).max() < 1e-12

    def test_projection_idempotent(self):
        m = MESHES[1]
        k = 2
        refel = build_reference_element(k)
        lay = build_dof_layout(m, k, Variant.EHDG)
        uD = lambda x: np.column_stack([np.sin(3 * x[:, 0]) + x[:, 1],
                                        np.cos(x[:, 0] * x[:, 1])])
        zero = lambda x: np.zeros((len(x), 2))
        vals1, _ = boundary_dof_values(lay, m, refel, uD, zero)

        def projected_trace(x):
            # evaluate the first projection along the boundary; every
            # boundary point lies on some boundary facet
            out = np.zeros((len(x), 2))
            done = np.zeros(len(x), dtype=bool)
            for e in np.nonzero(m.boundary_flags)[0]:
                lo, hi = m.vertices[m.facets[e]]
                d = hi - lo
                ll = float(d @ d)
                t = ((x - lo) @ d) / ll
                offset = x - lo
                perp = d[0] * offset[:, 1] - d[1] * offset[:, 0]
                on = (~done & (t > -1e-12) & (t < 1 + 1e-12)
                      & (np.abs(perp) < 1e-12))
                if on.any():
                    fbv = refel.facet_basis.values(np.clip(t[on], 0, 1))
                    for comp in range(2):
                        out[on, comp] = fbv @ vals1[lay.facet_dofs("uhat", e, comp)]
                    done |= on
            assert done.all()
            return out

        vals2, _ = boundary_dof_values(lay, m, refel, projected_trace, zero)
        assert np.abs(vals1 - vals2).max() < 1e-13

    def test_rhat_zero_on_boundary(self):
        m = MESHES[0]
        refel = build_reference_element(1)
        lay = build_dof_layout(m, 1, Variant.HDG)
        uD = lambda x: np.ones((len(x), 2))
        vals, dofs = boundary_dof_values(lay, m, refel, uD, uD)
        assert np.abs(vals[lay.field_slice("rhat")]).max() == 0.0
        rhat_bdy = lay.boundary_dofs("rhat")
        assert np.isin(rhat_bdy, dofs).all()
