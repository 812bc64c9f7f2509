"""Mesh generators, skeleton consistency, refinement, and text I/O."""

import numpy as np
import pytest

from hybridmhd.mesh import (
    GeometryError,
    affine_map,
    gen_lshape,
    gen_strip,
    gen_structured_square,
    read_mesh,
    uniform_refine,
    write_mesh,
)

rng = np.random.default_rng(20240817)


def min_angle(m):
    v = m.vertices[m.cells]
    angles = []
    for i in range(3):
        a = v[:, (i + 1) % 3] - v[:, i]
        b = v[:, (i + 2) % 3] - v[:, i]
        cosang = (a * b).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        angles.append(np.arccos(np.clip(cosang, -1, 1)))
    return np.min(angles)


class TestStructuredSquare:
    def test_unit_square_n1(self):
        m = gen_structured_square(1)
        assert m.num_cells == 2
        assert m.num_facets == 5
        assert m.num_vertices == 4

    def test_n16_counts(self):
        m = gen_structured_square(16)
        assert m.num_cells == 512
        # oracle: interior facets shared by 2 cells, E = (3*C + boundary)/2
        assert m.num_facets == (3 * 512 + 4 * 16) // 2 == 800
        assert m.num_vertices == 289

    def test_area_partition(self):
        m = gen_structured_square(1)
        assert m.cell_areas().sum() == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("n", [1, 3, 5])
    def test_counts_formula(self, n):
        m = gen_structured_square(n)
        assert m.num_cells == 2 * n * n
        assert m.num_vertices == (n + 1) ** 2

    def test_bbox_and_diagonal(self):
        m = gen_structured_square(2, bbox=(-1.0, 0.5, 3.0, 2.5), diagonal="upper-left-to-lower-right")
        assert m.cell_areas().sum() == pytest.approx(8.0, abs=1e-13)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            gen_structured_square(0)
        with pytest.raises(ValueError):
            gen_structured_square(2, bbox=(0, 0, 0, 1))
        with pytest.raises(ValueError):
            gen_structured_square(2, diagonal="sideways")


class TestLshape:
    def test_cells_and_area(self):
        m = gen_lshape(1)
        assert m.num_cells == 6
        assert m.cell_areas().sum() == pytest.approx(3.0, abs=1e-13)

    def test_n2(self):
        assert gen_lshape(2).num_cells == 24

    @pytest.mark.parametrize("n", [1, 2, 4])
    def test_reentrant_corner_is_vertex(self, n):
        m = gen_lshape(n)
        d = np.linalg.norm(m.vertices, axis=1)
        assert d.min() < 1e-14

    def test_no_vertex_inside_removed_quadrant(self):
        m = gen_lshape(3)
        x, y = m.vertices[:, 0], m.vertices[:, 1]
        assert not np.any((x > 1e-12) & (y < -1e-12))


class TestStrip:
    def test_counts(self):
        assert gen_strip(1).num_cells == 160
        assert gen_strip(2).num_cells == 640

    def test_area(self):
        assert gen_strip(1).cell_areas().sum() == pytest.approx(0.05, abs=1e-14)

    def test_square_aspect(self):
        # dx = 0.025/l equals dy = 2/(80 l)
        m = gen_strip(2)
        v = m.vertices[m.cells[0]]
        lengths = np.sort([np.linalg.norm(v[i] - v[j]) for i, j in ((0, 1), (1, 2), (2, 0))])
        assert lengths[0] == pytest.approx(lengths[1], rel=1e-12)


class TestRefine:
    def test_quadruples_cells(self):
        m = gen_structured_square(1)
        r = uniform_refine(m)
        assert r.num_cells == 8
        assert r.cell_areas().sum() == pytest.approx(1.0, abs=1e-14)

    def test_lshape_corner_kept(self):
        r = uniform_refine(uniform_refine(gen_lshape(1)))
        assert np.linalg.norm(r.vertices, axis=1).min() < 1e-14

    def test_boundary_flag_count(self):
        m = gen_structured_square(2)
        r = uniform_refine(m)
        assert r.boundary_flags.sum() == 2 * m.boundary_flags.sum()

    def test_min_angle_preserved(self):
        m = gen_lshape(1)
        a0 = min_angle(m)
        for _ in range(3):
            m = uniform_refine(m)
        assert min_angle(m) == pytest.approx(a0, abs=1e-12)


class TestSkeleton:
    @pytest.mark.parametrize("mesh", [gen_structured_square(4), gen_lshape(2), gen_strip(1)])
    def test_adjacency_counts(self, mesh):
        for e in range(mesh.num_facets):
            n_adj = int((mesh.facet_cells[e] >= 0).sum())
            assert n_adj == (1 if mesh.boundary_flags[e] else 2)

    @pytest.mark.parametrize("mesh", [gen_structured_square(4), gen_lshape(2)])
    def test_euler_relation(self, mesh):
        assert mesh.num_vertices - mesh.num_facets + mesh.num_cells == 1

    def test_normals_negate_across_interior_facets(self):
        m = gen_lshape(2)
        for e in range(m.num_facets):
            if m.boundary_flags[e]:
                continue
            normals = []
            for c in m.facet_cells[e]:
                f = int(np.where(m.cell_facets[c] == e)[0][0])
                normals.append(m.outward_normal(c, f))
            assert np.abs(normals[0] + normals[1]).max() < 1e-14

    def test_cell_facet_round_trip(self):
        m = gen_strip(1)
        for c in range(m.num_cells):
            for e in m.cell_facets[c]:
                assert c in m.facet_cells[e]

    def test_canonical_normal_is_first_cell_outward(self):
        m = gen_structured_square(3)
        for e in range(m.num_facets):
            c = m.facet_cells[e, 0]
            f = int(np.where(m.cell_facets[c] == e)[0][0])
            assert np.allclose(m.canonical_normal(e), m.outward_normal(c, f))


class TestAffineMap:
    def test_identity_on_reference(self):
        m = gen_structured_square(1)
        # cell 0 of the unit square is (0,0),(1,0),(1,1): jacobian maps ref onto it
        am = affine_map(m, 0)
        assert am.det == pytest.approx(2 * m.cell_areas()[0])

    def test_scaled_reference_triangle(self):
        from hybridmhd.mesh import _build_skeleton

        msh = _build_skeleton(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]),
                              np.array([[0, 1, 2]]))
        am = affine_map(msh, 0)
        assert np.allclose(am.jacobian, 2 * np.eye(2))
        assert am.det == pytest.approx(4.0)

    def test_round_trip_random_points(self):
        m = gen_lshape(1)
        pts = rng.random((30, 2)) * 0.3 + 0.1   # interior of reference triangle
        for c in range(m.num_cells):
            am = affine_map(m, c)
            back = am.to_reference(am.to_physical(pts))
            assert np.abs(back - pts).max() < 1e-13
            assert np.abs(am.inverse_jacobian @ am.jacobian - np.eye(2)).max() < 1e-13

    def test_degenerate_cell_raises(self):
        from hybridmhd.mesh import _build_skeleton

        with pytest.raises(GeometryError):
            _build_skeleton(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]),
                            np.array([[0, 1, 2]]))


class TestMeshIO:
    def test_round_trip(self, tmp_path):
        m = gen_lshape(2)
        path = tmp_path / "mesh.txt"
        write_mesh(m, str(path))
        m2 = read_mesh(str(path))
        assert np.array_equal(m.cells, m2.cells)
        assert np.abs(m.vertices - m2.vertices).max() == 0.0
        assert np.array_equal(m.boundary_flags, m2.boundary_flags)

    def test_format_header(self, tmp_path):
        path = tmp_path / "mesh.txt"
        write_mesh(gen_structured_square(1), str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == "dim 2"
        assert lines[1] == "vertices 4"
        assert lines[6] == "cells 2"

    def test_rejects_bad_header(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("dim 3\nvertices 0\ncells 0\n")
        with pytest.raises(ValueError):
            read_mesh(str(path))

    def test_domain_areas(self):
        assert gen_structured_square(5).cell_areas().sum() == pytest.approx(1.0, abs=1e-13)
        assert gen_lshape(3).cell_areas().sum() == pytest.approx(3.0, abs=1e-13)
        assert gen_strip(2).cell_areas().sum() == pytest.approx(0.05, abs=1e-13)

    def test_mesh_immutable(self):
        m = gen_structured_square(1)
        with pytest.raises(ValueError):
            m.vertices[0, 0] = 99.0
