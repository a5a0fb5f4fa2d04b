from math import factorial

import numpy as np
import pytest

from conftest import TRACTION, YOUNG
from elasticity import (
    Loads,
    MaterialField,
    assemble,
    assemble_loads,
    build_subdomain_problems,
    element_stiffness,
    element_stresses,
    energy_contributions,
    energy_norm,
    hooke,
    segment_quadrature,
    triangle_quadrature,
)
from mesh import build_interface_topology, partition_structured


class TestHooke:
    def test_plane_stress_without_poisson(self):
        np.testing.assert_allclose(hooke(10.0, 0.0), 10.0 * np.diag([1.0, 1.0, 0.5]))

    @pytest.mark.parametrize("plane", ["stress", "strain"])
    def test_symmetric_positive(self, plane):
        H = hooke(2e5, 0.3, plane)
        np.testing.assert_allclose(H, H.T)
        assert np.all(np.linalg.eigvalsh(H) > 0)

    @pytest.mark.parametrize("young, poisson, plane", [(1.0, 0.5, "stress"), (0.0, 0.3, "stress"), (1.0, 0.3, "shell")])
    def test_rejects(self, young, poisson, plane):
        with pytest.raises(ValueError):
            hooke(young, poisson, plane)

    def test_two_phase(self):
        m = MaterialField.two_phase(100.0, 1e-3)
        assert m.properties[2][0] == pytest.approx(0.1)


class TestQuadrature:
    @pytest.mark.parametrize("degree", [1, 2, 4, 5, 8])
    def test_triangle_exact(self, degree):
        bary, w = triangle_quadrature(degree)
        assert w.sum() == pytest.approx(1.0)
        x, y = bary[:, 1], bary[:, 2]
        for a in range(degree + 1):
            for b in range(degree + 1 - a):
                exact = factorial(a) * factorial(b) / factorial(a + b + 2)
                assert 0.5 * (w @ (x ** a * y ** b)) == pytest.approx(exact, rel=1e-12, abs=1e-15)

    def test_segment_exact(self):
        s, w = segment_quadrature(4)
        for k in range(8):
            assert w @ s ** k == pytest.approx(1.0 / (k + 1), rel=1e-12)


class TestAssembly:
    def test_element_rigid_modes(self):
        xy = np.array([[0.0, 0.0], [1.0, 0.2], [0.3, 0.9]])
        Ke = element_stiffness(xy, hooke(1.0, 0.3))
        np.testing.assert_allclose(Ke, Ke.T, atol=1e-14)
        rotation = np.column_stack((-xy[:, 1], xy[:, 0])).ravel()
        for mode in (np.tile([1.0, 0.0], 3), np.tile([0.0, 1.0], 3), rotation):
            np.testing.assert_allclose(Ke @ mode, 0.0, atol=1e-13)

    def test_clockwise_element_rejected(self):
        with pytest.raises(ValueError):
            element_stiffness(np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]]), hooke(1.0, 0.3))

    def test_global_stiffness(self, bench12):
        K, _ = assemble(bench12, MaterialField.two_phase(1.0, 1e-2), Loads.benchmark())
        assert abs(K - K.T).max() < 1e-12
        np.testing.assert_allclose(K @ np.tile([1.0, 0.0], bench12.n_nodes), 0.0, atol=1e-12)

    def test_load_resultants(self, bench12):
        F = assemble_loads(bench12, Loads.benchmark(traction=3.0, shear=-1.0, body=(0.5, 2.0)))
        assert F[0::2].sum() == pytest.approx(-1.0 + 0.5)
        assert F[1::2].sum() == pytest.approx(3.0 + 2.0)


class TestSolve:
    def test_affine_solution_is_exact(self, affine):
        mesh, _, _, u = affine
        np.testing.assert_allclose(u[0::2], 0.0, atol=1e-12)
        np.testing.assert_allclose(u[1::2], TRACTION * mesh.nodes[:, 1] / YOUNG, rtol=1e-10, atol=1e-14)

    def test_affine_stress(self, affine):
        mesh, materials, _, u = affine
        stress = element_stresses(mesh, materials, u)
        np.testing.assert_allclose(stress, np.tile([0.0, TRACTION, 0.0], (mesh.n_elements, 1)), atol=1e-10)

    def test_energy(self, soft12):
        mesh, materials, loads, u = soft12
        K, F = assemble(mesh, materials, loads)
        assert energy_norm(K, u) ** 2 == pytest.approx(u @ F, rel=1e-10)
        contributions = energy_contributions(mesh, materials, element_stresses(mesh, materials, u))
        assert contributions.sum() == pytest.approx(u @ (K @ u), rel=1e-10)


class TestSubdomainProblems:
    @pytest.fixture(scope="class")
    def setup(self, bench12):
        materials = MaterialField.two_phase(2e5, 1e-3)
        loads = Loads.benchmark(body=(0.0, -1.0))
        topo = build_interface_topology(bench12, partition_structured(bench12, "grid3x3"))
        return bench12, materials, loads, topo, build_subdomain_problems(bench12, topo, materials, loads)

    def test_loads_sum_to_global(self, setup):
        mesh, materials, loads, _, problems = setup
        _, F = assemble(mesh, materials, loads)
        total = np.zeros(mesh.n_dofs)
        for p in problems:
            np.add.at(total, p.dofs, p.f)
        free = np.setdiff1d(np.arange(mesh.n_dofs), mesh.dirichlet_dofs)
        np.testing.assert_allclose(total[free], F[free], atol=1e-12)

    def test_index_splits(self, setup):
        _, _, _, topo, problems = setup
        for p in problems:
            assert len(p.gamma) == 2 * len(topo.gamma[p.index])
            np.testing.assert_array_equal(np.sort(np.concatenate((p.corner, p.other))), np.sort(p.gamma))
            np.testing.assert_array_equal(np.sort(np.concatenate((p.internal, p.other))), p.remainder)

    def test_stiffness_sums_to_global(self, setup):
        mesh, materials, loads, _, problems = setup
        K, _ = assemble(mesh, materials, loads)
        v = np.random.default_rng(1).standard_normal(mesh.n_dofs)
        v[mesh.dirichlet_dofs] = 0.0
        total = np.zeros(mesh.n_dofs)
        for p in problems:
            np.add.at(total, p.dofs, p.K @ v[p.dofs])
        free = np.setdiff1d(np.arange(mesh.n_dofs), mesh.dirichlet_dofs)
        np.testing.assert_allclose(total[free], (K @ v)[free], rtol=1e-10, atol=1e-8)
