from dataclasses import replace

import numpy as np
import pytest

from conftest import YOUNG
from elasticity import (
    Loads,
    MaterialField,
    assemble,
    build_subdomain_problems,
    element_stresses,
    energy_norm,
    energy_seminorm,
    solve_dirichlet,
)
from errors import AdmissibilityError, SolverError
from estimator import (
    check_kinematic,
    check_static,
    ecr,
    error_map,
    gather_continuous,
    guaranteed_bound,
    overkill_reference,
    prolongate,
    reference_solution,
    separated_bound,
    solution_energy,
)
from fetidp import FetiDPSolver, fetidp_solve
from interface_ops import build_dual_classic
from mesh import build_interface_topology, generate_benchmark_mesh, partition_structured, refine_mesh
from recovery import recover_admissible


@pytest.fixture(scope="module")
def reference(soft12):
    mesh, materials, loads, _ = soft12
    return reference_solution(mesh, materials, loads, k=2)


@pytest.fixture(scope="module")
def dd(soft12):
    mesh, materials, loads, _ = soft12
    topo = build_interface_topology(mesh, partition_structured(mesh, "grid3x3"))
    problems = build_subdomain_problems(mesh, topo, materials, loads)
    states = fetidp_solve(FetiDPSolver(problems, topo, build_dual_classic(topo)), tol=1e-10)
    return topo, problems, states


def recover_state(soft12, dd, state, mode="weighted", multipoint="weighted"):
    mesh, materials, loads, _ = soft12
    topo, problems, _ = dd
    u_N = [p.to_global(u, mesh.n_dofs) for p, u in zip(problems, state.u_N)]
    u_D = [p.to_global(u, mesh.n_dofs) for p, u in zip(problems, state.u_D)]
    rec = recover_admissible(mesh, materials, loads, u_N, mode, topo, state.lambda_N, multipoint,
                             iteration=state.iteration)
    return rec.field, u_D


class TestSequentialBound:
    def test_affine_estimate_vanishes(self, affine):
        mesh, materials, loads, u = affine
        field = recover_admissible(mesh, materials, loads, u).field
        report = guaranteed_bound(mesh, materials, loads, field, u)
        assert report.estimate <= 1e-8 * report.energy
        assert report.relative == pytest.approx(report.estimate / report.energy)

    @pytest.mark.parametrize("mode", ["classical", "weighted"])
    def test_bounds_reference_error(self, soft12, reference, mode):
        mesh, materials, loads, u = soft12
        field = recover_admissible(mesh, materials, loads, u, mode).field
        report = guaranteed_bound(mesh, materials, loads, field, u).with_reference(reference.error(u))
        assert report.reference > 0
        assert report.effectivity >= 1.0
        assert report.contributions.sum() == pytest.approx(report.estimate ** 2)

    @pytest.mark.parametrize("factor", [1e-3, 7.5])
    def test_relative_estimate_is_load_scale_invariant(self, soft12, factor):
        mesh, materials, loads, u = soft12
        base = guaranteed_bound(mesh, materials, loads, recover_admissible(mesh, materials, loads, u).field, u)
        scaled = loads.scaled(factor)
        K, F = assemble(mesh, materials, scaled)
        v = solve_dirichlet(K, F, mesh.dirichlet_dofs)
        report = guaranteed_bound(mesh, materials, scaled, recover_admissible(mesh, materials, scaled, v).field, v)
        assert report.relative == pytest.approx(base.relative, rel=1e-8)
        assert report.estimate == pytest.approx(factor * base.estimate, rel=1e-8)

    def test_energy(self, soft12):
        mesh, materials, loads, u = soft12
        K, _ = assemble(mesh, materials, loads)
        assert solution_energy(mesh, materials, u) == pytest.approx(energy_norm(K, u), rel=1e-10)
        stress = element_stresses(mesh, materials, u)
        assert energy_seminorm(mesh, materials, stress) == pytest.approx(energy_norm(K, u), rel=1e-10)

    def test_ecr_restricted_to_subset(self, soft12):
        mesh, materials, loads, u = soft12
        field = recover_admissible(mesh, materials, loads, u).field
        _, full = ecr(mesh, materials, u, field)
        part, local = ecr(mesh, materials, u, field, elements=np.arange(20))
        np.testing.assert_allclose(local, full[:20])
        assert part ** 2 == pytest.approx(full[:20].sum())


class TestAdmissibilityChecks:
    def test_dirichlet_violation(self, soft12):
        mesh, _, _, u = soft12
        bad = u.copy()
        bad[mesh.dirichlet_dofs[0]] = 1e-3
        with pytest.raises(AdmissibilityError, match="Dirichlet"):
            check_kinematic(mesh, bad)

    def test_prescribed_dirichlet_values(self, soft12):
        mesh, materials, loads, _ = soft12
        K, F = assemble(mesh, materials, loads)
        lift = np.linspace(0.0, 1e-3, len(mesh.dirichlet_dofs))
        u = solve_dirichlet(K, F, mesh.dirichlet_dofs, lift)
        check_kinematic(mesh, u, dirichlet_values=lift)
        with pytest.raises(AdmissibilityError, match="Dirichlet"):
            check_kinematic(mesh, u)

    def test_interface_jump(self, soft12, dd):
        mesh, _, _, _ = soft12
        topo, problems, states = dd
        u_N = [p.to_global(u, mesh.n_dofs) for p, u in zip(problems, states[0].u_N)]
        with pytest.raises(AdmissibilityError, match="jumps"):
            check_kinematic(mesh, u_N, topo)

    def test_perturbed_stress(self, soft12):
        mesh, materials, loads, u = soft12
        field = recover_admissible(mesh, materials, loads, u).field
        with pytest.raises(AdmissibilityError, match="equilibrium"):
            check_static(mesh, replace(field, coefficients=1.1 * field.coefficients), loads)


class TestSubstructuredBound:
    def test_bounds_reference_error(self, soft12, dd, reference):
        mesh, materials, loads, _ = soft12
        topo, _, states = dd
        field, u_D = recover_state(soft12, dd, states[-1])
        report = guaranteed_bound(mesh, materials, loads, field, u_D, topo)
        error = reference.error(gather_continuous(u_D, topo, mesh.n_dofs))
        assert report.estimate >= error
        assert report.subdomain.shape == (topo.n_subdomains,)
        assert report.subdomain.sum() == pytest.approx(report.estimate ** 2)

    def test_separated_bound_at_convergence(self, soft12, dd, reference):
        mesh, materials, _, _ = soft12
        topo, problems, states = dd
        field, u_D = recover_state(soft12, dd, states[-1])
        sep = separated_bound(mesh, materials, states[-1], field, problems, topo)
        assert sep.algebraic <= 1e-6 * sep.discretization
        assert sep.total >= reference.error(gather_continuous(u_D, topo, mesh.n_dofs))

    def test_early_iterate_still_bounded(self, soft12, dd, reference):
        mesh, materials, loads, _ = soft12
        topo, problems, states = dd
        state = states[2]
        field, u_D = recover_state(soft12, dd, state)
        report = guaranteed_bound(mesh, materials, loads, field, u_D, topo)
        sep = separated_bound(mesh, materials, state, field, problems, topo)
        error = reference.error(gather_continuous(u_D, topo, mesh.n_dofs))
        assert report.estimate >= error
        assert sep.algebraic > 0

    def test_provenance_mismatch(self, soft12, dd):
        mesh, materials, _, _ = soft12
        topo, problems, states = dd
        field, _ = recover_state(soft12, dd, states[-1])
        with pytest.raises(AdmissibilityError, match="iteration"):
            separated_bound(mesh, materials, states[1], field, problems, topo)


class TestReference:
    def test_prolongation_is_exact_on_linear_fields(self, bench12):
        fine = refine_mesh(bench12, 3)
        def linear(nodes):
            x, y = nodes[:, 0], nodes[:, 1]
            return np.column_stack((x + 2 * y, 3 * x - y)).ravel()
        np.testing.assert_allclose(prolongate(bench12, fine, linear(bench12.nodes)), linear(fine.nodes), atol=1e-12)

    def test_prolongation_keeps_coarse_nodes(self):
        coarse = generate_benchmark_mesh(4)
        fine = refine_mesh(coarse, 2)
        u = np.random.default_rng(0).standard_normal(coarse.n_dofs)
        fine_u = prolongate(coarse, fine, u)
        for v, (x, y) in enumerate(coarse.nodes):
            w = int(round(2 * y / coarse.h)) * (fine.grid_n + 1) + int(round(2 * x / coarse.h))
            np.testing.assert_allclose(fine_u[2 * w:2 * w + 2], u[2 * v:2 * v + 2], atol=1e-12)

    def test_overkill_error(self, soft12, reference):
        mesh, materials, loads, u = soft12
        assert overkill_reference(mesh, materials, loads, u, k=2) == pytest.approx(reference.error(u))
        assert reference.n_dofs == 2 * 25 ** 2

    def test_dof_budget(self, soft12):
        mesh, materials, loads, _ = soft12
        with pytest.raises(SolverError, match="budget"):
            reference_solution(mesh, materials, loads, k=4, dof_budget=1000)

    def test_refinement_factor(self, soft12):
        mesh, materials, loads, _ = soft12
        with pytest.raises(ValueError):
            reference_solution(mesh, materials, loads, k=1)


def test_error_map(tmp_path, soft12):
    mesh, materials, loads, u = soft12
    field = recover_admissible(mesh, materials, loads, u).field
    report = guaranteed_bound(mesh, materials, loads, field, u)
    values = error_map(mesh, report, tmp_path / "err.vtk", np.zeros(mesh.n_elements, dtype=np.int64))
    assert values.shape == (mesh.n_elements,)
    assert np.all(values >= 0)
    text = (tmp_path / "err.vtk").read_text()
    assert "e_cr2" in text
    assert "subdomain_id" in text


def test_error_map_is_uniform_for_a_hanging_column():
    # ν = 0 and gravity only: the P1 solution is nodally exact and x-independent
    mesh = generate_benchmark_mesh(8)
    materials = MaterialField.two_phase(YOUNG, 1.0, poisson=0.0)
    loads = Loads.benchmark(traction=0.0, shear=0.0, body=(0.0, -1.0))
    K, F = assemble(mesh, materials, loads)
    u = solve_dirichlet(K, F, mesh.dirichlet_dofs)
    field = recover_admissible(mesh, materials, loads, u).field
    values = error_map(mesh, guaranteed_bound(mesh, materials, loads, field, u))
    corners = mesh.nodes[mesh.elements]
    interior = np.all((corners > 1e-12) & (corners < 1.0 - 1e-12), axis=(1, 2))
    for kind in (0, 1):
        inner = values[interior & (np.arange(mesh.n_elements) % 2 == kind)]
        assert len(inner) > 20
        assert inner.min() > 0
        assert inner.max() == pytest.approx(inner.min(), rel=1e-6)
