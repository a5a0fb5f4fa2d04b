import numpy as np
import pytest

from elasticity import build_subdomain_problems
from estimator import check_kinematic, gather_continuous
from fetidp import FetiDPSolver, algebraic_error_term, energy_gap, fetidp_solve
from interface_ops import build_dual_classic
from mesh import build_interface_topology, partition_structured


def make_solver(mesh, materials, loads, scheme, scaling="stiffness", threads=1):
    topo = build_interface_topology(mesh, partition_structured(mesh, scheme))
    problems = build_subdomain_problems(mesh, topo, materials, loads)
    return FetiDPSolver(problems, topo, build_dual_classic(topo), scaling, threads)


@pytest.fixture(scope="module")
def soft_grid(soft12):
    mesh, materials, loads, u = soft12
    solver = make_solver(mesh, materials, loads, "grid3x3")
    return mesh, u, solver, fetidp_solve(solver, tol=1e-10)


def global_fields(mesh, solver, vectors):
    return [p.to_global(v, mesh.n_dofs) for p, v in zip(solver.problems, vectors)]


class TestConvergence:
    def test_matches_sequential_solution(self, soft_grid):
        mesh, u, solver, states = soft_grid
        u_D = gather_continuous(global_fields(mesh, solver, states[-1].u_D), solver.topology, mesh.n_dofs)
        np.testing.assert_allclose(u_D, u, atol=1e-7 * np.abs(u).max())

    def test_residual_reduced(self, soft_grid):
        _, _, _, states = soft_grid
        assert len(states) > 1
        assert states[-1].algebraic <= 1e-10 * states[0].algebraic

    @pytest.mark.parametrize("scheme", ["inclusions5", "strips18"])
    def test_other_layouts(self, soft12, scheme):
        mesh, materials, loads, u = soft12
        solver = make_solver(mesh, materials, loads, scheme)
        final = fetidp_solve(solver, tol=1e-10)[-1]
        u_D = gather_continuous(global_fields(mesh, solver, final.u_D), solver.topology, mesh.n_dofs)
        np.testing.assert_allclose(u_D, u, atol=1e-7 * np.abs(u).max())

    def test_multiplicity_scaling(self, soft12):
        mesh, materials, loads, u = soft12
        solver = make_solver(mesh, materials, loads, "grid3x3", scaling="multiplicity")
        final = fetidp_solve(solver, tol=1e-10)[-1]
        u_D = gather_continuous(global_fields(mesh, solver, final.u_D), solver.topology, mesh.n_dofs)
        np.testing.assert_allclose(u_D, u, atol=1e-7 * np.abs(u).max())

    def test_affine(self, affine):
        mesh, materials, loads, u = affine
        solver = make_solver(mesh, materials, loads, "grid3x3")
        final = fetidp_solve(solver)[-1]
        u_D = gather_continuous(global_fields(mesh, solver, final.u_D), solver.topology, mesh.n_dofs)
        np.testing.assert_allclose(u_D, u, atol=1e-9 * np.abs(u).max())

    def test_rejects_bad_tolerance(self, soft_grid):
        with pytest.raises(ValueError):
            fetidp_solve(soft_grid[2], tol=0.0)


class TestIterationStates:
    def test_every_iteration_is_kept(self, soft_grid):
        _, _, _, states = soft_grid
        assert [s.iteration for s in states] == list(range(len(states)))

    def test_rz_is_energy_gap(self, soft_grid):
        _, _, solver, states = soft_grid
        for state in states[:4]:
            assert algebraic_error_term(state) == pytest.approx(energy_gap(solver.problems, state), rel=1e-8)

    def test_neumann_side_in_local_equilibrium(self, soft_grid):
        _, _, solver, states = soft_grid
        for state in (states[0], states[len(states) // 2], states[-1]):
            for p, u, lam in zip(solver.problems, state.u_N, state.lambda_N):
                lhs = p.K @ u
                scale = np.abs(lhs).max()
                np.testing.assert_allclose(lhs, p.f + p.extend(lam), atol=1e-8 * scale)

    def test_neumann_reactions_balance(self, soft_grid):
        _, _, solver, states = soft_grid
        topo = solver.topology
        for state in (states[1], states[-1]):
            scale = max(np.abs(l).max() for l in state.lambda_N)
            for v in topo.primal.tolist():
                for c in (0, 1):
                    total = sum(state.lambda_N[s][2 * topo.gamma_position(s, v) + c] for s in topo.node_subdomains[v])
                    assert abs(total) <= 1e-8 * scale

    def test_dirichlet_side_is_continuous(self, soft_grid):
        mesh, _, solver, states = soft_grid
        for state in (states[0], states[1]):
            check_kinematic(mesh, global_fields(mesh, solver, state.u_D), solver.topology)


def test_threads_give_identical_iterates(soft12):
    mesh, materials, loads, _ = soft12
    serial = fetidp_solve(make_solver(mesh, materials, loads, "grid3x3"), tol=1e-8)
    parallel = fetidp_solve(make_solver(mesh, materials, loads, "grid3x3", threads=3), tol=1e-8)
    assert len(serial) == len(parallel)
    np.testing.assert_array_equal(serial[-1].Lambda, parallel[-1].Lambda)


class TestLocalSolves:
    def test_dirichlet_solve(self, soft_grid):
        _, _, solver, _ = soft_grid
        rng = np.random.default_rng(1)
        u_o = [rng.standard_normal(len(p.other)) for p in solver.problems]
        dlam, du = solver.solve_s(u_o)
        for p, d, lam, uo in zip(solver.problems, du, dlam, u_o):
            np.testing.assert_allclose(d[p.other], uo)
            assert not d[p.corner].any()
            Kd = p.K @ d
            np.testing.assert_allclose(Kd[p.internal], 0.0, atol=1e-9 * np.abs(Kd).max())
            np.testing.assert_allclose(lam, Kd[p.gamma])

    def test_neumann_solve_keeps_corners_continuous(self, soft_grid):
        mesh, _, solver, _ = soft_grid
        rng = np.random.default_rng(2)
        lam_o = [rng.standard_normal(len(p.other)) for p in solver.problems]
        us, lam_c = solver.solve_l(lam_o, f=False)
        corner_values = {}
        reactions = np.zeros(mesh.n_dofs)
        for k, (p, u) in enumerate(zip(solver.problems, us)):
            lam = solver.lambda_vector(k, lam_o[k], lam_c[k])
            Ku = p.K @ u
            np.testing.assert_allclose(Ku, p.extend(lam), atol=1e-9 * np.abs(Ku).max())
            for d, value in zip(p.dofs[p.corner].tolist(), u[p.corner]):
                corner_values.setdefault(d, []).append(value)
            np.add.at(reactions, p.dofs[p.corner], lam_c[k])
        scale = max(np.abs(u).max() for u in us)
        for values in corner_values.values():
            assert np.ptp(values) <= 1e-10 * scale
        assert np.abs(reactions).max() <= 1e-9 * max(np.abs(l).max() for l in lam_c)
