"""误差估计：本构关系误差 e_CR、保证上界、分离上界、细网格参考误差、误差图

e_CR(û, σ̂)² = ∫ (σ̂ − H:ε(û)) : H⁻¹ : (σ̂ − H:ε(û))，按单元累加。
相对估计以 |||u_h||| = √(u_hᵀ K u_h) 归一化。
"""
from dataclasses import dataclass, replace

import numpy as np

from eet import weak_equilibrium_residual
from elasticity import (
    assemble,
    element_stresses,
    energy_contributions,
    energy_norm,
    solve_dirichlet,
    triangle_quadrature,
)
from errors import AdmissibilityError, SolverError
from fetidp import algebraic_error_term
from mesh import refine_mesh, write_vtk
from runlog import log

ECR_QUADRATURE = 8
CONTINUITY_RTOL = 1e-8
EQUILIBRIUM_RTOL = 1e-8


@dataclass(frozen=True)
class ErrorReport:
    contributions: np.ndarray   # per-element e_CR², mesh element order
    subdomain: np.ndarray       # per-subdomain sums of e_CR²
    estimate: float
    energy: float               # |||u_h|||
    algebraic: float = None
    discretization: float = None
    reference: float = None     # |||u_ref − u_h||| from the overkill solve
    iteration: int = None

    @property
    def relative(self):
        return self.estimate / self.energy if self.energy > 0 else float("nan")

    @property
    def separated(self):
        if self.algebraic is None or self.discretization is None:
            return None
        return self.algebraic + self.discretization

    @property
    def effectivity(self):
        if not self.reference:
            return None
        return self.estimate / self.reference

    def with_reference(self, reference):
        return replace(self, reference=float(reference))


def ecr(mesh, materials, displacement, field, elements=None):
    """e_CR over the field's elements (or the given subset) and its per-element squares."""
    if elements is not None:
        field = field.restrict(np.isin(field.elements, elements))
    els = field.elements
    bary, weights = triangle_quadrature(max(ECR_QUADRATURE, 2 * field.degree))
    diff = field.stress_at(bary) - element_stresses(mesh, materials, displacement, els)[:, None, :]
    contributions = energy_contributions(mesh, materials, diff, els, weights)
    return float(np.sqrt(contributions.sum())), contributions


def _subdomain_contributions(mesh, materials, displacements, field, topology):
    contributions = np.zeros(mesh.n_elements)
    sums = np.zeros(topology.n_subdomains)
    for s, els in enumerate(topology.subdomain_elements):
        _, local = ecr(mesh, materials, displacements[s], field, els)
        contributions[np.sort(els)] = local
        sums[s] = local.sum()
    return contributions, sums


def solution_energy(mesh, materials, u):
    """|||u||| from element stresses, equal to √(uᵀKu)."""
    return float(np.sqrt(energy_contributions(mesh, materials, element_stresses(mesh, materials, u)).sum()))


def check_kinematic(mesh, displacement, topology=None, dirichlet_values=None):
    """Dirichlet data exact and, for per-subdomain fields, interface continuity.

    dirichlet_values are the prescribed values on mesh.dirichlet_dofs (0 when omitted).
    """
    fields = [displacement] if topology is None else list(displacement)
    scale = max(max(np.abs(u).max() for u in fields), np.finfo(float).tiny)
    dofs = mesh.dirichlet_dofs
    prescribed = np.zeros(len(dofs)) if dirichlet_values is None else np.broadcast_to(
        np.asarray(dirichlet_values, dtype=float), (len(dofs),))
    for u in fields:
        if np.abs(u[dofs] - prescribed).max(initial=0.0) > 0:
            raise AdmissibilityError("displacement violates the Dirichlet condition")
    if topology is None:
        return
    for v in topology.primal.tolist():
        subs = topology.node_subdomains[v]
        vals = np.array([fields[s][2 * v:2 * v + 2] for s in subs])
        jump = np.abs(vals - vals[0]).max()
        if jump > CONTINUITY_RTOL * scale:
            raise AdmissibilityError(f"u_D jumps by {jump:.3e} at interface node {v}")


def check_static(mesh, field, loads):
    residual, magnitude = weak_equilibrium_residual(mesh, field, loads)
    worst = np.abs(residual).max(initial=0.0)
    if worst > EQUILIBRIUM_RTOL * max(magnitude.max(initial=0.0), np.finfo(float).tiny):
        k = int(np.argmax(np.abs(residual)))
        raise AdmissibilityError(f"σ̂ is not in weak equilibrium (residual {worst:.3e} at free dof #{k})")


def guaranteed_bound(mesh, materials, loads, field, displacement, topology=None, energy=None,
                     dirichlet_values=None):
    """√(Σ_s e_CR(u_D(s), σ̂(s))²) after checking both admissibility conditions.

    Sequential mode takes the global displacement; substructured mode takes
    the per-subdomain global-size vectors u_D(s) and the topology.
    """
    check_kinematic(mesh, displacement, topology, dirichlet_values)
    check_static(mesh, field, loads)
    if topology is None:
        total, contributions = ecr(mesh, materials, displacement, field)
        sums = np.array([contributions.sum()])
        u = displacement
    else:
        contributions, sums = _subdomain_contributions(mesh, materials, displacement, field, topology)
        total = float(np.sqrt(sums.sum()))
        u = gather_continuous(displacement, topology, mesh.n_dofs)
    if energy is None:
        energy = solution_energy(mesh, materials, u)
    return ErrorReport(
        contributions=contributions,
        subdomain=sums,
        estimate=total,
        energy=energy,
        iteration=field.iteration,
    )


def gather_continuous(displacements, topology, n_dofs):
    """Global vector from continuous per-subdomain fields."""
    out = np.zeros(n_dofs)
    for s, nodes in enumerate(topology.subdomain_nodes):
        dofs = np.column_stack((2 * nodes, 2 * nodes + 1)).ravel()
        out[dofs] = displacements[s][dofs]
    return out


@dataclass(frozen=True)
class SeparatedBound:
    algebraic: float
    discretization: float

    @property
    def total(self):
        return self.algebraic + self.discretization


def separated_bound(mesh, materials, state, field, problems, topology):
    """√(rᵀz) + √(Σ_s e_CR(u_N(s), σ̂_N(s))²) for σ̂ recovered from the same iteration."""
    if field.iteration != state.iteration:
        raise AdmissibilityError(
            f"σ̂ comes from iteration {field.iteration}, the solver state from iteration {state.iteration}"
        )
    algebraic = float(np.sqrt(algebraic_error_term(state)))
    u_N = [p.to_global(u, mesh.n_dofs) for p, u in zip(problems, state.u_N)]
    _, sums = _subdomain_contributions(mesh, materials, u_N, field, topology)
    return SeparatedBound(algebraic, float(np.sqrt(sums.sum())))


# ── Overkill reference ──
def prolongate(coarse, fine, u):
    """Exact P1 interpolation of a coarse benchmark field at the nodes of a nested refinement."""
    n, h = coarse.grid_n, coarse.h
    xy = fine.nodes / h
    i = np.clip(np.floor(xy[:, 0] + 1e-12).astype(np.int64), 0, n - 1)
    j = np.clip(np.floor(xy[:, 1] + 1e-12).astype(np.int64), 0, n - 1)
    xi, eta = xy[:, 0] - i, xy[:, 1] - j
    a = j * (n + 1) + i
    b, d = a + 1, a + n + 1
    c = d + 1
    lower = eta <= xi
    ux, uy = u[0::2], u[1::2]
    out = np.zeros(fine.n_dofs)
    for comp, vals in ((0, ux), (1, uy)):
        low = vals[a] * (1 - xi) + vals[b] * (xi - eta) + vals[c] * eta
        up = vals[a] * (1 - eta) + vals[c] * xi + vals[d] * (eta - xi)
        out[comp::2] = np.where(lower, low, up)
    return out


@dataclass(frozen=True)
class ReferenceSolution:
    coarse: object
    mesh: object
    K: object
    u: np.ndarray
    k: int

    @property
    def n_dofs(self):
        return self.mesh.n_dofs

    def error(self, u_h):
        e = self.u - prolongate(self.coarse, self.mesh, u_h)
        return energy_norm(self.K, e)


def reference_solution(mesh, materials, loads, k=4, dof_budget=2_000_000):
    if k < 2:
        raise ValueError(f"refinement factor must be >= 2, got {k}")
    n_dofs = 2 * (mesh.grid_n * k + 1) ** 2
    if n_dofs > dof_budget:
        raise SolverError(f"overkill mesh needs {n_dofs} dofs, budget is {dof_budget}")
    fine = refine_mesh(mesh, k)
    K, F = assemble(fine, materials, loads)
    u = solve_dirichlet(K, F, fine.dirichlet_dofs)
    log(f"overkill reference: {fine.grid_n}x{fine.grid_n} grid, {fine.n_dofs} dofs", "DEBUG")
    return ReferenceSolution(coarse=mesh, mesh=fine, K=K, u=u, k=k)


def overkill_reference(mesh, materials, loads, u_h, k=4, dof_budget=2_000_000):
    """|||u_ref − u_h||| on the k-times refined mesh."""
    return reference_solution(mesh, materials, loads, k, dof_budget).error(u_h)


# ── Export ──
def error_map(mesh, report, path=None, subdomain=None):
    """Per-element e_CR² as cell data; written as VTK when path is given."""
    values = np.asarray(report.contributions, dtype=float)
    if path is not None:
        data = {"e_cr2": values, "e_cr": np.sqrt(values)}
        if subdomain is not None:
            data["subdomain_id"] = np.asarray(subdomain, dtype=np.int64)
        write_vtk(mesh, path, data)
    return values
