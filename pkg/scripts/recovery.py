"""可容许应力场恢复：多重点优化 Λ_F、连续界面面力 g_F、子域 EET

顺序模式：整个网格一次 EET。
子域模式：λ_N → Λ_F（按节点的加权伪逆）→ g_F（逐段质量矩阵）→ 各子域独立 EET，
界面边上的面力取 g_F，因此 g_F^(s,s') = −g_F^(s',s) 保证全局静力可容许。
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from eet import (
    CLASSICAL,
    WEIGHTED,
    AdmissibleStressField,
    element_neumann_solve,
    equilibrate_tractions,
    mean_edge_tractions,
)
from elasticity import element_stresses
from errors import AdmissibilityError
from interface_ops import build_cyclic_kernel, build_dual_faces
from runlog import atomic_write_csv, log

MULTIPOINT_MODES = ("off", "identity", "weighted")
ROUTES = ("pseudo_inverse", "corrected")

BALANCE_RTOL = 1e-8
CONSTRAINT_RTOL = 1e-10


@dataclass(frozen=True)
class InterfaceInteraction:
    values: np.ndarray     # Λ_F, one entry per B_F row
    weights: np.ndarray    # diagonal of P
    reference: np.ndarray  # Λ_F¹
    rows: np.ndarray       # B_F rows [s, s', node, comp]


def element_owner(topology, n_elements):
    owner = np.full(n_elements, -1, dtype=np.int64)
    for s, els in enumerate(topology.subdomain_elements):
        owner[els] = s
    return owner


def _rows_by_dof(faces):
    groups = {}
    for r, (a, b, v, c) in enumerate(faces.rows.tolist()):
        groups.setdefault((v, c), []).append(r)
    return groups


def _nodal_lambdas(topology, lambdas, v, c):
    subs = topology.node_subdomains[v]
    values = np.array([lambdas[s][2 * topology.gamma_position(s, v) + c] for s in subs])
    return subs, values


# ── Λ_F ──
def compute_lambdaF(topology, faces, lambdas, weights=None, reference=None):
    """Λ_F = Λ¹ + P⁻¹B(BᵀP⁻¹B)⁺(λ_N − BᵀΛ¹), solved node by node.

    B_F couples only relations of the same node and direction, so the
    weighted pseudo-inverse splits into one incidence system per interface dof.
    """
    n = faces.n_rows
    p = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    ref = np.zeros(n) if reference is None else np.asarray(reference, dtype=float)
    if np.any(p <= 0):
        raise ValueError("P must be positive definite")
    out = ref.copy()
    groups = _rows_by_dof(faces)
    # tolerances follow the largest interface force, not the local one
    scale = max(max((np.abs(lam).max(initial=0.0) for lam in lambdas), default=0.0),
                np.abs(ref).max(initial=0.0))
    for v in topology.primal.tolist():
        for c in (0, 1):
            subs, lam = _nodal_lambdas(topology, lambdas, v, c)
            magnitude = max(np.abs(lam).sum(), scale)
            if abs(lam.sum()) > BALANCE_RTOL * magnitude:
                raise AdmissibilityError(
                    f"λ_N is not balanced at node {v}, direction {c}: Σλ = {lam.sum():.3e} "
                    f"(scale {magnitude:.3e})"
                )
            rows = groups.get((v, c), [])
            if not rows:
                if np.abs(lam).max() > BALANCE_RTOL * magnitude:
                    raise AdmissibilityError(f"node {v} carries interface forces but has no face relation")
                continue
            local = {s: k for k, s in enumerate(subs)}
            D = np.zeros((len(subs), len(rows)))
            for k, r in enumerate(rows):
                a, b = faces.rows[r, :2]
                D[local[int(a)], k] = 1.0
                D[local[int(b)], k] = -1.0
            pinv = 1.0 / p[rows]
            gap = lam - D @ ref[rows]
            M = (D * pinv) @ D.T
            out[rows] = ref[rows] + pinv * (D.T @ (sla.pinv(M) @ gap))
            misfit = np.abs(D @ out[rows] - lam).max()
            if misfit > CONSTRAINT_RTOL * max(magnitude, np.abs(D @ ref[rows]).sum()) + np.finfo(float).tiny:
                raise AdmissibilityError(
                    f"face relations at node {v} cannot carry λ_N (misfit {misfit:.3e})"
                )
    return InterfaceInteraction(values=out, weights=p, reference=ref, rows=faces.rows)


def correct_lambdaF(lambda0, lambda1, weights, kernel):
    """Λ_F⁰ − R(RᵀPR)⁻¹RᵀP(Λ_F⁰ − Λ_F¹) with R the cyclic kernel basis."""
    lambda0 = np.asarray(lambda0, dtype=float)
    if kernel.n_columns == 0:
        return lambda0.copy()
    R = kernel.matrix.astype(float)
    PR = (sp.diags(np.asarray(weights, dtype=float)) @ R).tocsr()
    M = (R.T @ PR).toarray()
    try:
        factor = sla.cho_factor(M)
    except sla.LinAlgError as exc:
        raise AdmissibilityError(f"RᵀPR is singular ({exc}); kernel columns are dependent") from exc
    coeff = sla.cho_solve(factor, PR.T @ (lambda0 - lambda1))
    return lambda0 - R @ coeff


def interface_reference(mesh, topology, faces, stress, young, multipoint="weighted"):
    """P diagonal and Λ_F¹ for a multipoint mode.

    off: P = I, Λ_F¹ = 0; identity: P = I, Λ_F¹ = mean traction moments;
    weighted: p = Σ (Y_E⁻¹ + Y_E'⁻¹)/√ℓ over the shared edges at the node and
    Young-weighted mean traction moments.
    """
    if multipoint not in MULTIPOINT_MODES:
        raise ValueError(f"unknown multipoint mode {multipoint!r}")
    n = faces.n_rows
    weights = np.ones(n)
    reference = np.zeros(n)
    if multipoint == "off":
        return weights, reference
    mode = WEIGHTED if multipoint == "weighted" else CLASSICAL
    if multipoint == "weighted":
        weights = np.zeros(n)
    edges = mesh.edges
    owner = element_owner(topology, mesh.n_elements)
    row_of = {tuple(r): k for k, r in enumerate(faces.rows.tolist())}
    for (lo, hi), eids in topology.pair_edges.items():
        moments = mean_edge_tractions(mesh, stress, young, eids, mode)
        sign = np.where(owner[edges.elements[eids, 0]] == lo, 1.0, -1.0)
        e0, e1 = edges.elements[eids, 0], edges.elements[eids, 1]
        p = (1.0 / young[e0] + 1.0 / young[e1]) / np.sqrt(edges.lengths[eids])
        for k, g in enumerate(eids.tolist()):
            for v in edges.nodes[g].tolist():
                if topology.dirichlet[v]:
                    continue
                for c in (0, 1):
                    r = row_of[(lo, hi, v, c)]
                    reference[r] += sign[k] * moments[k, c]
                    if multipoint == "weighted":
                        weights[r] += p[k]
    return weights, reference


# ── g_F ──
@dataclass(frozen=True)
class InterfaceTraction:
    """Nodal P1 coefficients of g_F^(s,s') on the s side of every face pair (s < s')."""
    segments: dict   # (s, s') -> (nodes, coefficients (k, 2), edge ids)

    def edge_densities(self, mesh, owner):
        """Reference-orientation densities (n_edges, 2, 2) of all interface edges."""
        edges = mesh.edges
        values = np.zeros((len(edges), 2, 2))
        for (lo, _), (nodes, coeff, eids) in self.segments.items():
            at = {int(v): k for k, v in enumerate(nodes.tolist())}
            sign = np.where(owner[edges.elements[eids, 0]] == lo, 1.0, -1.0)
            for k, g in enumerate(eids.tolist()):
                for end, v in enumerate(edges.nodes[g].tolist()):
                    if v in at:
                        values[g, end] = sign[k] * coeff[at[v]]
        return values

    def side(self, s, t):
        """g_F^(s,t) coefficients, antisymmetric in (s, t)."""
        if s < t:
            nodes, coeff, _ = self.segments[(s, t)]
            return nodes, coeff
        nodes, coeff, _ = self.segments[(t, s)]
        return nodes, -coeff


def traction_representation(mesh, topology, faces, interaction):
    """Solve the interface mass system of every face pair for the nodal values of g_F."""
    edges = mesh.edges
    row_of = {tuple(r): k for k, r in enumerate(faces.rows.tolist())}
    lam = interaction.values
    segments = {}
    for pair, eids in topology.pair_edges.items():
        if len(eids) == 0 or np.any(edges.lengths[eids] <= 0):
            raise AdmissibilityError(f"interface {pair} has a zero-length segment")
        nodes = topology.face_pairs[pair]
        at = {int(v): k for k, v in enumerate(nodes.tolist())}
        M = np.zeros((len(nodes), len(nodes)))
        for g in eids.tolist():
            ell = edges.lengths[g]
            ends = [at.get(int(v)) for v in edges.nodes[g]]
            for i, a in enumerate(ends):
                for j, b in enumerate(ends):
                    if a is not None and b is not None:
                        M[a, b] += ell * (2.0 if i == j else 1.0) / 6.0
        moments = np.array([[lam[row_of[(pair[0], pair[1], v, c)]] for c in (0, 1)] for v in nodes.tolist()])
        coeff = sla.solve(M, moments, assume_a="pos") if len(nodes) else np.zeros((0, 2))
        segments[pair] = (nodes, coeff, eids)
    return InterfaceTraction(segments)


# ── Pipeline ──
@dataclass(frozen=True)
class RecoveryResult:
    field: AdmissibleStressField
    stress: np.ndarray               # FE stress σ_h (or σ_N) per element
    tractions: list                  # EdgeTractionDensity per region
    interaction: InterfaceInteraction = None
    interface: InterfaceTraction = None


def _check_modes(mode, multipoint, route):
    if mode not in (CLASSICAL, WEIGHTED):
        raise ValueError(f"unknown recovery mode {mode!r}")
    if multipoint not in MULTIPOINT_MODES:
        raise ValueError(f"unknown multipoint mode {multipoint!r}")
    if route not in ROUTES:
        raise ValueError(f"unknown Λ_F route {route!r}")


def recover_admissible(mesh, materials, loads, displacement, mode=WEIGHTED, topology=None, lambdas=None,
                       multipoint="weighted", degree=4, threads=1, iteration=None, route="pseudo_inverse"):
    """Statically admissible σ̂ from an FE field.

    Sequential mode: displacement is the global vector, topology is None.
    Substructured mode: displacement lists the per-subdomain global-size
    vectors u_N(s), lambdas the interface reactions λ_N(s) on Γ(s).
    """
    _check_modes(mode, multipoint, route)
    if topology is None:
        stress = element_stresses(mesh, materials, displacement)
        tractions = equilibrate_tractions(mesh, materials, loads, stress, mode=mode)
        field = element_neumann_solve(mesh, materials, loads, tractions, degree=degree, mode=mode)
        field = replace(field, iteration=iteration)
        return RecoveryResult(field=field, stress=stress, tractions=[tractions])

    if lambdas is None:
        raise ValueError("substructured recovery needs λ_N(s)")
    stress = np.zeros((mesh.n_elements, 3))
    for s, els in enumerate(topology.subdomain_elements):
        stress[els] = element_stresses(mesh, materials, displacement[s], els)

    faces = build_dual_faces(topology)
    young = materials.element_young(mesh)
    weights, reference = interface_reference(mesh, topology, faces, stress, young, multipoint)
    interaction = compute_lambdaF(topology, faces, lambdas, weights, reference)
    if route == "corrected":
        guess = compute_lambdaF(topology, faces, lambdas)
        kernel = build_cyclic_kernel(mesh, topology, faces)
        values = correct_lambdaF(guess.values, reference, weights, kernel)
        interaction = InterfaceInteraction(values, weights, reference, faces.rows)
    interface = traction_representation(mesh, topology, faces, interaction)
    owner = element_owner(topology, mesh.n_elements)
    densities = interface.edge_densities(mesh, owner)

    def one(s):
        els = topology.subdomain_elements[s]
        t = equilibrate_tractions(mesh, materials, loads, stress, els, mode, interface=densities)
        f = element_neumann_solve(mesh, materials, loads, t, els, degree, mode)
        return t, f

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, range(topology.n_subdomains)))
    else:
        parts = [one(s) for s in range(topology.n_subdomains)]
    fields = [replace(f, subdomain=np.full(len(f.elements), s, dtype=np.int64)) for s, (_, f) in enumerate(parts)]
    log(f"recovered σ̂ on {topology.n_subdomains} subdomains ({mode}, multipoint={multipoint})", "DEBUG")
    return RecoveryResult(
        field=AdmissibleStressField.concatenate(fields, iteration=iteration),
        stress=stress,
        tractions=[t for t, _ in parts],
        interaction=interaction,
        interface=interface,
    )


def dump_recovery(mesh, result, out_dir, tag):
    """Edge tractions and element coefficients as CSV for debugging."""
    edges = mesh.edges
    rows = []
    for region, t in enumerate(result.tractions):
        for g in np.flatnonzero(t.defined).tolist():
            a, b = edges.nodes[g]
            h = t.values[g]
            rows.append({
                "region": region, "edge": g, "node_a": int(a), "node_b": int(b),
                "hx_a": h[0, 0], "hy_a": h[0, 1], "hx_b": h[1, 0], "hy_b": h[1, 1],
                "computed": int(t.unknown[g]),
            })
    columns = ["region", "edge", "node_a", "node_b", "hx_a", "hy_a", "hx_b", "hy_b", "computed"]
    atomic_write_csv(out_dir / f"tractions_{tag}.csv", columns, rows)

    field = result.field
    n = field.coefficients.shape[1]
    coeff_cols = [f"c{k}" for k in range(n)]
    rows = []
    for k, e in enumerate(field.elements.tolist()):
        row = {"element": e, "rho": field.rho[k], "xc": field.centres[k, 0], "yc": field.centres[k, 1]}
        row.update({name: field.coefficients[k, j] for j, name in enumerate(coeff_cols)})
        rows.append(row)
    atomic_write_csv(out_dir / f"stress_{tag}.csv", ["element", "rho", "xc", "yc"] + coeff_cols, rows)
