"""EET 通量平衡：星形块（star patch）、边上面力密度、单元 Neumann 问题

符号约定：
  - 每条边的参考单元为相邻单元中编号较小者（mesh.edges.elements[:, 0]），
    密度 ĥ_γ 以参考单元的外法向为正，δ_E^γ = +1（参考单元）或 −1；
  - 节点 i 在边 γ 上的广义值 b_{γ,i} = ∫_γ ĥ_γ φ_i；
  - 单元方程 Σ_{γ⊂∂E} δ_E^γ b_{γ,i} = ∫_E σ_h:ε(φ_i) − f·φ_i。
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from elasticity import (
    assemble_loads,
    element_dofs,
    segment_quadrature,
    shape_gradients,
    strain_matrix,
    triangle_quadrature,
)
from errors import EquilibrationError
from mesh import DIRICHLET, NEUMANN_TOP

CLASSICAL = "classical"
WEIGHTED = "weighted"
MODES = (CLASSICAL, WEIGHTED)

EQUILIBRIUM_RTOL = 1e-8
BALANCE_RTOL = 1e-8


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"unknown equilibration mode {mode!r} (expected one of {', '.join(MODES)})")


# ── Edge geometry ──
def edge_normals(mesh):
    """Unit normals pointing out of each edge's reference element."""
    edges = mesh.edges
    ids = np.arange(len(edges))
    ref = edges.elements[:, 0]
    k = np.argmax(edges.element_edges[ref] == ids[:, None], axis=1)
    tri = mesh.elements[ref]
    t = mesh.nodes[tri[ids, (k + 1) % 3]] - mesh.nodes[tri[ids, k]]
    return np.column_stack((t[:, 1], -t[:, 0])) / edges.lengths[:, None]


def edge_signs(mesh, edge_ids, elements):
    """δ_E^γ for matching arrays of edges and elements."""
    return np.where(mesh.edges.elements[edge_ids, 0] == elements, 1.0, -1.0)


def flux(stress, normal):
    """σ·n for Voigt stresses (..., 3) and normals (..., 2)."""
    sx, sy, sxy = stress[..., 0], stress[..., 1], stress[..., 2]
    nx, ny = normal[..., 0], normal[..., 1]
    return np.stack((sx * nx + sxy * ny, sxy * nx + sy * ny), axis=-1)


def density_moments(values, lengths):
    """Moments ∫ ĥ φ_end of linear densities (k, 2 ends, 2 comps)."""
    ell = lengths[:, None, None] / 6.0
    return ell * (2.0 * values + values[:, ::-1])


def moments_to_density(moments, lengths):
    """Inverse of the edge mass matrix ℓ/6·[[2, 1], [1, 2]]."""
    scale = 2.0 / lengths[:, None, None]
    return scale * (2.0 * moments - moments[:, ::-1])


# ── Patch data ──
def mean_edge_tractions(mesh, stress, young, edge_ids, mode=CLASSICAL):
    """Target moments ∫_γ σ̄·n φ_i of the given edges (same value at both ends).

    Interior edges average the two adjacent element fluxes, with weights
    Y_E⁻¹ / (Y_E⁻¹ + Y_E'⁻¹) in weighted mode; boundary edges take the single
    element flux.
    """
    _check_mode(mode)
    edges = mesh.edges
    ids = np.asarray(edge_ids, dtype=np.int64)
    n = edge_normals(mesh)[ids]
    e0 = edges.elements[ids, 0]
    e1 = np.where(edges.elements[ids, 1] < 0, e0, edges.elements[ids, 1])
    t0 = flux(stress[e0], n)
    t1 = flux(stress[e1], n)
    if mode == CLASSICAL:
        w0 = np.full(len(ids), 0.5)
    else:
        y0, y1 = 1.0 / young[e0], 1.0 / young[e1]
        w0 = y0 / (y0 + y1)
    mean = w0[:, None] * t0 + (1.0 - w0)[:, None] * t1
    return 0.5 * edges.lengths[ids, None] * mean


def edge_weights(mesh, young, edge_ids, mode=CLASSICAL):
    """p_γ: 1 in classical mode, Y_E⁻¹ + Y_E'⁻¹ in weighted mode (E' = E on the boundary)."""
    _check_mode(mode)
    ids = np.asarray(edge_ids, dtype=np.int64)
    if mode == CLASSICAL:
        return np.ones(len(ids))
    edges = mesh.edges
    e0 = edges.elements[ids, 0]
    e1 = np.where(edges.elements[ids, 1] < 0, e0, edges.elements[ids, 1])
    return 1.0 / young[e0] + 1.0 / young[e1]


def nodal_residuals(mesh, stress, body, elements):
    """∫_E σ_h:ε(φ_i) − f·φ_i for every element and local vertex, shape (m, 3, 2)."""
    grads, areas = shape_gradients(mesh.nodes[mesh.elements[elements]])
    s = stress[elements]
    sx, sy, sxy = s[:, 0, None], s[:, 1, None], s[:, 2, None]
    gx, gy = grads[..., 0], grads[..., 1]
    R = np.stack((sx * gx + sxy * gy, sxy * gx + sy * gy), axis=-1) * areas[:, None, None]
    R -= np.asarray(body, dtype=float)[None, None, :] * (areas / 3.0)[:, None, None]
    return R


@dataclass(frozen=True)
class StarPatch:
    node: int
    elements: np.ndarray    # (m,)
    edges: np.ndarray       # (k,) edges radiating from node
    signs: np.ndarray       # (m, k) δ_E^γ, 0 when γ ⊄ ∂E
    unknown: np.ndarray     # (k,) bool
    prescribed: np.ndarray  # (k, 2) moments of prescribed edges
    rhs: np.ndarray         # (m, 2)
    target: np.ndarray      # (k, 2)
    weights: np.ndarray     # (k,)
    lengths: np.ndarray     # (k,)


def star_patch_solve(patch, rtol=EQUILIBRIUM_RTOL, floor=0.0):
    """Generalized nodal values b̂_{γ,i} of every edge around the patch node.

    Unknown values solve the element equations with minimal
    Σ p_γ ((b − b̃ᵐ)/ℓ_γ)²; the minimum-norm least-squares solution of the
    scaled system removes the kernel of interior patches.
    """
    C = patch.signs
    u = patch.unknown
    b = patch.prescribed.astype(float).copy()
    b[u] = 0.0
    d = patch.rhs - C[:, ~u] @ b[~u]
    if u.any():
        scale = np.sqrt(patch.weights[u]) / patch.lengths[u]
        bm = patch.target[u]
        y, *_ = sla.lstsq(C[:, u] / scale, d - C[:, u] @ bm, cond=1e-12)
        b[u] = bm + y / scale[:, None]
    residual = np.abs(C @ b - patch.rhs).max() if len(C) else 0.0
    size = np.abs(patch.rhs).sum() + np.abs(b[~u]).sum()
    if residual > rtol * size + floor:
        raise EquilibrationError(
            f"star patch of node {patch.node} is inconsistent (residual {residual:.3e}, scale {size:.3e})"
        )
    return b


# ── Edge tractions ──
@dataclass(frozen=True)
class EdgeTractionDensity:
    """Linear densities ĥ_γ in reference orientation; values[γ, k] sits at edges.nodes[γ, k]."""
    values: np.ndarray    # (n_edges, 2, 2)
    defined: np.ndarray   # (n_edges,) bool
    unknown: np.ndarray   # (n_edges,) bool, edges computed by patch solves

    def element_side(self, mesh, elements, local_edge):
        """δ_E^γ ĥ_γ at the start and end vertex of local edge k of each element, (m, 2, 2)."""
        gid = mesh.edges.element_edges[elements, local_edge]
        start = mesh.elements[elements, local_edge]
        flip = mesh.edges.nodes[gid, 0] != start
        vals = self.values[gid].copy()
        vals[flip] = vals[flip, ::-1]
        return edge_signs(mesh, gid, elements)[:, None, None] * vals


def _region_edges(mesh, inside):
    edges = mesh.edges
    e0, e1 = edges.elements[:, 0], edges.elements[:, 1]
    in0 = inside[e0]
    in1 = np.where(e1 >= 0, inside[np.maximum(e1, 0)], False)
    touches = in0 | in1
    boundary = e1 < 0
    interior = in0 & in1
    interface = touches & ~boundary & ~interior
    return touches, interior, interface, boundary


def equilibrate_tractions(mesh, materials, loads, stress, elements=None, mode=CLASSICAL, interface=None):
    """Run every star patch of the region and return its edge tractions.

    stress holds the constant FE stress of every mesh element (only the region
    is read); interface gives the (n_edges, 2, 2) reference densities of the
    edges shared with the rest of the mesh and is required when the region
    has such edges.
    """
    _check_mode(mode)
    els = np.arange(mesh.n_elements) if elements is None else np.asarray(elements, dtype=np.int64)
    inside = np.zeros(mesh.n_elements, dtype=bool)
    inside[els] = True
    edges = mesh.edges
    touches, interior, on_interface, boundary = _region_edges(mesh, inside)
    if on_interface.any() and interface is None:
        raise ValueError("region has interface edges but no interface tractions were given")

    unknown = interior | (touches & boundary & (edges.tags == DIRICHLET))
    density = np.zeros((len(edges), 2, 2))
    neumann = touches & boundary & (edges.tags == NEUMANN_TOP)
    density[neumann] = np.asarray(loads.traction, dtype=float)
    if on_interface.any():
        density[on_interface] = interface[on_interface]
    # free 边密度为 0
    prescribed_moments = density_moments(density, edges.lengths)

    young = materials.element_young(mesh)
    ids = np.flatnonzero(unknown)
    target = np.zeros((len(edges), 2))
    target[ids] = mean_edge_tractions(mesh, stress, young, ids, mode)
    weights = np.ones(len(edges))
    weights[ids] = edge_weights(mesh, young, ids, mode)

    R = nodal_residuals(mesh, stress, loads.body, els)
    row = np.full(mesh.n_elements, -1, dtype=np.int64)
    row[els] = np.arange(len(els))
    floor = 1e-12 * np.abs(R).max() if R.size else 0.0

    moments = np.zeros((len(edges), 2, 2))
    for v in np.unique(mesh.elements[els]).tolist():
        patch = build_star_patch(mesh, v, els_around(mesh, v, inside), row, R, unknown,
                                 prescribed_moments, target, weights)
        b = star_patch_solve(patch, floor=floor)
        end = (edges.nodes[patch.edges, 0] != v).astype(np.int64)
        moments[patch.edges, end] = b

    values = density.copy()
    values[unknown] = moments_to_density(moments[unknown], edges.lengths[unknown])
    result = assemble_edge_tractions(values, touches, unknown)
    check_prolongation(mesh, result, R, els, floor)
    return result


def els_around(mesh, node, inside):
    around = mesh.node_elements[node]
    return around[inside[around]]


def build_star_patch(mesh, node, elements, row, R, unknown, prescribed_moments, target, weights):
    edges = mesh.edges
    tri = mesh.elements[elements]
    local = np.argmax(tri == node, axis=1)
    first = edges.element_edges[elements, local]
    second = edges.element_edges[elements, (local - 1) % 3]
    ids = np.unique(np.concatenate((first, second)))
    col = {int(g): k for k, g in enumerate(ids.tolist())}
    signs = np.zeros((len(elements), len(ids)))
    for m, (e, g1, g2) in enumerate(zip(elements.tolist(), first.tolist(), second.tolist())):
        for g in (g1, g2):
            signs[m, col[g]] = 1.0 if edges.elements[g, 0] == e else -1.0
    end = (edges.nodes[ids, 0] != node).astype(np.int64)
    return StarPatch(
        node=int(node),
        elements=elements,
        edges=ids,
        signs=signs,
        unknown=unknown[ids],
        prescribed=prescribed_moments[ids, end],
        rhs=R[row[elements], local],
        target=target[ids],
        weights=weights[ids],
        lengths=edges.lengths[ids],
    )


def assemble_edge_tractions(values, defined, unknown):
    """Pack per-edge densities; antisymmetry across interior edges holds by storing one value per edge."""
    values = np.asarray(values, dtype=float).copy()
    values[~defined] = 0.0
    return EdgeTractionDensity(values=values, defined=np.asarray(defined), unknown=np.asarray(unknown))


def prolongation_residuals(mesh, density, R, elements):
    """Σ_γ δ∫ĥφ_i − R_{E,i} for every element and vertex (m, 3, 2), with the magnitude of the terms."""
    edges = mesh.edges
    total = np.zeros((len(elements), 3, 2))
    magnitude = np.abs(R).copy()
    for k in range(3):
        side = density.element_side(mesh, elements, k)
        ell = edges.lengths[edges.element_edges[elements, k]][:, None, None] / 6.0
        mom = ell * (2.0 * side + side[:, ::-1])
        for end, vertex in ((0, k), (1, (k + 1) % 3)):
            total[:, vertex] += mom[:, end]
            magnitude[:, vertex] += np.abs(mom[:, end])
    return total - R, magnitude


def check_prolongation(mesh, density, R, elements, floor=0.0, rtol=EQUILIBRIUM_RTOL):
    residual, magnitude = prolongation_residuals(mesh, density, R, elements)
    res = np.abs(residual).max(axis=(1, 2))
    bad = np.flatnonzero(res > rtol * magnitude.sum(axis=(1, 2)) + floor)
    if len(bad):
        e = int(elements[bad[0]])
        raise EquilibrationError(
            f"element {e} fails the vertex moment check (residual {res[bad[0]]:.3e}); "
            f"{len(bad)} elements affected"
        )


# ── Element Neumann problems ──
def monomial_exponents(degree):
    return [(a, total - a) for total in range(degree + 1) for a in range(total, -1, -1)]


def _monomials(xi, exps):
    """Values and ξ/η derivatives of x^a y^b at scaled points xi (..., 2)."""
    x, y = xi[..., 0], xi[..., 1]
    vals, dx, dy = [], [], []
    for a, b in exps:
        vals.append(x ** a * y ** b)
        dx.append(a * x ** max(a - 1, 0) * y ** b)
        dy.append(b * x ** a * y ** max(b - 1, 0))
    return np.stack(vals, -1), np.stack(dx, -1), np.stack(dy, -1)


def _strain_operator(dx, dy, rho):
    n = dx.shape[-1]
    B = np.zeros(dx.shape[:-1] + (3, 2 * n))
    r = rho.reshape(rho.shape + (1,) * (dx.ndim - 1))
    B[..., 0, :n] = dx / r
    B[..., 1, n:] = dy / r
    B[..., 2, :n] = dy / r
    B[..., 2, n:] = dx / r
    return B


def rigid_modes(degree):
    """Coefficient vectors of the two translations and the rotation (−η, ξ)."""
    exps = monomial_exponents(degree)
    n = len(exps)
    R = np.zeros((2 * n, 3))
    R[exps.index((0, 0)), 0] = 1.0
    R[n + exps.index((0, 0)), 1] = 1.0
    R[exps.index((0, 1)), 2] = -1.0
    R[n + exps.index((1, 0)), 2] = 1.0
    return R


@dataclass(frozen=True)
class AdmissibleStressField:
    """σ̂ = H ε(w) with w a degree-p polynomial displacement per element."""
    elements: np.ndarray      # (m,)
    coefficients: np.ndarray  # (m, 2n) monomial coefficients, ux block then uy block
    centres: np.ndarray       # (m, 2)
    rho: np.ndarray           # (m,)
    vertices: np.ndarray      # (m, 3, 2)
    hooke: np.ndarray         # (m, 3, 3)
    degree: int
    mode: str = CLASSICAL
    iteration: int = None
    subdomain: np.ndarray = field(default=None, repr=False)  # (m,) owner, DD mode only

    def points(self, bary):
        return np.einsum("qk,ekd->eqd", bary, self.vertices)

    def stress_at(self, bary):
        """σ̂ at barycentric points (Q, 3), shape (m, Q, 3)."""
        xi = (self.points(bary) - self.centres[:, None, :]) / self.rho[:, None, None]
        _, dx, dy = _monomials(xi, monomial_exponents(self.degree))
        B = _strain_operator(dx, dy, self.rho)
        return np.einsum("eij,eqjk,ek->eqi", self.hooke, B, self.coefficients)

    def mean_stress(self):
        bary, w = triangle_quadrature(self.degree)
        return np.einsum("eqi,q->ei", self.stress_at(bary), w)

    def restrict(self, mask):
        return AdmissibleStressField(
            elements=self.elements[mask],
            coefficients=self.coefficients[mask],
            centres=self.centres[mask],
            rho=self.rho[mask],
            vertices=self.vertices[mask],
            hooke=self.hooke[mask],
            degree=self.degree,
            mode=self.mode,
            iteration=self.iteration,
            subdomain=None if self.subdomain is None else self.subdomain[mask],
        )

    @classmethod
    def concatenate(cls, fields, iteration=None):
        order = np.argsort(np.concatenate([f.elements for f in fields]), kind="stable")

        def cat(name):
            return np.concatenate([getattr(f, name) for f in fields])[order]

        subdomain = None
        if all(f.subdomain is not None for f in fields):
            subdomain = cat("subdomain")
        return cls(
            elements=cat("elements"),
            coefficients=cat("coefficients"),
            centres=cat("centres"),
            rho=cat("rho"),
            vertices=cat("vertices"),
            hooke=cat("hooke"),
            degree=fields[0].degree,
            mode=fields[0].mode,
            iteration=iteration,
            subdomain=subdomain,
        )


def element_neumann_solve(mesh, materials, loads, density, elements=None, degree=4, mode=CLASSICAL):
    """Batched element problems ∫ H ε(w):ε(v) = ∫ f·v + ∫_∂E δĥ·v over degree-p fields v.

    Rigid modes are removed by the coefficient constraints Rᵀc = 0; the data
    must be balanced against them.
    """
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")
    els = np.arange(mesh.n_elements) if elements is None else np.asarray(elements, dtype=np.int64)
    xy = mesh.nodes[mesh.elements[els]]
    centres = xy.mean(axis=1)
    rho = np.linalg.norm(xy - centres[:, None, :], axis=2).max(axis=1)
    H = materials.element_hooke(mesh)[els]
    areas = mesh.areas[els]
    exps = monomial_exponents(degree)
    n = len(exps)

    bary, w = triangle_quadrature(2 * degree)
    pts = np.einsum("qk,ekd->eqd", bary, xy)
    V, dx, dy = _monomials((pts - centres[:, None, :]) / rho[:, None, None], exps)
    B = _strain_operator(dx, dy, rho)
    K = np.einsum("e,q,eqki,ekl,eqlj->eij", areas, w, B, H, B)

    F = np.zeros((len(els), 2 * n))
    F_abs = np.zeros(len(els))
    body = np.asarray(loads.body, dtype=float)
    if np.any(body):
        load = areas[:, None] * np.einsum("q,eqj->ej", w, V)
        F[:, :n] += body[0] * load
        F[:, n:] += body[1] * load
        F_abs += np.abs(body).sum() * areas

    s, ws = segment_quadrature(degree + 2)
    for k in range(3):
        side = density.element_side(mesh, els, k)
        a, b = xy[:, k], xy[:, (k + 1) % 3]
        ell = np.linalg.norm(b - a, axis=1)
        p = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
        t = (1.0 - s)[None, :, None] * side[:, 0, None, :] + s[None, :, None] * side[:, 1, None, :]
        Ve, _, _ = _monomials((p - centres[:, None, :]) / rho[:, None, None], exps)
        F[:, :n] += ell[:, None] * np.einsum("q,eq,eqj->ej", ws, t[..., 0], Ve)
        F[:, n:] += ell[:, None] * np.einsum("q,eq,eqj->ej", ws, t[..., 1], Ve)
        F_abs += ell * np.abs(side).max(axis=(1, 2))

    Rm = rigid_modes(degree)
    unbalance = np.abs(F @ Rm).max(axis=1)
    bad = np.flatnonzero(unbalance > BALANCE_RTOL * F_abs + np.finfo(float).tiny)
    if len(bad):
        raise EquilibrationError(
            f"element {int(els[bad[0]])} has unbalanced Neumann data (resultant {unbalance[bad[0]]:.3e})"
        )

    m = len(els)
    size = 2 * n + 3
    system = np.zeros((m, size, size))
    system[:, :2 * n, :2 * n] = K
    system[:, :2 * n, 2 * n:] = Rm
    system[:, 2 * n:, :2 * n] = Rm.T
    rhs = np.zeros((m, size))
    rhs[:, :2 * n] = F
    coeffs = np.linalg.solve(system, rhs[..., None])[..., 0][:, :2 * n] if m else np.zeros((0, 2 * n))
    return AdmissibleStressField(
        elements=els,
        coefficients=coeffs,
        centres=centres,
        rho=rho,
        vertices=xy,
        hooke=H,
        degree=degree,
        mode=mode,
    )


def weak_equilibrium_residual(mesh, field, loads):
    """∫σ̂:ε(φ) − ∫f·φ − ∫g·φ at every P1 dof off the Dirichlet boundary, with the magnitude of the terms."""
    grads, areas = shape_gradients(field.vertices)
    local = areas[:, None] * np.einsum("eij,ei->ej", strain_matrix(grads), field.mean_stress())
    dofs = element_dofs(mesh, field.elements).ravel()
    internal = np.zeros(mesh.n_dofs)
    np.add.at(internal, dofs, local.ravel())
    magnitude = np.zeros(mesh.n_dofs)
    np.add.at(magnitude, dofs, np.abs(local).ravel())
    F = assemble_loads(mesh, loads, field.elements)
    free = np.ones(mesh.n_dofs, dtype=bool)
    free[mesh.dirichlet_dofs] = False
    return (internal - F)[free], magnitude[free] + np.abs(F[free])
