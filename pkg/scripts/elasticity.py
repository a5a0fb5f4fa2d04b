"""P1 线弹性有限元：Hooke 张量、单元刚度、组装、边界条件、能量范数

Voigt 记号 (σxx, σyy, σxy)，应变使用工程剪应变 γxy。
"""
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from numpy.polynomial.legendre import leggauss
from scipy.sparse.linalg import splu

from errors import SolverError
from mesh import NEUMANN_TOP, node_dofs

RESIDUAL_TOL = 1e-10


def hooke(young, poisson, plane="stress"):
    """Isotropic 3x3 Voigt Hooke matrix (plane stress or plane strain)."""
    if young <= 0:
        raise ValueError(f"Young modulus must be positive, got {young}")
    if not 0 <= poisson < 0.5:
        raise ValueError(f"Poisson ratio must lie in [0, 0.5), got {poisson}")
    if plane == "stress":
        c = young / (1.0 - poisson ** 2)
        return c * np.array([
            [1.0, poisson, 0.0],
            [poisson, 1.0, 0.0],
            [0.0, 0.0, 0.5 * (1.0 - poisson)],
        ])
    if plane == "strain":
        c = young / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
        return c * np.array([
            [1.0 - poisson, poisson, 0.0],
            [poisson, 1.0 - poisson, 0.0],
            [0.0, 0.0, 0.5 - poisson],
        ])
    raise ValueError(f"plane must be 'stress' or 'strain', got {plane!r}")


@dataclass(frozen=True)
class MaterialField:
    """Material id -> (E, ν), shared plane assumption."""
    properties: dict
    plane: str = "stress"

    @classmethod
    def two_phase(cls, young, ratio, poisson=0.3, plane="stress"):
        """Matrix (id 1) with modulus young, inclusions (id 2) with young*ratio."""
        return cls({1: (float(young), float(poisson)), 2: (float(young) * ratio, float(poisson))}, plane)

    def hooke_for(self, material):
        young, poisson = self.properties[int(material)]
        return hooke(young, poisson, self.plane)

    def element_hooke(self, mesh):
        table = {m: self.hooke_for(m) for m in self.properties}
        return np.stack([table[int(m)] for m in mesh.material_id])

    def element_young(self, mesh):
        return np.array([self.properties[int(m)][0] for m in mesh.material_id])


@dataclass(frozen=True)
class Loads:
    """Uniform top-edge traction (gx, gy) and constant body force."""
    traction: tuple = (1.0, 1.0)
    body: tuple = (0.0, 0.0)

    @classmethod
    def benchmark(cls, traction=1.0, shear=1.0, body=(0.0, 0.0)):
        return cls((float(shear), float(traction)), (float(body[0]), float(body[1])))

    def scaled(self, factor):
        return Loads(tuple(factor * g for g in self.traction), tuple(factor * f for f in self.body))


# ── Quadrature ──
@lru_cache(maxsize=None)
def triangle_quadrature(degree):
    """Collapsed Gauss rule exact to the given degree.

    Returns barycentric points (Q, 3) and weights (Q,) summing to 1, so that
    ∫_E g = area · Σ w g(x_q).
    """
    k = max(1, (degree + 2) // 2 + (degree % 2))
    x, wx = leggauss(k)
    u = 0.5 * (x + 1.0)
    wu = 0.5 * wx
    uu, vv = np.meshgrid(u, u, indexing="ij")
    ww = np.outer(wu, wu) * (1.0 - uu)
    px = uu.ravel()
    py = (vv * (1.0 - uu)).ravel()
    bary = np.column_stack((1.0 - px - py, px, py))
    weights = 2.0 * ww.ravel()
    return bary, weights


@lru_cache(maxsize=None)
def segment_quadrature(npts):
    """Gauss–Legendre on [0, 1] with weights summing to 1."""
    x, w = leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


# ── P1 kinematics ──
def shape_gradients(xy):
    """Gradients of the three P1 shape functions, xy of shape (..., 3, 2)."""
    x, y = xy[..., 0], xy[..., 1]
    area2 = (x[..., 1] - x[..., 0]) * (y[..., 2] - y[..., 0]) - (x[..., 2] - x[..., 0]) * (y[..., 1] - y[..., 0])
    gx = np.stack((y[..., 1] - y[..., 2], y[..., 2] - y[..., 0], y[..., 0] - y[..., 1]), axis=-1)
    gy = np.stack((x[..., 2] - x[..., 1], x[..., 0] - x[..., 2], x[..., 1] - x[..., 0]), axis=-1)
    grads = np.stack((gx, gy), axis=-1) / area2[..., None, None]
    return grads, 0.5 * area2


def strain_matrix(grads):
    """B of shape (..., 3, 6) for dof order (u1x, u1y, u2x, u2y, u3x, u3y)."""
    shape = grads.shape[:-2]
    B = np.zeros(shape + (3, 6))
    B[..., 0, 0::2] = grads[..., 0]
    B[..., 1, 1::2] = grads[..., 1]
    B[..., 2, 0::2] = grads[..., 1]
    B[..., 2, 1::2] = grads[..., 0]
    return B


def element_stiffness(xy, H):
    xy = np.asarray(xy, dtype=float)
    grads, area = shape_gradients(xy)
    if area <= 1e-14 * max(1.0, np.ptp(xy) ** 2):
        raise ValueError(f"degenerate or clockwise triangle (area={area:g})")
    B = strain_matrix(grads)
    return area * B.T @ H @ B


def element_dofs(mesh, elements=None):
    tri = mesh.elements if elements is None else mesh.elements[elements]
    return np.stack((2 * tri, 2 * tri + 1), axis=-1).reshape(len(tri), 6)


def assemble(mesh, materials, loads, elements=None):
    """Global-size stiffness K (csr) and load F over the given element subset."""
    els = np.arange(mesh.n_elements) if elements is None else np.asarray(elements)
    grads, areas = shape_gradients(mesh.nodes[mesh.elements[els]])
    B = strain_matrix(grads)
    H = materials.element_hooke(mesh)[els]
    Ke = areas[:, None, None] * np.einsum("eki,ekl,elj->eij", B, H, B)
    dofs = element_dofs(mesh, els)
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(mesh.n_dofs,) * 2).tocsr()
    return K, assemble_loads(mesh, loads, elements)


def assemble_loads(mesh, loads, elements=None):
    """Consistent P1 load vector of the body force and the top-edge traction."""
    els = np.arange(mesh.n_elements) if elements is None else np.asarray(elements)
    F = np.zeros(mesh.n_dofs)
    body = np.asarray(loads.body, dtype=float)
    if np.any(body):
        areas = mesh.areas[els]
        share = np.repeat(areas / 3.0, 3)
        nodes = mesh.elements[els].ravel()
        np.add.at(F, 2 * nodes, share * body[0])
        np.add.at(F, 2 * nodes + 1, share * body[1])

    g = np.asarray(loads.traction, dtype=float)
    if np.any(g):
        edges = mesh.edges
        top = np.flatnonzero(edges.tags == NEUMANN_TOP)
        if elements is not None:
            inside = np.zeros(mesh.n_elements, dtype=bool)
            inside[els] = True
            top = top[inside[edges.elements[top, 0]]]
        half = 0.5 * edges.lengths[top]
        for end in (0, 1):
            nodes = edges.nodes[top, end]
            np.add.at(F, 2 * nodes, half * g[0])
            np.add.at(F, 2 * nodes + 1, half * g[1])
    return F


def solve_dirichlet(K, F, dofs, values=None):
    """Row/column elimination of the Dirichlet dofs, sparse LU on the rest."""
    n = K.shape[0]
    fixed = np.zeros(n, dtype=bool)
    fixed[np.asarray(dofs, dtype=np.int64)] = True
    free = np.flatnonzero(~fixed)
    u = np.zeros(n)
    if values is not None:
        u[fixed] = np.broadcast_to(np.asarray(values, dtype=float), (int(fixed.sum()),))
    K = K.tocsr()
    rhs = F[free] - K[free][:, fixed] @ u[fixed]
    Kff = K[free][:, free].tocsc()
    try:
        u[free] = splu(Kff).solve(rhs)
    except RuntimeError as exc:
        raise SolverError(f"reduced stiffness is singular ({exc}); check Dirichlet conditions") from exc
    residual = np.linalg.norm(Kff @ u[free] - rhs)
    scale = max(np.linalg.norm(rhs), np.linalg.norm(F), np.finfo(float).tiny)
    if not np.isfinite(residual) or residual > RESIDUAL_TOL * scale:
        raise SolverError(f"reduced system solved with relative residual {residual / scale:.3e}")
    return u


def energy_norm(K, u):
    return float(np.sqrt(max(u @ (K @ u), 0.0)))


def element_strains(mesh, u, elements=None):
    els = np.arange(mesh.n_elements) if elements is None else np.asarray(elements)
    grads, _ = shape_gradients(mesh.nodes[mesh.elements[els]])
    B = strain_matrix(grads)
    ue = u[element_dofs(mesh, els)]
    return np.einsum("eij,ej->ei", B, ue)


def element_stresses(mesh, materials, u, elements=None):
    els = np.arange(mesh.n_elements) if elements is None else np.asarray(elements)
    H = materials.element_hooke(mesh)[els]
    return np.einsum("eij,ej->ei", H, element_strains(mesh, u, els))


def energy_contributions(mesh, materials, stress, elements=None, weights=None):
    """Per-element ∫ σ:H⁻¹:σ for constant (m, 3) or sampled (m, Q, 3) stress."""
    els = np.arange(mesh.n_elements) if elements is None else np.asarray(elements)
    Hinv = np.linalg.inv(materials.element_hooke(mesh)[els])
    areas = mesh.areas[els]
    stress = np.asarray(stress, dtype=float)
    if stress.ndim == 2:
        return areas * np.einsum("ei,eij,ej->e", stress, Hinv, stress)
    dens = np.einsum("eqi,eij,eqj->eq", stress, Hinv, stress)
    return areas * (dens @ weights)


def energy_seminorm(mesh, materials, stress, elements=None, weights=None):
    return float(np.sqrt(energy_contributions(mesh, materials, stress, elements, weights).sum()))


# ── Subdomain problems ──
@dataclass
class SubdomainProblem:
    """Local problem K(s) u = f(s) + t(s)ᵀλ on the free (non-Dirichlet) local dofs."""
    index: int
    elements: np.ndarray
    dofs: np.ndarray            # global dof id of each free local dof
    K: sp.csr_matrix
    f: np.ndarray
    gamma: np.ndarray           # local positions of Γ(s) dofs, Γ(s) order
    corner: np.ndarray          # local positions of corner dofs
    other: np.ndarray           # local positions of non-corner interface dofs (o)
    internal: np.ndarray        # local positions of internal dofs (i)
    remainder: np.ndarray       # r = i ∪ o, sorted
    gamma_corner: np.ndarray    # positions of c inside Γ(s)
    gamma_other: np.ndarray     # positions of o inside Γ(s)
    lift: np.ndarray = field(default=None, repr=False)  # global Dirichlet values on the subdomain

    @property
    def n_dofs(self):
        return len(self.dofs)

    def trace(self, u):
        return u[self.gamma]

    def extend(self, lam):
        """t(s)ᵀλ: extension by zero from Γ(s) to all local dofs."""
        out = np.zeros(self.n_dofs)
        out[self.gamma] = lam
        return out

    def to_global(self, u, n_dofs):
        out = np.zeros(n_dofs) if self.lift is None else self.lift.copy()
        out[self.dofs] = u
        return out


def build_subdomain_problems(mesh, topology, materials, loads, dirichlet_values=None):
    lift = np.zeros(mesh.n_dofs)
    if dirichlet_values is not None:
        lift[mesh.dirichlet_dofs] = dirichlet_values
    corner_node = np.zeros(mesh.n_nodes, dtype=bool)
    corner_node[topology.corners] = True
    problems = []
    for s in range(topology.n_subdomains):
        els = topology.subdomain_elements[s]
        nodes = topology.subdomain_nodes[s]
        free_nodes_mask = ~topology.dirichlet[nodes]
        all_dofs = node_dofs(nodes)
        dofs = all_dofs[np.repeat(free_nodes_mask, 2)]
        fixed = all_dofs[~np.repeat(free_nodes_mask, 2)]

        K_full, F_full = assemble(mesh, materials, loads, els)
        K = K_full[dofs][:, dofs].tocsr()
        f = F_full[dofs] - K_full[dofs][:, fixed] @ lift[fixed]

        position = {int(d): k for k, d in enumerate(dofs.tolist())}
        gamma = np.array([position[int(d)] for d in topology.gamma_dofs(s)], dtype=np.int64)
        gamma_nodes = np.repeat(topology.gamma[s], 2)
        is_corner = corner_node[gamma_nodes]
        gamma_corner = np.flatnonzero(is_corner)
        gamma_other = np.flatnonzero(~is_corner)
        corner = gamma[gamma_corner]
        other = gamma[gamma_other]
        internal_mask = np.ones(len(dofs), dtype=bool)
        internal_mask[gamma] = False
        internal = np.flatnonzero(internal_mask)
        remainder_mask = np.ones(len(dofs), dtype=bool)
        remainder_mask[corner] = False
        s_lift = np.zeros(mesh.n_dofs)
        s_lift[fixed] = lift[fixed]
        problems.append(SubdomainProblem(
            index=s,
            elements=els,
            dofs=dofs,
            K=K,
            f=f,
            gamma=gamma,
            corner=corner,
            other=other,
            internal=internal,
            remainder=np.flatnonzero(remainder_mask),
            gamma_corner=gamma_corner,
            gamma_other=gamma_other,
            lift=s_lift,
        ))
    return problems
