"""基准几何、三角剖分、子域划分与界面拓扑

结构化 n×n 网格，每个单元沿左下→右上对角线切成两个三角形。
夹杂（inclusion）为与网格对齐的正方形，材料编号 2，基体为 1。
底边固支（dirichlet），顶边受载（neumann_top），两侧自由（free）。
"""
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations

import meshio
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from errors import MeshError

DIRICHLET = "dirichlet"
NEUMANN_TOP = "neumann_top"
FREE = "free"

SCHEMES = ("single", "inclusions5", "grid3x3", "strips18", "grid6x6")

# 网格对齐判定容差（以网格步长为单位）
ALIGN_TOL = 1e-9


def node_dofs(nodes):
    """Interleaved (ux, uy) dof ids of the given nodes."""
    nodes = np.asarray(nodes, dtype=np.int64)
    return np.column_stack((2 * nodes, 2 * nodes + 1)).ravel()


@dataclass(frozen=True)
class MeshEdges:
    """Unique mesh edges; local edge k of an element joins vertices k and k+1."""
    nodes: np.ndarray          # (n_e, 2) sorted node pairs
    elements: np.ndarray       # (n_e, 2) adjacent elements, -1 when absent
    element_edges: np.ndarray  # (M, 3)
    lengths: np.ndarray        # (n_e,)
    tags: np.ndarray           # (n_e,) boundary tag, "" on interior edges

    def __len__(self):
        return len(self.nodes)

    def is_boundary(self):
        return self.elements[:, 1] < 0


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray            # (N, 2)
    elements: np.ndarray         # (M, 3), counterclockwise
    boundary_edges: np.ndarray   # (B, 2), oriented along the counterclockwise boundary
    boundary_tags: np.ndarray    # (B,)
    material_id: np.ndarray      # (M,)
    grid_n: int
    length: float
    inclusions: tuple = ()

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def n_dofs(self):
        return 2 * len(self.nodes)

    @property
    def h(self):
        return self.length / self.grid_n

    @cached_property
    def areas(self):
        p = self.nodes[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def centroids(self):
        return self.nodes[self.elements].mean(axis=1)

    @cached_property
    def dirichlet_nodes(self):
        edges = self.boundary_edges[self.boundary_tags == DIRICHLET]
        return np.unique(edges)

    @cached_property
    def dirichlet_dofs(self):
        return node_dofs(self.dirichlet_nodes)

    @cached_property
    def node_elements(self):
        """For each node, the sorted ids of the elements containing it."""
        flat = self.elements.ravel()
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=self.n_nodes)
        owners = order // 3
        return np.split(owners, np.cumsum(counts)[:-1])

    @cached_property
    def edges(self):
        local = np.stack(
            [self.elements[:, [0, 1]], self.elements[:, [1, 2]], self.elements[:, [2, 0]]],
            axis=1,
        ).reshape(-1, 2)
        pairs = np.sort(local, axis=1)
        unique, inverse = np.unique(pairs, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        adjacent = np.full((len(unique), 2), -1, dtype=np.int64)
        for idx, eid in enumerate(inverse):
            slot = 0 if adjacent[eid, 0] < 0 else 1
            adjacent[eid, slot] = idx // 3
        vec = self.nodes[unique[:, 1]] - self.nodes[unique[:, 0]]
        lengths = np.hypot(vec[:, 0], vec[:, 1])
        tags = np.full(len(unique), "", dtype=object)
        lookup = {tuple(p): i for i, p in enumerate(unique.tolist())}
        for (a, b), tag in zip(self.boundary_edges.tolist(), self.boundary_tags):
            tags[lookup[(min(a, b), max(a, b))]] = tag
        return MeshEdges(
            nodes=unique,
            elements=adjacent,
            element_edges=inverse.reshape(-1, 3),
            lengths=lengths,
            tags=tags,
        )


def check_mesh(mesh):
    """Raise MeshError when a structural invariant is broken."""
    if np.any(mesh.areas <= 0):
        bad = int(np.argmin(mesh.areas))
        raise MeshError(f"element {bad} has non-positive signed area")
    used = np.zeros(mesh.n_nodes, dtype=bool)
    used[mesh.elements.ravel()] = True
    if not used.all():
        raise MeshError(f"{int((~used).sum())} nodes belong to no element")
    edges = mesh.edges
    n_open = int(edges.is_boundary().sum())
    if n_open != len(mesh.boundary_edges):
        raise MeshError(
            f"boundary edges do not close the domain ({len(mesh.boundary_edges)} tagged, {n_open} open)"
        )
    # 两个单元共享的边在两侧的走向相反
    for eid in np.flatnonzero(~edges.is_boundary()):
        a, b = edges.nodes[eid]
        signs = []
        for e in edges.elements[eid]:
            tri = mesh.elements[e].tolist()
            k = tri.index(a)
            signs.append(1 if tri[(k + 1) % 3] == b else -1)
        if signs[0] == signs[1]:
            raise MeshError(f"edge {eid} has the same orientation in both elements")


# ── Benchmark geometry ──
def default_inclusions(length=1.0):
    """Four squares of side L/6 centred at (L/4, L/4), (3L/4, L/4), (L/4, 3L/4), (3L/4, 3L/4)."""
    half = length / 12.0
    centres = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
    return [
        (cx * length - half, cy * length - half, cx * length + half, cy * length + half)
        for cx, cy in centres
    ]


def _grid_box(box, n, length):
    h = length / n
    idx = []
    for value in box:
        g = value / h
        if abs(g - round(g)) > ALIGN_TOL * max(1.0, abs(g)):
            raise MeshError(f"inclusion {tuple(box)} is not aligned with the {n}x{n} grid (h={h:g})")
        idx.append(int(round(g)))
    i0, j0, i1, j1 = idx
    if not (0 < i0 < i1 < n and 0 < j0 < j1 < n):
        raise MeshError(f"inclusion {tuple(box)} is empty or not interior to the square")
    return i0, j0, i1, j1


def generate_benchmark_mesh(n, length=1.0, inclusions=()):
    if n < 4:
        raise MeshError(f"n must be >= 4, got {n}")
    if length <= 0:
        raise MeshError(f"length must be positive, got {length}")

    boxes = [_grid_box(box, n, length) for box in inclusions]
    cell_material = np.ones((n, n), dtype=np.int64)  # [j, i]
    for k, (i0, j0, i1, j1) in enumerate(boxes):
        if np.any(cell_material[j0:j1, i0:i1] == 2):
            raise MeshError(f"inclusion {tuple(inclusions[k])} overlaps another inclusion")
        cell_material[j0:j1, i0:i1] = 2

    h = length / n
    jj, ii = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    nodes = np.column_stack((ii.ravel() * h, jj.ravel() * h))

    cj, ci = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    a = (cj * (n + 1) + ci).ravel()
    b = a + 1
    d = a + n + 1
    c = d + 1
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = np.column_stack((a, b, c))
    elements[1::2] = np.column_stack((a, c, d))
    material = np.repeat(cell_material.ravel(), 2)

    s = np.arange(n)
    bottom = np.column_stack((s, s + 1))
    right = np.column_stack((s * (n + 1) + n, (s + 1) * (n + 1) + n))
    top = np.column_stack((n * (n + 1) + n - s, n * (n + 1) + n - s - 1))
    left = np.column_stack(((n - s) * (n + 1), (n - s - 1) * (n + 1)))
    boundary = np.vstack((bottom, right, top, left))
    tags = np.array([DIRICHLET] * n + [FREE] * n + [NEUMANN_TOP] * n + [FREE] * n, dtype=object)

    return Mesh(
        nodes=nodes,
        elements=elements,
        boundary_edges=boundary,
        boundary_tags=tags,
        material_id=material,
        grid_n=n,
        length=float(length),
        inclusions=tuple(tuple(float(v) for v in box) for box in inclusions),
    )


def refine_mesh(mesh, k):
    """Nested k-times uniform refinement of a benchmark mesh."""
    return generate_benchmark_mesh(mesh.grid_n * k, mesh.length, mesh.inclusions)


# ── Partition ──
@dataclass(frozen=True)
class Partition:
    subdomain: np.ndarray  # (M,)
    n_subdomains: int
    scheme: str = ""

    @cached_property
    def elements(self):
        return [np.flatnonzero(self.subdomain == s) for s in range(self.n_subdomains)]


def _cells(mesh):
    n = mesh.grid_n
    cell = np.arange(mesh.n_elements) // 2
    return cell % n, cell // n


def partition_structured(mesh, scheme):
    n = mesh.grid_n
    ci, cj = _cells(mesh)
    if scheme == "single":
        sub = np.zeros(mesh.n_elements, dtype=np.int64)
    elif scheme in ("grid3x3", "grid6x6"):
        m = 3 if scheme == "grid3x3" else 6
        if n % m:
            raise MeshError(f"{scheme} needs n divisible by {m}, got n={n}")
        k = n // m
        sub = (cj // k) * m + ci // k
    elif scheme == "strips18":
        if n % 6:
            raise MeshError(f"strips18 needs n divisible by 6, got n={n}")
        k = n // 3
        I, J = ci // k, cj // k
        li, lj = ci - I * k, cj - J * k
        # 棋盘式切分：(I+J) 偶数竖切，奇数横切
        vertical = (I + J) % 2 == 0
        part = np.where(vertical, li // (k // 2), lj // (k // 2))
        sub = 2 * (J * 3 + I) + part
    elif scheme == "inclusions5":
        if not mesh.inclusions:
            raise MeshError("inclusions5 needs a mesh with inclusions")
        matrix = len(mesh.inclusions)
        sub = np.full(mesh.n_elements, matrix, dtype=np.int64)
        x, y = mesh.centroids[:, 0], mesh.centroids[:, 1]
        for k, (x0, y0, x1, y1) in enumerate(mesh.inclusions):
            sub[(x > x0) & (x < x1) & (y > y0) & (y < y1)] = k
    else:
        raise MeshError(f"unknown partition scheme {scheme!r} (expected one of {', '.join(SCHEMES)})")
    partition = Partition(subdomain=np.asarray(sub, dtype=np.int64),
                          n_subdomains=int(sub.max()) + 1, scheme=scheme)
    check_partition(mesh, partition)
    return partition


def check_partition(mesh, partition):
    """Every subdomain must be non-empty and edge-connected."""
    sub = partition.subdomain
    if len(sub) != mesh.n_elements:
        raise MeshError("partition does not cover every element exactly once")
    counts = np.bincount(sub, minlength=partition.n_subdomains)
    if np.any(counts == 0):
        raise MeshError(f"empty subdomains: {np.flatnonzero(counts == 0).tolist()}")
    edges = mesh.edges
    inner = edges.elements[~edges.is_boundary()]
    same = sub[inner[:, 0]] == sub[inner[:, 1]]
    e1, e2 = inner[same, 0], inner[same, 1]
    graph = coo_matrix((np.ones(len(e1)), (e1, e2)), shape=(mesh.n_elements,) * 2)
    _, labels = connected_components(graph, directed=False)
    for s in range(partition.n_subdomains):
        if len(np.unique(labels[sub == s])) != 1:
            raise MeshError(f"subdomain {s} is not edge-connected")


# ── Interface topology ──
@dataclass(frozen=True)
class InterfaceTopology:
    n_subdomains: int
    node_subdomains: tuple       # per node: sorted subdomain ids
    multiplicity: np.ndarray     # (N,)
    dirichlet: np.ndarray        # (N,) bool
    gamma: list                  # Γ(s): sorted non-Dirichlet boundary nodes
    primal: np.ndarray           # Υ_p nodes
    classic_pairs: dict          # (s, s') -> shared non-Dirichlet nodes
    face_pairs: dict             # (s, s') -> non-Dirichlet nodes of shared edges
    pair_edges: dict             # (s, s') -> shared mesh edges
    corners: np.ndarray
    multiple_points: np.ndarray  # multiplicity >= 3, non-Dirichlet
    subdomain_elements: list
    subdomain_nodes: list
    _gamma_index: list = field(default_factory=list, repr=False)

    def gamma_dofs(self, s):
        return node_dofs(self.gamma[s])

    def gamma_position(self, s, node):
        """Position of node inside Γ(s); dof positions are 2*pos + comp."""
        return self._gamma_index[s][int(node)]

    @property
    def n_primal_dofs(self):
        return 2 * len(self.primal)

    @property
    def n_classic_relations(self):
        return 2 * sum(len(v) for v in self.classic_pairs.values())

    @property
    def n_face_relations(self):
        return 2 * sum(len(v) for v in self.face_pairs.values())


def _chain_corners(mesh, edge_ids):
    """Endpoints of the edge chains in edge_ids; closed loops contribute their kinks."""
    edges = mesh.edges
    pairs = edges.nodes[edge_ids]
    local_nodes, inverse = np.unique(pairs, return_inverse=True)
    inverse = inverse.reshape(-1, 2)
    degree = np.bincount(inverse.ravel(), minlength=len(local_nodes))
    graph = coo_matrix(
        (np.ones(len(inverse)), (inverse[:, 0], inverse[:, 1])),
        shape=(len(local_nodes),) * 2,
    )
    n_comp, labels = connected_components(graph, directed=False)
    picked = set()
    for comp in range(n_comp):
        members = np.flatnonzero(labels == comp)
        ends = members[degree[members] == 1]
        if len(ends):
            picked.update(local_nodes[ends].tolist())
            continue
        for m in members:
            incident = np.flatnonzero((inverse == m).any(axis=1))
            dirs = []
            for row in incident:
                other = inverse[row, 1] if inverse[row, 0] == m else inverse[row, 0]
                dirs.append(mesh.nodes[local_nodes[other]] - mesh.nodes[local_nodes[m]])
            cross = dirs[0][0] * dirs[1][1] - dirs[0][1] * dirs[1][0]
            if abs(cross) > 1e-12 * mesh.length ** 2:
                picked.add(int(local_nodes[m]))
    return picked


def build_interface_topology(mesh, partition):
    sub = partition.subdomain
    n_sd = partition.n_subdomains
    dirichlet = np.zeros(mesh.n_nodes, dtype=bool)
    dirichlet[mesh.dirichlet_nodes] = True

    node_sets = [set() for _ in range(mesh.n_nodes)]
    for e, tri in enumerate(mesh.elements.tolist()):
        for v in tri:
            node_sets[v].add(int(sub[e]))
    node_subdomains = tuple(tuple(sorted(s)) for s in node_sets)
    multiplicity = np.array([len(s) for s in node_subdomains], dtype=np.int64)
    interface = (multiplicity >= 2) & ~dirichlet

    subdomain_elements = list(partition.elements)
    subdomain_nodes = [np.unique(mesh.elements[els]) for els in subdomain_elements]
    gamma = [nodes[interface[nodes]] for nodes in subdomain_nodes]
    primal = np.flatnonzero(interface)

    classic = {}
    for v in primal.tolist():
        for pair in combinations(node_subdomains[v], 2):
            classic.setdefault(pair, []).append(v)
    classic = {k: np.array(v, dtype=np.int64) for k, v in sorted(classic.items())}

    edges = mesh.edges
    pair_edges = {}
    for eid in np.flatnonzero(~edges.is_boundary()).tolist():
        s1, s2 = sub[edges.elements[eid]]
        if s1 != s2:
            pair_edges.setdefault((int(min(s1, s2)), int(max(s1, s2))), []).append(eid)
    pair_edges = {k: np.array(v, dtype=np.int64) for k, v in sorted(pair_edges.items())}

    face = {}
    for pair, eids in pair_edges.items():
        nodes = np.unique(edges.nodes[eids])
        face[pair] = nodes[~dirichlet[nodes]]

    multiple = np.flatnonzero((multiplicity >= 3) & ~dirichlet)
    corner_set = set(multiple.tolist())
    for eids in pair_edges.values():
        corner_set.update(_chain_corners(mesh, eids))
    corners = np.array(sorted(v for v in corner_set if not dirichlet[v]), dtype=np.int64)

    gamma_index = [{int(v): k for k, v in enumerate(g.tolist())} for g in gamma]
    return InterfaceTopology(
        n_subdomains=n_sd,
        node_subdomains=node_subdomains,
        multiplicity=multiplicity,
        dirichlet=dirichlet,
        gamma=gamma,
        primal=primal,
        classic_pairs=classic,
        face_pairs=face,
        pair_edges=pair_edges,
        corners=corners,
        multiple_points=multiple,
        subdomain_elements=subdomain_elements,
        subdomain_nodes=subdomain_nodes,
        _gamma_index=gamma_index,
    )


# ── Export ──
def write_vtk(mesh, path, cell_data=None, partition=None):
    """Legacy ASCII VTK unstructured grid with material_id, subdomain_id and any extra cell fields.

    subdomain_id comes from the partition and is all zeros without one.
    """
    points = np.column_stack((mesh.nodes, np.zeros(mesh.n_nodes)))
    subdomain = np.zeros(mesh.n_elements, dtype=np.int64) if partition is None else partition.subdomain
    data = {
        "material_id": [np.asarray(mesh.material_id, dtype=np.int64)],
        "subdomain_id": [np.asarray(subdomain, dtype=np.int64)],
    }
    for name, values in (cell_data or {}).items():
        data[name] = [np.asarray(values)]
    out = meshio.Mesh(points, [("triangle", mesh.elements)], cell_data=data)
    meshio.write(str(path), out, file_format="vtk", binary=False)
