"""界面组装算子：原始 A、对偶 B（经典）、B_F（仅面）、循环核 R⟳ 与缩放伪逆

每个子域的列按 Γ(s) 的节点顺序排列，节点内 (x, y) 交错。
对偶算子的一行对应一个关系 (s, s', node, comp)，s < s'，
B(s) 取 +1，B(s') 取 −1。
"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from runlog import log


@dataclass(frozen=True)
class AssemblyOperator:
    kind: str            # primal | classic | faces, "~" suffix when scaled
    blocks: list         # per subdomain: (n_rows, #Γ(s) dofs)
    rows: np.ndarray     # primal: [node, comp]; dual: [s, s', node, comp]

    @property
    def n_rows(self):
        return len(self.rows)

    def assemble(self, vectors):
        """Σ_s block(s) · v(s)."""
        out = np.zeros(self.n_rows)
        for block, v in zip(self.blocks, vectors):
            out += block @ v
        return out

    def distribute(self, x):
        """[block(s)ᵀ · x for every s]."""
        return [block.T @ x for block in self.blocks]

    def stacked(self):
        return sp.hstack(self.blocks, format="csr")

    def restrict(self, row_mask, columns, kind=None):
        """Keep the masked rows and, per subdomain, the given column positions."""
        blocks = [b[row_mask][:, cols].tocsr() for b, cols in zip(self.blocks, columns)]
        return AssemblyOperator(kind or self.kind, blocks, self.rows[row_mask])


def _column(topology, s, node, comp):
    return 2 * topology.gamma_position(s, node) + comp


def build_primal(topology):
    index = {int(v): k for k, v in enumerate(topology.primal.tolist())}
    rows = np.array([(v, c) for v in topology.primal.tolist() for c in (0, 1)], dtype=np.int64).reshape(-1, 2)
    blocks = []
    for s in range(topology.n_subdomains):
        g = topology.gamma[s]
        cols = np.arange(2 * len(g))
        r = np.array([2 * index[int(v)] + c for v in g.tolist() for c in (0, 1)], dtype=np.int64)
        blocks.append(sp.csr_matrix(
            (np.ones(len(cols), dtype=np.int8), (r, cols)), shape=(len(rows), len(cols))
        ))
    return AssemblyOperator("primal", blocks, rows)


def _build_dual(topology, pairs, kind):
    rows = []
    entries = [([], [], []) for _ in range(topology.n_subdomains)]
    for (a, b), nodes in pairs.items():
        for v in nodes.tolist():
            for c in (0, 1):
                r = len(rows)
                rows.append((a, b, v, c))
                for s, sign in ((a, 1), (b, -1)):
                    entries[s][0].append(sign)
                    entries[s][1].append(r)
                    entries[s][2].append(_column(topology, s, v, c))
    rows = np.array(rows, dtype=np.int64).reshape(-1, 4)
    blocks = [
        sp.csr_matrix((np.array(d, dtype=np.int8), (np.array(r, dtype=np.int64), np.array(c, dtype=np.int64))),
                      shape=(len(rows), 2 * len(topology.gamma[s])))
        for s, (d, r, c) in enumerate(entries)
    ]
    return AssemblyOperator(kind, blocks, rows)


def build_dual_classic(topology):
    return _build_dual(topology, topology.classic_pairs, "classic")


def build_dual_faces(topology):
    return _build_dual(topology, topology.face_pairs, "faces")


# ── Cyclic kernel ──
@dataclass(frozen=True)
class CyclicKernelBasis:
    matrix: sp.csr_matrix   # (n_face_rows, 2 · #cycles)
    points: np.ndarray      # multiple point of each column
    comps: np.ndarray       # direction of each column

    @property
    def n_columns(self):
        return self.matrix.shape[1]


def _cycle_order(mesh, topology, node):
    """Subdomains around node, counterclockwise by the angle of their local centroid."""
    subs = topology.node_subdomains[node]
    around = mesh.node_elements[node]
    owner = np.zeros(mesh.n_elements, dtype=np.int64)
    for s, els in enumerate(topology.subdomain_elements):
        owner[els] = s
    angles = []
    for s in subs:
        local = around[owner[around] == s]
        centre = mesh.centroids[local].mean(axis=0) - mesh.nodes[node]
        angles.append(np.arctan2(centre[1], centre[0]))
    return [subs[k] for k in np.argsort(angles, kind="stable")]


def build_cyclic_kernel(mesh, topology, faces):
    row_of = {tuple(r): k for k, r in enumerate(faces.rows.tolist())}
    data, rows, cols, points, comps = [], [], [], [], []
    for v in topology.multiple_points.tolist():
        order = _cycle_order(mesh, topology, v)
        m = len(order)
        cycle = [(order[k], order[(k + 1) % m]) for k in range(m)]
        relations = {(a, b) for (a, b, node, c) in faces.rows.tolist() if node == v and c == 0}
        if len(relations) != m or any((min(p), max(p)) not in relations for p in cycle):
            log(f"multiple point {v}: face relations do not form a single cycle, skipped", "DEBUG")
            continue
        for c in (0, 1):
            col = len(points)
            for a, b in cycle:
                rows.append(row_of[(min(a, b), max(a, b), v, c)])
                cols.append(col)
                data.append(1 if a < b else -1)
            points.append(v)
            comps.append(c)
    matrix = sp.csr_matrix(
        (np.array(data, dtype=np.int8), (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64))),
        shape=(faces.n_rows, len(points)),
    )
    return CyclicKernelBasis(matrix, np.array(points, dtype=np.int64), np.array(comps, dtype=np.int64))


# ── Space split ──
@dataclass(frozen=True)
class SpaceSplitReport:
    n_gamma: int
    primal_rank: int
    dual_rank: int
    reconstruction_residual: float
    orthogonality: float

    @property
    def ok(self):
        return (
            self.primal_rank + self.dual_rank == self.n_gamma
            and self.reconstruction_residual <= 1e-10
            and self.orthogonality <= 1e-10
        )


def verify_space_split(primal, dual, v=None, seed=0):
    """Decompose v = Aᵀx + Bᵀy and check the orthogonal direct sum."""
    At = sp.vstack([b.T for b in primal.blocks], format="csr").astype(float)
    Bt = sp.vstack([b.T for b in dual.blocks], format="csr").astype(float)
    n_gamma = At.shape[0]
    if v is None:
        v = np.random.default_rng(seed).standard_normal(n_gamma)
    multiplicity = np.asarray(At.sum(axis=0)).ravel()
    x = (At.T @ v) / multiplicity
    primal_part = At @ x
    dual_part = v - primal_part
    Bd = Bt.toarray()
    y, *_ = sla.lstsq(Bd, dual_part)
    scale = max(np.linalg.norm(v), np.finfo(float).tiny)
    residual = np.linalg.norm(primal_part + Bd @ y - v) / scale
    ortho = abs(primal_part @ (Bd @ y)) / scale ** 2
    return SpaceSplitReport(
        n_gamma=n_gamma,
        primal_rank=int(np.linalg.matrix_rank(At.toarray())),
        dual_rank=int(np.linalg.matrix_rank(Bd)) if Bd.size else 0,
        reconstruction_residual=float(residual),
        orthogonality=float(ortho),
    )


# ── Scaled operators ──
@dataclass(frozen=True)
class ScaledAssemblyOperator:
    weights: str
    primal: AssemblyOperator   # Ã(s) = A(s) D(s)
    dual: AssemblyOperator     # B̃(s): each side weighted by the opposite side's share
    deltas: list               # D(s) diagonal per subdomain


def build_scaled(topology, primal, dual, weights="stiffness", stiffness=None):
    """Ã and B̃ from multiplicity or stiffness-diagonal weights k_i(s)/Σ_j k_i(j)."""
    if weights == "stiffness":
        if stiffness is None:
            raise ValueError("stiffness scaling needs the K(s) diagonals on Γ(s)")
        k = [np.asarray(d, dtype=float) for d in stiffness]
    elif weights == "multiplicity":
        k = [np.ones(2 * len(g)) for g in topology.gamma]
    else:
        raise ValueError(f"unknown scaling {weights!r}")

    total = primal.assemble(k)
    deltas = [kk / (b.T @ total) for kk, b in zip(k, primal.blocks)]
    primal_scaled = AssemblyOperator(
        primal.kind + "~",
        [(b @ sp.diags(d)).tocsr() for b, d in zip(primal.blocks, deltas)],
        primal.rows,
    )

    entries = [([], [], []) for _ in range(topology.n_subdomains)]
    for r, (a, b, v, c) in enumerate(dual.rows.tolist()):
        ca = _column(topology, a, v, c)
        cb = _column(topology, b, v, c)
        for s, col, value in ((a, ca, deltas[b][cb]), (b, cb, -deltas[a][ca])):
            entries[s][0].append(value)
            entries[s][1].append(r)
            entries[s][2].append(col)
    blocks = [
        sp.csr_matrix((np.array(d, dtype=float), (np.array(r, dtype=np.int64), np.array(c, dtype=np.int64))),
                      shape=dual.blocks[s].shape)
        for s, (d, r, c) in enumerate(entries)
    ]
    return ScaledAssemblyOperator(weights, primal_scaled, AssemblyOperator(dual.kind + "~", blocks, dual.rows), deltas)
