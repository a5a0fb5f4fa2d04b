"""FETI-DP（角点约束）求解器

主未知量为非角点界面上的 Λ_o，角点位移通过粗问题强制连续。
每一步迭代都给出三元组 (u_N, u_D, λ_N)：
  u_N, λ_N 局部平衡且界面力平衡；u_D 全局连续（运动学容许）。
算法残量满足 rᵀz = |||u_N − u_D|||²。

λ_N,o = B_oᵀΛ_o 以 K u = f + tᵀλ 的符号进入局部问题，残量 r(Λ) = r₀ + FΛ，
因此迭代沿 −w 更新 Λ、u_N 与 λ_c。
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from errors import SolverError
from interface_ops import build_primal, build_scaled
from runlog import log


@dataclass(frozen=True)
class CoarseProblem:
    matrix: np.ndarray        # K*_cc
    factor: tuple             # Cholesky factor of K*_cc, None when there are no corners
    assembly: list            # A_c(s): (#corner dofs, #c(s))
    corner_nodes: np.ndarray

    @property
    def size(self):
        return self.matrix.shape[0]

    def solve(self, rhs):
        if self.factor is None:
            return np.zeros(0)
        return sla.cho_solve(self.factor, rhs)


@dataclass(frozen=True)
class IterationState:
    iteration: int
    Lambda: np.ndarray
    r: np.ndarray
    z: np.ndarray
    rz: float
    u_N: list
    lambda_N: list   # on Γ(s): o part B_o(s)ᵀΛ, c part λ_c(s)
    u_D: list
    lambda_D: list

    @property
    def algebraic(self):
        return float(np.sqrt(max(self.rz, 0.0)))


class _LocalSolver:
    """Cached factorizations of one subdomain: K_rr for Solve_L, K_ii for Solve_S."""

    def __init__(self, problem):
        self.p = problem
        K = problem.K.tocsr()
        r, c, i, o = problem.remainder, problem.corner, problem.internal, problem.other
        self.K = K
        self.Krr = K[r][:, r].tocsc()
        self.Krc = K[r][:, c].tocsr()
        self.Kcc = K[c][:, c].toarray()
        self.Kio = K[i][:, o].tocsr()
        # o 在 r 中的位置
        pos = np.full(problem.n_dofs, -1, dtype=np.int64)
        pos[r] = np.arange(len(r))
        self.o_in_r = pos[o]
        try:
            self.lu_rr = splu(self.Krr) if len(r) else None
        except RuntimeError as exc:
            raise SolverError(
                f"K_rr of subdomain {problem.index} is singular ({exc}); the subdomain floats without corners"
            ) from exc
        try:
            self.lu_ii = splu(K[i][:, i].tocsc()) if len(i) else None
        except RuntimeError as exc:
            raise SolverError(f"K_ii of subdomain {problem.index} is singular ({exc})") from exc
        if len(c):
            self.Phi = self.lu_rr.solve(self.Krc.toarray()) if self.lu_rr else np.zeros((0, len(c)))
        else:
            self.Phi = np.zeros((len(r), 0))

    def schur_corner(self):
        return self.Kcc - self.Krc.T @ self.Phi


class FetiDPSolver:
    def __init__(self, problems, topology, classic, scaling="stiffness", threads=1):
        self.problems = problems
        self.topology = topology
        self.threads = max(1, int(threads))
        self._check_floating()
        self.local = self._map(_LocalSolver, problems)

        corner_pos = {int(v): k for k, v in enumerate(topology.corners.tolist())}
        n_c = 2 * len(topology.corners)
        assembly = []
        for p in problems:
            nodes = topology.gamma[p.index][p.gamma_corner // 2]
            rows = np.array([2 * corner_pos[int(v)] for v in nodes], dtype=np.int64) + p.gamma_corner % 2
            assembly.append(sp.csr_matrix(
                (np.ones(len(rows)), (rows, np.arange(len(rows)))), shape=(n_c, len(rows))
            ))
        matrix = np.zeros((n_c, n_c))
        for Ac, loc in zip(assembly, self.local):
            matrix += Ac @ (Ac @ loc.schur_corner()).T
        matrix = 0.5 * (matrix + matrix.T)
        factor = None
        if n_c:
            try:
                factor = sla.cho_factor(matrix)
            except sla.LinAlgError as exc:
                raise SolverError(f"coarse matrix K*_cc is not positive definite ({exc})") from exc
        self.coarse = CoarseProblem(matrix, factor, assembly, topology.corners)

        # B_o: 非角点界面上的经典对偶关系（这些点重数均为 2）
        corner_node = np.zeros(len(topology.multiplicity), dtype=bool)
        corner_node[topology.corners] = True
        row_mask = ~corner_node[classic.rows[:, 2]] if classic.n_rows else np.zeros(0, dtype=bool)
        columns = [p.gamma_other for p in problems]
        self.B = classic.restrict(row_mask, columns, kind="dual_o")
        diagonals = [p.K.diagonal()[p.gamma] for p in problems]
        scaled = build_scaled(topology, build_primal(topology), classic, scaling, diagonals)
        self.Bt = scaled.dual.restrict(row_mask, columns, kind="dual_o~")
        self.scaling = scaling

    def _check_floating(self):
        for p in self.problems:
            fixed = len(p.dofs) < 2 * len(self.topology.subdomain_nodes[p.index])
            if not fixed and len(p.corner) < 4:
                raise SolverError(
                    f"subdomain {p.index} touches no Dirichlet boundary and has {len(p.corner) // 2} corner nodes"
                )

    def _map(self, fn, items):
        if self.threads == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    @property
    def n_dual(self):
        return self.B.n_rows

    # ── Solve_L ──
    def solve_l(self, lam_o, f=None):
        """Forward problem: local solves with corner continuity.

        lam_o[s] lives on o(s); f[s] on the free local dofs (None means zero).
        Returns u(s) and the corner reactions λ_c(s).
        """
        fs = [p.f if f is None else f[k] for k, p in enumerate(self.problems)] if f is not False else None
        u1, g = [], np.zeros(self.coarse.size)
        for k, (p, loc) in enumerate(zip(self.problems, self.local)):
            rhs = np.zeros(len(p.remainder)) if fs is None else fs[k][p.remainder].astype(float)
            rhs[loc.o_in_r] += lam_o[k]
            v = loc.lu_rr.solve(rhs) if loc.lu_rr is not None else rhs
            u1.append(v)
            fc = np.zeros(len(p.corner)) if fs is None else fs[k][p.corner]
            g += self.coarse.assembly[k] @ (fc - loc.Krc.T @ v)
        Uc = self.coarse.solve(g)
        us, lam_c = [], []
        for k, (p, loc) in enumerate(zip(self.problems, self.local)):
            uc = self.coarse.assembly[k].T @ Uc
            ur = u1[k] - loc.Phi @ uc
            u = np.zeros(p.n_dofs)
            u[p.remainder] = ur
            u[p.corner] = uc
            fc = np.zeros(len(p.corner)) if fs is None else fs[k][p.corner]
            lam_c.append(loc.Krc.T @ ur + loc.Kcc @ uc - fc)
            us.append(u)
        return us, lam_c

    # ── Solve_S ──
    def solve_s(self, u_o):
        """Local Dirichlet problems: δu = u_o on o, 0 on corners; δλ is the boundary reaction."""
        dlam, du = [], []
        for k, (p, loc) in enumerate(zip(self.problems, self.local)):
            d = np.zeros(p.n_dofs)
            d[p.other] = u_o[k]
            if loc.lu_ii is not None:
                d[p.internal] = -loc.lu_ii.solve(loc.Kio @ u_o[k])
            du.append(d)
            dlam.append((loc.K @ d)[p.gamma])
        return dlam, du

    def lambda_vector(self, k, lam_o, lam_c):
        p = self.problems[k]
        lam = np.zeros(len(p.gamma))
        lam[p.gamma_other] = lam_o
        lam[p.gamma_corner] = lam_c
        return lam

    def jump(self, us):
        return self.B.assemble([u[p.other] for u, p in zip(us, self.problems)])

    def _state(self, it, Lambda, r, u_N, lam_c):
        du_o = self.Bt.distribute(r)
        dlam, du = self.solve_s(du_o)
        z = self.Bt.assemble([d[p.gamma_other] for d, p in zip(dlam, self.problems)])
        lam_o = self.B.distribute(Lambda)
        lambda_N = [self.lambda_vector(k, lam_o[k], lam_c[k]) for k in range(len(self.problems))]
        u_D = [u - d for u, d in zip(u_N, du)]
        lambda_D = [l - d for l, d in zip(lambda_N, dlam)]
        return IterationState(
            iteration=it,
            Lambda=Lambda.copy(),
            r=r.copy(),
            z=z,
            rz=float(r @ z),
            u_N=[u.copy() for u in u_N],
            lambda_N=lambda_N,
            u_D=u_D,
            lambda_D=lambda_D,
        )


def fetidp_solve(solver, tol=1e-10, max_iter=500, relative=True):
    """Preconditioned CG on Λ_o; returns the state of every iteration."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    Lambda = np.zeros(solver.n_dual)
    u_N, lam_c = solver.solve_l(solver.B.distribute(Lambda))
    r = solver.jump(u_N)
    state = solver._state(0, Lambda, r, u_N, lam_c)
    states = [state]
    rz = algebraic_error_term(state)
    eps = tol * np.sqrt(rz) if relative else tol
    w = state.z.copy()
    z = state.z
    it = 0
    log(f"FETI-DP: {len(solver.problems)} subdomains, {solver.n_dual} dual dofs, "
        f"{solver.coarse.size} corner dofs, √(r₀ᵀz₀)={np.sqrt(rz):.3e}", "DEBUG")
    while np.sqrt(rz) > eps and it < max_iter:
        du_N, dlam_c = solver.solve_l(solver.B.distribute(w), f=False)
        q = solver.jump(du_N)
        qw = float(q @ w)
        if not qw > 0:
            raise SolverError(f"PCG breakdown at iteration {it + 1}: qᵀw = {qw:.3e}")
        alpha = rz / qw
        Lambda = Lambda - alpha * w
        u_N = [u - alpha * d for u, d in zip(u_N, du_N)]
        lam_c = [l - alpha * d for l, d in zip(lam_c, dlam_c)]
        r = r - alpha * q
        it += 1
        state = solver._state(it, Lambda, r, u_N, lam_c)
        states.append(state)
        z = state.z
        w = z - (float(q @ z) / qw) * w
        rz = algebraic_error_term(state)
    if np.sqrt(rz) > eps:
        log(f"FETI-DP stopped at max_iter={max_iter}: √(rᵀz)={np.sqrt(rz):.3e} > ε={eps:.3e}", "WARN")
    else:
        log(f"FETI-DP converged in {it} iterations (√(rᵀz)={np.sqrt(max(rz, 0.0)):.3e})", "DEBUG")
    return states


def algebraic_error_term(state):
    """rᵀz of the state; equals |||u_N − u_D|||²."""
    rz = state.rz
    scale = max(1.0, float(np.linalg.norm(state.r) * np.linalg.norm(state.z)))
    if rz < -1e-12 * scale:
        raise SolverError(f"negative rᵀz = {rz:.3e} at iteration {state.iteration}")
    return max(rz, 0.0)


def energy_gap(problems, state):
    """Σ_s (u_N − u_D)ᵀ K(s) (u_N − u_D)."""
    total = 0.0
    for p, uN, uD in zip(problems, state.u_N, state.u_D):
        d = uN - uD
        total += float(d @ (p.K @ d))
    return total


def gather(problems, vectors, n_dofs):
    """Global vector from per-subdomain continuous fields (Dirichlet values included)."""
    out = np.zeros(n_dofs)
    for p, v in zip(problems, vectors):
        out[p.dofs] = v
        if p.lift is not None:
            fixed = p.lift != 0
            out[fixed] = p.lift[fixed]
    return out
