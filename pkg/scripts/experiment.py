"""实验执行：网格 → FETI-DP 求解 → 静力容许应力恢复 → 误差估计

run_single 跑一个 (比值, 分区, 模式) 组合；run_sweep 跑 比值 × 分区 × 模式 的笛卡尔积，
单行失败只记录在该行（status=error:<类名>），扫描继续。
同一 (比值, 分区) 的 FETI-DP 解在多个模式间复用。
"""
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from tqdm import tqdm

from config import NAMED_MODES, SEQUENTIAL
from elasticity import Loads, MaterialField, assemble, build_subdomain_problems, solve_dirichlet
from errors import FetiEetError, SolverError
from estimator import error_map, gather_continuous, guaranteed_bound, reference_solution, separated_bound
from fetidp import FetiDPSolver, energy_gap, fetidp_solve
from interface_ops import build_dual_classic
from mesh import build_interface_topology, check_partition, generate_benchmark_mesh, partition_structured
from recovery import dump_recovery, recover_admissible
from runlog import atomic_write_csv, log

ROW_COLUMNS = [
    "scheme", "ratio", "mode", "recovery", "multipoint", "n_subdomains", "iterations",
    "estimate", "relative", "algebraic", "discretization", "separated",
    "reference", "effectivity", "status", "message",
]
TABLE_COLUMNS = ["Ratio", "scheme", *NAMED_MODES]
TRACE_COLUMNS = ["iteration", "sqrt_rz", "energy_gap"]
TRACE_BOUND_COLUMNS = ["estimate", "algebraic", "discretization", "separated"]

RESULTS_CSV = "results.csv"
TABLE_CSV = "table.csv"


# ── Case description ──
@dataclass(frozen=True)
class Mode:
    """How σ̂ is recovered: legend name, single-domain or substructured, EET weighting, multipoint treatment."""
    name: str
    path: str
    recovery: str
    multipoint: str

    @classmethod
    def named(cls, name):
        path, recovery, multipoint = NAMED_MODES[name]
        return cls(name, path, recovery, multipoint)

    @classmethod
    def from_config(cls, config):
        path = SEQUENTIAL if _is_sequential(config.partition.scheme) else "dd"
        rec = config.recovery
        for name, (p, recovery, multipoint) in NAMED_MODES.items():
            if p == path and recovery == rec.mode and (path == SEQUENTIAL or multipoint == rec.multipoint):
                return cls.named(name)
        return cls(f"{config.recovery.mode}/{config.recovery.multipoint}", path, config.recovery.mode,
                   config.recovery.multipoint)

    @property
    def slug(self):
        return self.name.lower().replace(" ", "_").replace("/", "-")


def _is_sequential(scheme):
    return scheme in (SEQUENTIAL, "single")


@dataclass(frozen=True)
class Problem:
    mesh: object
    materials: MaterialField
    loads: Loads
    ratio: float


def build_mesh(config):
    g = config.geometry
    return generate_benchmark_mesh(g.n, g.length, g.inclusions)


def build_problem(config, ratio, mesh=None):
    m, l = config.materials, config.loads
    return Problem(
        mesh=mesh if mesh is not None else build_mesh(config),
        materials=MaterialField.two_phase(m.young, ratio, m.poisson, m.plane),
        loads=Loads.benchmark(l.traction, l.shear, l.body),
        ratio=float(ratio),
    )


def case_tag(scheme, ratio, mode=None):
    tag = f"{scheme}_{ratio:g}"
    return tag if mode is None else f"{tag}_{mode.slug}"


# ── Substructured solve ──
@dataclass
class SubstructuredSolution:
    scheme: str
    partition: object
    topology: object
    problems: list
    states: list

    @property
    def final(self):
        return self.states[-1]

    @property
    def iterations(self):
        return self.final.iteration


def _global(problems, vectors, n_dofs):
    return [p.to_global(u, n_dofs) for p, u in zip(problems, vectors)]


def solve_substructured(problem, config, scheme, threads=1):
    mesh = problem.mesh
    partition = partition_structured(mesh, scheme)
    check_partition(mesh, partition)
    topology = build_interface_topology(mesh, partition)
    problems = build_subdomain_problems(mesh, topology, problem.materials, problem.loads)
    solver = FetiDPSolver(problems, topology, build_dual_classic(topology), config.solver.scaling, threads)
    states = fetidp_solve(solver, config.solver.tol, config.solver.max_iter)
    return SubstructuredSolution(scheme, partition, topology, problems, states)


def write_trace(problem, config, solution, out_dir, threads=1):
    """One CSV row per FETI-DP iteration; estimator terms per iteration when outputs.trace_bounds is set."""
    mesh = problem.mesh
    columns = list(TRACE_COLUMNS)
    with_bounds = config.outputs.trace_bounds
    if with_bounds:
        columns += TRACE_BOUND_COLUMNS
    rows = []
    for state in solution.states:
        row = {
            "iteration": state.iteration,
            "sqrt_rz": state.algebraic,
            "energy_gap": float(np.sqrt(max(energy_gap(solution.problems, state), 0.0))),
        }
        if with_bounds:
            rec = recover_admissible(
                mesh, problem.materials, problem.loads, _global(solution.problems, state.u_N, mesh.n_dofs),
                config.recovery.mode, solution.topology, state.lambda_N, config.recovery.multipoint,
                config.recovery.degree, threads, iteration=state.iteration, route=config.recovery.route,
            )
            u_D = _global(solution.problems, state.u_D, mesh.n_dofs)
            report = guaranteed_bound(mesh, problem.materials, problem.loads, rec.field, u_D, solution.topology)
            sep = separated_bound(mesh, problem.materials, state, rec.field, solution.problems, solution.topology)
            row.update(estimate=report.estimate, algebraic=sep.algebraic,
                       discretization=sep.discretization, separated=sep.total)
        rows.append(row)
    path = Path(out_dir) / f"trace_{case_tag(solution.scheme, problem.ratio)}.csv"
    atomic_write_csv(path, columns, rows)
    return path


# ── Reference ──
class ReferenceCache:
    """Overkill solutions keyed by ratio; the mesh and loads are shared by every case of a run."""

    def __init__(self, config):
        self.k = config.reference.overkill
        self.budget = config.reference.dof_budget
        self._cache = {}

    def get(self, problem):
        if self.k == 0:
            return None
        if problem.ratio not in self._cache:
            try:
                ref = reference_solution(problem.mesh, problem.materials, problem.loads, self.k, self.budget)
            except SolverError as err:
                log(f"跳过细网格参考解 (ratio={problem.ratio:g}): {err}", "WARN")
                ref = None
            self._cache[problem.ratio] = ref
        return self._cache[problem.ratio]


# ── One case ──
@dataclass
class CaseResult:
    row: dict
    report: object = None
    solution: SubstructuredSolution = None
    artifacts: list = field(default_factory=list)


def _row(scheme, ratio, mode, n_subdomains=1, iterations=0):
    return {
        "scheme": scheme, "ratio": float(ratio), "mode": mode.name, "recovery": mode.recovery,
        "multipoint": mode.multipoint if mode.path != SEQUENTIAL else "",
        "n_subdomains": n_subdomains, "iterations": iterations, "status": "ok", "message": "",
    }


def _error_row(scheme, ratio, mode, solution, err):
    """Failed case; counts are left empty when the FETI-DP solve itself did not finish."""
    if mode.path == SEQUENTIAL:
        row = _row(scheme, ratio, mode)
    elif solution is not None:
        row = _row(scheme, ratio, mode, solution.topology.n_subdomains, solution.iterations)
    else:
        row = _row(scheme, ratio, mode, "", "")
    row.update(status=f"error:{type(err).__name__}", message=str(err))
    return row


def _fill(row, report):
    row.update(
        estimate=report.estimate, relative=report.relative, algebraic=report.algebraic,
        discretization=report.discretization, separated=report.separated,
        reference=report.reference, effectivity=report.effectivity,
    )
    return row


def run_sequential(problem, config, mode, out_dir, references, threads=1):
    mesh, materials, loads = problem.mesh, problem.materials, problem.loads
    K, F = assemble(mesh, materials, loads)
    u = solve_dirichlet(K, F, mesh.dirichlet_dofs)
    rec = recover_admissible(mesh, materials, loads, u, mode.recovery, degree=config.recovery.degree, threads=threads)
    report = guaranteed_bound(mesh, materials, loads, rec.field, u)
    ref = references.get(problem)
    if ref is not None:
        report = report.with_reference(ref.error(u))
    result = CaseResult(_fill(_row(SEQUENTIAL, problem.ratio, mode), report), report)
    _artifacts(problem, config, rec, report, np.zeros(mesh.n_elements, dtype=np.int64),
               case_tag(SEQUENTIAL, problem.ratio, mode), out_dir, result)
    return result


def run_substructured(problem, config, mode, solution, out_dir, references, threads=1):
    mesh, materials, loads = problem.mesh, problem.materials, problem.loads
    state = solution.final
    u_N = _global(solution.problems, state.u_N, mesh.n_dofs)
    u_D = _global(solution.problems, state.u_D, mesh.n_dofs)
    rec = recover_admissible(
        mesh, materials, loads, u_N, mode.recovery, solution.topology, state.lambda_N, mode.multipoint,
        config.recovery.degree, threads, iteration=state.iteration, route=config.recovery.route,
    )
    report = guaranteed_bound(mesh, materials, loads, rec.field, u_D, solution.topology)
    sep = separated_bound(mesh, materials, state, rec.field, solution.problems, solution.topology)
    report = _with_terms(report, sep)
    ref = references.get(problem)
    if ref is not None:
        report = report.with_reference(ref.error(gather_continuous(u_D, solution.topology, mesh.n_dofs)))
    row = _row(solution.scheme, problem.ratio, mode, solution.topology.n_subdomains, solution.iterations)
    result = CaseResult(_fill(row, report), report, solution)
    _artifacts(problem, config, rec, report, solution.partition.subdomain,
               case_tag(solution.scheme, problem.ratio, mode), out_dir, result)
    return result


def _with_terms(report, sep):
    return replace(report, algebraic=sep.algebraic, discretization=sep.discretization)


def _artifacts(problem, config, rec, report, subdomain, tag, out_dir, result):
    out_dir = Path(out_dir)
    if config.outputs.vtk:
        path = out_dir / f"errmap_{tag}.vtk"
        error_map(problem.mesh, report, path, subdomain)
        result.artifacts.append(path)
    if config.outputs.dump_tractions:
        dump_recovery(problem.mesh, rec, out_dir, tag)
        result.artifacts += [out_dir / f"tractions_{tag}.csv", out_dir / f"stress_{tag}.csv"]


# ── Entry points ──
def run_single(config, out_dir, threads=1):
    """The configured (ratio, scheme, recovery, multipoint) case; errors propagate."""
    out_dir = Path(out_dir)
    problem = build_problem(config, config.materials.ratio)
    mode = Mode.from_config(config)
    references = ReferenceCache(config)
    if mode.path == SEQUENTIAL:
        result = run_sequential(problem, config, mode, out_dir, references, threads)
    else:
        solution = solve_substructured(problem, config, config.partition.scheme, threads)
        trace = write_trace(problem, config, solution, out_dir, threads) if config.outputs.trace else None
        result = run_substructured(problem, config, mode, solution, out_dir, references, threads)
        if trace is not None:
            result.artifacts.insert(0, trace)
    atomic_write_csv(out_dir / RESULTS_CSV, ROW_COLUMNS, [result.row])
    log(f"{mode.name} [{result.row['scheme']}, ratio={problem.ratio:g}]: "
        f"η={result.row['estimate']:.4e} (相对 {result.row['relative']:.4e})")
    return result


def sweep_cases(config):
    """(ratio, scheme, mode) triples; single-domain modes run once per ratio, substructured ones once per scheme."""
    cases = []
    schemes = config.scheme_list()
    dd_schemes = [s for s in schemes if not _is_sequential(s)]
    for ratio in config.ratio_list():
        for name in config.mode_list():
            mode = Mode.named(name)
            if mode.path == SEQUENTIAL:
                cases.append((ratio, SEQUENTIAL, mode))
        for scheme in dd_schemes:
            for name in config.mode_list():
                mode = Mode.named(name)
                if mode.path != SEQUENTIAL:
                    cases.append((ratio, scheme, mode))
    return cases


@dataclass
class SweepResult:
    rows: list
    table: list
    artifacts: list = field(default_factory=list)
    errors: list = field(default_factory=list)


def run_sweep(config, out_dir, threads=1):
    out_dir = Path(out_dir)
    cases = sweep_cases(config)
    mesh = build_mesh(config)
    references = ReferenceCache(config)
    problems = {}
    solution, solution_key, solve_error = None, None, None
    rows, artifacts, errors = [], [], []
    log(f"扫描: {len(cases)} 个组合")
    for ratio, scheme, mode in tqdm(cases, desc="sweep", unit="case"):
        problem = problems.setdefault(ratio, build_problem(config, ratio, mesh))
        try:
            if mode.path == SEQUENTIAL:
                result = run_sequential(problem, config, mode, out_dir, references, threads)
            else:
                if solution_key != (ratio, scheme):
                    solution_key, solution, solve_error = (ratio, scheme), None, None
                    try:
                        solution = solve_substructured(problem, config, scheme, threads)
                        if config.outputs.trace:
                            artifacts.append(write_trace(problem, config, solution, out_dir, threads))
                    except FetiEetError as err:
                        solve_error = err
                if solve_error is not None:
                    raise solve_error
                result = run_substructured(problem, config, mode, solution, out_dir, references, threads)
            rows.append(result.row)
            artifacts += result.artifacts
        except FetiEetError as err:
            log(f"✗ {mode.name} [{scheme}, ratio={ratio:g}]: {err}", "ERROR")
            solved = solution if solution_key == (ratio, scheme) else None
            rows.append(_error_row(scheme, ratio, mode, solved, err))
            errors.append(err)
    table = pivot(rows)
    atomic_write_csv(out_dir / RESULTS_CSV, ROW_COLUMNS, rows)
    atomic_write_csv(out_dir / TABLE_CSV, TABLE_COLUMNS, table)
    return SweepResult(rows, table, artifacts, errors)


def pivot(rows):
    """Relative estimates laid out as Ratio × scheme with one column per legend name.

    Single-domain columns are repeated on every substructured scheme of the same ratio.
    """
    ok = [r for r in rows if r["status"] == "ok"]
    sequential = {}
    cells = {}
    for r in ok:
        if r["scheme"] == SEQUENTIAL:
            sequential.setdefault(r["ratio"], {})[r["mode"]] = r["relative"]
        else:
            cells.setdefault((r["ratio"], r["scheme"]), {})[r["mode"]] = r["relative"]
    keys = []
    for r in rows:
        key = (r["ratio"], r["scheme"])
        if key not in keys:
            keys.append(key)
    with_dd = {ratio for ratio, scheme in keys if scheme != SEQUENTIAL}
    keys = [(ratio, scheme) for ratio, scheme in keys if scheme != SEQUENTIAL or ratio not in with_dd]
    table = []
    for ratio, scheme in keys:
        line = {"Ratio": ratio, "scheme": scheme}
        line.update(sequential.get(ratio, {}))
        line.update(cells.get((ratio, scheme), {}))
        table.append(line)
    return table
