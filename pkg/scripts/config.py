"""实验配置：JSON 读取、预设合并、默认值、取值范围校验

配置文件为带 schema_version 的嵌套 JSON（写法同 config/experiment.example.json），
未知键一律拒绝并报告点分路径。--config 文件中的键覆盖 --preset 中的同名键。
"""
import copy
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

from errors import ConfigError
from mesh import SCHEMES, default_inclusions
from runlog import log

SCHEMA_VERSION = 1
PROJECT = Path(__file__).resolve().parent.parent
PRESET_DIR = PROJECT / "config" / "presets"
PRESETS = ("table1", "table2", "fig9", "fig10")
OUT_ENV = "FETI_EET_OUT"

SEQUENTIAL = "sequential"

# 图例名 -> (路径, EET 模式, 多重点模式)
NAMED_MODES = {
    "EET": (SEQUENTIAL, "classical", "off"),
    "EEToptim": (SEQUENTIAL, "weighted", "off"),
    "DD EET": ("dd", "classical", "off"),
    "DD optim EET": ("dd", "weighted", "weighted"),
}

DEFAULTS = {
    "geometry": {"n": 36, "length": 1.0, "inclusions": "default"},
    "materials": {"young": 2e5, "poisson": 0.3, "plane": "stress", "ratio": 1.0, "ratios": None},
    "loads": {"traction": 1.0, "shear": 1.0, "body": [0.0, 0.0]},
    "partition": {"scheme": "grid3x3", "schemes": None},
    "solver": {"tol": 1e-10, "max_iter": 500, "scaling": "stiffness"},
    "recovery": {
        "mode": "weighted",
        "multipoint": "weighted",
        "modes": None,
        "degree": 4,
        "route": "pseudo_inverse",
    },
    "reference": {"overkill": 4, "dof_budget": 2_000_000},
    "outputs": {
        "dir": "results",
        "vtk": False,
        "trace": True,
        "trace_bounds": False,
        "dump_tractions": False,
    },
}
TOP_LEVEL = ("schema_version", "description")


@dataclass(frozen=True)
class GeometryConfig:
    n: int
    length: float
    inclusions: tuple


@dataclass(frozen=True)
class MaterialsConfig:
    young: float
    poisson: float
    plane: str
    ratio: float
    ratios: tuple


@dataclass(frozen=True)
class LoadsConfig:
    traction: float
    shear: float
    body: tuple


@dataclass(frozen=True)
class PartitionConfig:
    scheme: str
    schemes: tuple


@dataclass(frozen=True)
class SolverConfig:
    tol: float
    max_iter: int
    scaling: str


@dataclass(frozen=True)
class RecoveryConfig:
    mode: str
    multipoint: str
    modes: tuple
    degree: int
    route: str


@dataclass(frozen=True)
class ReferenceConfig:
    overkill: int
    dof_budget: int


@dataclass(frozen=True)
class OutputsConfig:
    dir: str
    vtk: bool
    trace: bool
    trace_bounds: bool
    dump_tractions: bool


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: GeometryConfig
    materials: MaterialsConfig
    loads: LoadsConfig
    partition: PartitionConfig
    solver: SolverConfig
    recovery: RecoveryConfig
    reference: ReferenceConfig
    outputs: OutputsConfig
    description: str = ""

    @property
    def is_sweep(self):
        return bool(self.materials.ratios or self.partition.schemes or self.recovery.modes)

    def ratio_list(self):
        return list(self.materials.ratios or (self.materials.ratio,))

    def scheme_list(self):
        return list(self.partition.schemes or (self.partition.scheme,))

    def mode_list(self):
        return list(self.recovery.modes or NAMED_MODES)

    def to_dict(self):
        data = {"schema_version": SCHEMA_VERSION}
        if self.description:
            data["description"] = self.description
        for name, section in asdict(self).items():
            if name != "description":
                data[name] = _plain(section)
        return data


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# ── Loading ──
def read_json(path):
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def merge(base, override):
    """Section-wise merge: keys of override replace those of base."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key].update(copy.deepcopy(value))
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, preset=None):
    data = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} (expected one of {', '.join(PRESETS)})")
        data = read_json(PRESET_DIR / f"{preset}.json")
        log(f"预设: {preset}")
    if path is not None:
        data = merge(data, read_json(path))
        log(f"配置文件: {path}")
    if path is None and preset is None:
        raise ConfigError("either --config or --preset is required")
    return parse_config(data)


def parse_config(data):
    if "schema_version" not in data:
        raise ConfigError("missing top-level key 'schema_version'")
    if data["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {data['schema_version']!r} (expected {SCHEMA_VERSION})")
    _reject_unknown(data)
    values = merge(DEFAULTS, {k: v for k, v in data.items() if k not in TOP_LEVEL})
    description = data.get("description", "")
    if not isinstance(description, str):
        raise ConfigError("description: expected a string")
    for section, keys in values.items():
        if not isinstance(data.get(section, {}), dict):
            raise ConfigError(f"{section}: expected an object")
        for key, value in keys.items():
            _check_type(f"{section}.{key}", value, DEFAULTS[section][key])

    geo, mat, loads = values["geometry"], values["materials"], values["loads"]
    part, solver, rec = values["partition"], values["solver"], values["recovery"]
    ref, out = values["reference"], values["outputs"]
    config = ExperimentConfig(
        geometry=GeometryConfig(int(geo["n"]), float(geo["length"]), _inclusions(geo["inclusions"], geo["length"])),
        materials=MaterialsConfig(
            float(mat["young"]), float(mat["poisson"]), mat["plane"], float(mat["ratio"]),
            tuple(float(r) for r in mat["ratios"]) if mat["ratios"] else (),
        ),
        loads=LoadsConfig(float(loads["traction"]), float(loads["shear"]), tuple(float(b) for b in loads["body"])),
        partition=PartitionConfig(part["scheme"], tuple(part["schemes"] or ())),
        solver=SolverConfig(float(solver["tol"]), int(solver["max_iter"]), solver["scaling"]),
        recovery=RecoveryConfig(rec["mode"], rec["multipoint"], tuple(rec["modes"] or ()), int(rec["degree"]),
                                rec["route"]),
        reference=ReferenceConfig(int(ref["overkill"]), int(ref["dof_budget"])),
        outputs=OutputsConfig(str(out["dir"]), out["vtk"], out["trace"], out["trace_bounds"],
                              out["dump_tractions"]),
        description=description,
    )
    validate(config)
    return config


def _reject_unknown(data):
    for key, value in data.items():
        if key in TOP_LEVEL:
            continue
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key '{key}'")
        if isinstance(value, dict):
            for sub in value:
                if sub not in DEFAULTS[key]:
                    raise ConfigError(f"unknown key '{key}.{sub}'")


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_type(path, value, default):
    if path == "geometry.inclusions":
        if value in ("default", "none"):
            return
        if not isinstance(value, list) or not all(
            isinstance(box, list) and len(box) == 4 and all(_is_number(v) for v in box) for box in value
        ):
            raise ConfigError(f"{path}: expected 'default', 'none' or a list of [x0, y0, x1, y1]")
        return
    if default is None:
        if value is not None and not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list or null")
        return
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false")
    elif isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{path}: expected an integer")
    elif isinstance(default, float):
        if not _is_number(value):
            raise ConfigError(f"{path}: expected a number")
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
    elif isinstance(default, list):
        if not isinstance(value, list) or len(value) != len(default) or not all(_is_number(v) for v in value):
            raise ConfigError(f"{path}: expected a list of {len(default)} numbers")


def _inclusions(value, length):
    if value == "default":
        return tuple(default_inclusions(length))
    if value == "none":
        return ()
    return tuple(tuple(float(v) for v in box) for box in value)


def _one_of(path, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{path}: {value!r} is not one of {', '.join(map(str, allowed))}")


def validate(config):
    g, m, s, r = config.geometry, config.materials, config.solver, config.recovery
    if g.n < 4:
        raise ConfigError(f"geometry.n must be >= 4, got {g.n}")
    if g.length <= 0:
        raise ConfigError(f"geometry.length must be positive, got {g.length}")
    if m.young <= 0:
        raise ConfigError(f"materials.young must be positive, got {m.young}")
    if not 0 <= m.poisson < 0.5:
        raise ConfigError(f"materials.poisson must lie in [0, 0.5), got {m.poisson}")
    _one_of("materials.plane", m.plane, ("stress", "strain"))
    for ratio in (m.ratio,) + m.ratios:
        if ratio <= 0:
            raise ConfigError(f"materials ratio must be positive, got {ratio}")
    for scheme in (config.partition.scheme,) + config.partition.schemes:
        _one_of("partition.scheme", scheme, (SEQUENTIAL,) + SCHEMES)
    if s.tol <= 0:
        raise ConfigError(f"solver.tol must be positive, got {s.tol}")
    if s.max_iter < 1:
        raise ConfigError(f"solver.max_iter must be >= 1, got {s.max_iter}")
    _one_of("solver.scaling", s.scaling, ("stiffness", "multiplicity"))
    _one_of("recovery.mode", r.mode, ("classical", "weighted"))
    _one_of("recovery.multipoint", r.multipoint, ("off", "identity", "weighted"))
    _one_of("recovery.route", r.route, ("pseudo_inverse", "corrected"))
    for name in r.modes:
        _one_of("recovery.modes", name, tuple(NAMED_MODES))
    if r.degree < 1:
        raise ConfigError(f"recovery.degree must be >= 1, got {r.degree}")
    k = config.reference.overkill
    if k != 0 and k < 2:
        raise ConfigError(f"reference.overkill must be 0 or >= 2, got {k}")
    if config.reference.dof_budget < 1:
        raise ConfigError("reference.dof_budget must be positive")


def resolve_output_dir(config, cli_out=None):
    """--out > $FETI_EET_OUT > outputs.dir."""
    if cli_out:
        return Path(cli_out)
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    return Path(config.outputs.dir)
