"""异常层级：每个异常携带 CLI 退出码"""


class FetiEetError(Exception):
    exit_code = 1

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class ConfigError(FetiEetError):
    exit_code = 2


class MeshError(ConfigError):
    """Geometry or partition incompatible with the requested grid."""


class SolverError(FetiEetError):
    exit_code = 3


class AdmissibilityError(FetiEetError):
    exit_code = 4


class EquilibrationError(AdmissibilityError):
    """Traction equilibration or element equilibrium check failed."""
