"""Exception hierarchy. The CLI maps each family to an exit code."""


class OceancastError(Exception):
    exit_code = 1


class ConfigError(OceancastError, ValueError):
    exit_code = 2


class DataError(OceancastError, ValueError):
    exit_code = 3


class NumericError(OceancastError, FloatingPointError):
    exit_code = 4
