"""
Error hierarchy shared by the library and the CLI.

Every class carries the process exit code the CLI uses for it.
"""


class RdmError(Exception):
    exit_code = 1


class ConfigError(RdmError, ValueError):
    """Invalid or inconsistent configuration"""
    exit_code = 2


class DataError(RdmError, ValueError):
    """Input data does not match what the operation expects"""
    exit_code = 3


class MissingFileError(DataError):
    def __init__(self, path):
        super().__init__(f"File not found: {path}")
        self.path = str(path)


class MagicMismatchError(DataError):
    def __init__(self, path, expected, found):
        super().__init__(f"{path}: bad magic {found!r}, expected {expected!r}")
        self.path = str(path)


class TruncatedFileError(DataError):
    def __init__(self, path, expected_bytes, found_bytes):
        super().__init__(
            f"{path}: truncated, expected {expected_bytes} bytes, found {found_bytes}"
        )
        self.path = str(path)


class ChecksumMismatchError(DataError):
    def __init__(self, path):
        super().__init__(f"{path}: checksum mismatch")
        self.path = str(path)


class NumericalError(RdmError):
    exit_code = 4


class NonFiniteError(NumericalError, ValueError):
    """NaN or Inf where a finite value is required"""


class NonFiniteLossError(NumericalError):
    def __init__(self, batch_index, value):
        super().__init__(f"Non-finite loss {value} at batch {batch_index}")
        self.batch_index = batch_index
        self.value = value


class SolverError(NumericalError):
    def __init__(self, reason, last_t):
        super().__init__(f"ODE solver failed ({reason}) at t={last_t:.6g}")
        self.reason = reason
        self.last_t = float(last_t)
