"""Exception types raised across the package."""


class GatedSSDError(Exception):
    """Base class for all package errors."""


class ShapeError(GatedSSDError, ValueError):
    """An input had the wrong shape, size or channel count."""


class DegenerateSpecError(GatedSSDError, ValueError):
    """A layer specification yields an empty (zero-area) output."""


class DegenerateInputError(GatedSSDError, ValueError):
    """An input is structurally valid but carries no usable content."""


class TrainingDivergedError(GatedSSDError, RuntimeError):
    def __init__(self, epoch: int, message: str = "loss became non-finite"):
        super().__init__(f"training diverged at epoch {epoch}: {message}")
        self.epoch = epoch


class CostModelInvalidError(GatedSSDError, ValueError):
    """The affine latency fit has a non-positive slope."""


class ConfigError(GatedSSDError, ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.key = key
        self.line = line


class ModelFormatError(GatedSSDError, ValueError):
    """The file is not a model file (bad magic or malformed record)."""


class ModelCorruptError(GatedSSDError, ValueError):
    """The stored checksum does not match the file contents."""


class ModelTruncatedError(ModelFormatError):
    def __init__(self, offset: int, needed: int):
        super().__init__(f"file truncated at byte offset {offset} (needed {needed} more bytes)")
        self.offset = offset
