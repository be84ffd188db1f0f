class DfsmcError(Exception):
    """Base class for data/contract errors (CLI exit code 3)."""


class DecodeError(DfsmcError):
    pass


class ShapeError(DfsmcError, ValueError):
    pass


class ManifestError(DfsmcError):
    pass


class WeightFileError(DfsmcError):
    pass


class SvmError(DfsmcError, ValueError):
    pass
