class OccKitError(Exception):
    """Base class for every error raised by occkit."""


class UsageError(OccKitError):
    """Bad command line or config file."""


class SpecMismatchError(OccKitError, ValueError):
    """Inputs that must share one GridSpec do not."""


class RayError(OccKitError, ValueError):
    pass


class MetricError(OccKitError, ValueError):
    """The requested metric or loss is undefined for the given inputs."""


class ContainerError(OccKitError, ValueError):
    """Malformed or inconsistent OCCV container."""


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class HeaderError(ContainerError):
    pass


class DtypeMismatchError(ContainerError):
    pass


class DimsMismatchError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class NonFiniteError(ContainerError):
    pass


class InvalidLabelError(ContainerError):
    pass
