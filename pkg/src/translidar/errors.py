"""Exception taxonomy and the process exit codes the CLI maps them to."""

EXIT_OK = 0
EXIT_DOMAIN = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class TranslidarError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class DomainError(TranslidarError):
    """Invalid argument, shape, or configuration value."""

    exit_code = EXIT_DOMAIN


class DegenerateConfigError(DomainError):
    """Geometric configuration with no unique solution."""


class ConfigError(DomainError):
    """Malformed experiment config or scene description file."""


class DatasetIoError(TranslidarError):
    """Base for on-disk dataset and checkpoint problems."""

    exit_code = EXIT_IO


class DatasetVersionError(DatasetIoError):
    """On-disk format version is not supported by this build."""


class DatasetTruncatedError(DatasetIoError):
    """File ends before its header-declared payload does."""


class DatasetValidationError(DatasetIoError):
    """Dataset contents violate a manifest invariant or are missing."""


class NumericalAbortError(TranslidarError):
    """Training produced a non-finite loss and stopped."""

    exit_code = EXIT_NUMERIC
