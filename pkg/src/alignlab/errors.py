"""Exception types shared across the package."""


class AlignlabError(Exception):
    pass


class DimensionError(AlignlabError, ValueError):
    """Operand shapes incompatible with the requested operation."""


class ContractError(AlignlabError, ValueError):
    """Caller violated an operation precondition."""


class ConfigError(AlignlabError, ValueError):
    """Invalid configuration value or combination."""


class LengthError(AlignlabError, ValueError):
    """Target sequence longer than the encoded frame sequence."""


class NoAlignmentPathError(AlignlabError, ValueError):
    """No valid lattice path exists for the given lengths (loss would be +inf)."""


class FileFormatError(AlignlabError, ValueError):
    """Malformed container file; message includes the failing byte offset."""


class ValidationError(AlignlabError, ValueError):
    """Parsed data violates a domain invariant."""
