"""Error types shared across the package."""


class DimensionError(ValueError):
    """Shapes or extents of the operands do not line up."""


class ContractError(ValueError):
    """An input violates a documented precondition."""


class CsvParseError(ValueError):
    """A delimited input file is malformed; message carries the line number."""
