"""Exception hierarchy shared across the pipeline stages."""


class HugatError(Exception):
    """Base class for all library errors."""


# graph construction / ingestion
class UnknownRegion(HugatError):
    pass


class MalformedTimestamp(HugatError):
    pass


class EmptyEventTable(HugatError):
    pass


class InvalidFraction(HugatError):
    pass


class SchemaMismatch(HugatError):
    pass


class SchemaViolation(HugatError):
    """A malformed input row; carries the file and 1-based line number."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class MissingFile(HugatError):
    pass


class InvalidSpec(HugatError):
    pass


class ConfigError(HugatError):
    pass


# numerics
class NegativeCount(HugatError):
    pass


class ShapeMismatch(HugatError):
    pass


class NonFiniteValue(HugatError):
    pass


class NotScalar(HugatError):
    pass


class EmptyNeighborSet(HugatError):
    pass


class DivergenceDetected(HugatError):
    pass


# evaluation
class DegenerateTarget(HugatError):
    pass


class MissingDistance(HugatError):
    pass


class KTooLarge(HugatError):
    pass
