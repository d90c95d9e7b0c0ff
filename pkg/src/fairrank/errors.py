"""Exception types shared across the package."""


class FairrankError(Exception):
    """Base class for every package-specific error."""


class UnknownEntity(FairrankError):
    """A user, item, or group is not present in the catalog / score matrix."""


class MissingUserGroups(FairrankError):
    """User-axis utility requested but the catalog has no user -> group map."""


class SchemaError(FairrankError):
    """An input file is missing a required column."""


class ParseError(FairrankError):
    """A field in an input file could not be parsed."""


class FormatError(FairrankError):
    """A structured input file violates its format contract."""


class EmptyDataset(FairrankError):
    """Filtering removed every record."""


class IoError(FairrankError):
    """A dataset directory could not be read or written."""


class VersionError(FairrankError):
    """On-disk dataset version does not match this reader."""


class EmptyCandidates(FairrankError):
    """A user or query has no candidates to rank."""


class UndefinedMetric(FairrankError):
    """The metric is undefined on this input (e.g. no user has relevant items)."""


class UnknownQuery(FairrankError):
    """A query in the run has no intent judgments."""


class ZeroPopularity(FairrankError):
    """A group has zero interaction mass, so its inverse-popularity weight is undefined."""


class InvariantViolation(FairrankError):
    """An internal state or type invariant was broken."""


class DivergenceError(FairrankError):
    """Training produced a non-finite loss."""


class ConfigError(FairrankError):
    """Resolved configuration violates its invariants."""


class UnknownKeyError(ConfigError):
    """Strict config merge found a key outside the known schema."""


class UnsupportedStage(ConfigError):
    """The requested pipeline stage is recognised but deliberately unimplemented."""
