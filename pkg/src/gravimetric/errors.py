"""Exception hierarchy for the gravimetric package.

Two broad families matter for the CLI exit-code contract: ``InputError``
(bad user data or configuration, exit 2) and ``NumericalStructureError``
(rank/definiteness failures of an otherwise valid problem, exit 4).
"""

from __future__ import annotations


class GravimetricError(Exception):
    """Base class for every error raised by this package."""


class InputError(GravimetricError):
    """User-supplied data or configuration is invalid."""


class FileFormatError(InputError):
    """Validation failure tied to a position in an input file."""

    def __init__(self, message: str, *, path=None, row: int | None = None,
                 column: str | None = None):
        self.path = path
        self.row = row
        self.column = column
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class SchemaMismatch(FileFormatError):
    """Header or field does not match the expected file schema."""


class NegativeValue(FileFormatError):
    """A money or volume field is negative."""


class BadCode(FileFormatError):
    """Malformed country / CN8 / HS6 code."""


class NonPositiveCovariate(FileFormatError):
    """A covariate that enters under a log is zero or negative."""


class FlagConflict(FileFormatError):
    """Mutually exclusive indicator flags are both set."""


class DuplicateAttributeKey(InputError):
    """Two attribute rows share the same (iso, year) key."""


class NoSectorMatch(InputError):
    """A CN8 code has no prefix entry in the sector map."""


class NonPositiveUnderLog(InputError):
    """A value that must be logged is zero or negative."""

    def __init__(self, name: str, row: int | None = None):
        self.name = name
        self.row = row
        at = f" at row {row}" if row is not None else ""
        super().__init__(f"cannot take log of non-positive '{name}'{at}")


class MissingRemoteness(InputError):
    """A year in the dataset has no remoteness value."""

    def __init__(self, year: int):
        self.year = year
        super().__init__(f"no remoteness index for year {year}")


class AllZeroResponse(InputError):
    """The response vector has no positive entries."""


class EmptyYear(InputError):
    """No bilateral flows (or no positive expenditure) for the year."""


class MissingDistance(InputError):
    """A partner with positive expenditure has no distance entry."""

    def __init__(self, country: str):
        self.country = country
        super().__init__(f"no distance available for partner '{country}'")


class AsymmetricDistance(InputError):
    """A distance pair appears with two different values."""


class RateAbove100Pct(InputError):
    """An applicable ad-valorem rate exceeds 1.0."""


class ZeroCoefficient(InputError):
    """Coefficient of variation is undefined for a zero coefficient."""


class ZeroBaseline(InputError):
    """Relative impact is undefined against a zero base coefficient."""


class ZeroBaseValue(InputError):
    """Value impact is undefined against a zero base total."""

    def __init__(self, sector: str):
        self.sector = sector
        super().__init__(f"zero base value for sector '{sector}'")


class InsufficientData(InputError):
    """Not enough data for the requested diagnostic."""


class DegenerateSpread(InsufficientData):
    """Per-year means have no spread; the diagnostic slope is undefined."""


class MeanOverflow(InputError):
    """A synthetic mean exp(x.beta) overflows a double."""


class NumericalStructureError(GravimetricError):
    """The numeric problem is structurally defective (rank, definiteness)."""


class RankDeficient(NumericalStructureError):
    """Design matrix is rank deficient after reference-level dropping."""

    def __init__(self, columns):
        self.columns = tuple(columns)
        super().__init__(
            "design matrix is rank deficient; offending columns: "
            + ", ".join(self.columns)
        )


class SingularBread(NumericalStructureError):
    """The bread matrix X'WX of a sandwich covariance is singular."""


class HessianNotPositiveDefinite(NumericalStructureError):
    """The (expected) Hessian fails a symmetric factorization.

    Coefficients are still available on the ``fit`` attribute; covariance
    matrices are withheld.
    """

    def __init__(self, fit):
        self.fit = fit
        super().__init__(
            "Hessian is not positive definite; coefficients returned, "
            "covariances withheld"
        )


class BoundaryMaximum(GravimetricError):
    """A grid search ended on the boundary of its search box."""
