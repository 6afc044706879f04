"""Exception hierarchy shared across the package.

Errors are grouped by the CLI exit code they map to: configuration problems
(2), data problems (3) and numerical divergence (4).
"""


class GSMetaError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(GSMetaError, ValueError):
    """Invalid configuration value or combination of values."""


class DataError(GSMetaError, ValueError):
    """Invalid or insufficient input data."""


# chem ---------------------------------------------------------------------


class SmilesError(DataError):
    """Base class for SMILES parse failures."""

    def __init__(self, message, smiles=None, position=None):
        self.smiles = smiles
        self.position = position
        if smiles is not None and position is not None:
            message = f"{message} (at position {position} in {smiles!r})"
        super().__init__(message)


class UnclosedRing(SmilesError):
    pass


class UnbalancedParenthesis(SmilesError):
    pass


class UnknownToken(SmilesError):
    pass


class UnsupportedFeature(SmilesError):
    pass


class SmilesSyntaxError(SmilesError):
    """Structurally malformed input: dangling bonds, empty branches, self-bonds."""


# autodiff -----------------------------------------------------------------


class ShapeMismatch(GSMetaError, ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, shapes))}")


class NotScalarLoss(GSMetaError, ValueError):
    pass


# graph construction and sampling -----------------------------------------


class EmptyDataset(DataError):
    pass


class BadSplitSize(ConfigError):
    pass


class InsufficientMolecules(DataError):
    def __init__(self, message, label=None):
        self.label = label
        super().__init__(message)


class TargetNotInSplit(DataError):
    pass


class NoEligibleProperty(DataError):
    pass


# scheduler ----------------------------------------------------------------


class BatchTooLarge(ConfigError):
    pass


class DegenerateBatch(GSMetaError, ValueError):
    pass


class ZeroVector(GSMetaError, ValueError):
    pass


# training / evaluation ----------------------------------------------------


class NumericalDivergence(GSMetaError, ArithmeticError):
    pass


class SingleClass(DataError):
    pass


# ingestion ----------------------------------------------------------------


class MalformedHeader(DataError):
    pass


class RowArityMismatch(DataError):
    def __init__(self, line, expected, got):
        self.line = line
        self.expected = expected
        self.got = got
        super().__init__(f"line {line}: expected {expected} cells, got {got}")
