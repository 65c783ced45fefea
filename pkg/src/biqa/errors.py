"""Exception types shared across the package.

Everything raised on purpose derives from BiqaError so the CLI can map
package failures to a single exit code.
"""


class BiqaError(Exception):
    pass


# --- tensor / autodiff ---

class ShapeMismatch(BiqaError):
    pass


class NonScalarOutput(BiqaError):
    pass


class TapeConsumed(BiqaError):
    pass


class BatchTooSmall(BiqaError):
    pass


class InvalidRate(BiqaError):
    pass


class MissingGradient(BiqaError):
    pass


# --- model / checkpoints ---

class InvalidConfig(BiqaError):
    pass


class CorruptCheckpoint(BiqaError):
    pass


# --- metrics ---

class DegenerateInput(BiqaError):
    pass


class LengthMismatch(BiqaError):
    pass


# --- data pipeline ---

class ParseError(BiqaError):
    pass


class MissingRange(BiqaError):
    pass


class ScoreOutOfRange(BiqaError):
    pass


class TooFewSamples(BiqaError):
    pass


class UnsupportedFormat(BiqaError):
    pass


class CorruptImage(BiqaError):
    pass


class EmptySplit(BiqaError):
    pass


# --- attribution ---

class NoSpatialLayer(BiqaError):
    pass


class UnknownLayer(BiqaError):
    pass
