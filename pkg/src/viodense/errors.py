"""Exception hierarchy shared across the library."""


class VioDenseError(Exception):
    """Base class for all library errors."""


# --- geometry ---------------------------------------------------------------

class BehindCamera(VioDenseError):
    """Point has non-positive depth and cannot be projected."""


class DimensionMismatch(VioDenseError):
    """Grid/image dimensions disagree with what the caller declared."""


# --- filtering --------------------------------------------------------------

class TimestampGap(VioDenseError):
    """IMU stream has a gap larger than the configured maximum."""


class InsufficientParallax(VioDenseError):
    """Feature observations do not constrain a 3D point."""


class DivergedSolve(VioDenseError):
    """Iterative solver failed to reduce its cost."""


class RankDeficient(VioDenseError):
    """Feature Jacobian does not have full column rank."""


class SingularInnovation(VioDenseError):
    """EKF innovation covariance is not invertible."""


# --- simulation -------------------------------------------------------------

class TooFewPoses(VioDenseError):
    """Not enough poses to fit a trajectory spline."""


class NonMonotoneTimestamps(VioDenseError):
    """Timestamps are not strictly increasing."""


class NoVisibleGeometry(VioDenseError):
    """No scene surface or landmark is visible from the queried pose."""


# --- alignment / scaffold ---------------------------------------------------

class TooFewPoints(VioDenseError):
    """Not enough sparse points for an affine fit."""


class DegenerateFit(VioDenseError):
    """Affine fit is unobservable (all predictions identical)."""


class EmptyKnots(VioDenseError):
    """Scaffold construction received no knots."""


# --- refinement -------------------------------------------------------------

class EmptyImage(VioDenseError):
    """Feature extraction received an empty image."""


class NoReferences(VioDenseError):
    """Cost computation requires at least one reference frame."""


# --- metrics ----------------------------------------------------------------

class EmptyMask(VioDenseError):
    """Metric or loss evaluation mask selects no pixels."""


class EmptyList(VioDenseError):
    """Aggregation received an empty list."""


# --- dataset ----------------------------------------------------------------

class MissingFile(VioDenseError):
    """A dataset file referenced by the layout does not exist."""


class ParseError(VioDenseError):
    """A dataset file is malformed.

    Carries the offending path and, when known, the 1-based line number.
    """

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")
