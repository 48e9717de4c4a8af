"""Exception hierarchy shared by all geomatch modules.

The CLI maps these onto exit codes: DataError -> 2, NumericalError -> 3.
"""


class GeomatchError(Exception):
    """Base class for all package-specific failures."""


class DataError(GeomatchError):
    """Missing/malformed files, schema violations, shape mismatches."""


class NumericalError(GeomatchError):
    """Degenerate or non-finite numerical situations."""


class ProjectiveSingularityError(NumericalError):
    """Homography denominator vanished at a mapped point."""

    def __init__(self, index: int, point, denominator: float):
        self.index = int(index)
        self.point = tuple(float(v) for v in point)
        self.denominator = float(denominator)
        super().__init__(
            f"projective denominator {self.denominator:.3e} below guard at "
            f"point {self.index} = {self.point}"
        )


class DegenerateCornersError(NumericalError):
    """Four-point fit is rank deficient (collinear triple or coincident points)."""


class H9NearZeroError(NumericalError):
    """h9-based rescaling unavailable (|h9| too small); fall back to Frobenius."""


class DegenerateDescriptorError(NumericalError):
    """A feature descriptor has no usable norm/variance for correlation."""

    def __init__(self, which: str, row: int, col: int, reason: str):
        self.which = which
        self.row = int(row)
        self.col = int(col)
        super().__init__(f"degenerate descriptor in map {which} at cell ({row}, {col}): {reason}")


class DegenerateObjectiveError(NumericalError):
    """Loss has no support (e.g. all grid weights are zero)."""


class GenerationError(NumericalError):
    """Sample generation exhausted its rejection-sampling budget."""


class TrainingDivergedError(NumericalError):
    """Non-finite loss encountered during optimisation."""

    def __init__(self, epoch: int, step: int, value: float):
        self.epoch = int(epoch)
        self.step = int(step)
        self.value = float(value)
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {step}")
