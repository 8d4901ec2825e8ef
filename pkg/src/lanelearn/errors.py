"""Exception types shared across the package."""


class LaneLearnError(Exception):
    """Base class for package errors."""


class ValidationError(LaneLearnError):
    """Bad input: non-finite numbers, wrong shapes, out-of-range parameters."""


class CollisionError(LaneLearnError):
    """Two vehicles overlapped bumper-to-bumper. Aborts the episode."""

    def __init__(self, tick, first, second):
        super().__init__(f"collision at tick {tick} between {first} and {second}")
        self.tick = tick
        self.pair = (first, second)


class InsufficientDataError(LaneLearnError):
    """Too few samples or a single class; the caller falls back to the full zone."""


class InfeasibleProblemError(LaneLearnError):
    """No dynamically consistent trajectory satisfies the bounds."""

    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


class SolverError(LaneLearnError):
    """The QP solver failed to certify a solution."""


class StageError(LaneLearnError):
    """A policy-update stage failed; carries the stage name for diagnosis."""

    def __init__(self, stage, cause):
        super().__init__(f"policy update failed in stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause


class ExperienceFormatError(LaneLearnError):
    """Experience file is missing, corrupt, or has an unsupported version."""
