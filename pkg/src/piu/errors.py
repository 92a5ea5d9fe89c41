"""Exception types shared across the package."""


class PiuError(Exception):
    """Base class for all library errors."""


class InvalidArgument(PiuError, ValueError):
    pass


class ConfigError(PiuError):
    pass


class NoAnchorFound(PiuError):
    """Raised when no identity lies inside the proximity band.

    ``nearest_gap`` is the smallest achievable ``|s_j - tau|`` so a caller can
    decide how far to widen the tolerance.
    """

    def __init__(self, tau, tolerance, nearest_gap, nearest_identity):
        self.tau = tau
        self.tolerance = tolerance
        self.nearest_gap = nearest_gap
        self.nearest_identity = nearest_identity
        super().__init__(
            f"no anchor with |s - {tau}| < {tolerance}; nearest gap {nearest_gap:.6g} "
            f"(identity {nearest_identity})"
        )


class TrainingDiverged(PiuError):
    def __init__(self, step, detail="non-finite loss"):
        self.step = step
        super().__init__(f"training diverged at step {step}: {detail}")


class DegenerateSchedule(PiuError):
    pass


class Unrecognizable(PiuError):
    pass


class DegenerateGradient(PiuError):
    pass


class SingularSystem(PiuError):
    pass
