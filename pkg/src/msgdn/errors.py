class ConfigError(ValueError):
    """Inconsistent configuration or a tensor that does not match it."""


class ShapeError(ValueError):
    """Input tensor has the wrong shape for the operation."""


class CodecError(RuntimeError):
    """External codec process failed or produced no bitstream."""


class InfeasibleBudget(ValueError):
    """No selection of coding points meets the rate target."""

    def __init__(self, target: float, minimum: float):
        self.target = target
        self.minimum = minimum
        super().__init__(
            f"target {target:.6g} bpp is infeasible; "
            f"minimum achievable mean bpp is {minimum:.6g}"
        )


class TrainingError(RuntimeError):
    """Non-finite loss or another unrecoverable training failure."""
