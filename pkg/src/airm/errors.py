"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument is outside its documented domain."""


class ShapeError(ValueError):
    """Array or tensor dimensions do not line up."""


class PerturbationError(RuntimeError):
    """The requested IoU band could not be reached."""

    def __init__(self, message, best_iou):
        super().__init__(f"{message} (best achieved IoU {best_iou:.6f})")
        self.best_iou = best_iou


class RasterIOError(OSError):
    """A PNG could not be read or has the wrong layout."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt, from another format version, or mismatched."""


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, iteration=None, batch_seed=None):
        super().__init__(message)
        self.iteration = iteration
        self.batch_seed = batch_seed
