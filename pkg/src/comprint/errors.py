"""Exception types shared across the package.

Two families matter to callers (and to the CLI exit codes): problems with
what the user handed in (:class:`InputError`) and failures inside a stage
of the pipeline (:class:`PipelineError`).
"""


class ComprintError(Exception):
    pass


class InputError(ComprintError, ValueError):
    """Invalid argument, unreadable file, undersized image, ..."""


class NotAJpegError(InputError):
    pass


class MalformedStreamError(InputError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ShapeError(InputError):
    pass


class PipelineError(ComprintError, RuntimeError):
    pass


class StateError(PipelineError):
    pass


class TrainingDivergenceError(PipelineError):
    def __init__(self, step, message="non-finite value encountered"):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


class DegenerateBatchError(PipelineError):
    pass


class DegenerateInputError(PipelineError):
    pass


class DegenerateClusteringError(PipelineError):
    pass
