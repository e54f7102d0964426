class ContractViolation(ValueError):
    """A caller broke a documented precondition (shapes, lengths, unknown ids)."""


class EmbeddingFormatError(ValueError):
    """An embedding file has a bad header or a truncated body."""


class TrainingDivergedError(RuntimeError):
    """A loss or gradient became non-finite during training."""


class StageError(RuntimeError):
    """An error raised when a pipeline stage fails.

    Outputs written by earlier stages are left in ``out_dir``.
    """

    def __init__(self, *, error, stage, out_dir, cause=None):
        self.stage = stage
        self.out_dir = out_dir
        self.cause = cause
        super().__init__(error)
