"""Exception hierarchy shared by every stage of the pipeline."""


class ProcformerError(Exception):
    """Base class for all errors raised by procformer."""


class InputDataError(ProcformerError, ValueError):
    """Problems with a user-supplied event log."""


class MissingColumn(InputDataError):
    pass


class BadTimestamp(InputDataError):
    def __init__(self, row, value, source=None):
        self.row = row
        self.value = value
        self.source = source
        where = f"{source}:{row}" if source else f"row {row}"
        super().__init__(f"{where}: cannot parse timestamp {value!r}")


class EmptyLog(InputDataError):
    pass


class DegenerateSplit(InputDataError):
    pass


class TraceTooShort(InputDataError):
    pass


class TraceTooLong(InputDataError):
    pass


class EmptyDataset(InputDataError):
    pass


class EmptyInput(ProcformerError, ValueError):
    pass


class EmptyTestSet(EmptyInput):
    pass


class ShapeMismatch(ProcformerError, ValueError):
    pass


class AllMasked(ProcformerError, ValueError):
    pass


class NonScalarLoss(ProcformerError, ValueError):
    pass


class BadTargetId(ProcformerError, ValueError):
    pass


class PrefixLongerThanMaxLen(ProcformerError, ValueError):
    pass


class NonFiniteGradient(ProcformerError, FloatingPointError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


class DivergedLoss(ProcformerError, FloatingPointError):
    def __init__(self, epoch, last_finite_epoch=None):
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch
        super().__init__(
            f"validation loss became NaN at epoch {epoch} "
            f"(last finite epoch: {last_finite_epoch})"
        )


class ModelFileError(ProcformerError):
    pass


class VersionMismatch(ModelFileError):
    pass


class CorruptFile(ModelFileError):
    pass
