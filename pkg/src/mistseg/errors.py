"""Exception hierarchy shared by all pipeline stages."""


def _restore(cls, args, state):
    obj = cls.__new__(cls)
    Exception.__init__(obj, *args)
    obj.__dict__.update(state)
    return obj


class MistError(Exception):
    """Base class for every error raised by this package."""

    # subclasses take custom constructor arguments; rebuild from state so
    # errors survive the trip back from worker processes
    def __reduce__(self):
        return _restore, (type(self), self.args, self.__dict__)


# nifti
class NiftiError(MistError):
    pass


class BadMagic(NiftiError):
    pass


class CorruptHeader(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class DimensionUnsupported(NiftiError):
    pass


class LossyCast(NiftiError):
    pass


class NiftiIoError(NiftiError, OSError):
    pass


# geometry
class DegenerateDirection(MistError):
    pass


class BoxOutOfRange(MistError):
    pass


class ShapeMismatch(MistError, ValueError):
    pass


class GeometryMismatch(MistError):
    pass


# dataset layout
class SchemaError(MistError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class DiscoveryError(MistError):
    def __init__(self, patient_id: str, message: str):
        super().__init__(f"patient {patient_id}: {message}")
        self.patient_id = patient_id


class MissingChannel(DiscoveryError):
    def __init__(self, patient_id: str, channel: str):
        super().__init__(patient_id, f"no file matches channel '{channel}'")
        self.channel = channel


class MissingMask(DiscoveryError):
    def __init__(self, patient_id: str):
        super().__init__(patient_id, "no mask file found")


class AmbiguousMatch(DiscoveryError):
    def __init__(self, patient_id: str, channel: str, matches):
        super().__init__(
            patient_id, f"channel '{channel}' matches several files: {sorted(matches)}"
        )
        self.channel = channel


class ConversionError(MistError, OSError):
    pass


class BadCustomFolds(MistError):
    pass


# analysis / preprocessing
class NoUsablePatients(MistError):
    pass


class NoForegroundVoxels(MistError):
    pass


class EmptyHistogram(MistError, ValueError):
    pass


class NonPositiveSpacing(MistError, ValueError):
    pass


class UnknownLabel(MistError, ValueError):
    def __init__(self, value):
        super().__init__(f"mask contains undeclared label {value}")
        self.value = value


class ProvenanceMissing(MistError):
    pass


class PatientError(MistError):
    """Wraps a stage failure with the patient it happened on."""

    def __init__(self, patient_id: str, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] patient {patient_id}: {cause}")
        self.patient_id = patient_id
        self.stage = stage
        self.cause = cause


# metrics / evaluation
class EmptySurface(MistError, ValueError):
    def __init__(self, which: str):
        super().__init__(f"{which} mask has no surface voxels")
        self.which = which


class NoPredictionsFound(MistError):
    pass


class CohortMismatch(MistError):
    pass


# inference
class PredictorShapeError(MistError, ValueError):
    pass


class EmptyList(MistError, ValueError):
    pass
