class NeftError(ValueError):
    """Base class for every contract violation raised by the library"""


class ShapeMismatchError(NeftError):
    pass


class DTypeMismatchError(NeftError):
    pass


class TapeError(NeftError):
    pass


class ConfigError(NeftError):
    pass


class TokenRangeError(NeftError):
    pass


class LabelRangeError(NeftError):
    pass


class MaskError(NeftError):
    pass


class ModelHashMismatchError(NeftError):
    pass


class EmptyDatasetError(NeftError):
    pass


class NonFiniteLossError(NeftError):
    def __init__(self, step: int, batch_indices: list[int], loss: float):
        self.step = step
        self.batch_indices = batch_indices
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss} at step {step} (batch indices {batch_indices})"
        )

    def diagnostics(self) -> dict:
        return {
            "step": self.step,
            "batch_indices": self.batch_indices,
            "loss": str(self.loss),
        }


class ProbeError(NeftError):
    pass


class AnalysisError(NeftError):
    pass


class FormatError(NeftError):
    pass


class UnknownFormatVersionError(FormatError):
    pass


class HashMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class PipelineError(NeftError):
    """One or more stages of a pipeline run failed"""
