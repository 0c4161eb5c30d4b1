"""Exception hierarchy shared by every module."""

from __future__ import annotations


class SrLoraError(Exception):
    """Base class for all library errors."""


class NonConvergence(SrLoraError):
    def __init__(self, iterations: int, estimate: float):
        super().__init__(
            f"power iteration did not converge after {iterations} iterations "
            f"(last estimate {estimate!r})"
        )
        self.iterations = iterations
        self.estimate = estimate


class DimensionTooLarge(SrLoraError, ValueError):
    pass


class ZeroMatrix(SrLoraError, ValueError):
    pass


class NonFiniteMatrix(SrLoraError, ValueError):
    pass


class ConstantInput(SrLoraError, ValueError):
    pass


class LengthMismatch(SrLoraError, ValueError):
    pass


class ShapeMismatch(SrLoraError, ValueError):
    pass


class RankTooLarge(SrLoraError, ValueError):
    pass


class SpuDisabled(SrLoraError):
    pass


class MissingWeight(SrLoraError, KeyError):
    def __init__(self, key):
        super().__init__(key)
        self.key = key

    def __str__(self) -> str:
        return f"missing weight for {self.key}"


class PlanMismatch(SrLoraError, ValueError):
    pass


class NonFiniteLoss(SrLoraError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class TapeConsumed(SrLoraError):
    pass


class EmptyDataset(SrLoraError, ValueError):
    pass


class BundleError(SrLoraError):
    """A checkpoint bundle could not be read or written.

    ``tensor`` names the offending tensor when one can be identified.
    """

    def __init__(self, message: str, tensor: str | None = None):
        if tensor is not None:
            message = f"{message} (tensor {tensor!r})"
        super().__init__(message)
        self.tensor = tensor


class ManifestParse(BundleError):
    pass


class OffsetOverlap(BundleError):
    pass


class TruncatedPayload(BundleError):
    pass


class UnknownDtype(BundleError):
    pass
