"""Exception hierarchy.

Every error raised by the library derives from one of four families. The CLI
maps each family to a fixed exit code.
"""


class MasqueError(Exception):
    exit_code = 1


class ConfigError(MasqueError):
    exit_code = 2


class DataError(MasqueError):
    exit_code = 3


class ModelError(MasqueError):
    exit_code = 4


class RemoteServiceError(MasqueError):
    exit_code = 5


# data-shaped problems
class ShapeMismatch(DataError, ValueError):
    pass


class UnknownTokens(DataError, ValueError):
    pass


class MaskVanished(DataError):
    pass


class EmptyMask(DataError):
    pass


class EmptyRegion(DataError):
    pass


class TokenMapMismatch(DataError):
    pass


class EmptyGuideSet(DataError):
    pass


class IdentityNotInGallery(DataError, KeyError):
    pass


class InsufficientPairs(DataError):
    pass


class UnknownTransform(DataError, KeyError):
    pass


class DegenerateInput(DataError):
    pass


# model / numerics
class ScheduleError(ModelError, ValueError):
    pass


class TrainingDiverged(ModelError):
    pass


class NonFiniteGradient(ModelError):
    pass


class CheckpointError(ModelError):
    pass


# remote face-verification service
class AuthError(RemoteServiceError):
    pass


class RateLimited(RemoteServiceError):
    pass


class ServiceUnavailable(RemoteServiceError):
    pass
