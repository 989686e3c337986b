"""Exception types raised across the package."""


class HomolabError(Exception):
    pass


class DegenerateCorners(HomolabError):
    pass


class ProjectiveOverflow(HomolabError):
    pass


class ShapeMismatch(HomolabError, ValueError):
    pass


class ImageTooSmall(HomolabError, ValueError):
    pass


class OverlapUnsatisfiable(HomolabError):
    def __init__(self, attempts: int):
        super().__init__(f"overlap constraint not met after {attempts} attempts")
        self.attempts = attempts


class BadParams(HomolabError, ValueError):
    pass


class BadRatios(HomolabError, ValueError):
    pass


class EmptyCorpus(HomolabError):
    pass


class EmptySet(HomolabError, ValueError):
    pass


class ZeroVariance(HomolabError, ValueError):
    pass


class NonFiniteLoss(HomolabError, FloatingPointError):
    def __init__(self, batch_id, value=None):
        super().__init__(f"non-finite loss {value!r} at batch {batch_id}")
        self.batch_id = batch_id


class WrongSplit(HomolabError, ValueError):
    pass


class ConfigError(HomolabError, ValueError):
    pass
