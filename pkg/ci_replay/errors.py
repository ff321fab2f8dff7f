"""
错误类型 - Exception hierarchy
Every failure a pipeline stage can report maps to exactly one class here.
"""
from typing import Optional


class ReplayError(Exception):
    """Base class for all ci-replay errors"""


class ConfigError(ReplayError):
    """Invalid or missing configuration (exit code 2)"""


# ---- forge ----

class InvalidTokenError(ReplayError):
    """Forge rejected (or was never given) the access token"""


class NetworkUnreachableError(ReplayError):
    pass


class ForgeError(ReplayError):
    def __init__(self, message: str, status: Optional[int] = None):
        super().__init__(message)
        self.status = status


class RateLimitedError(ForgeError):
    def __init__(self, message: str, retry_after: Optional[float] = None):
        super().__init__(message, status=429)
        self.retry_after = retry_after


class RepoNotFoundError(ForgeError):
    pass


class LogExpiredError(ForgeError):
    """Forge retention elapsed; expected for historical runs"""


# ---- reconstruction ----

class CloneFailedError(ReplayError):
    pass


class CommitUnreachableError(ReplayError):
    pass


class UnsupportedConfigError(ReplayError):
    def __init__(self, reason: str):
        super().__init__(f"unsupported-config: {reason}")
        self.reason = reason


class JobNotFoundError(ReplayError):
    pass


class RuntimeUnavailableError(ReplayError):
    pass


class ImageBuildFailedError(ReplayError):
    def __init__(self, cause, log: bytes = b""):
        super().__init__(f"image build failed ({cause.kind.value}): {cause.evidence}")
        self.cause = cause
        self.log = log


class RebuildTimeoutError(ReplayError):
    def __init__(self, seconds: float, log: bytes = b""):
        super().__init__(f"timeout after {seconds:g} s")
        self.seconds = seconds
        self.log = log


# ---- fidelity ----

class ConfigMismatchError(ReplayError):
    """Two logs normalised under different configs cannot be compared"""


class QuotaInfeasibleError(ReplayError):
    pass


# ---- artifact store ----

class ArtifactNotFoundError(ReplayError):
    pass


class DigestMismatchError(ReplayError):
    pass


class DuplicateKeyError(ReplayError):
    pass


class StoreIOError(ReplayError):
    pass
