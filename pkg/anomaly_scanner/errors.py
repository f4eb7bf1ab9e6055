"""
Scanner Errors
==============

Exception types raised across the anomaly scanner.
"""

from typing import Iterable, Optional


class AnomalyScannerError(Exception):
    """Base class for all scanner errors."""


class VocabularyError(AnomalyScannerError):
    """Vocabulary file could not be loaded."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class TokenNotFoundError(AnomalyScannerError, KeyError):
    """Token id is not present in the vocabulary."""

    def __init__(self, token_id: int):
        self.token_id = token_id
        super().__init__(f"token id {token_id} not in vocabulary")

    def __str__(self) -> str:
        return self.args[0]


class DistributionError(AnomalyScannerError, ValueError):
    """Top-logprob list violates the distribution invariants."""


class EmptyDistributionError(DistributionError):
    """Metrics were requested for a no-result probe."""


class EmptyBaselineError(AnomalyScannerError, ValueError):
    """Baseline requested over zero successful probes."""


class ResponseParseError(AnomalyScannerError):
    """Chat-completion response does not have the expected shape."""

    def __init__(self, path: str, message: str = "missing or malformed"):
        self.path = path
        super().__init__(f"{path}: {message}")


class LLMClientError(AnomalyScannerError):
    """Endpoint answered with a status that retrying cannot fix."""

    def __init__(self, status_code: int, body: str = ""):
        self.status_code = status_code
        super().__init__(f"endpoint returned HTTP {status_code}: {body[:200]}")


class TransportOutageError(AnomalyScannerError):
    """Endpoint unreachable after exhausting retries."""


class CheckpointError(AnomalyScannerError):
    """Checkpoint cannot be used (corrupt header, fingerprint mismatch)."""


class ScanInterrupted(AnomalyScannerError):
    """Scan stopped early; completed work is on disk and can be resumed."""


class GuardError(AnomalyScannerError):
    """Blocklist could not be built or applied."""


class GuardUnresolvableError(GuardError):
    """Blocked ids survive the maximum number of perturbation passes."""

    def __init__(self, surviving_ids: Iterable[int]):
        self.surviving_ids = sorted(set(surviving_ids))
        super().__init__(f"blocked token ids survive perturbation: {self.surviving_ids}")


class ConfigError(AnomalyScannerError):
    """Invalid configuration file or option."""


class MockServerError(AnomalyScannerError):
    """Mock server could not start or its profile is invalid."""
