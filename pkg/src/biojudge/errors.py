"""Exception hierarchy shared across the harness."""

from __future__ import annotations


class BiojudgeError(Exception):
    """Base class for all harness errors."""


class ContractError(BiojudgeError, ValueError):
    """A caller violated an operation's precondition."""


class ProtocolParseError(BiojudgeError, ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ProtocolIntegrityError(BiojudgeError, ValueError):
    """Parsed content disagrees with its own declared totals or identities."""


class MissingFilesError(ProtocolIntegrityError):
    def __init__(self, missing: list[str]) -> None:
        self.missing = list(missing)
        shown = ", ".join(self.missing[:10])
        more = f" (+{len(self.missing) - 10} more)" if len(self.missing) > 10 else ""
        super().__init__(f"{len(self.missing)} image file(s) not found: {shown}{more}")


class EmptyProtocolError(ProtocolIntegrityError):
    pass


class ProviderError(BiojudgeError):
    """A provider call failed for this request only."""


class RetryableError(ProviderError):
    def __init__(self, message: str, status: int | None = None, retry_after: float | None = None) -> None:
        self.status = status
        self.retry_after = retry_after
        super().__init__(message)


class AuthError(ProviderError):
    """Credential rejected; never retried and halts a run."""


class TransportError(ProviderError):
    def __init__(self, message: str, attempts: list[str]) -> None:
        self.attempts = list(attempts)
        super().__init__(f"{message} after {len(attempts)} attempt(s): {'; '.join(attempts)}")


class ProviderContractError(ProviderError):
    """The provider answered but the payload lacks the expected text."""


class UnscriptedRequestError(ProviderError):
    def __init__(self, key: str) -> None:
        self.key = key
        super().__init__(f"mock provider has no script entry for key {key}")


class LedgerError(BiojudgeError):
    """Ledger cannot be written or does not match the live run."""


class IntegrityError(BiojudgeError, ValueError):
    """Records and protocol disagree (duplicate or unknown trial ids)."""
