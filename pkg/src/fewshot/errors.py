"""Exception hierarchy shared by all fewshot modules."""


class FewshotError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(FewshotError):
    """An argument violates an operation's precondition or invariant."""


class TaskParseError(FewshotError):
    """A task file record does not match the expected schema.

    Messages name the offending line number and field.
    """


class TaskValidationError(FewshotError):
    """A parsed task violates a cross-field invariant (names the task_id)."""


class BackendError(FewshotError):
    """Base class for scoring-backend failures."""


class BackendTransportError(BackendError):
    """Transport-level failure that survived the bounded retry loop."""


class CapabilityError(BackendError):
    """The backend does not expose a required capability (endpoint)."""


class MalformedResponseError(BackendError):
    """A backend response violates the contract (e.g. a positive logprob)."""


class TrainingError(FewshotError):
    """Regressor training failed (message names the epoch)."""


class ExecutorError(FewshotError):
    """The code executor itself crashed; distinct from a failing verdict."""


class ConfigError(FewshotError):
    """Inconsistent run configuration (e.g. a ranker missing its model)."""
