"""Exception hierarchy shared across the package."""


class SqlorchError(Exception):
    """Base class for all package errors."""


class ConfigError(SqlorchError):
    """Invalid or incomplete configuration (unknown template, missing model, bad TOML)."""


class SqlParseError(SqlorchError):
    """SQL text rejected by the statement validator."""

    def __init__(self, message: str, sql: str = "", pos: int | None = None):
        super().__init__(message)
        self.sql = sql
        self.pos = pos


class IngestError(SqlorchError):
    """Unreadable or structurally unusable input file."""


class TransportError(SqlorchError):
    """Provider call failed at the transport level (network, HTTP status, bad payload)."""


class CassetteMissError(SqlorchError):
    """Replay-mode request whose fingerprint has no recorded response."""

    def __init__(self, fingerprint: str):
        super().__init__(f"no cassette entry for fingerprint {fingerprint}")
        self.fingerprint = fingerprint


class TemplateRenderError(SqlorchError):
    """Prompt rendering failed (missing placeholders)."""

    def __init__(self, template_id: str, missing: list[str]):
        names = ", ".join(sorted(missing))
        super().__init__(f"template '{template_id}' missing placeholders: {names}")
        self.template_id = template_id
        self.missing = sorted(missing)


class ExecutionError(SqlorchError):
    """SQL execution failed with an engine diagnostic."""


class SqlTimeoutError(ExecutionError):
    """SQL statement exceeded the configured timeout."""


class GuardrailError(ExecutionError):
    """Statement classified as mutating was rejected in evaluation mode."""


class WorkflowError(SqlorchError):
    """Unrecoverable workflow failure (provider exhausted retries, invalid plan state)."""


class PlanValidationError(SqlorchError):
    """Generator plan rejected (cycle, over budget, bad references); triggers fallback."""
