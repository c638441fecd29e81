"""Exception hierarchy shared across the package."""


class SonagentError(Exception):
    """Base class for all package-specific errors."""


# --- routing / orchestration ---

class NoMatchingExpert(SonagentError):
    """No registered expert covers the resolved task kind."""


# --- tool registry and invocation ---

class DuplicateToolId(SonagentError):
    pass


class UnknownTool(SonagentError):
    pass


class ToolUnavailable(SonagentError):
    """Remote tool timed out or the transport failed after retry."""


class MalformedOutput(SonagentError):
    """Tool reply violates the wire/output schema."""


class MissingFixture(SonagentError):
    """No fixture recorded for this (tool id, image id) pair."""


class AllToolsFailed(SonagentError):
    """Every tool of an expert failed; nothing to fuse."""


# --- fusion / geometry ---

class DimensionMismatch(SonagentError):
    pass


class EmptyMask(SonagentError):
    pass


class DegenerateFit(SonagentError):
    """Boundary points do not determine an ellipse."""


class AllFitsFailed(SonagentError):
    """No candidate mask produced an acceptable ellipse fit."""


# --- deliberation backends ---

class BackendUnavailable(SonagentError):
    pass


class MissingScript(SonagentError):
    """Scripted backend has no entry for the requested key."""


# --- arbitration ---

class NoEvidence(SonagentError):
    """Neither votes nor tool evidence are available."""


class UnparseableOptions(SonagentError):
    """No option text yields a numeric value to match against."""


# --- evidence bank / retrieval ---

class ModeViolation(SonagentError):
    """Entry tag not allowed for the bank's mode (e.g. votes in a general-task bank)."""


class EmptyIndex(SonagentError):
    pass


class EmptyBank(SonagentError):
    pass


# --- charts / reporting ---

class OutOfDomain(SonagentError):
    """Gestational age outside the chart's tabulated range."""


class OutOfRange(SonagentError):
    """Measurement outside the invertible range of the chart mean curve."""


class ChartFormatError(SonagentError):
    pass


# --- workflows ---

class EmptyVideo(SonagentError):
    pass


# --- benchmark ---

class MissingLabel(SonagentError):
    pass


class UnknownItemId(SonagentError):
    pass


# --- configuration ---

class ConfigError(SonagentError):
    pass
