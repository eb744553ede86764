"""Exception hierarchy shared across the package."""


class PromptBayesError(Exception):
    """Base class for all package errors."""


class ConfigError(PromptBayesError):
    """Invalid configuration; the message carries the offending field path."""


class RetriableError(PromptBayesError):
    """Transport failure that persisted after the retry budget was spent.

    Runs interrupted by this error are resumable.
    """


class ProtocolError(PromptBayesError):
    """The remote backend returned a payload we cannot interpret."""


class UnknownQueryError(PromptBayesError):
    """A mock backend was asked about a query absent from its table."""


class CapabilityError(PromptBayesError):
    """The backend does not support the requested operation (e.g. scoring)."""


class ExtractionError(PromptBayesError):
    """The final completion did not contain the answer marker."""


class ProposalError(PromptBayesError):
    """Proposal generation failed; the sampler records the step as rejected."""


class DecompositionError(PromptBayesError):
    """Claim decomposition produced no parseable claims."""


class InfeasibleError(PromptBayesError):
    """Conformal settings cannot be satisfied (rank exceeds calibration size)."""


class UndefinedMetricError(PromptBayesError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class ChainSuspendedError(RetriableError):
    """A chain run was suspended mid-way; carries the run directory to resume."""

    def __init__(self, message, run_dir=None, step=None):
        super().__init__(message)
        self.run_dir = run_dir
        self.step = step
