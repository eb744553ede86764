"""Bayesian inference over the textual parameters of LLM systems.

The package treats the prompts of a multi-stage LLM pipeline as unknown
parameters, samples from their tempered posterior with a
Metropolis-Hastings chain whose proposals are themselves LLM rewrites, and
uses the resulting prompt ensemble for calibrated uncertainty estimates and
conformal filtering of generated claims.
"""

from .core import (
    NEG_INF,
    Dataset,
    Example,
    GenerationParams,
    LogDensity,
    ParamSet,
    PromptText,
    RngStream,
    draw_minibatch,
    normalize_answer,
)
from .errors import (
    CapabilityError,
    ChainSuspendedError,
    ConfigError,
    DecompositionError,
    ExtractionError,
    InfeasibleError,
    PromptBayesError,
    ProposalError,
    ProtocolError,
    RetriableError,
    UndefinedMetricError,
    UnknownQueryError,
)

__version__ = "0.1.0"

__all__ = [
    "NEG_INF",
    "Dataset",
    "Example",
    "GenerationParams",
    "LogDensity",
    "ParamSet",
    "PromptText",
    "RngStream",
    "draw_minibatch",
    "normalize_answer",
    "CapabilityError",
    "ChainSuspendedError",
    "ConfigError",
    "DecompositionError",
    "ExtractionError",
    "InfeasibleError",
    "PromptBayesError",
    "ProposalError",
    "ProtocolError",
    "RetriableError",
    "UndefinedMetricError",
    "UnknownQueryError",
    "__version__",
]
