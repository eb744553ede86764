"""Textual priors over prompt sets.

Each prompt theta_i gets an independent prior defined operationally: the
density of the text that a fixed backend produces when asked, via a fixed
meta-prompt, to write a prompt satisfying a human-written constraint
string s_i. Because the density is the backend's own sampling
distribution, the same backend must both generate prior draws and score
their log-probability, and generation runs at temperature 1 (any other
temperature would change the measure being scored).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .backends import Backend, ChatMessage, system, user
from .core import GenerationParams, LogDensity, ParamSet, PromptText, RngStream
from .errors import ConfigError
from .prompts import META_PROMPT


@dataclass(frozen=True)
class ConstraintText:
    """Free-form constraints for one prompt, matched to it by name."""

    name: str
    constraints: str

    def __post_init__(self):
        if not self.name or not self.constraints:
            raise ValueError("constraint name and text must be non-empty")


@dataclass
class PriorSpec:
    constraints: tuple[ConstraintText, ...]
    backend: Backend
    max_tokens: int = 1024
    meta_prompt: str = field(default=META_PROMPT, init=False)  # byte-fixed: defines p(theta)

    def __post_init__(self):
        if not self.constraints:
            raise ValueError("prior needs at least one constraint")
        names = [c.name for c in self.constraints]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate constraint names: {names}")
        if not self.backend.can_score:
            raise ConfigError(
                "prior backend must support scoring: the prior's generator and "
                "scorer have to be the same backend for p(theta) to be well-defined"
            )

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.constraints)


def prior_messages(constraint: ConstraintText) -> list[ChatMessage]:
    return [system(META_PROMPT), user(constraint.constraints)]


def sample_prior(spec: PriorSpec, rng: RngStream) -> ParamSet:
    """Draw theta_i independently per constraint at temperature 1."""
    params = GenerationParams(temperature=1.0, max_tokens=spec.max_tokens)
    drawn = []
    for c in spec.constraints:
        text = spec.backend.generate(prior_messages(c), params, rng).text
        drawn.append(PromptText(c.name, text))
    return ParamSet(tuple(drawn))


def log_prior(theta: ParamSet, spec: PriorSpec) -> LogDensity:
    """Factorized log p(theta) = sum_i log p(theta_i | s_i)."""
    if set(theta.names) != set(spec.names):
        raise ConfigError(
            f"parameter names {theta.names} do not match prior constraints {spec.names}"
        )
    total = 0.0
    for c in spec.constraints:
        total += spec.backend.score_target(prior_messages(c), theta.get(c.name).text)
    return total
