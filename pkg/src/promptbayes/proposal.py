"""The chain's proposal distribution: critique-then-revise prompt updates.

A proposal is itself a two-stage LLM pipeline. Stage 1 writes a critique of
the current prompts given their constraints, an objective statement, and
results on a mini-batch (a textual analogue of a gradient). Stage 2
rewrites each prompt conditioned on its current text, its constraints, and
the critique. The proposal density q(theta'|theta) marginalizes over the
critique; both the forward and the reverse terms are estimated with a
single sampled critique, so the acceptance ratio is itself noisy.

The reverse estimate always samples a fresh critique conditioned on the
proposed prompts rather than reusing the forward critique: q(theta|theta')
marginalizes over critiques of theta', which the forward critique is not.
"""

from __future__ import annotations

from dataclasses import dataclass

from .backends import Backend, ChatMessage, user
from .core import (
    Example,
    GenerationParams,
    LogDensity,
    ParamSet,
    PromptText,
    RngStream,
    normalize_answer,
)
from .errors import ConfigError, ExtractionError, ProposalError, ProtocolError
from .prior import ConstraintText
from .prompts import CRITIQUE_TEMPLATE, OBJECTIVE_DEFAULT, REVISION_TEMPLATE, fill


@dataclass(frozen=True)
class ObjectiveText:
    text: str = OBJECTIVE_DEFAULT

    def __post_init__(self):
        if not self.text:
            raise ValueError("objective must be non-empty")


@dataclass(frozen=True)
class ProposalContext:
    """A mini-batch with the current prompts' answers and correctness."""

    batch: tuple[Example, ...]
    answers: tuple[str, ...]
    correct: tuple[bool, ...]

    def __post_init__(self):
        if not (len(self.batch) == len(self.answers) == len(self.correct)):
            raise ValueError("batch, answers, and correct must have equal length")


@dataclass(frozen=True)
class ProposalResult:
    theta_new: ParamSet
    critiques: tuple[str, ...]
    log_q_fwd: LogDensity
    intermediates: tuple[ParamSet, ...] = ()  # strictly between theta and theta_new


def build_context(graph, batch, theta, backend, params, rng) -> ProposalContext:
    """Answer each mini-batch example with the current prompts.

    Correctness here is exact-match after normalization; it feeds the
    critique text only, not any reported metric. Extraction failures are
    shown to the critic as a missing answer.
    """
    from .pipeline import forward  # local import: pipeline does not need proposals

    answers, correct = [], []
    for x in batch:
        try:
            ans = forward(graph, x, theta, backend, params, rng).answer
        except ExtractionError:
            answers.append("(no final answer)")
            correct.append(False)
            continue
        answers.append(ans)
        correct.append(bool(x.target) and normalize_answer(ans) == normalize_answer(x.target))
    return ProposalContext(tuple(batch), tuple(answers), tuple(correct))


def _render_constraints(constraints: tuple[ConstraintText, ...]) -> str:
    return "\n".join(f"[{c.name}]\n{c.constraints}" for c in constraints)


def _render_prompts(theta: ParamSet) -> str:
    return "\n".join(f"[{p.name}]\n{p.text}" for p in theta.params)


def _render_results(ctx: ProposalContext) -> str:
    lines = []
    for i, (x, ans, ok) in enumerate(zip(ctx.batch, ctx.answers, ctx.correct), start=1):
        lines.append(f"{i}. Question: {x.input}")
        if x.target:
            lines.append(f"   Gold answer: {x.target}")
        lines.append(f"   Model answer: {ans}")
        lines.append(f"   Correct: {'yes' if ok else 'no'}")
    return "\n".join(lines)


def critique_messages(
    theta: ParamSet,
    ctx: ProposalContext,
    objective: ObjectiveText,
    constraints: tuple[ConstraintText, ...],
    template: str = CRITIQUE_TEMPLATE,
) -> list[ChatMessage]:
    content = fill(
        template,
        objective=objective.text,
        constraints=_render_constraints(constraints),
        prompts=_render_prompts(theta),
        results=_render_results(ctx),
    )
    return [user(content)]


def revision_messages(
    current: PromptText,
    constraint: ConstraintText,
    critique: str,
    template: str = REVISION_TEMPLATE,
) -> list[ChatMessage]:
    content = fill(
        template,
        constraints=constraint.constraints,
        current=current.text,
        critique=critique,
    )
    return [user(content)]


class CritiqueReviseProposer:
    """q(theta'|theta): sample a critique, then rewrite each prompt.

    ``steps`` > 1 composes several critique/revise rounds into one proposal
    (an optimizer-momentum style variant); the forward density is then the
    product over rounds and the reverse walks the recorded intermediate
    states backwards, each round with its own fresh critique.
    """

    needs_context = True

    def __init__(
        self,
        backend: Backend,
        constraints: tuple[ConstraintText, ...],
        objective: ObjectiveText | None = None,
        steps: int = 1,
        max_tokens: int = 1024,
        critique_template: str = CRITIQUE_TEMPLATE,
        revision_template: str = REVISION_TEMPLATE,
    ):
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if not backend.can_score:
            raise ConfigError(
                "proposal backend must support scoring: q(theta'|theta) is evaluated "
                "with the same backend that generates revisions"
            )
        self.backend = backend
        self.constraints = tuple(constraints)
        self.objective = objective or ObjectiveText()
        self.steps = steps
        self.params = GenerationParams(temperature=1.0, max_tokens=max_tokens)
        self.critique_template = critique_template
        self.revision_template = revision_template
        self._by_name = {c.name: c for c in self.constraints}

    def _constraint(self, name: str) -> ConstraintText:
        try:
            return self._by_name[name]
        except KeyError:
            raise ProposalError(f"no constraints for prompt {name!r}") from None

    def _one_step(self, theta: ParamSet, ctx: ProposalContext, rng: RngStream):
        """One critique/revise round; returns (theta', critique, log q)."""
        msgs = critique_messages(theta, ctx, self.objective, self.constraints, self.critique_template)
        critique = self.backend.generate(msgs, self.params, rng).text
        revised, log_q = [], 0.0
        for p in theta.params:
            rmsgs = revision_messages(p, self._constraint(p.name), critique, self.revision_template)
            text = self.backend.generate(rmsgs, self.params, rng).text
            if not text:
                raise ProposalError(f"empty revision for prompt {p.name!r}")
            revised.append(PromptText(p.name, text))
            log_q += self.backend.score_target(rmsgs, text)
        return ParamSet(tuple(revised)), critique, log_q

    def propose(self, theta: ParamSet, ctx: ProposalContext, rng: RngStream) -> ProposalResult:
        try:
            states, critiques, total = [theta], [], 0.0
            for _ in range(self.steps):
                nxt, critique, lq = self._one_step(states[-1], ctx, rng)
                states.append(nxt)
                critiques.append(critique)
                total += lq
        except (ProtocolError, ExtractionError, ValueError) as exc:
            raise ProposalError(f"proposal generation failed: {exc}") from exc
        return ProposalResult(
            theta_new=states[-1],
            critiques=tuple(critiques),
            log_q_fwd=total,
            intermediates=tuple(states[1:-1]),
        )

    def log_q(
        self,
        theta_to: ParamSet,
        theta_from: ParamSet,
        ctx: ProposalContext,
        rng: RngStream,
        via: tuple[ParamSet, ...] = (),
    ) -> LogDensity:
        """Single-sample estimate of log q(theta_to | theta_from).

        ``via`` holds the forward intermediates (in forward order) when the
        proposal was composed of several rounds; the reverse path visits
        them backwards.
        """
        path = [theta_from, *reversed(via), theta_to]
        total = 0.0
        for src, dst in zip(path[:-1], path[1:]):
            msgs = critique_messages(src, ctx, self.objective, self.constraints, self.critique_template)
            critique = self.backend.generate(msgs, self.params, rng).text
            for p in dst.params:
                rmsgs = revision_messages(
                    src.get(p.name), self._constraint(p.name), critique, self.revision_template
                )
                total += self.backend.score_target(rmsgs, p.text)
        return total
