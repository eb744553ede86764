"""LLM pipelines as parameterized DAGs, plus their likelihood estimators.

A pipeline is a DAG of call sites, each parameterized by one prompt from a
ParamSet. A forward pass executes sites in topological order, feeding each
site's output into its successors' message templates, and extracts the
final answer as the span after the last occurrence of the answer marker.

The model viewed statistically: p(y | x, theta) marginalizes over the trace
z of intermediate outputs (including the final site's reasoning before the
marker). ``loglik_example`` estimates log p(y | x, theta) with a single
sampled trace: it runs the non-final sites, samples the final site's
reasoning up to the marker from the scoring backend, then scores the gold
answer as the continuation. The estimate is unbiased in probability space,
not in log space; the sampler treats log g as noisy accordingly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .backends import Backend, ChatMessage, assistant
from .core import (
    NEG_INF,
    Dataset,
    Example,
    GenerationParams,
    LogDensity,
    ParamSet,
    RngStream,
    draw_minibatch,
)
from .errors import ConfigError, ExtractionError
from .prompts import ANSWER_FORMAT_SUFFIX, ANSWER_MARKER, FORMAT_REMINDER

DEFAULT_TEMPLATE = (("system", "{{prompt}}"), ("user", "{{input}}"))

_PLACEHOLDER = re.compile(r"\{\{([a-zA-Z0-9_:-]+)\}\}")


@dataclass(frozen=True)
class CallSite:
    """One LLM call in the pipeline.

    ``template`` is a tuple of (role, content template) pairs. Templates may
    reference {{prompt}} (this site's parameter), {{input}}, {{context}},
    and {{upstream:NAME}} for any predecessor site NAME.
    """

    name: str
    final: bool = False
    template: tuple[tuple[str, str], ...] = DEFAULT_TEMPLATE

    def __post_init__(self):
        if not self.name:
            raise ValueError("call site name must be non-empty")
        if not self.template:
            raise ValueError(f"call site {self.name}: empty template")


@dataclass(frozen=True)
class SystemGraph:
    sites: tuple[CallSite, ...]
    edges: tuple[tuple[str, str], ...] = ()
    suffix: str = ANSWER_FORMAT_SUFFIX
    marker: str = ANSWER_MARKER

    def __post_init__(self):
        names = [s.name for s in self.sites]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate call site names: {names}")
        finals = [s.name for s in self.sites if s.final]
        if len(finals) != 1:
            raise ConfigError(f"need exactly one final call site, got {finals}")
        known = set(names)
        for a, b in self.edges:
            if a not in known or b not in known:
                raise ConfigError(f"edge ({a}, {b}) references unknown site")
        if any(a == finals[0] for a, _ in self.edges):
            raise ConfigError("the final call site must be a sink")
        self.topo_order()  # raises on cycles
        for site in self.sites:
            preds = {a for a, b in self.edges if b == site.name}
            allowed = {"prompt", "input", "context"} | {f"upstream:{p}" for p in preds}
            for _, tpl in site.template:
                for ph in _PLACEHOLDER.findall(tpl):
                    if ph not in allowed:
                        raise ConfigError(
                            f"site {site.name}: unresolvable placeholder {{{{{ph}}}}}"
                        )
        if not self.marker:
            raise ConfigError("answer marker must be non-empty")

    @classmethod
    def single(cls, name: str = "main", user_template: str = "{{input}}", **kw) -> "SystemGraph":
        site = CallSite(name=name, final=True, template=(("system", "{{prompt}}"), ("user", user_template)))
        return cls(sites=(site,), **kw)

    @property
    def final_site(self) -> CallSite:
        return next(s for s in self.sites if s.final)

    def predecessors(self, name: str) -> list[str]:
        return sorted(a for a, b in self.edges if b == name)

    def topo_order(self) -> list[CallSite]:
        """Kahn's algorithm with lexicographic tie-breaking (deterministic)."""
        indeg = {s.name: 0 for s in self.sites}
        for _, b in self.edges:
            indeg[b] += 1
        by_name = {s.name: s for s in self.sites}
        ready = sorted(n for n, d in indeg.items() if d == 0)
        order = []
        while ready:
            n = ready.pop(0)
            order.append(by_name[n])
            for a, b in self.edges:
                if a == n:
                    indeg[b] -= 1
                    if indeg[b] == 0:
                        ready.append(b)
            ready.sort()
        if len(order) != len(self.sites):
            raise ConfigError("call site graph contains a cycle")
        return order


@dataclass(frozen=True)
class Trace:
    """Intermediate outputs, in execution order.

    The final site's entry holds the reasoning text preceding the answer
    marker, not the full completion.
    """

    entries: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class ForwardResult:
    answer: str
    trace: Trace
    raw: str
    format_retries: int = 0


def extract_answer(raw: str, marker: str) -> tuple[str, str]:
    """Split a completion at the last marker occurrence.

    Returns (pre, span) with raw == pre + marker + span; the answer is
    span.strip(). Raises when the marker never occurs.
    """
    idx = raw.rfind(marker)
    if idx < 0:
        raise ExtractionError(f"completion lacks the {marker!r} marker: {raw[:120]!r}")
    return raw[:idx], raw[idx + len(marker):]


def render_messages(
    graph: SystemGraph,
    site: CallSite,
    theta: ParamSet,
    x: Example,
    upstream: dict[str, str],
    prefix_messages: tuple[ChatMessage, ...] = (),
) -> list[ChatMessage]:
    prompt_text = theta.get(site.name).text
    if site.final:
        prompt_text = prompt_text + graph.suffix

    def sub(match: re.Match) -> str:
        ph = match.group(1)
        if ph == "prompt":
            return prompt_text
        if ph == "input":
            return x.input
        if ph == "context":
            return x.context
        if ph.startswith("upstream:"):
            return upstream[ph.split(":", 1)[1]]
        raise ConfigError(f"unresolvable placeholder {{{{{ph}}}}}")

    rendered = [ChatMessage(role, _PLACEHOLDER.sub(sub, tpl)) for role, tpl in site.template]
    return list(prefix_messages) + rendered


def forward(
    graph: SystemGraph,
    x: Example,
    theta: ParamSet,
    backend: Backend,
    params: GenerationParams,
    rng: RngStream,
    prefix_messages: tuple[ChatMessage, ...] = (),
) -> ForwardResult:
    """Run the pipeline on one input and extract the marked answer.

    A completion missing the marker is retried once with a format reminder
    appended to the conversation; a second miss raises ExtractionError.
    """
    missing = set(s.name for s in graph.sites) - set(theta.names)
    if missing:
        raise ConfigError(f"ParamSet lacks prompts for call sites: {sorted(missing)}")
    upstream: dict[str, str] = {}
    entries: list[tuple[str, str]] = []
    retries = 0
    answer = raw = ""
    for site in graph.topo_order():
        messages = render_messages(graph, site, theta, x, upstream, prefix_messages)
        out = backend.generate(messages, params, rng)
        if not site.final:
            upstream[site.name] = out.text
            entries.append((site.name, out.text))
            continue
        raw = out.text
        try:
            pre, span = extract_answer(raw, graph.marker)
        except ExtractionError:
            retries = 1
            retry_messages = messages + [assistant(raw or " "), ChatMessage("user", FORMAT_REMINDER)]
            raw = backend.generate(retry_messages, params, rng).text
            pre, span = extract_answer(raw, graph.marker)
        answer = span.strip()
        entries.append((site.name, pre))
    return ForwardResult(answer=answer, trace=Trace(tuple(entries)), raw=raw, format_retries=retries)


def loglik_example(
    graph: SystemGraph,
    x: Example,
    y_gold: str,
    theta: ParamSet,
    generator: Backend,
    scorer: Backend,
    params: GenerationParams,
    rng: RngStream,
) -> LogDensity:
    """Single-sample estimate of log p(y_gold | x, theta).

    Samples one trace (non-final sites via the generator backend, the final
    site's reasoning via the scoring backend, which stands in for the final
    call), then scores the gold answer verbatim as the continuation right
    after the marker. A sampled trace that never emits the marker assigns
    the gold answer probability zero.
    """
    if not y_gold:
        raise ValueError("gold answer must be non-empty")
    upstream: dict[str, str] = {}
    final = graph.final_site
    for site in graph.topo_order():
        if site.final:
            continue
        messages = render_messages(graph, site, theta, x, upstream)
        upstream[site.name] = generator.generate(messages, params, rng).text
    messages = render_messages(graph, final, theta, x, upstream)
    completion = scorer.generate(messages, params, rng).text
    idx = completion.rfind(graph.marker)
    if idx < 0:
        return NEG_INF
    reasoning_prefix = completion[: idx + len(graph.marker)] + " "
    return scorer.score_target(messages + [assistant(reasoning_prefix)], y_gold)


def loglik_minibatch(
    graph: SystemGraph,
    dataset: Dataset,
    theta: ParamSet,
    b: int,
    beta: float,
    generator: Backend,
    scorer: Backend,
    params: GenerationParams,
    rng: RngStream,
    batch: list[Example] | None = None,
) -> LogDensity:
    """Scaled mini-batch estimate: beta * mean over the batch of loglik_example.

    ``batch`` may be supplied by the caller (the sampler shares one draw
    between the likelihood and the proposal context); otherwise ``b``
    examples are drawn here. beta = n/(tau*b) absorbs tempering and batch
    scaling; the estimate is linear in beta.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if batch is None:
        batch = draw_minibatch(dataset, b, rng)
    elif len(batch) != b:
        raise ValueError(f"supplied batch has size {len(batch)}, expected {b}")
    total = 0.0
    for x in batch:
        val = loglik_example(graph, x, x.target, theta, generator, scorer, params, rng)
        if val == NEG_INF:
            return NEG_INF
        total += val
    return beta * (total / b)
