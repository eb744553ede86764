"""Estimator-style answer-generation strategies.

Five interchangeable strategies produce an AnswerSet of m answers per
input, so downstream calibration code never branches on the method:

* mhlp: run the prompt chain once (fit), then one answer per posterior
  prompt.
* cot: m answers from the fixed initial prompt.
* textgrad: T always-accept proposal steps (fit), then m answers from the
  optimized prompt.
* paraphrase: m paraphrases of the input, one answer each.
* system-message: m distinct persona prefixes, one answer each.

Everything follows the scikit-learn estimator protocol: constructor
arguments are stored verbatim, fit() sets trailing-underscore attributes,
and get_params/clone work as usual. ConformalClaimFilter wraps threshold
calibration the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .backends import Backend, system
from .conformal import FilterResult, calibrate_threshold, filter_answer
from .core import Dataset, Example, GenerationParams, ParamSet, RngStream, draw_minibatch
from .errors import ConfigError, ProposalError
from .pipeline import SystemGraph
from .prior import PriorSpec, sample_prior
from .prompts import COT_PROMPT
from .proposal import build_context
from .sampler import (
    ChainConfig,
    MetropolisHastings,
    PosteriorSamples,
    PosteriorTarget,
    chain_states,
    select_samples,
)
from .uq import AnswerSet, cluster_answers, perturb_paraphrase, perturb_system_message, posterior_predictive

STRATEGY_KINDS = ("cot", "textgrad", "paraphrase", "system-message", "mhlp")


@dataclass(frozen=True)
class StrategySpec:
    """Config-level strategy selector with kind-specific knobs."""

    kind: str
    steps: int | None = None
    k: int | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}; one of {STRATEGY_KINDS}")
        if self.kind == "textgrad" and (self.steps is None or self.steps < 0):
            raise ConfigError("textgrad strategy needs steps >= 0")


# ---------------------------------------------------------------------------
# Input validation helpers.


def as_dataset(X) -> Dataset:
    if isinstance(X, Dataset):
        return X
    if isinstance(X, Example):
        return Dataset.of([X])
    try:
        examples = tuple(X)
    except TypeError:
        raise TypeError(f"expected Dataset, Example, or iterable of Example, got {type(X).__name__}")
    if not all(isinstance(e, Example) for e in examples):
        raise TypeError("all dataset entries must be Example instances")
    return Dataset(examples)


def as_paramset(theta, graph: SystemGraph) -> ParamSet:
    if isinstance(theta, ParamSet):
        missing = {s.name for s in graph.sites} - set(theta.names)
        if missing:
            raise ConfigError(f"prompt set lacks entries for call sites: {sorted(missing)}")
        return theta
    if isinstance(theta, str):
        if len(graph.sites) != 1:
            raise ConfigError("a bare prompt string only fits a single-site pipeline")
        return ParamSet.single(theta, name=graph.sites[0].name)
    raise TypeError(f"expected ParamSet or str, got {type(theta).__name__}")


# ---------------------------------------------------------------------------
# TextGrad-style optimization (always accept).


@dataclass(frozen=True)
class TextGradResult:
    theta: ParamSet
    skipped: int


def textgrad_optimize(
    theta0: ParamSet,
    dataset: Dataset | None,
    proposer,
    steps: int,
    rng: RngStream,
    batch_size: int = 1,
    ctx_builder=None,
) -> TextGradResult:
    """T proposal steps with every proposal accepted (no MH test and no
    likelihood evaluation). Failed proposals leave theta unchanged but
    still consume a step."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if getattr(proposer, "needs_context", False) and ctx_builder is None:
        raise ConfigError("this proposer needs a context builder")
    theta = theta0
    skipped = 0
    for t in range(1, steps + 1):
        srng = rng.child("tg", t)
        ctx = None
        if getattr(proposer, "needs_context", False):
            if dataset is None:
                raise ConfigError("context-building proposals need a dataset")
            batch = draw_minibatch(dataset, batch_size, srng.child("batch"))
            ctx = ctx_builder(batch, theta, srng.child("ctx"))
        try:
            theta = proposer.propose(theta, ctx, srng.child("propose")).theta_new
        except ProposalError:
            skipped += 1
    return TextGradResult(theta=theta, skipped=skipped)


# ---------------------------------------------------------------------------
# Strategy estimators.


class _AnswerStrategy(BaseEstimator):
    """Shared answer-sampling surface; subclasses set self.kind and
    implement _sample_answers."""

    kind = ""

    def sample_answers(self, x: Example, m: int = 10, rng: RngStream | None = None) -> AnswerSet:
        check_is_fitted(self)
        if m < 1:
            raise ValueError("m must be >= 1")
        rng = rng or RngStream(self.seed, ("answers", self.kind, x.id))
        return self._sample_answers(x, m, rng)

    def predict(self, X, m: int = 10, rng: RngStream | None = None) -> list[str]:
        """Modal answer per input (exact clustering of m sampled answers)."""
        check_is_fitted(self)
        out = []
        for i, x in enumerate(as_dataset(X)):
            child = rng.child("x", i, x.id) if rng is not None else None
            aset = self.sample_answers(x, m=m, rng=child)
            out.append(cluster_answers(aset).modal_label)
        return out

    def _answer_params(self) -> GenerationParams:
        return GenerationParams(
            temperature=self.answer_temperature, max_tokens=self.max_answer_tokens
        )


class PosteriorPromptSampler(_AnswerStrategy):
    """Metropolis-Hastings over prompts; answers come from the posterior
    prompt samples, one per prompt."""

    kind = "mhlp"

    def __init__(
        self,
        graph: SystemGraph | None = None,
        prior_spec: PriorSpec | None = None,
        proposer=None,
        generator: Backend | None = None,
        scorer: Backend | None = None,
        theta0=None,
        steps: int = 20,
        beta: float = 100.0,
        batch_size: int = 1,
        burn_in: int = 2,
        thin: int = 2,
        num_samples: int = 10,
        seed: int = 0,
        g_cache: str = "reuse",
        answer_temperature: float = 1.0,
        max_answer_tokens: int = 1024,
        store=None,
    ):
        self.graph = graph
        self.prior_spec = prior_spec
        self.proposer = proposer
        self.generator = generator
        self.scorer = scorer
        self.theta0 = theta0
        self.steps = steps
        self.beta = beta
        self.batch_size = batch_size
        self.burn_in = burn_in
        self.thin = thin
        self.num_samples = num_samples
        self.seed = seed
        self.g_cache = g_cache
        self.answer_temperature = answer_temperature
        self.max_answer_tokens = max_answer_tokens
        self.store = store

    def _require(self, *names):
        for name in names:
            if getattr(self, name) is None:
                raise ConfigError(f"{type(self).__name__} needs {name}")

    def fit(self, X, y=None):
        """Run the chain over the training inputs and keep the thinned
        posterior prompt samples."""
        self._require("graph", "prior_spec", "proposer", "generator", "scorer")
        dataset = as_dataset(X)
        cfg = ChainConfig(
            steps=self.steps,
            beta=self.beta,
            batch_size=self.batch_size,
            burn_in=self.burn_in,
            thin=self.thin,
            num_samples=self.num_samples,
            seed=self.seed,
            g_cache=self.g_cache,
        )
        if self.theta0 is not None:
            theta0 = as_paramset(self.theta0, self.graph)
        else:
            theta0 = sample_prior(self.prior_spec, RngStream(self.seed, ("theta0",)))
        target = PosteriorTarget(
            graph=self.graph,
            dataset=dataset,
            prior_spec=self.prior_spec,
            generator=self.generator,
            scorer=self.scorer,
            beta=self.beta,
            batch_size=self.batch_size,
            params=self._answer_params(),
        )
        mh = MetropolisHastings(
            target,
            self.proposer,
            cfg,
            dataset=dataset,
            ctx_builder=self._build_context,
            store=self.store,
        )
        chain = mh.run(theta0)
        self.theta0_ = theta0
        self.chain_ = tuple(chain)
        self.samples_ = select_samples(theta0, chain, cfg)
        accepted = sum(1 for s in chain if s.accepted)
        self.acceptance_rate_ = accepted / len(chain) if chain else 0.0
        return self

    def _build_context(self, batch, theta, rng):
        return build_context(self.graph, batch, theta, self.generator, self._answer_params(), rng)

    def states(self) -> tuple[ParamSet, ...]:
        check_is_fitted(self)
        return chain_states(self.theta0_, self.chain_)

    def _sample_answers(self, x, m, rng):
        if m != len(self.samples_):
            raise ConfigError(
                f"chain kept {len(self.samples_)} prompt samples but m={m} answers "
                "were requested; set num_samples=m before fit"
            )
        return posterior_predictive(
            self.graph, x, self.samples_, self.generator, self._answer_params(), rng
        )


class FixedPromptStrategy(_AnswerStrategy):
    """m answers from one fixed prompt (the chain-of-thought baseline)."""

    kind = "cot"

    def __init__(
        self,
        graph: SystemGraph | None = None,
        generator: Backend | None = None,
        theta=COT_PROMPT,
        seed: int = 0,
        answer_temperature: float = 1.0,
        max_answer_tokens: int = 1024,
    ):
        self.graph = graph
        self.generator = generator
        self.theta = theta
        self.seed = seed
        self.answer_temperature = answer_temperature
        self.max_answer_tokens = max_answer_tokens

    def fit(self, X=None, y=None):
        if self.graph is None or self.generator is None:
            raise ConfigError(f"{type(self).__name__} needs graph and generator")
        self.theta_ = as_paramset(self.theta, self.graph)
        return self

    def _sample_answers(self, x, m, rng):
        samples = PosteriorSamples(thetas=(self.theta_,), indices=(0,))
        return posterior_predictive(
            self.graph, x, samples, self.generator, self._answer_params(), rng, per_sample=m
        )


class TextGradStrategy(FixedPromptStrategy):
    """Optimize the prompt with T always-accept proposal steps, then sample
    m answers from the final prompt."""

    kind = "textgrad"

    def __init__(
        self,
        graph: SystemGraph | None = None,
        generator: Backend | None = None,
        proposer=None,
        theta=COT_PROMPT,
        steps: int = 20,
        batch_size: int = 1,
        seed: int = 0,
        answer_temperature: float = 1.0,
        max_answer_tokens: int = 1024,
    ):
        super().__init__(
            graph=graph,
            generator=generator,
            theta=theta,
            seed=seed,
            answer_temperature=answer_temperature,
            max_answer_tokens=max_answer_tokens,
        )
        self.proposer = proposer
        self.steps = steps
        self.batch_size = batch_size

    def fit(self, X, y=None):
        if self.graph is None or self.generator is None or self.proposer is None:
            raise ConfigError(f"{type(self).__name__} needs graph, generator, and proposer")
        dataset = as_dataset(X)
        theta0 = as_paramset(self.theta, self.graph)
        result = textgrad_optimize(
            theta0,
            dataset,
            self.proposer,
            self.steps,
            RngStream(self.seed, ("textgrad",)),
            batch_size=self.batch_size,
            ctx_builder=lambda batch, theta, rng: build_context(
                self.graph, batch, theta, self.generator, self._answer_params(), rng
            ),
        )
        self.theta_ = result.theta
        self.skipped_steps_ = result.skipped
        return self


class ParaphraseStrategy(_AnswerStrategy):
    """m paraphrases of the input, one answer each, under a fixed prompt."""

    kind = "paraphrase"

    def __init__(
        self,
        graph: SystemGraph | None = None,
        generator: Backend | None = None,
        paraphraser: Backend | None = None,
        theta=COT_PROMPT,
        seed: int = 0,
        answer_temperature: float = 1.0,
        max_answer_tokens: int = 1024,
    ):
        self.graph = graph
        self.generator = generator
        self.paraphraser = paraphraser
        self.theta = theta
        self.seed = seed
        self.answer_temperature = answer_temperature
        self.max_answer_tokens = max_answer_tokens

    def fit(self, X=None, y=None):
        if self.graph is None or self.generator is None:
            raise ConfigError(f"{type(self).__name__} needs graph and generator")
        self.theta_ = as_paramset(self.theta, self.graph)
        return self

    def _sample_answers(self, x, m, rng):
        backend = self.paraphraser or self.generator
        variants = perturb_paraphrase(x, m, backend, rng.child("perturb"))
        samples = PosteriorSamples(thetas=(self.theta_,), indices=(0,))
        answers = []
        failures = 0
        for i, variant in enumerate(variants):
            aset = posterior_predictive(
                self.graph, variant, samples, self.generator, self._answer_params(),
                rng.child("fwd", i),
            )
            failures += aset.extraction_failures
            answers.extend(replace(a, theta_index=i) for a in aset.answers)
        if not answers:
            raise ValueError(f"every perturbed answer failed extraction for input {x.id!r}")
        return AnswerSet(input_id=x.id, answers=tuple(answers), extraction_failures=failures)


class SystemMessageStrategy(_AnswerStrategy):
    """m distinct persona prefixes prepended as a leading system message,
    one answer each, under a fixed prompt."""

    kind = "system-message"

    def __init__(
        self,
        graph: SystemGraph | None = None,
        generator: Backend | None = None,
        theta=COT_PROMPT,
        seed: int = 0,
        answer_temperature: float = 1.0,
        max_answer_tokens: int = 1024,
    ):
        self.graph = graph
        self.generator = generator
        self.theta = theta
        self.seed = seed
        self.answer_temperature = answer_temperature
        self.max_answer_tokens = max_answer_tokens

    def fit(self, X=None, y=None):
        if self.graph is None or self.generator is None:
            raise ConfigError(f"{type(self).__name__} needs graph and generator")
        self.theta_ = as_paramset(self.theta, self.graph)
        return self

    def _sample_answers(self, x, m, rng):
        prefixes = perturb_system_message(m, rng.child("perturb"))
        samples = PosteriorSamples(thetas=(self.theta_,), indices=(0,))
        answers = []
        failures = 0
        for i, prefix in enumerate(prefixes):
            aset = posterior_predictive(
                self.graph, x, samples, self.generator, self._answer_params(),
                rng.child("fwd", i), prefix_messages=(system(prefix),),
            )
            failures += aset.extraction_failures
            answers.extend(replace(a, theta_index=i) for a in aset.answers)
        if not answers:
            raise ValueError(f"every prefixed answer failed extraction for input {x.id!r}")
        return AnswerSet(input_id=x.id, answers=tuple(answers), extraction_failures=failures)


def generate_with_strategy(
    strategy: _AnswerStrategy, x: Example, m: int = 10, rng: RngStream | None = None
) -> AnswerSet:
    """Uniform entry point: any fitted strategy yields an AnswerSet of m
    answers (minus dropped extraction failures)."""
    return strategy.sample_answers(x, m=m, rng=rng)


# ---------------------------------------------------------------------------
# Conformal filtering as an estimator.


class ConformalClaimFilter(BaseEstimator):
    """Calibrate a claim-score threshold on labeled answers, then filter."""

    def __init__(self, alpha: float = 0.1):
        self.alpha = alpha

    def fit(self, X, y=None):
        """X: sequence of per-answer ClaimRecord groups with factuality
        labels."""
        self.threshold_ = calibrate_threshold(list(X), self.alpha)
        return self

    def transform(self, X) -> list[FilterResult]:
        check_is_fitted(self)
        return [filter_answer(list(group), self.threshold_.lam) for group in X]

    def predict(self, X) -> list[tuple[str, ...]]:
        """Retained claim texts per answer."""
        return [tuple(c.claim for c in r.retained) for r in self.transform(X)]

    def score(self, X, y=None) -> float:
        """Empirical factuality: fraction of answers whose retained claims
        are all labeled factual."""
        results = self.transform(X)
        covered = 0
        for r in results:
            kept = r.retained
            if any(c.factual is None for c in kept):
                raise ValueError("scoring needs factuality labels")
            covered += all(c.factual for c in kept)
        return covered / len(results) if results else 0.0
