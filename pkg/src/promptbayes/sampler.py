"""Metropolis-Hastings over prompt sets.

The chain targets the tempered unnormalized posterior
g(theta) = p(D|theta)^(1/tau) p(theta), estimated as
beta * mean mini-batch log-likelihood + log prior, with
beta = n/(tau*b). Proposals come from the critique/revise update; both g
and q enter the acceptance ratio as single-sample estimates, so the chain
is a noisy approximation to MH rather than exact pseudo-marginal MCMC.

Determinism and resumability: every step t draws all of its randomness from
child streams of (seed, "step", t), never from a sequentially threaded
stream. A resumed chain therefore replays the remaining steps identically,
because step t's draws do not depend on how many times the process
restarted. The current state's log g estimate is carried in the step
records, so resume needs no re-evaluation.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass
from typing import Callable, Protocol

from .core import NEG_INF, Dataset, Example, LogDensity, ParamSet, RngStream, draw_minibatch
from .errors import ChainSuspendedError, ConfigError, ProposalError, RetriableError
from .proposal import ProposalContext, ProposalResult

VALID_G_CACHE = ("reuse", "refresh")


@dataclass(frozen=True)
class ChainConfig:
    steps: int
    beta: float
    batch_size: int = 1
    burn_in: int = 0
    thin: int = 1
    num_samples: int = 1
    seed: int = 0
    g_cache: str = "reuse"

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.beta <= 0:
            raise ConfigError("beta must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.burn_in < 0 or self.thin < 1 or self.num_samples < 1:
            raise ConfigError("burn_in >= 0, thin >= 1, num_samples >= 1 required")
        if self.g_cache not in VALID_G_CACHE:
            raise ConfigError(f"g_cache must be one of {VALID_G_CACHE}")
        need = self.burn_in + (self.num_samples - 1) * self.thin
        if self.steps < need:
            raise ConfigError(
                f"steps={self.steps} cannot yield {self.num_samples} samples with "
                f"burn_in={self.burn_in}, thin={self.thin} (needs >= {need})"
            )

    def sample_indices(self) -> list[int]:
        """Kept step indices: burn_in, burn_in+thin, ... (index 0 = theta0)."""
        return [self.burn_in + j * self.thin for j in range(self.num_samples)]


@dataclass(frozen=True)
class ChainStep:
    """Full audit record of one accept/reject decision."""

    t: int
    theta_prev: ParamSet
    proposal: ParamSet | None
    log_g_prop: float
    log_g_prev: float
    log_q_fwd: float
    log_q_rev: float
    gamma: float
    u: float
    accepted: bool
    batch_ids: tuple[str, ...] = ()
    proposal_failed: bool = False

    @property
    def theta_next(self) -> ParamSet:
        return self.proposal if (self.accepted and self.proposal is not None) else self.theta_prev

    @property
    def log_g_next(self) -> float:
        return self.log_g_prop if self.accepted else self.log_g_prev

    def to_record(self) -> dict:
        return {
            "t": self.t,
            "theta_prev": self.theta_prev.to_dict(),
            "proposal": self.proposal.to_dict() if self.proposal is not None else None,
            "log_g_prop": _enc(self.log_g_prop),
            "log_g_prev": _enc(self.log_g_prev),
            "log_q_fwd": _enc(self.log_q_fwd),
            "log_q_rev": _enc(self.log_q_rev),
            "gamma": self.gamma,
            "u": self.u,
            "accepted": self.accepted,
            "batch_ids": list(self.batch_ids),
            "proposal_failed": self.proposal_failed,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ChainStep":
        return cls(
            t=rec["t"],
            theta_prev=ParamSet.from_dict(rec["theta_prev"]),
            proposal=ParamSet.from_dict(rec["proposal"]) if rec["proposal"] else None,
            log_g_prop=_dec(rec["log_g_prop"]),
            log_g_prev=_dec(rec["log_g_prev"]),
            log_q_fwd=_dec(rec["log_q_fwd"]),
            log_q_rev=_dec(rec["log_q_rev"]),
            gamma=rec["gamma"],
            u=rec["u"],
            accepted=rec["accepted"],
            batch_ids=tuple(rec["batch_ids"]),
            proposal_failed=rec.get("proposal_failed", False),
        )


def _enc(v: float):
    # JSON has no infinities; chains carry -inf for zero-probability states.
    if v == NEG_INF:
        return "-inf"
    if v == math.inf:
        return "inf"
    return v


def _dec(v) -> float:
    if v == "-inf":
        return NEG_INF
    if v == "inf":
        return math.inf
    return float(v)


@dataclass(frozen=True)
class PosteriorSamples:
    thetas: tuple[ParamSet, ...]
    indices: tuple[int, ...]

    def __len__(self):
        return len(self.thetas)

    def __iter__(self):
        return iter(self.thetas)


class Target(Protocol):
    def log_g(self, theta: ParamSet, batch: list[Example], rng: RngStream) -> LogDensity:
        ...


class PosteriorTarget:
    """log g = loglik_minibatch + log_prior over a pipeline and dataset."""

    def __init__(self, graph, dataset, prior_spec, generator, scorer, beta, batch_size, params):
        from .pipeline import loglik_minibatch  # deferred: keeps module import-light
        from .prior import log_prior

        self._loglik = loglik_minibatch
        self._log_prior = log_prior
        self.graph = graph
        self.dataset = dataset
        self.prior_spec = prior_spec
        self.generator = generator
        self.scorer = scorer
        self.beta = beta
        self.batch_size = batch_size
        self.params = params

    def log_g(self, theta, batch, rng) -> LogDensity:
        ll = self._loglik(
            self.graph,
            self.dataset,
            theta,
            self.batch_size,
            self.beta,
            self.generator,
            self.scorer,
            self.params,
            rng,
            batch=batch,
        )
        if ll == NEG_INF:
            return NEG_INF
        lp = self._log_prior(theta, self.prior_spec)
        return NEG_INF if lp == NEG_INF else ll + lp


def acceptance_probability(
    log_g_prop: float, log_g_prev: float, log_q_fwd: float, log_q_rev: float
) -> float:
    """gamma = min(1, g(theta') q(theta|theta') / (g(theta) q(theta'|theta))).

    Computed in log space with explicit zero handling: a zero-probability
    proposal is never accepted; escaping a zero-probability current state is
    always accepted.
    """
    num = log_g_prop + log_q_rev
    den = log_g_prev + log_q_fwd
    if num == NEG_INF:
        return 0.0
    if den == NEG_INF:
        return 1.0
    diff = num - den
    if diff >= 0:
        return 1.0
    return math.exp(diff)


class ChainStore:
    """Run-directory persistence: immutable manifest + append-only steps."""

    MANIFEST = "manifest.json"
    CHAIN = "chain.jsonl"

    def __init__(self, run_dir: str):
        self.run_dir = run_dir
        os.makedirs(run_dir, exist_ok=True)

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.run_dir, self.MANIFEST)

    @property
    def chain_path(self) -> str:
        return os.path.join(self.run_dir, self.CHAIN)

    def write_manifest(self, manifest: dict):
        if os.path.exists(self.manifest_path):
            existing = self.load_manifest()
            if _manifest_core(existing) != _manifest_core(manifest):
                raise ConfigError(
                    f"{self.manifest_path} exists with a different configuration; "
                    "refusing to overwrite an immutable manifest"
                )
            return
        with open(self.manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, ensure_ascii=False)
            fh.write("\n")

    def load_manifest(self) -> dict:
        with open(self.manifest_path, encoding="utf-8") as fh:
            return json.load(fh)

    def append_step(self, step: ChainStep):
        with open(self.chain_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(step.to_record(), ensure_ascii=False) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def load_steps(self) -> list[ChainStep]:
        if not os.path.exists(self.chain_path):
            return []
        steps = []
        with open(self.chain_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    steps.append(ChainStep.from_record(json.loads(line)))
        return steps


def _manifest_core(manifest: dict) -> dict:
    return {k: v for k, v in manifest.items() if k not in ("created_at",)}


ContextBuilder = Callable[[list[Example], ParamSet, RngStream], ProposalContext]


class MetropolisHastings:
    """Runs the accept/reject loop over injectable target and proposer.

    ``target`` exposes log_g(theta, batch, rng); ``proposer`` exposes
    propose/log_q and a needs_context flag. The oracle tests inject exact
    finite-state tables here; the production path wires PosteriorTarget and
    CritiqueReviseProposer.
    """

    def __init__(
        self,
        target: Target,
        proposer,
        cfg: ChainConfig,
        dataset: Dataset | None = None,
        ctx_builder: ContextBuilder | None = None,
        store: ChainStore | None = None,
        manifest_extra: dict | None = None,
    ):
        if cfg.batch_size >= 1 and dataset is not None and cfg.batch_size > dataset.n:
            raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {dataset.n}")
        if getattr(proposer, "needs_context", False) and ctx_builder is None:
            raise ConfigError("this proposer needs a context builder")
        self.target = target
        self.proposer = proposer
        self.cfg = cfg
        self.dataset = dataset
        self.ctx_builder = ctx_builder
        self.store = store
        self.manifest_extra = manifest_extra or {}

    def _step_rng(self, t: int) -> RngStream:
        return RngStream(self.cfg.seed, ("step", t))

    def _initial_log_g(self, theta0: ParamSet) -> float:
        rng = RngStream(self.cfg.seed, ("init", "g"))
        batch = None
        if self.dataset is not None:
            batch = draw_minibatch(self.dataset, self.cfg.batch_size, rng.child("batch"))
        return self.target.log_g(theta0, batch or [], rng.child("eval"))

    def step(self, t: int, theta: ParamSet, log_g_cur: float) -> ChainStep:
        rng = self._step_rng(t)
        batch: list[Example] = []
        batch_ids: tuple[str, ...] = ()
        if self.dataset is not None:
            batch = draw_minibatch(self.dataset, self.cfg.batch_size, rng.child("batch"))
            batch_ids = tuple(x.id for x in batch)
        ctx = None
        if getattr(self.proposer, "needs_context", False):
            ctx = self.ctx_builder(batch, theta, rng.child("ctx"))
        u = rng.child("accept").uniform()
        if self.cfg.g_cache == "refresh":
            log_g_cur = self.target.log_g(theta, batch, rng.child("g", "cur"))
        try:
            prop: ProposalResult = self.proposer.propose(theta, ctx, rng.child("propose"))
        except ProposalError:
            return ChainStep(
                t=t,
                theta_prev=theta,
                proposal=None,
                log_g_prop=NEG_INF,
                log_g_prev=log_g_cur,
                log_q_fwd=NEG_INF,
                log_q_rev=NEG_INF,
                gamma=0.0,
                u=u,
                accepted=False,
                batch_ids=batch_ids,
                proposal_failed=True,
            )
        log_g_prop = self.target.log_g(prop.theta_new, batch, rng.child("g", "prop"))
        log_q_rev = self.proposer.log_q(
            theta, prop.theta_new, ctx, rng.child("reverse"), via=prop.intermediates
        )
        gamma = acceptance_probability(log_g_prop, log_g_cur, prop.log_q_fwd, log_q_rev)
        return ChainStep(
            t=t,
            theta_prev=theta,
            proposal=prop.theta_new,
            log_g_prop=log_g_prop,
            log_g_prev=log_g_cur,
            log_q_fwd=prop.log_q_fwd,
            log_q_rev=log_q_rev,
            gamma=gamma,
            u=u,
            accepted=u < gamma,
            batch_ids=batch_ids,
        )

    def run(self, theta0: ParamSet, stop_after: int | None = None) -> list[ChainStep]:
        """Execute (or resume) the chain; returns all persisted steps.

        ``stop_after`` ends the run early after that step index completes,
        which the crash-resume tests use to simulate an interruption.
        """
        steps: list[ChainStep] = []
        if self.store is not None:
            self.store.write_manifest(self._manifest(theta0))
            steps = self.store.load_steps()
            if len(steps) > self.cfg.steps:
                raise ConfigError(
                    f"run dir has {len(steps)} steps but config asks for {self.cfg.steps}"
                )
        if steps:
            theta, log_g_cur = steps[-1].theta_next, steps[-1].log_g_next
        else:
            theta, log_g_cur = theta0, None
        for t in range(len(steps) + 1, self.cfg.steps + 1):
            if log_g_cur is None:
                # refresh mode re-estimates inside step(), so the initial
                # evaluation would be paid for nothing.
                log_g_cur = self._initial_log_g(theta0) if self.cfg.g_cache == "reuse" else NEG_INF
            try:
                step = self.step(t, theta, log_g_cur)
            except RetriableError as exc:
                if self.store is not None:
                    raise ChainSuspendedError(
                        f"backend outage at step {t}; resume from {self.store.run_dir}",
                        run_dir=self.store.run_dir,
                        step=t,
                    ) from exc
                raise
            steps.append(step)
            if self.store is not None:
                self.store.append_step(step)
            theta, log_g_cur = step.theta_next, step.log_g_next
            if stop_after is not None and t >= stop_after:
                break
        return steps

    def _manifest(self, theta0: ParamSet) -> dict:
        from . import __version__
        from .prompts import PROMPTS_VERSION

        return {
            "config": {
                "steps": self.cfg.steps,
                "beta": self.cfg.beta,
                "batch_size": self.cfg.batch_size,
                "burn_in": self.cfg.burn_in,
                "thin": self.cfg.thin,
                "num_samples": self.cfg.num_samples,
                "seed": self.cfg.seed,
                "g_cache": self.cfg.g_cache,
            },
            "theta0": theta0.to_dict(),
            "prompts_version": PROMPTS_VERSION,
            "code_version": __version__,
            "target": type(self.target).__name__,
            "proposer": type(self.proposer).__name__,
            "extra": self.manifest_extra,
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }


def chain_states(theta0: ParamSet, steps: list[ChainStep]) -> list[ParamSet]:
    """States [theta^0, theta^1, ..., theta^T] visited by the chain."""
    states = [theta0]
    for step in steps:
        if step.theta_prev != states[-1]:
            raise ValueError(f"step {step.t} does not continue the chain")
        states.append(step.theta_next)
    return states


def select_samples(theta0: ParamSet, steps: list[ChainStep], cfg: ChainConfig) -> PosteriorSamples:
    """Burn-in and thinning: keep states at burn_in, burn_in+thin, ...

    The state after step ``burn_in`` is the first kept sample (index 0 is
    the initial state), which is the only reading under which the shipped
    schedules yield their stated sample counts.
    """
    indices = cfg.sample_indices()
    states = chain_states(theta0, steps)
    if indices[-1] >= len(states):
        raise ConfigError(
            f"chain has {len(states) - 1} steps; index {indices[-1]} is not available"
        )
    return PosteriorSamples(
        thetas=tuple(states[i] for i in indices), indices=tuple(indices)
    )
