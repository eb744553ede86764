"""Conformal factuality filtering over decomposed claims.

An answer is broken into atomic claims, each claim gets an integer
frequency score (how many alternative answers support it, minus how many
contradict it), and split conformal prediction calibrates a score
threshold so that answers keep only claims scoring above it. With n
calibration answers and miscoverage budget alpha, the filtered answers
are fully factual with probability in [1-alpha, 1-alpha + 1/(n+1)] under
exchangeability.

The same frequency score, averaged over a fresh answer's claims, doubles
as a factuality surrogate g(theta) for running the prompt sampler toward
prompts that produce well-supported claims. g lives in
[-pool_size, pool_size], so it is mapped through a shifted softplus
before use in acceptance ratios (see factuality_map).
"""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, MutableMapping, Sequence

import numpy as np

from .backends import Backend, ChatMessage, user
from .core import Example, GenerationParams, ParamSet, RngStream
from .errors import ConfigError, DecompositionError, InfeasibleError, ProtocolError
from .pipeline import SystemGraph, forward, render_messages
from .prompts import (
    FACTUALITY_ANNOTATION_PROMPT,
    FREQUENCY_SCORING_PROMPT,
    SUBCLAIM_SEPARATOR_PROMPT,
    fill,
)
from .sampler import NEG_INF, LogDensity


@dataclass(frozen=True)
class ClaimRecord:
    """One claim with its frequency score.

    score is integer-valued in the real pipeline (a sum of {-1, 0, +1}
    entailment verdicts, so |score| <= pool size) but stored as float so
    synthetic continuous scores can exercise the conformal machinery.
    """

    answer_id: str
    claim: str
    score: float
    factual: bool | None = None
    retained: bool | None = None

    def __post_init__(self):
        if not self.claim:
            raise ValueError("claim text must be non-empty")


@dataclass(frozen=True)
class CalibrationSplit:
    calibration_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    alpha: float

    def __post_init__(self):
        if set(self.calibration_ids) & set(self.test_ids):
            raise ValueError("calibration and test ids must be disjoint")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class Threshold:
    lam: float
    alpha: float
    n: int
    rank: int


@dataclass(frozen=True)
class FilterResult:
    claims: tuple[ClaimRecord, ...]
    removal_rate: float

    @property
    def retained(self) -> tuple[ClaimRecord, ...]:
        return tuple(c for c in self.claims if c.retained)


@dataclass(frozen=True)
class CoverageRow:
    alpha: float
    empirical_factuality: float
    factuality_std: float
    removal_rate: float
    removal_std: float
    n_splits: int


# ---------------------------------------------------------------------------
# Claim decomposition.

_CLAIM_LINE = re.compile(r'subclaim"?\s*:\s*"?(.*?)"?\s*,\s*"?gpt.score', re.IGNORECASE)

_DECOMPOSE_PARAMS = GenerationParams(temperature=0.0, max_tokens=1024)


def _claims_from_entries(entries: Iterable) -> list[str]:
    out = []
    for obj in entries:
        if isinstance(obj, Mapping) and "subclaim" in obj:
            claim = str(obj["subclaim"]).strip()
            if claim:
                out.append(claim)
    return out


def _parse_claims(text: str) -> list[str]:
    try:
        whole = json.loads(text)
    except ValueError:
        whole = None
    if isinstance(whole, list):
        return _claims_from_entries(whole)
    claims = []
    for line in text.splitlines():
        line = line.strip().rstrip(",")
        if not line:
            continue
        try:
            obj = json.loads(line)
        except ValueError:
            obj = None
        if isinstance(obj, Mapping):
            claims.extend(_claims_from_entries([obj]))
            continue
        m = _CLAIM_LINE.search(line)
        if m and m.group(1).strip():
            claims.append(m.group(1).strip())
    return claims


def decompose_claims(
    answer: str,
    backend: Backend,
    rng: RngStream | None = None,
    cache: MutableMapping[str, tuple[str, ...]] | None = None,
) -> tuple[str, ...]:
    """Break an answer into atomic claims, one backend call per answer.

    Extraction is fixed: pass a cache to reuse a previous decomposition of
    the same answer text without touching the backend again.
    """
    if not answer:
        raise ValueError("answer must be non-empty")
    if cache is not None and answer in cache:
        return tuple(cache[answer])
    rng = rng or RngStream(0, ("decompose",))
    messages = [user(SUBCLAIM_SEPARATOR_PROMPT + answer)]
    reply = backend.generate(messages, _DECOMPOSE_PARAMS, rng).text
    claims = _parse_claims(reply)
    if not claims:
        retry = messages + [
            ChatMessage("assistant", reply or " "),
            user(
                "Return only the jsonl lines, one {subclaim: ..., gpt-score: ...} "
                "object per line, with no other text."
            ),
        ]
        reply = backend.generate(retry, _DECOMPOSE_PARAMS, rng).text
        claims = _parse_claims(reply)
    if not claims:
        raise DecompositionError(f"no claims parsed from decomposition of {answer[:60]!r}")
    if cache is not None:
        cache[answer] = tuple(claims)
    return tuple(claims)


# ---------------------------------------------------------------------------
# Frequency scoring.


def _claim_string(claims: Sequence[str]) -> str:
    return "\n".join(f"{i + 1}. {c}" for i, c in enumerate(claims))


def _parse_scores(text: str, k: int) -> list[int] | None:
    entries: list = []
    try:
        whole = json.loads(text)
    except ValueError:
        whole = None
    if isinstance(whole, list):
        entries = whole
    else:
        for line in text.splitlines():
            line = line.strip().rstrip(",")
            if not line:
                continue
            try:
                obj = json.loads(line)
            except ValueError:
                continue
            if isinstance(obj, Mapping):
                entries.append(obj)
    scores: dict[int, int] = {}
    for obj in entries:
        if not isinstance(obj, Mapping) or "id" not in obj or "score" not in obj:
            return None
        try:
            i = int(obj["id"])
            s = int(obj["score"])
        except (TypeError, ValueError):
            return None
        if s not in (-1, 0, 1) or i in scores:
            return None
        scores[i] = s
    if set(scores) != set(range(1, k + 1)):
        return None
    return [scores[i] for i in range(1, k + 1)]


def frequency_score(
    claims: Sequence[str],
    alternatives: Sequence[str],
    backend: Backend,
    rng: RngStream | None = None,
) -> list[int]:
    """Score each claim against a pool of alternative answers.

    Each alternative contributes +1 (supports), -1 (contradicts) or 0
    (unrelated) per claim; per-claim scores are the sums. An alternative
    whose verdict does not parse as a complete id->score map contributes 0
    to every claim.
    """
    if not claims:
        raise ValueError("no claims to score")
    if not alternatives:
        raise ValueError("need at least one alternative answer")
    rng = rng or RngStream(0, ("freq",))
    params = GenerationParams(temperature=0.0, max_tokens=1024)
    claim_str = _claim_string(claims)
    totals = [0] * len(claims)
    for a_idx, alt in enumerate(alternatives):
        content = fill(FREQUENCY_SCORING_PROMPT, claim_string=claim_str, output=alt)
        reply = backend.generate([user(content)], params, rng.child("alt", a_idx)).text
        parsed = _parse_scores(reply, len(claims))
        if parsed is None:
            warnings.warn(f"unparseable frequency verdict for alternative {a_idx}; scoring 0")
            continue
        for i, s in enumerate(parsed):
            totals[i] += s
    return totals


def score_answer(
    answer_id: str,
    answer: str,
    alternatives: Sequence[str],
    backend: Backend,
    rng: RngStream | None = None,
    cache: MutableMapping[str, tuple[str, ...]] | None = None,
) -> list[ClaimRecord]:
    """Decompose an answer and frequency-score its claims (labels unset)."""
    rng = rng or RngStream(0, ("score-answer",))
    claims = decompose_claims(answer, backend, rng=rng.child("decompose"), cache=cache)
    scores = frequency_score(claims, alternatives, backend, rng=rng.child("freq"))
    return [
        ClaimRecord(answer_id=answer_id, claim=c, score=float(s))
        for c, s in zip(claims, scores)
    ]


# ---------------------------------------------------------------------------
# Alternative-answer pools.


def mhlp_alternatives(
    graph: SystemGraph,
    x: Example,
    thetas: Sequence[ParamSet],
    backend: Backend,
    rng: RngStream,
    max_tokens: int = 1024,
) -> list[str]:
    """One temperature-0 answer per prompt; pass [theta0, *samples] to get
    the initial-prompt-included pool."""
    if not thetas:
        raise ValueError("need at least one prompt")
    params = GenerationParams(temperature=0.0, max_tokens=max_tokens)
    return [
        forward(graph, x, theta, backend, params, rng.child("alt", i)).answer
        for i, theta in enumerate(thetas)
    ]


# ---------------------------------------------------------------------------
# Factuality surrogate for the sampler.


def factuality_map(g: float, pool_size: int) -> float:
    """Strictly increasing map from a mean claim score to a usable log mass.

    g lies in [-pool_size, pool_size]; the shift keeps softplus >= ln(1+e)
    so the outer log is finite everywhere on that range.
    """
    return float(math.log(np.logaddexp(0.0, g + pool_size + 1)))


def _raw_answer(graph, x, theta, backend, params, rng) -> str:
    if len(graph.sites) > 1:
        raise ConfigError("raw-completion answers need a single-site pipeline")
    messages = render_messages(graph, graph.final_site, theta, x, upstream={})
    return backend.generate(messages, params, rng).text


def factuality_g(
    theta: ParamSet,
    x: Example,
    graph: SystemGraph,
    pool: Sequence[str],
    backend: Backend,
    rng: RngStream,
    params: GenerationParams | None = None,
    cache: MutableMapping[str, tuple[str, ...]] | None = None,
    extract: bool = False,
) -> float:
    """Single-sample factuality surrogate: sample one answer under theta,
    decompose, and return the mean frequency score of its claims.

    extract=False treats the whole completion as the answer (free-form
    generations such as bios); extract=True goes through the marker
    pipeline. A failed decomposition scores the minimum, -len(pool).
    """
    if not pool:
        raise ValueError("alternative pool must be non-empty")
    params = params or GenerationParams(temperature=1.0, max_tokens=1024)
    if extract:
        answer = forward(graph, x, theta, backend, params, rng.child("draw")).answer
    else:
        answer = _raw_answer(graph, x, theta, backend, params, rng.child("draw"))
    try:
        claims = decompose_claims(answer, backend, rng=rng.child("decompose"), cache=cache)
    except DecompositionError:
        warnings.warn(f"decomposition failed for input {x.id!r}; scoring minimum")
        return float(-len(pool))
    scores = frequency_score(claims, pool, backend, rng=rng.child("freq"))
    return float(sum(scores)) / len(scores)


class FactualityTarget:
    """Sampler target whose log g is the shifted-softplus factuality score
    averaged over the minibatch."""

    def __init__(self, graph, pool, backend, params=None, cache=None, extract=False):
        if not pool:
            raise ValueError("alternative pool must be non-empty")
        self.graph = graph
        self.pool = tuple(pool)
        self.backend = backend
        self.params = params
        self.cache = cache if cache is not None else {}
        self.extract = extract

    @property
    def identity(self) -> str:
        return f"factuality(pool={len(self.pool)}, backend={self.backend.identity})"

    def log_g(self, theta: ParamSet, batch: list[Example], rng: RngStream) -> LogDensity:
        vals = [
            factuality_g(
                theta,
                x,
                self.graph,
                self.pool,
                self.backend,
                rng.child("x", i),
                params=self.params,
                cache=self.cache,
                extract=self.extract,
            )
            for i, x in enumerate(batch)
        ]
        return factuality_map(sum(vals) / len(vals), len(self.pool))


# ---------------------------------------------------------------------------
# Split conformal calibration.


def nonconformity(claims: Sequence[ClaimRecord]) -> float:
    """Max score among an answer's non-factual claims; -inf when every
    claim is factual, so fully factual answers never push the threshold up."""
    if not claims:
        raise ValueError("answer has no claims")
    worst = NEG_INF
    for c in claims:
        if c.factual is None:
            raise ValueError(f"claim {c.claim[:40]!r} lacks a factuality label")
        if not c.factual:
            worst = max(worst, c.score)
    return worst


def calibrate_threshold(cal: Sequence[Sequence[ClaimRecord]], alpha: float) -> Threshold:
    """Order-statistic split-CP rule: lambda is the ceil((n+1)(1-alpha))-th
    smallest per-answer nonconformity score."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    n = len(cal)
    if n < 1:
        raise ValueError("calibration set is empty")
    rank = math.ceil((n + 1) * (1.0 - alpha))
    if rank > n:
        raise InfeasibleError(
            f"alpha={alpha} needs rank {rank} of {n} calibration answers; "
            "increase alpha or the calibration set"
        )
    rs = sorted(nonconformity(group) for group in cal)
    return Threshold(lam=rs[rank - 1], alpha=alpha, n=n, rank=rank)


def filter_answer(claims: Sequence[ClaimRecord], lam: float) -> FilterResult:
    """Retain claims scoring strictly above the threshold."""
    if not claims:
        raise ValueError("answer has no claims")
    out = tuple(replace(c, retained=c.score > lam) for c in claims)
    kept = sum(1 for c in out if c.retained)
    return FilterResult(claims=out, removal_rate=1.0 - kept / len(out))


def _answer_covered(result: FilterResult) -> bool:
    for c in result.retained:
        if c.factual is None:
            raise ValueError("coverage needs factuality labels on test claims")
        if not c.factual:
            return False
    return True


def coverage_eval(
    groups: Sequence[Sequence[ClaimRecord]],
    alphas: Sequence[float],
    n_splits: int,
    rng: RngStream,
    cal_size: int | None = None,
) -> list[CoverageRow]:
    """Random-split coverage study.

    Every split draws one permutation shared by all alphas, so removal
    rates are exactly monotone in alpha within each split and in the
    reported means.
    """
    if n_splits < 1:
        raise ValueError("n_splits must be >= 1")
    n_total = len(groups)
    cal_n = cal_size if cal_size is not None else n_total // 2
    if not 1 <= cal_n < n_total:
        raise ValueError("calibration size must leave a non-empty test set")
    cover: dict[float, list[float]] = {a: [] for a in alphas}
    removal: dict[float, list[float]] = {a: [] for a in alphas}
    for s in range(n_splits):
        perm = rng.child("split", s).permutation(n_total)
        cal = [groups[i] for i in perm[:cal_n]]
        test = [groups[i] for i in perm[cal_n:]]
        for a in alphas:
            th = calibrate_threshold(cal, a)
            results = [filter_answer(g, th.lam) for g in test]
            cover[a].append(sum(_answer_covered(r) for r in results) / len(results))
            removal[a].append(sum(r.removal_rate for r in results) / len(results))
    rows = []
    for a in alphas:
        cov = np.asarray(cover[a])
        rem = np.asarray(removal[a])
        rows.append(
            CoverageRow(
                alpha=a,
                empirical_factuality=float(cov.mean()),
                factuality_std=float(cov.std(ddof=1)) if n_splits > 1 else 0.0,
                removal_rate=float(rem.mean()),
                removal_std=float(rem.std(ddof=1)) if n_splits > 1 else 0.0,
                n_splits=n_splits,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Claim/label interchange (one JSON record per line).


def claims_to_jsonl(groups: Sequence[Sequence[ClaimRecord]]) -> str:
    lines = []
    for group in groups:
        for c in group:
            lines.append(
                json.dumps(
                    {
                        "answer_id": c.answer_id,
                        "claim": c.claim,
                        "score": c.score,
                        "factual": c.factual,
                    },
                    sort_keys=True,
                )
            )
    return "\n".join(lines) + "\n"


def claims_from_jsonl(text: str) -> list[list[ClaimRecord]]:
    """Parse the interchange format, grouping claims by answer_id in
    first-seen order."""
    by_answer: dict[str, list[ClaimRecord]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = ClaimRecord(
                answer_id=str(obj["answer_id"]),
                claim=str(obj["claim"]),
                score=float(obj["score"]),
                factual=None if obj.get("factual") is None else bool(obj["factual"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"bad claim record on line {lineno}: {exc}") from exc
        by_answer.setdefault(rec.answer_id, []).append(rec)
    return list(by_answer.values())


# ---------------------------------------------------------------------------
# Factuality annotation (pluggable; pre-labeled files are the usual path).


def annotate_claims(
    claims: Sequence[str], backend: Backend, rng: RngStream | None = None
) -> list[bool]:
    """Ask an annotator backend for per-claim factuality labels."""
    if not claims:
        raise ValueError("no claims to annotate")
    rng = rng or RngStream(0, ("annotate",))
    content = fill(FACTUALITY_ANNOTATION_PROMPT, claims_text=_claim_string(claims))
    params = GenerationParams(temperature=0.0, max_tokens=2048)
    messages = [user(content)]
    reply = backend.generate(messages, params, rng).text
    labels = _parse_labels(reply, len(claims))
    if labels is None:
        retry = messages + [
            ChatMessage("assistant", reply or " "),
            user("Format your response as a valid JSON array only."),
        ]
        reply = backend.generate(retry, params, rng).text
        labels = _parse_labels(reply, len(claims))
    if labels is None:
        raise ProtocolError("annotator returned malformed labels twice")
    return labels


def _parse_labels(text: str, k: int) -> list[bool] | None:
    try:
        arr = json.loads(text)
    except ValueError:
        return None
    if not isinstance(arr, list) or len(arr) != k:
        return None
    labels = []
    for obj in arr:
        if not isinstance(obj, Mapping) or obj.get("factual") not in (0, 1, True, False):
            return None
        labels.append(bool(obj["factual"]))
    return labels


def apply_labels(records: Sequence[ClaimRecord], labels: Sequence[bool]) -> list[ClaimRecord]:
    if len(records) != len(labels):
        raise ValueError("label count does not match claim count")
    return [replace(c, factual=bool(v)) for c, v in zip(records, labels)]
