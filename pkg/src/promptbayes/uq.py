"""Posterior-predictive answer sampling and uncertainty metrics.

Confidence is frequency-based: m answers are sampled (one per posterior
prompt for the chain-based strategy, m from one prompt or m perturbations
for the baselines), grouped into semantic clusters, and the modal cluster's
relative frequency is the confidence of the modal answer. Calibration is
summarized by expected calibration error over equal-width confidence bins;
abstention quality by the ROC AUC of confidence as an answerable-vs-not
score. Clustering and correctness judging each run in an exact string mode
(via answer normalization) or an LLM-judge mode.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass

import numpy as np

from .backends import Backend, ChatMessage, user
from .core import Example, GenerationParams, ParamSet, RngStream, normalize_answer
from .errors import ProtocolError, RetriableError, UndefinedMetricError
from .pipeline import ForwardResult, SystemGraph, forward
from .prompts import CLUSTER_TEMPLATE, JUDGE_TEMPLATE, PARAPHRASE_PROMPT, fill, system_prompt_list
from .sampler import PosteriorSamples


@dataclass(frozen=True)
class SampledAnswer:
    text: str
    theta_index: int
    result: ForwardResult


@dataclass(frozen=True)
class AnswerSet:
    input_id: str
    answers: tuple[SampledAnswer, ...]
    extraction_failures: int = 0

    def __post_init__(self):
        if not self.answers:
            raise ValueError("answer set must contain at least one answer")

    @property
    def m(self) -> int:
        return len(self.answers)

    @property
    def texts(self) -> tuple[str, ...]:
        return tuple(a.text for a in self.answers)


@dataclass(frozen=True)
class ClusterAssignment:
    """A partition of an AnswerSet with per-cluster representatives."""

    clusters: tuple[tuple[int, ...], ...]
    labels: tuple[str, ...]
    frequencies: tuple[float, ...]
    fell_back_to_exact: bool = False

    def __post_init__(self):
        seen = [i for group in self.clusters for i in group]
        if sorted(seen) != list(range(len(seen))):
            raise ValueError("clusters must partition the answer indices")
        if abs(math.fsum(self.frequencies) - 1.0) > 1e-9:
            raise ValueError("cluster frequencies must sum to 1")
        if not (len(self.clusters) == len(self.labels) == len(self.frequencies)):
            raise ValueError("clusters, labels, frequencies must align")

    @property
    def modal_index(self) -> int:
        return max(range(len(self.frequencies)), key=lambda i: self.frequencies[i])

    @property
    def modal_label(self) -> str:
        return self.labels[self.modal_index]


@dataclass(frozen=True)
class CalibrationRecord:
    input_id: str
    confidence: float
    correct: bool
    answerable: bool = True

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


def posterior_predictive(
    graph: SystemGraph,
    x: Example,
    samples: PosteriorSamples,
    backend: Backend,
    params: GenerationParams,
    rng: RngStream,
    per_sample: int = 1,
    prefix_messages: tuple[ChatMessage, ...] = (),
) -> AnswerSet:
    """Sample answers by running the pipeline under each posterior prompt.

    Answers whose final completion never produces the marker (even after
    the one-retry convention in forward) are dropped and counted, reducing
    the effective m for this input.
    """
    if per_sample < 1:
        raise ValueError("per_sample must be >= 1")
    answers = []
    failures = 0
    from .errors import ExtractionError

    for j, theta in enumerate(samples):
        for r in range(per_sample):
            try:
                res = forward(
                    graph, x, theta, backend, params, rng.child("pp", j, r), prefix_messages
                )
            except ExtractionError:
                failures += 1
                warnings.warn(f"dropped unparseable answer for input {x.id!r}")
                continue
            answers.append(SampledAnswer(text=res.answer, theta_index=j, result=res))
    return AnswerSet(input_id=x.id, answers=tuple(answers), extraction_failures=failures)


def _exact_clusters(aset: AnswerSet) -> ClusterAssignment:
    groups: dict[str, list[int]] = {}
    order: list[str] = []
    for i, text in enumerate(aset.texts):
        key = normalize_answer(text)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(i)
    clusters = tuple(tuple(groups[k]) for k in order)
    labels = tuple(aset.answers[groups[k][0]].text for k in order)
    freqs = tuple(len(groups[k]) / aset.m for k in order)
    return ClusterAssignment(clusters=clusters, labels=labels, frequencies=freqs)


def _parse_cluster_lines(text: str, m: int) -> list[tuple[int, ...]] | None:
    groups = []
    for line in text.splitlines():
        nums = [int(n) for n in re.findall(r"\d+", line)]
        if nums:
            groups.append(tuple(n - 1 for n in nums))
    seen = sorted(i for g in groups for i in g)
    if seen != list(range(m)):
        return None
    return groups


def cluster_answers(
    aset: AnswerSet,
    mode: str = "exact",
    judge: Backend | None = None,
    question: str = "",
    rng: RngStream | None = None,
) -> ClusterAssignment:
    """Partition answers into semantic clusters.

    exact mode groups by normalized string equality. llm mode asks the
    judge backend for a partition as lines of answer numbers, validates it,
    reprompts once on an invalid partition, and falls back to exact mode
    (flagged) if the second attempt is also invalid.
    """
    if mode == "exact":
        return _exact_clusters(aset)
    if mode != "llm":
        raise ValueError(f"unknown clustering mode {mode!r}")
    if judge is None:
        raise ValueError("llm clustering needs a judge backend")
    numbered = "\n".join(f"{i + 1}. {t}" for i, t in enumerate(aset.texts))
    content = fill(CLUSTER_TEMPLATE, question=question, answers=numbered)
    messages = [user(content)]
    params = GenerationParams(temperature=0.0, max_tokens=512)
    rng = rng or RngStream(0, ("cluster",))
    reply = judge.generate(messages, params, rng).text
    groups = _parse_cluster_lines(reply, aset.m)
    if groups is None:
        retry = messages + [
            ChatMessage("assistant", reply or " "),
            user(
                "That was not a valid partition. Every answer number from 1 to "
                f"{aset.m} must appear on exactly one line. Return only the cluster lines."
            ),
        ]
        reply = judge.generate(retry, params, rng).text
        groups = _parse_cluster_lines(reply, aset.m)
    if groups is None:
        warnings.warn("judge clustering invalid twice; falling back to exact mode")
        exact = _exact_clusters(aset)
        return ClusterAssignment(
            clusters=exact.clusters,
            labels=exact.labels,
            frequencies=exact.frequencies,
            fell_back_to_exact=True,
        )
    labels = tuple(aset.answers[g[0]].text for g in groups)
    freqs = tuple(len(g) / aset.m for g in groups)
    return ClusterAssignment(clusters=tuple(groups), labels=labels, frequencies=freqs)


def semantic_confidence(ca: ClusterAssignment) -> float:
    return max(ca.frequencies)


def ece(records: list[CalibrationRecord], n_bins: int = 10) -> float:
    """Expected calibration error over equal-width bins of (0, 1].

    Bins are right-closed; a confidence of 0 lands in bin 1. The small
    epsilon guards against c*B landing a hair above an exact bin edge in
    floating point (e.g. 0.7 * 10).
    """
    if not records:
        raise UndefinedMetricError("ECE of an empty record list is undefined")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    counts = [0] * n_bins
    conf_sums = [0.0] * n_bins
    acc_sums = [0.0] * n_bins
    for r in records:
        b = max(1, math.ceil(r.confidence * n_bins - 1e-12)) - 1
        counts[b] += 1
        conf_sums[b] += r.confidence
        acc_sums[b] += 1.0 if r.correct else 0.0
    n = len(records)
    total = 0.0
    for b in range(n_bins):
        if counts[b]:
            total += (counts[b] / n) * abs(acc_sums[b] / counts[b] - conf_sums[b] / counts[b])
    return total


def reliability_bins(records: list[CalibrationRecord], n_bins: int = 10) -> list[dict]:
    """Per-bin reliability-diagram data using the same binning as ece.

    Returns one row per bin (including empty ones): bin index, right edge,
    count, mean confidence, and mean accuracy (None when empty).
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    counts = [0] * n_bins
    conf_sums = [0.0] * n_bins
    acc_sums = [0.0] * n_bins
    for r in records:
        b = max(1, math.ceil(r.confidence * n_bins - 1e-12)) - 1
        counts[b] += 1
        conf_sums[b] += r.confidence
        acc_sums[b] += 1.0 if r.correct else 0.0
    return [
        {
            "bin": b + 1,
            "upper": (b + 1) / n_bins,
            "count": counts[b],
            "confidence": conf_sums[b] / counts[b] if counts[b] else None,
            "accuracy": acc_sums[b] / counts[b] if counts[b] else None,
        }
        for b in range(n_bins)
    ]


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        # average of ranks i+1 .. j+1 (1-based)
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def roc_auc(scores: list[float], labels: list[bool]) -> float:
    """Mann-Whitney AUC with ties counted half.

    Positives are the answerable inputs; the score is the confidence.
    Computed from average ranks, which equals pairwise enumeration
    (concordant + 0.5 * ties) / (n_pos * n_neg) exactly, ties included.
    """
    if len(scores) != len(labels):
        raise ValueError("scores and labels must have equal length")
    y = np.asarray(labels, dtype=bool)
    s = np.asarray(scores, dtype=float)
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both classes present")
    ranks = _average_ranks(s)
    r_pos = float(ranks[y].sum())
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


_VERDICT = re.compile(r"\b(incorrect|correct)\b", re.IGNORECASE)


def judge_accuracy(
    question: str,
    gold: str,
    answer: str,
    mode: str = "exact",
    judge: Backend | None = None,
    rng: RngStream | None = None,
) -> bool:
    """Is the answer right? Exact mode normalizes both sides and compares;
    llm mode asks the judge for a semantic-equivalence verdict."""
    if not gold:
        raise ValueError("gold answer required for accuracy judging")
    if mode == "exact":
        return normalize_answer(answer) == normalize_answer(gold)
    if mode != "llm":
        raise ValueError(f"unknown judging mode {mode!r}")
    if judge is None:
        raise ValueError("llm judging needs a judge backend")
    content = fill(JUDGE_TEMPLATE, question=question, gold=gold, answer=answer)
    messages = [user(content)]
    params = GenerationParams(temperature=0.0, max_tokens=16)
    rng = rng or RngStream(0, ("judge",))
    reply = judge.generate(messages, params, rng).text
    match = _VERDICT.search(reply)
    if match is None:
        retry = messages + [
            ChatMessage("assistant", reply or " "),
            user("Respond with exactly one word: CORRECT or INCORRECT."),
        ]
        reply = judge.generate(retry, params, rng).text
        match = _VERDICT.search(reply)
    if match is None:
        warnings.warn(f"judge verdict unparseable twice for input {question[:40]!r}")
        return False
    return match.group(1).lower() == "correct"


def perturb_paraphrase(
    x: Example, k: int, backend: Backend, rng: RngStream, max_tokens: int = 256
) -> list[Example]:
    """k paraphrases of the question, one LLM call each.

    A failed call falls back to the original wording for that slot so the
    perturbation count stays k.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    params = GenerationParams(temperature=1.0, max_tokens=max_tokens)
    out = []
    for i in range(k):
        messages = [user(f"'''{x.input}'''\n\n{PARAPHRASE_PROMPT}")]
        try:
            text = backend.generate(messages, params, rng.child("para", i)).text.strip()
            if not text:
                raise ProtocolError("empty paraphrase")
        except (ProtocolError, RetriableError):
            warnings.warn(f"paraphrase {i} failed for input {x.id!r}; using original")
            text = x.input
        out.append(
            Example(
                input=text,
                target=x.target,
                context=x.context,
                id=x.id,
                answerable=x.answerable,
                abstain_kind=x.abstain_kind,
            )
        )
    return out


def perturb_system_message(k: int, rng: RngStream) -> list[str]:
    """k distinct persona prefixes, sampled without replacement."""
    prompts = system_prompt_list()
    if not 1 <= k <= len(prompts):
        raise ValueError(f"k must be in [1, {len(prompts)}]")
    perm = rng.permutation(len(prompts))
    return [prompts[i] for i in perm[:k]]


def make_calibration_record(
    aset: AnswerSet,
    ca: ClusterAssignment,
    x: Example,
    mode: str = "exact",
    judge: Backend | None = None,
    rng: RngStream | None = None,
) -> CalibrationRecord:
    """Bind confidence and correctness to the modal cluster's representative."""
    confidence = semantic_confidence(ca)
    correct = bool(x.target) and judge_accuracy(
        x.input, x.target, ca.modal_label, mode=mode, judge=judge, rng=rng
    )
    return CalibrationRecord(
        input_id=x.id, confidence=confidence, correct=correct, answerable=x.answerable
    )
