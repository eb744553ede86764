"""Shared value types, log-space conventions, and deterministic randomness.

All probability arithmetic in this package is carried out on natural-log
values represented as plain floats, with ``-inf`` standing for zero
probability. ``-inf`` propagates absorbingly through addition, which is the
only combinator the samplers need.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

NEG_INF = float("-inf")

# Log-space values (log-probabilities, scaled log-likelihood estimates) are
# plain floats. Scaled estimates may be positive; only -inf is special.
LogDensity = float


@dataclass(frozen=True)
class PromptText:
    """One named textual parameter: the prompt used at a single call site."""

    name: str
    text: str

    def __post_init__(self):
        if not self.name:
            raise ValueError("prompt name must be non-empty")
        if not self.text:
            raise ValueError(f"prompt text for {self.name!r} must be non-empty")


@dataclass(frozen=True)
class ParamSet:
    """The full textual parameter vector: one PromptText per call site.

    Equality is exact string equality of all components, which is what the
    finite-state chain oracles rely on.
    """

    params: tuple[PromptText, ...]

    def __post_init__(self):
        if len(self.params) < 1:
            raise ValueError("a parameter set needs at least one prompt")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate prompt names: {names}")

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ParamSet":
        return cls(tuple(PromptText(n, t) for n, t in d.items()))

    @classmethod
    def single(cls, text: str, name: str = "main") -> "ParamSet":
        return cls((PromptText(name, text),))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    def get(self, name: str) -> PromptText:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def replace(self, name: str, text: str) -> "ParamSet":
        return ParamSet(
            tuple(PromptText(p.name, text) if p.name == name else p for p in self.params)
        )

    def to_dict(self) -> dict[str, str]:
        return {p.name: p.text for p in self.params}


@dataclass(frozen=True)
class Example:
    """One datapoint: a question (plus optional context) and its gold answer.

    ``target`` may be empty only for unsupervised use (conformal factuality).
    ``answerable`` / ``abstain_kind`` support abstention evaluation on
    datasets that include deliberately unanswerable questions.
    """

    input: str
    target: str = ""
    context: str = ""
    id: str = ""
    answerable: bool = True
    abstain_kind: str = ""  # "", "no_context", or "random_context"

    def __post_init__(self):
        if not self.input:
            raise ValueError("example input must be non-empty")


@dataclass(frozen=True)
class Dataset:
    examples: tuple[Example, ...]

    def __post_init__(self):
        if len(self.examples) < 1:
            raise ValueError("dataset must contain at least one example")

    @classmethod
    def of(cls, examples) -> "Dataset":
        return cls(tuple(examples))

    @property
    def n(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]


@dataclass(frozen=True)
class GenerationParams:
    """Decoding settings passed through to a backend.

    temperature == 0 requests the backend's deterministic decoding mode.
    """

    temperature: float = 1.0
    max_tokens: int = 1024
    logprobs: bool = False

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


def _seed_sequence(seed: int, key: tuple) -> np.random.SeedSequence:
    # Each key element is hashed to two uint32 words so that arbitrary
    # str/int tags address statistically independent streams.
    words: list[int] = []
    for part in key:
        digest = hashlib.sha256(repr(part).encode("utf-8")).digest()
        words.append(int.from_bytes(digest[:4], "little"))
        words.append(int.from_bytes(digest[4:8], "little"))
    return np.random.SeedSequence(entropy=seed & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(words))


class RngStream:
    """A deterministic random stream addressed by (seed, key path).

    Identical (seed, key) always reproduces the identical draw sequence,
    across processes and platforms. A stream is owned by a single consumer;
    concurrent users must derive child streams via :meth:`child` instead of
    sharing one stream. ``position`` counts primitive draws consumed, which
    cache keys use to make temperature>0 sampling replayable.
    """

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        self._gen = np.random.Generator(np.random.PCG64(_seed_sequence(self.seed, self.key)))
        self.position = 0

    def child(self, *key) -> "RngStream":
        """Derive an independent stream without consuming this one."""
        return RngStream(self.seed, self.key + key)

    def uniform(self) -> float:
        self.position += 1
        return float(self._gen.random())

    def integers(self, low: int, high: int, size: int | None = None):
        """Uniform integers in [low, high); scalar when size is None."""
        self.position += 1
        if size is None:
            return int(self._gen.integers(low, high))
        return [int(v) for v in self._gen.integers(low, high, size=size)]

    def choice_weighted(self, weighted: dict[str, float]) -> str:
        """Draw a key of ``weighted`` with the given probabilities.

        Items are ordered lexicographically before the cumulative draw so the
        result depends only on the mapping, not on dict insertion order.
        """
        items = sorted(weighted.items())
        probs = np.array([p for _, p in items], dtype=float)
        cum = np.cumsum(probs)
        u = self.uniform() * cum[-1]
        idx = int(np.searchsorted(cum, u, side="right"))
        idx = min(idx, len(items) - 1)
        return items[idx][0]

    def permutation(self, n: int) -> list[int]:
        self.position += 1
        return [int(v) for v in self._gen.permutation(n)]

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key!r}, position={self.position})"


def normalize_answer(raw: str) -> str:
    """Canonicalize an extracted answer span for exact-match comparison.

    Lowercases, strips surrounding whitespace, collapses internal whitespace
    runs, removes trailing periods, and drops leading zeros from pure
    integers. Commas are kept ("1,154" and "1154" stay distinct; semantic
    clustering, not exact match, is responsible for merging those).
    """
    s = " ".join(raw.lower().split())
    s = s.rstrip(".")
    if s.isascii() and s.isdigit():
        s = str(int(s))
    return s


def draw_minibatch(dataset: Dataset, batch_size: int, rng: RngStream) -> list[Example]:
    """Draw ``batch_size`` examples uniformly with replacement.

    With-replacement sampling keeps the mini-batch log-likelihood estimate
    exactly unbiased for the full-data mean.
    """
    n = dataset.n
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch size {batch_size} out of range [1, {n}]")
    idx = rng.integers(0, n, size=batch_size)
    return [dataset[i] for i in idx]
