"""Text-generation and scoring backends behind one interface.

Three implementations:

* ``ChatHTTPBackend`` speaks the OpenAI-compatible chat-completions protocol.
  It can generate but not score (hosted chat endpoints do not expose
  log-probabilities of arbitrary continuations).
* ``SurrogateHTTPBackend`` speaks a completions-style protocol with echo
  scoring, used to evaluate log p(target | messages) under teacher forcing.
* ``MockBackend`` samples from finite distributions with exact
  probabilities, which the oracle tests rely on.

Generation draws randomness from an explicit RngStream so runs replay
deterministically; scoring is deterministic. HTTP backends share a
content-addressed on-disk cache, a token-bucket rate limiter, and
retry-with-backoff transport handling.
"""

from __future__ import annotations

import abc
import hashlib
import json
import math
import os
import tempfile
import threading
import time
from dataclasses import dataclass

import requests

from .core import NEG_INF, GenerationParams, LogDensity, RngStream
from .errors import (
    CapabilityError,
    ConfigError,
    ProtocolError,
    RetriableError,
    UnknownQueryError,
)

_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role != "system" and not self.content:
            raise ValueError(f"{self.role} message content must be non-empty")


def system(content: str) -> ChatMessage:
    return ChatMessage("system", content)


def user(content: str) -> ChatMessage:
    return ChatMessage("user", content)


def assistant(content: str) -> ChatMessage:
    return ChatMessage("assistant", content)


@dataclass(frozen=True)
class GenerationResult:
    text: str
    token_logprobs: tuple[float, ...] | None = None
    total_logprob: float | None = None

    def __post_init__(self):
        if self.token_logprobs is not None and self.total_logprob is not None:
            if abs(sum(self.token_logprobs) - self.total_logprob) > 1e-9:
                raise ValueError("total_logprob does not match token_logprobs sum")


class Backend(abc.ABC):
    """Interface shared by all backends.

    ``can_score`` advertises whether :meth:`score_target` is available;
    callers that need densities must check it at configuration time rather
    than at first use.
    """

    can_score: bool = False

    @property
    @abc.abstractmethod
    def identity(self) -> str:
        """Stable identifier recorded in manifests and cache keys."""

    @abc.abstractmethod
    def generate(
        self, messages: list[ChatMessage], params: GenerationParams, rng: RngStream
    ) -> GenerationResult:
        ...

    def score_target(self, messages: list[ChatMessage], target: str) -> LogDensity:
        raise CapabilityError(f"{self.identity} cannot score log-probabilities")


# ---------------------------------------------------------------------------
# Mock backend.


def mock_fingerprint(messages: list[ChatMessage]) -> tuple:
    """Key a message list by (system contents, non-system (role, content))."""
    prompt_part = tuple(m.content for m in messages if m.role == "system")
    input_part = tuple((m.role, m.content) for m in messages if m.role != "system")
    return (prompt_part, input_part)


class MockTable:
    """Finite output distributions keyed by message-list fingerprints.

    Each entry maps a fingerprint to {output string: probability}. An
    optional default distribution answers queries with no entry; without
    one, unknown queries raise so that test mocks fail loudly instead of
    silently inventing mass.
    """

    def __init__(self, default: dict[str, float] | None = None):
        self._entries: dict[tuple, dict[str, float]] = {}
        self.default = dict(default) if default is not None else None
        if self.default is not None:
            _check_distribution(self.default)

    def add(self, messages: list[ChatMessage], distribution: dict[str, float]) -> "MockTable":
        _check_distribution(distribution)
        self._entries[mock_fingerprint(messages)] = dict(distribution)
        return self

    def lookup(self, messages: list[ChatMessage]) -> dict[str, float]:
        key = mock_fingerprint(messages)
        entry = self._entries.get(key)
        if entry is not None:
            return entry
        if self.default is not None:
            return self.default
        raise UnknownQueryError(f"no mock entry for fingerprint {key!r}")

    def __len__(self):
        return len(self._entries)


def _check_distribution(dist: dict[str, float]):
    if not dist:
        raise ValueError("distribution must be non-empty")
    if any(p <= 0 for p in dist.values()):
        raise ValueError("probabilities must be positive")
    total = math.fsum(dist.values())
    if abs(total - 1.0) > 1e-12:
        raise ValueError(f"probabilities sum to {total}, not 1")


class MockBackend(Backend):
    can_score = True

    def __init__(self, table: MockTable, name: str = "mock"):
        self.table = table
        self.name = name

    @property
    def identity(self) -> str:
        return f"mock:{self.name}"

    def generate(self, messages, params, rng) -> GenerationResult:
        dist = self.table.lookup(messages)
        if params.temperature == 0:
            # Argmax with lexicographic tie-breaking; no rng consumed so
            # greedy calls do not disturb replayed streams.
            best_p = max(dist.values())
            text = min(s for s, p in dist.items() if p == best_p)
        else:
            text = rng.choice_weighted(dist)
        lp = math.log(dist[text])
        return GenerationResult(text=text, total_logprob=lp)

    def score_target(self, messages, target) -> LogDensity:
        dist = self.table.lookup(messages)
        p = dist.get(target)
        return math.log(p) if p is not None else NEG_INF


def mock_table_from_json(doc: dict) -> MockTable:
    """Build a MockTable from its JSON form.

    The document is {"default": {text: p} | null, "entries": [{"messages":
    [{"role": r, "content": c}, ...], "dist": {text: p}}, ...]}. This is the
    on-disk shape used by mock backend configs.
    """
    if not isinstance(doc, dict):
        raise ProtocolError("mock table document must be a JSON object")
    table = MockTable(default=doc.get("default"))
    for i, entry in enumerate(doc.get("entries", ())):
        try:
            messages = [ChatMessage(m["role"], m["content"]) for m in entry["messages"]]
            table.add(messages, entry["dist"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad mock table entry at index {i}: {exc}") from exc
    return table


# ---------------------------------------------------------------------------
# Transport plumbing shared by the HTTP backends.


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_s: float = 0.5
    multiplier: float = 2.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


class RateLimiter:
    """Token bucket: callers block (never error) when the budget is spent."""

    def __init__(self, requests_per_minute: float | None):
        self.rate = requests_per_minute
        self._tokens = float(requests_per_minute) if requests_per_minute else 0.0
        self._last = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self):
        if not self.rate:
            return
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.rate, self._tokens + (now - self._last) * self.rate / 60.0)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) * 60.0 / self.rate
            time.sleep(wait)


class ResponseCache:
    """Content-addressed JSON store, one file per key.

    Writes are atomic (temp file + rename); corrupt entries are deleted and
    treated as misses so a torn write can never poison later runs.
    """

    def __init__(self, directory: str):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    @staticmethod
    def key_of(material: dict) -> str:
        canon = json.dumps(material, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> str:
        return os.path.join(self.directory, key + ".json")

    def get(self, key: str):
        path = self._path(key)
        try:
            with open(path, encoding="utf-8") as fh:
                return json.load(fh)
        except FileNotFoundError:
            return None
        except (json.JSONDecodeError, UnicodeDecodeError, OSError):
            try:
                os.remove(path)
            except OSError:
                pass
            return None

    def put(self, key: str, value):
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(value, fh, ensure_ascii=False)
            os.replace(tmp, self._path(key))
        except BaseException:
            try:
                os.remove(tmp)
            except OSError:
                pass
            raise


def _messages_payload(messages: list[ChatMessage]) -> list[dict]:
    return [{"role": m.role, "content": m.content} for m in messages]


class _HTTPBackend(Backend):
    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "",
        retry: RetryPolicy | None = None,
        requests_per_minute: float | None = None,
        cache_dir: str | None = None,
        timeout_s: float = 120.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.retry = retry or RetryPolicy()
        self.limiter = RateLimiter(requests_per_minute)
        self.cache = ResponseCache(cache_dir) if cache_dir else None
        self.timeout_s = timeout_s
        self._session = requests.Session()
        if api_key_env:
            key = os.environ.get(api_key_env)
            if not key:
                raise ConfigError(f"environment variable {api_key_env} is not set")
            self._session.headers["Authorization"] = f"Bearer {key}"

    def _post(self, payload: dict) -> dict:
        last_exc: Exception | None = None
        for attempt in range(self.retry.max_attempts):
            if attempt:
                time.sleep(self.retry.backoff_s * self.retry.multiplier ** (attempt - 1))
            self.limiter.acquire()
            try:
                resp = self._session.post(self.endpoint, json=payload, timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_exc = RetriableError(f"HTTP {resp.status_code} from {self.endpoint}")
                continue
            if resp.status_code != 200:
                raise ProtocolError(f"HTTP {resp.status_code} from {self.endpoint}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"non-JSON response from {self.endpoint}") from exc
        raise RetriableError(
            f"{self.endpoint} unreachable after {self.retry.max_attempts} attempts: {last_exc}"
        )

    def _cached(self, material: dict, fetch):
        if self.cache is None:
            return fetch()
        key = ResponseCache.key_of(material)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        value = fetch()
        self.cache.put(key, value)
        return value


class ChatHTTPBackend(_HTTPBackend):
    """OpenAI-compatible chat completions. Generation only."""

    can_score = False

    @property
    def identity(self) -> str:
        return f"chat-http:{self.model}@{self.endpoint}"

    def generate(self, messages, params, rng) -> GenerationResult:
        payload = {
            "model": self.model,
            "messages": _messages_payload(messages),
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        if params.logprobs:
            payload["logprobs"] = True
        material = {"op": "chat", "backend": self.identity, "payload": payload}
        if params.temperature > 0:
            # Distinct draws from one stream must miss the cache; replayed
            # streams hit it, which is what makes resumed runs identical.
            material["rng"] = [rng.seed, list(map(repr, rng.key)), rng.position]
            rng.uniform()
        data = self._cached(material, lambda: self._post(payload))
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed chat response: {exc!r}") from exc
        token_lps = None
        lp_block = choice.get("logprobs") or {}
        if isinstance(lp_block, dict) and isinstance(lp_block.get("content"), list):
            try:
                token_lps = tuple(float(t["logprob"]) for t in lp_block["content"])
            except (KeyError, TypeError, ValueError):
                token_lps = None
        total = sum(token_lps) if token_lps is not None else None
        return GenerationResult(text=text, token_logprobs=token_lps, total_logprob=total)


def flatten_transcript(messages: list[ChatMessage]) -> str:
    """Render a chat as a plain role-tagged transcript for completion APIs.

    If the last message is an assistant turn the transcript ends inside it,
    so a scored target continues that turn directly; otherwise an assistant
    turn is opened with a trailing space and the target (or completion)
    starts at a clean boundary.
    """
    parts = [f"{m.role}: {m.content}" if m.content else f"{m.role}:" for m in messages]
    text = "\n\n".join(parts)
    if messages and messages[-1].role == "assistant":
        return text
    return text + "\n\nassistant: "


class SurrogateHTTPBackend(_HTTPBackend):
    """Completions-protocol backend used for scoring (and optional generation).

    Scoring sends prompt = transcript + target with ``echo`` enabled and
    sums the echoed per-token log-probs whose text offset lies inside the
    target span.
    """

    can_score = True

    @property
    def identity(self) -> str:
        return f"surrogate-http:{self.model}@{self.endpoint}"

    def generate(self, messages, params, rng) -> GenerationResult:
        context = flatten_transcript(messages)
        payload = {
            "model": self.model,
            "prompt": context,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        material = {"op": "complete", "backend": self.identity, "payload": payload}
        if params.temperature > 0:
            material["rng"] = [rng.seed, list(map(repr, rng.key)), rng.position]
            rng.uniform()
        data = self._cached(material, lambda: self._post(payload))
        try:
            text = data["choices"][0]["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion response: {exc!r}") from exc
        return GenerationResult(text=text)

    def score_target(self, messages, target) -> LogDensity:
        if not target:
            raise ValueError("target must be non-empty")
        context = flatten_transcript(messages)
        payload = {
            "model": self.model,
            "prompt": context + target,
            "temperature": 0,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
        }
        material = {"op": "score", "backend": self.identity, "payload": payload}
        data = self._cached(material, lambda: self._post(payload))
        try:
            lp = data["choices"][0]["logprobs"]
            token_logprobs = lp["token_logprobs"]
            offsets = lp["text_offset"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed scoring response: {exc!r}") from exc
        if len(token_logprobs) != len(offsets):
            raise ProtocolError("token_logprobs and text_offset lengths differ")
        boundary = len(context)
        total = 0.0
        for off, tok_lp in zip(offsets, token_logprobs):
            if off >= boundary:
                if tok_lp is None:
                    raise ProtocolError("missing log-prob inside the target span")
                total += float(tok_lp)
        return total
