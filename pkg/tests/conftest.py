import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class HTTPStub:
    """A local HTTP endpoint with scripted responses.

    Tests enqueue (status, body) pairs; each POST pops one. Received
    payloads and headers are recorded for wire-protocol assertions. When the
    queue is empty, ``fallback`` (a callable taking the payload) produces
    the body, which lets scoring stubs compute offsets from the prompt.
    """

    def __init__(self):
        self.scripted = []
        self.requests = []
        self.headers = []
        self.fallback = None
        self._lock = threading.Lock()

        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")
                with stub._lock:
                    stub.requests.append(payload)
                    stub.headers.append(dict(self.headers))
                    if stub.scripted:
                        status, body = stub.scripted.pop(0)
                    elif stub.fallback is not None:
                        status, body = 200, stub.fallback(payload)
                    else:
                        status, body = 500, {"error": "no scripted response"}
                data = json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        self.url = f"http://127.0.0.1:{self._server.server_port}/v1"

    def enqueue(self, status, body):
        self.scripted.append((status, body))

    def close(self):
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def http_stub():
    stub = HTTPStub()
    yield stub
    stub.close()


def chat_body(text, token_logprobs=None):
    choice = {"message": {"role": "assistant", "content": text}}
    if token_logprobs is not None:
        choice["logprobs"] = {"content": [{"token": "t", "logprob": lp} for lp in token_logprobs]}
    return {"choices": [choice]}


def echo_scoring_fallback(per_char_logprob=-0.5):
    """Scoring stub: one 'token' per character, fixed log-prob each."""

    def fallback(payload):
        prompt = payload["prompt"]
        offsets = list(range(len(prompt)))
        lps = [None] + [per_char_logprob] * (len(prompt) - 1)
        return {
            "choices": [
                {
                    "text": prompt if payload.get("echo") else "",
                    "logprobs": {"token_logprobs": lps, "text_offset": offsets},
                }
            ]
        }

    return fallback


# ---------------------------------------------------------------------------
# Mock-world builders shared by likelihood, sampler, and acceptance tests.

from promptbayes.backends import MockBackend, MockTable, assistant, system, user  # noqa: E402
from promptbayes.core import Dataset, Example, ParamSet, PromptText  # noqa: E402
from promptbayes.pipeline import SystemGraph  # noqa: E402


def build_qa_world(items, prompt_text="P", reasoning="think"):
    """Single-site pipeline whose gold-answer probabilities are exact.

    items: list of (question, gold_answer, gold_probability). The final
    completion always ends at the marker, so the sampled trace is
    deterministic and the score of the gold answer is exactly log p.
    """
    graph = SystemGraph.single()
    theta = ParamSet.single(prompt_text)
    table = MockTable()
    sys_msg = system(prompt_text + graph.suffix)
    completion = f"{reasoning} {graph.marker}"
    for question, gold, p in items:
        msgs = [sys_msg, user(question)]
        table.add(msgs, {completion: 1.0})
        dist = {gold: p} if p >= 1.0 else {gold: p, "##wrong##": 1.0 - p}
        table.add(msgs + [assistant(completion + " ")], dist)
    dataset = Dataset.of(
        Example(input=q, target=gold, id=f"ex{i}") for i, (q, gold, _) in enumerate(items)
    )
    return graph, theta, MockBackend(table), dataset


def build_two_point_trace_world(prompt_text="P"):
    """Two equiprobable traces giving the gold answer p=0.8 and p=0.2.

    The exact marginal p(gold | x, theta) is 0.5; single-trace estimates
    are ln 0.8 or ln 0.2 with equal probability.
    """
    graph = SystemGraph.single()
    theta = ParamSet.single(prompt_text)
    msgs = [system(prompt_text + graph.suffix), user("q")]
    table = MockTable()
    table.add(msgs, {f"z1 {graph.marker}": 0.5, f"z2 {graph.marker}": 0.5})
    table.add(msgs + [assistant(f"z1 {graph.marker} ")], {"42": 0.8, "no": 0.2})
    table.add(msgs + [assistant(f"z2 {graph.marker} ")], {"42": 0.2, "no": 0.8})
    example = Example(input="q", target="42")
    return graph, theta, MockBackend(table), example


# ---------------------------------------------------------------------------
# Exact finite-state chain oracles (stationarity / detailed balance).

import math  # noqa: E402

from promptbayes.core import NEG_INF  # noqa: E402
from promptbayes.proposal import ProposalResult  # noqa: E402


class TableTarget:
    """Exact log g over single-prompt states; ignores batch and rng."""

    def __init__(self, g):
        self.g = dict(g)
        self.calls = 0

    def log_g(self, theta, batch, rng):
        self.calls += 1
        mass = self.g.get(theta.get("main").text)
        return math.log(mass) if mass else NEG_INF


class TableProposer:
    """Exact proposal kernel q(next | current) over single-prompt states."""

    needs_context = False

    def __init__(self, q):
        self.q = {k: dict(v) for k, v in q.items()}
        for state, row in self.q.items():
            total = math.fsum(row.values())
            assert abs(total - 1.0) < 1e-12, f"q[{state}] sums to {total}"

    def propose(self, theta, ctx, rng):
        cur = theta.get("main").text
        nxt = rng.choice_weighted(self.q[cur])
        return ProposalResult(
            theta_new=ParamSet.single(nxt),
            critiques=(),
            log_q_fwd=math.log(self.q[cur][nxt]),
        )

    def log_q(self, theta_to, theta_from, ctx, rng, via=()):
        row = self.q.get(theta_from.get("main").text, {})
        p = row.get(theta_to.get("main").text)
        return math.log(p) if p else NEG_INF


def four_state_world():
    """4 prompt states with exact unnormalized g and a mixed q kernel.

    q contains both symmetric pairs (C<->D via 0.4/0.5? no: chosen so some
    pairs are asymmetric and some acceptance probabilities clamp to 1).
    """
    g = {"A": 1.0, "B": 0.5, "C": 0.25, "D": 0.25}
    q = {
        "A": {"B": 0.5, "C": 0.3, "D": 0.2},
        "B": {"A": 0.4, "C": 0.4, "D": 0.2},
        "C": {"A": 0.3, "B": 0.3, "D": 0.4},
        "D": {"A": 0.25, "B": 0.25, "C": 0.5},
    }
    pi = {s: m / math.fsum(g.values()) for s, m in g.items()}
    return g, q, pi


def exact_gamma(g, q, a, b):
    """Hand-computable acceptance probability for proposing b from a."""
    return min(1.0, (g[b] * q[b][a]) / (g[a] * q[a][b]))


# ---------------------------------------------------------------------------
# A closed two-prompt world where one mock backend plays every role
# (generation, scoring, prior, critique, revision, paraphrase), so full
# sample -> predict -> evaluate runs are exact and deterministic.

from promptbayes.prior import ConstraintText, PriorSpec, prior_messages  # noqa: E402
from promptbayes.prompts import PARAPHRASE_PROMPT, system_prompt_list  # noqa: E402
from promptbayes.proposal import (  # noqa: E402
    CritiqueReviseProposer,
    ObjectiveText,
    ProposalContext,
    critique_messages,
    revision_messages,
)


class E2EWorld:
    def __init__(self, graph, dataset, backend, prior_spec, proposer, prompts, p_gold, entries):
        self.graph = graph
        self.dataset = dataset
        self.backend = backend
        self.prior_spec = prior_spec
        self.proposer = proposer
        self.prompts = prompts
        self.p_gold = p_gold
        self.entries = entries

    def table_json(self) -> dict:
        """The mock table in the on-disk form mock backend configs load."""
        return {
            "default": None,
            "entries": [
                {
                    "messages": [{"role": m.role, "content": m.content} for m in msgs],
                    "dist": dist,
                }
                for msgs, dist in self.entries
            ],
        }

    def dataset_jsonl(self, format: str = "simpleqa") -> str:
        """The dataset in a JSONL shape the loaders read."""
        lines = []
        for ex in self.dataset:
            if format == "qasper":
                record = {
                    "id": ex.id,
                    "question": ex.input,
                    "context": ex.context,
                    "answer": ex.target,
                    "answerable": ex.answerable,
                }
            else:
                record = {"id": ex.id, "question": ex.input, "answer": ex.target}
            lines.append(json.dumps(record))
        return "\n".join(lines) + "\n"


def build_e2e_world(n_questions=12, p_weak=0.6, p_good=0.9, n_unanswerable=0):
    """Two prompt states P0 (weak) and P1 (strong); question i has gold
    answer ans{i} produced with probability p_weak or p_good. Critiques are
    deterministic and revisions are a symmetric 50/50 kernel over the two
    prompts, so the chain reduces to an exactly solvable 2-state MH chain.

    The last ``n_unanswerable`` questions get a diffuse 3-way answer
    distribution identical under both prompts (the likelihood contribution
    cancels), so their semantic confidence is low and abstention AUC is a
    well-defined number.
    """
    graph = SystemGraph.single()
    prompts = ("P0", "P1")
    p_gold = {"P0": p_weak, "P1": p_good}
    table = MockTable()
    entries = []

    def add(msgs, dist):
        entries.append((list(msgs), dict(dist)))
        table.add(msgs, dist)

    examples = [
        Example(
            input=f"q{i}",
            target=f"ans{i}",
            id=f"ex{i}",
            answerable=i < n_questions - n_unanswerable,
        )
        for i in range(n_questions)
    ]
    dataset = Dataset.of(examples)

    def answer_options(ex):
        if ex.answerable:
            return None
        return (ex.target, f"alt-{ex.target}", f"alt2-{ex.target}")

    constraint = ConstraintText("main", "Ask for step-by-step reasoning.")
    add(prior_messages(constraint), {"P0": 0.5, "P1": 0.5})

    # Forward completions and gold-continuation scoring for both prompts,
    # with and without each persona prefix (the system-message baseline
    # uses P0 only, but enumerating both keeps the world closed).
    prefixes = [()] + [(system(p),) for p in system_prompt_list()]
    for ptext in prompts:
        sys_msg = system(ptext + graph.suffix)
        for ex in examples:
            opts = answer_options(ex)
            if opts is None:
                p = p_gold[ptext]
                dist = {
                    f"r {graph.marker} {ex.target}": p,
                    f"r {graph.marker} alt-{ex.target}": 1.0 - p,
                }
                score_dist = {ex.target: p, f"alt-{ex.target}": 1.0 - p}
            else:
                # dyadic weights keep the distribution exactly normalized
                weights = (0.5, 0.25, 0.25)
                dist = {
                    f"r {graph.marker} {o}": w for o, w in zip(opts, weights)
                }
                score_dist = dict(zip(opts, weights))
            for pre in prefixes:
                msgs = list(pre) + [sys_msg, user(ex.input)]
                add(msgs, dist)
                add(msgs + [assistant(f"r {graph.marker} ")], score_dist)

    # One deterministic critique for every reachable (prompts, context)
    # pair; build_context answers each batch question with the current
    # prompts, so enumerate both possible answers per question.
    objective = ObjectiveText()
    constraints = (constraint,)
    for cur in prompts:
        theta = ParamSet.single(cur)
        for ex in examples:
            opts = answer_options(ex) or (ex.target, f"alt-{ex.target}")
            for ans in opts:
                ctx = ProposalContext(
                    batch=(ex,), answers=(ans,), correct=(ans == ex.target,)
                )
                add(
                    critique_messages(theta, ctx, objective, constraints), {"c": 1.0}
                )

    # Symmetric revision kernel.
    for cur in prompts:
        rmsgs = revision_messages(PromptText("main", cur), constraint, "c")
        add(rmsgs, {"P0": 0.5, "P1": 0.5})

    # Paraphraser echoes the question.
    for ex in examples:
        add(
            [user(f"'''{ex.input}'''\n\n{PARAPHRASE_PROMPT}")], {ex.input: 1.0}
        )

    backend = MockBackend(table)
    prior_spec = PriorSpec(constraints=constraints, backend=backend)
    proposer = CritiqueReviseProposer(backend, constraints)
    return E2EWorld(graph, dataset, backend, prior_spec, proposer, prompts, p_gold, entries)
