"""Prompt text assets.

Two kinds of strings live here and the distinction matters:

* Fixed assets (meta-prompt, paraphrase instruction, system-prompt list,
  claim decomposition / frequency scoring / factuality annotation prompts,
  the default chain-of-thought seed prompt). These are byte-fixed because
  they define the densities and baselines the package reports on.

* Versioned templates (critique, revision, clustering, judging, the answer
  format suffix). These are original to this package. Changing any of them
  changes the proposal density q and therefore invalidates previously
  recorded chains, so they carry PROMPTS_VERSION and configs may override
  them only together with an explicit version bump.

Templates use double-brace placeholders ({{name}}) filled by
:func:`fill`. Literal JSON braces in the fixed prompts are single braces
and are never substituted.
"""

from __future__ import annotations

import importlib.resources

PROMPTS_VERSION = "1"

# ---------------------------------------------------------------------------
# Fixed assets.

META_PROMPT = "Generate an LLM prompt satisfying the given constraints."

COT_PROMPT = "Answer the question. Think step-by-step."

BIO_PROMPT = "You are a helpful assistant. Write a bio for people."

PARAPHRASE_PROMPT = (
    "Suggest a way to paraphrase the text in triple quotes above.\n"
    "If the original text is a question, please make sure that your answer is also a question.\n"
    "If the original text has answer options, please make sure your answer also has those "
    "options in the same order.\n"
    "Answer should ONLY be the paraphrase and nothing else."
)

SUBCLAIM_SEPARATOR_PROMPT = (
    "Please breakdown the following input into a set of small, independent claims (make "
    "sure not to add any information), and return the output as a jsonl, where each line "
    "is {subclaim:[CLAIM], gpt-score:[CONF]}.\n The confidence score [CONF] should "
    "represent your confidence in the claim, where a 1 is obvious facts and results like "
    "'The earth is round' and '1+1=2'. A 0 is for claims that are very obscure or "
    "difficult for anyone to know, like the birthdays of non-notable people. If the input "
    "is short, it is fine to only return 1 claim. The input is: "
)

FREQUENCY_SCORING_PROMPT = (
    "You will get a list of claims and piece of text. For each claim, score whether the "
    'text supports, contradicts, or is unrelated to the claim. Directly return a jsonl, '
    'where each line is {"id":[CLAIM_ID], "score":[SCORE]}. Directly return the jsonl '
    "with no explanation or other formatting. For the [SCORE], return 1 for supports, -1 "
    "for contradicts, and 0 for unrelated. The claims are:\n{{claim_string}}\n\n"
    "The text is:\n{{output}}"
)

FACTUALITY_ANNOTATION_PROMPT = (
    "Please verify if each of these claims is factual.\n"
    "Claims:\n"
    "{{claims_text}}\n"
    "Return your answer as a JSON array, where each element is an object with these "
    'keys: {"subclaim": "[CLAIM]", "factual": 1 or 0, "source": "source or explanation"}\n'
    "Format your response as a valid JSON array only, with no additional text or "
    "formatting.\n"
    "Example:\n"
    "[\n"
    '{"subclaim": "claim 1", "factual": 1, "source": "source"},\n'
    '{"subclaim": "claim 2", "factual": 0, "source": "source"}\n'
    "]\n"
)


def system_prompt_list() -> list[str]:
    """The shipped persona prefixes used by the system-message perturber."""
    text = importlib.resources.files("promptbayes").joinpath("data/system_prompts.txt").read_text(
        encoding="utf-8"
    )
    return [line for line in text.splitlines() if line]


# ---------------------------------------------------------------------------
# Versioned templates (original; see module docstring).

ANSWER_MARKER = "Answer:"

ANSWER_FORMAT_SUFFIX = (
    "\n\nEnd your response with your final answer on a line of the form:\n"
    "Answer: <THE ANSWER>"
)

FORMAT_REMINDER = (
    "Your previous response did not end with the required answer line. Respond again, "
    "making sure the response ends with a line of the form:\nAnswer: <THE ANSWER>"
)

OBJECTIVE_DEFAULT = (
    "The prompts should satisfy all of the stated constraints, and they should lead to "
    "strong downstream performance on questions like those in the sample shown."
)

CRITIQUE_TEMPLATE = """You are reviewing the prompts that drive an LLM pipeline.

Objective:
{{objective}}

Constraints for each prompt:
{{constraints}}

Current prompts:
{{prompts}}

Results on a sample of training questions using the current prompts:
{{results}}

Write a short critique of the current prompts: where they fall short of the constraints or the objective, and what concrete changes would improve the results shown. Respond with the critique only."""

REVISION_TEMPLATE = """You are revising one prompt of an LLM pipeline.

Constraints for this prompt:
{{constraints}}

Current prompt:
{{current}}

Critique of the pipeline's prompts:
{{critique}}

Rewrite the prompt to address the critique while satisfying the constraints. Respond with the new prompt text only."""

CLUSTER_TEMPLATE = """Group the following answers to one question into clusters of semantically equivalent answers. Two answers belong in the same cluster when they assert the same thing, even if the wording, formatting, or units differ.

Question:
{{question}}

Answers:
{{answers}}

Return one line per cluster. Each line lists the answer numbers belonging to that cluster, separated by commas. Every answer number must appear on exactly one line. Return only the cluster lines."""

JUDGE_TEMPLATE = """Decide whether the candidate answer to the question means the same thing as the gold answer. Differences in wording, formatting, or units are acceptable as long as the content matches.

Question:
{{question}}

Gold answer:
{{gold}}

Candidate answer:
{{answer}}

Respond with exactly one word: CORRECT or INCORRECT."""


def fill(template: str, **slots: str) -> str:
    """Substitute {{name}} placeholders; literal single braces pass through."""
    out = template
    for name, value in slots.items():
        token = "{{" + name + "}}"
        if token not in out:
            raise KeyError(f"template has no placeholder {token}")
        out = out.replace(token, value)
    return out
