"""YAML run configuration: schema validation and object wiring.

A config file is validated in full (unknown keys rejected with their field
paths, types checked, cross-field invariants enforced) before any backend
object is constructed, so a bad config can never burn API budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backends import (
    Backend,
    ChatHTTPBackend,
    MockBackend,
    SurrogateHTTPBackend,
    mock_table_from_json,
)
from .core import ParamSet
from .datasets import FORMATS, load_dataset
from .errors import ConfigError
from .estimators import (
    STRATEGY_KINDS,
    FixedPromptStrategy,
    ParaphraseStrategy,
    PosteriorPromptSampler,
    SystemMessageStrategy,
    TextGradStrategy,
)
from .pipeline import CallSite, SystemGraph
from .prior import ConstraintText, PriorSpec
from .prompts import ANSWER_FORMAT_SUFFIX, ANSWER_MARKER, COT_PROMPT
from .proposal import CritiqueReviseProposer, ObjectiveText
from .sampler import ChainConfig, ChainStore

# ---------------------------------------------------------------------------
# Schema. Leaves are (types, required) pairs; nested dicts are sub-schemas.
# A trailing "*" key marks mappings with free-form string keys.

_OPT = False
_REQ = True

_BACKEND_SCHEMA = {
    "kind": ((str,), _REQ),
    "endpoint": ((str,), _OPT),
    "model": ((str,), _OPT),
    "api_key_env": ((str,), _OPT),
    "requests_per_minute": ((int, float), _OPT),
    "cache_dir": ((str,), _OPT),
    "timeout_s": ((int, float), _OPT),
    "table": ((str,), _OPT),
}

_SCHEMA = {
    "seed": ((int,), _OPT),
    "run_dir": ((str, type(None)), _OPT),
    "dataset": {
        "format": ((str,), _REQ),
        "path": ((str,), _REQ),
        "id_list": ((str, type(None)), _OPT),
        "limit": ((int, type(None)), _OPT),
    },
    "pipeline": {
        "sites": ((list,), _OPT),
        "edges": ((list,), _OPT),
        "suffix": ((str,), _OPT),
        "marker": ((str,), _OPT),
    },
    "backends": {
        "generator": _BACKEND_SCHEMA,
        "surrogate": _BACKEND_SCHEMA,
        "judge": _BACKEND_SCHEMA,
    },
    "prior": {
        "constraints": ((dict,), _REQ),
        "max_tokens": ((int,), _OPT),
    },
    "proposal": {
        "steps": ((int,), _OPT),
        "objective": ((str, type(None)), _OPT),
        "max_tokens": ((int,), _OPT),
    },
    "chain": {
        "steps": ((int,), _REQ),
        "beta": ((int, float), _REQ),
        "batch_size": ((int,), _OPT),
        "burn_in": ((int,), _OPT),
        "thin": ((int,), _OPT),
        "num_samples": ((int,), _OPT),
        "g_cache": ((str,), _OPT),
    },
    "init_prompt": ((str, dict, type(None)), _OPT),
    "evaluation": {
        "m": ((int,), _OPT),
        "per_sample": ((int,), _OPT),
        "runs": ((int,), _OPT),
        "n_bins": ((int,), _OPT),
        "strategies": ((list,), _OPT),
        "textgrad_steps": ((int, type(None)), _OPT),
        "cluster_mode": ((str,), _OPT),
        "judge_mode": ((str,), _OPT),
        "answer_temperature": ((int, float), _OPT),
        "max_answer_tokens": ((int,), _OPT),
    },
    "conformal": {
        "alphas": ((list,), _OPT),
        "n_splits": ((int,), _OPT),
        "pool_size": ((int,), _OPT),
        "cal_size": ((int, type(None)), _OPT),
        "claims": ((str, type(None)), _OPT),
    },
}

_REQUIRED_SECTIONS = ("dataset", "backends", "prior", "chain")


def _validate(obj, schema, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    for key in obj:
        if key not in schema:
            raise ConfigError(f"unknown config key: {path + key}")
    for key, rule in schema.items():
        if key not in obj:
            if isinstance(rule, tuple) and rule[1] is _REQ:
                raise ConfigError(f"missing required config key: {path + key}")
            continue
        value = obj[key]
        if isinstance(rule, dict):
            _validate(value, rule, f"{path}{key}.")
        else:
            types, required = rule
            if required and value is None:
                raise ConfigError(f"missing required config key: {path + key}")
            if not isinstance(value, types) or (
                # bool is an int subclass; reject it where ints are wanted
                isinstance(value, bool) and bool not in types
            ):
                names = "/".join(t.__name__ for t in types)
                raise ConfigError(
                    f"config key {path + key}: expected {names}, got {type(value).__name__}"
                )


# ---------------------------------------------------------------------------
# Typed view of a validated config.


@dataclass
class RunConfig:
    seed: int
    run_dir: str | None
    dataset: dict
    pipeline: dict
    backends: dict
    prior: dict
    proposal: dict
    chain: ChainConfig
    init_prompt: str | dict | None
    evaluation: dict
    conformal: dict
    raw: dict = field(repr=False, default_factory=dict)


_EVAL_DEFAULTS = dict(
    m=10,
    per_sample=1,
    runs=10,
    n_bins=10,
    strategies=["mhlp", "cot", "textgrad", "paraphrase", "system-message"],
    textgrad_steps=None,
    cluster_mode="exact",
    judge_mode="exact",
    answer_temperature=1.0,
    max_answer_tokens=1024,
)

_CONFORMAL_DEFAULTS = dict(
    alphas=[0.05, 0.1, 0.2, 0.3, 0.4],
    n_splits=1000,
    pool_size=5,
    cal_size=None,
    claims=None,
)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if raw is None:
        raise ConfigError(f"{path}: config file is empty")
    _validate(raw, _SCHEMA, "")
    for section in _REQUIRED_SECTIONS:
        if section not in raw:
            raise ConfigError(f"missing required config key: {section}")

    dataset = dict(raw["dataset"])
    if dataset["format"] not in FORMATS:
        raise ConfigError(
            f"config key dataset.format: {dataset['format']!r} is not one of {FORMATS}"
        )

    backends = raw["backends"]
    if "generator" not in backends:
        raise ConfigError("missing required config key: backends.generator")
    for name, spec in backends.items():
        _validate_backend(spec, f"backends.{name}.")

    prior = {"max_tokens": 1024, **raw["prior"]}
    if not prior["constraints"]:
        raise ConfigError("config key prior.constraints: must be non-empty")
    for cname, ctext in prior["constraints"].items():
        if not isinstance(ctext, str) or not ctext:
            raise ConfigError(f"config key prior.constraints.{cname}: expected non-empty str")

    proposal = {"steps": 1, "objective": None, "max_tokens": 1024, **raw.get("proposal", {})}

    evaluation = {**_EVAL_DEFAULTS, **raw.get("evaluation", {})}
    for kind in evaluation["strategies"]:
        if kind not in STRATEGY_KINDS:
            raise ConfigError(
                f"config key evaluation.strategies: {kind!r} is not one of {STRATEGY_KINDS}"
            )
    for mode_key in ("cluster_mode", "judge_mode"):
        if evaluation[mode_key] not in ("exact", "llm"):
            raise ConfigError(f"config key evaluation.{mode_key}: expected 'exact' or 'llm'")
        if evaluation[mode_key] == "llm" and "judge" not in backends:
            raise ConfigError(
                f"config key evaluation.{mode_key}: 'llm' needs backends.judge"
            )

    conformal = {**_CONFORMAL_DEFAULTS, **raw.get("conformal", {})}
    for i, a in enumerate(conformal["alphas"]):
        if not isinstance(a, (int, float)) or not 0 < a < 1:
            raise ConfigError(f"config key conformal.alphas[{i}]: expected a number in (0, 1)")

    chain_raw = {"num_samples": evaluation["m"], **raw["chain"]}
    chain = ChainConfig(seed=raw.get("seed", 0), **chain_raw)  # validates the schedule
    if "mhlp" in evaluation["strategies"] and chain.num_samples != evaluation["m"]:
        raise ConfigError(
            f"config key evaluation.m: m={evaluation['m']} but chain.num_samples="
            f"{chain.num_samples}; the mhlp strategy draws one answer per kept sample"
        )

    pipeline = raw.get("pipeline", {})
    _build_graph(pipeline)  # validate sites/edges/templates up front

    init_prompt = raw.get("init_prompt", COT_PROMPT)
    if isinstance(init_prompt, dict):
        for k, v in init_prompt.items():
            if not isinstance(v, str) or not v:
                raise ConfigError(f"config key init_prompt.{k}: expected non-empty str")

    return RunConfig(
        seed=raw.get("seed", 0),
        run_dir=raw.get("run_dir"),
        dataset=dataset,
        pipeline=pipeline,
        backends=backends,
        prior=prior,
        proposal=proposal,
        chain=chain,
        init_prompt=init_prompt,
        evaluation=evaluation,
        conformal=conformal,
        raw=raw,
    )


_BACKEND_KINDS = ("chat", "surrogate", "mock")


def _validate_backend(spec, path: str):
    _validate(spec, _BACKEND_SCHEMA, path)
    kind = spec.get("kind")
    if kind not in _BACKEND_KINDS:
        raise ConfigError(f"config key {path}kind: {kind!r} is not one of {_BACKEND_KINDS}")
    if kind == "mock":
        if not spec.get("table"):
            raise ConfigError(f"config key {path}table: mock backends need a table file")
    else:
        for req in ("endpoint", "model"):
            if not spec.get(req):
                raise ConfigError(f"config key {path}{req}: required for kind {kind!r}")


# ---------------------------------------------------------------------------
# Builders: validated config -> wired objects.


def build_backend(spec: dict, base_dir: Path | None = None) -> Backend:
    kind = spec["kind"]
    if kind == "mock":
        table_path = Path(spec["table"])
        if base_dir is not None and not table_path.is_absolute():
            table_path = base_dir / table_path
        if not table_path.exists():
            raise ConfigError(f"mock table file not found: {table_path}")
        doc = json.loads(table_path.read_text(encoding="utf-8"))
        return MockBackend(mock_table_from_json(doc), name=table_path.stem)
    cls = ChatHTTPBackend if kind == "chat" else SurrogateHTTPBackend
    return cls(
        endpoint=spec["endpoint"],
        model=spec["model"],
        api_key_env=spec.get("api_key_env", ""),
        requests_per_minute=spec.get("requests_per_minute"),
        cache_dir=spec.get("cache_dir"),
        timeout_s=spec.get("timeout_s", 120.0),
    )


def build_backends(cfg: RunConfig, base_dir: Path | None = None) -> dict[str, Backend]:
    """Instantiate generator / surrogate / judge. The surrogate defaults to
    the generator when that backend can score."""
    out = {"generator": build_backend(cfg.backends["generator"], base_dir)}
    if "surrogate" in cfg.backends:
        out["surrogate"] = build_backend(cfg.backends["surrogate"], base_dir)
    elif out["generator"].can_score:
        out["surrogate"] = out["generator"]
    else:
        raise ConfigError(
            "backends.surrogate is required: the generator cannot score log-probabilities"
        )
    if "judge" in cfg.backends:
        out["judge"] = build_backend(cfg.backends["judge"], base_dir)
    return out


def _build_graph(pipeline: dict) -> SystemGraph:
    sites = []
    for i, raw_site in enumerate(pipeline.get("sites", ())):
        if not isinstance(raw_site, dict):
            raise ConfigError(f"config key pipeline.sites[{i}]: expected a mapping")
        unknown = set(raw_site) - {"name", "final", "template"}
        if unknown:
            raise ConfigError(
                f"unknown config key: pipeline.sites[{i}].{sorted(unknown)[0]}"
            )
        kwargs = {"name": raw_site.get("name", "")}
        if "final" in raw_site:
            kwargs["final"] = bool(raw_site["final"])
        if "template" in raw_site:
            try:
                kwargs["template"] = tuple(
                    (str(role), str(tpl)) for role, tpl in raw_site["template"]
                )
            except (TypeError, ValueError) as exc:
                raise ConfigError(
                    f"config key pipeline.sites[{i}].template: expected [role, text] pairs"
                ) from exc
        try:
            sites.append(CallSite(**kwargs))
        except ValueError as exc:
            raise ConfigError(f"config key pipeline.sites[{i}]: {exc}") from exc
    if not sites:
        sites = [CallSite(name="main", final=True)]
    edges = tuple((str(a), str(b)) for a, b in pipeline.get("edges", ()))
    return SystemGraph(
        sites=tuple(sites),
        edges=edges,
        suffix=pipeline.get("suffix", ANSWER_FORMAT_SUFFIX),
        marker=pipeline.get("marker", ANSWER_MARKER),
    )


def build_graph(cfg: RunConfig) -> SystemGraph:
    return _build_graph(cfg.pipeline)


def build_prior(cfg: RunConfig, surrogate: Backend) -> PriorSpec:
    constraints = tuple(
        ConstraintText(name, text) for name, text in cfg.prior["constraints"].items()
    )
    return PriorSpec(constraints=constraints, backend=surrogate, max_tokens=cfg.prior["max_tokens"])


def build_proposer(cfg: RunConfig, prior_spec: PriorSpec, surrogate: Backend):
    objective = ObjectiveText(cfg.proposal["objective"]) if cfg.proposal["objective"] else None
    return CritiqueReviseProposer(
        backend=surrogate,
        constraints=prior_spec.constraints,
        objective=objective,
        steps=cfg.proposal["steps"],
        max_tokens=cfg.proposal["max_tokens"],
    )


def load_run_dataset(cfg: RunConfig, base_dir: Path | None = None):
    ds = cfg.dataset
    path = Path(ds["path"])
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    id_list = ds.get("id_list")
    if id_list is not None and base_dir is not None and not Path(id_list).is_absolute():
        id_list = str(base_dir / id_list)
    return load_dataset(path, ds["format"], id_list=id_list, limit=ds.get("limit"))


def build_strategy(
    kind: str,
    cfg: RunConfig,
    graph: SystemGraph,
    backends: dict[str, Backend],
    prior_spec: PriorSpec,
    proposer,
    store: ChainStore | None = None,
):
    ev = cfg.evaluation
    common = dict(
        graph=graph,
        generator=backends["generator"],
        seed=cfg.seed,
        answer_temperature=ev["answer_temperature"],
        max_answer_tokens=ev["max_answer_tokens"],
    )
    theta0 = cfg.init_prompt
    if isinstance(theta0, dict):
        theta0 = ParamSet.from_dict(theta0)
    if kind == "mhlp":
        return PosteriorPromptSampler(
            prior_spec=prior_spec,
            proposer=proposer,
            scorer=backends["surrogate"],
            theta0=theta0,
            steps=cfg.chain.steps,
            beta=cfg.chain.beta,
            batch_size=cfg.chain.batch_size,
            burn_in=cfg.chain.burn_in,
            thin=cfg.chain.thin,
            num_samples=cfg.chain.num_samples,
            g_cache=cfg.chain.g_cache,
            store=store,
            **common,
        )
    if kind == "cot":
        return FixedPromptStrategy(theta=theta0, **common)
    if kind == "textgrad":
        steps = ev["textgrad_steps"]
        return TextGradStrategy(
            proposer=proposer,
            theta=theta0,
            steps=cfg.chain.steps if steps is None else steps,
            batch_size=cfg.chain.batch_size,
            **common,
        )
    if kind == "paraphrase":
        return ParaphraseStrategy(
            paraphraser=backends.get("judge", backends["generator"]), theta=theta0, **common
        )
    if kind == "system-message":
        return SystemMessageStrategy(theta=theta0, **common)
    raise ConfigError(f"unknown strategy kind {kind!r}; one of {STRATEGY_KINDS}")
