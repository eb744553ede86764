"""Command line interface.

Four subcommands share one config file and one run directory:

* sample: run (or resume) the prompt chain; persist steps and the thinned
  posterior prompt samples.
* predict: posterior-predictive answers per input, resumable per input.
* evaluate: accuracy / ECE / SECE / abstention AUC per strategy, averaged
  over independent predict runs with standard errors.
* conformal: random-split coverage study over labeled claim records.

Every reported number is recomputable from per-input records persisted in
the run directory, and re-running a subcommand with the same config, seed,
and mock backends writes byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    RunConfig,
    build_backends,
    build_graph,
    build_prior,
    build_proposer,
    build_strategy,
    load_config,
    load_run_dataset,
)
from .conformal import claims_from_jsonl, coverage_eval
from .core import RngStream
from .errors import (
    ConfigError,
    InfeasibleError,
    PromptBayesError,
    RetriableError,
    UndefinedMetricError,
)
from .prompts import PROMPTS_VERSION
from .sampler import ChainStore
from .uq import cluster_answers, ece, make_calibration_record, reliability_bins, roc_auc

COMMANDS = ("sample", "predict", "evaluate", "conformal")


# ---------------------------------------------------------------------------
# Deterministic artifact writers. Timestamps live only in manifests, so
# every other file is byte-stable across reruns.


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _jsonl_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n"


class Runner:
    """Lazily wires config into live objects; shared by all subcommands."""

    def __init__(self, cfg: RunConfig, run_dir: Path, base_dir: Path):
        self.cfg = cfg
        self.run_dir = run_dir
        self.base_dir = base_dir
        self._cache: dict[str, object] = {}

    def _get(self, key: str, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @property
    def dataset(self):
        return self._get("dataset", lambda: load_run_dataset(self.cfg, self.base_dir))

    @property
    def graph(self):
        return self._get("graph", lambda: build_graph(self.cfg))

    @property
    def backends(self):
        return self._get("backends", lambda: build_backends(self.cfg, self.base_dir))

    @property
    def prior_spec(self):
        return self._get("prior", lambda: build_prior(self.cfg, self.backends["surrogate"]))

    @property
    def proposer(self):
        return self._get(
            "proposer", lambda: build_proposer(self.cfg, self.prior_spec, self.backends["surrogate"])
        )

    def strategy(self, kind: str):
        def build():
            store = ChainStore(str(self.run_dir / "chain")) if kind == "mhlp" else None
            est = build_strategy(
                kind, self.cfg, self.graph, self.backends, self.prior_spec, self.proposer,
                store=store,
            )
            if kind in ("mhlp", "textgrad"):
                est.fit(self.dataset)
            else:
                est.fit()
            return est

        return self._get(f"strategy:{kind}", build)

    def write_manifest(self, command: str, artifacts: list[str]) -> None:
        """One immutable manifest per subcommand, named after it."""
        path = self.run_dir / f"{command}_manifest.json"
        manifest = {
            "command": command,
            "config": self.cfg.raw,
            "seed": self.cfg.seed,
            "prompts_version": PROMPTS_VERSION,
            "code_version": __version__,
            "backends": {k: b.identity for k, b in self.backends.items()},
            "artifacts": sorted(artifacts),
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        if path.exists():
            existing = json.loads(path.read_text(encoding="utf-8"))
            core = {k: v for k, v in manifest.items() if k != "created_at"}
            old_core = {k: v for k, v in existing.items() if k != "created_at"}
            if core != old_core:
                raise ConfigError(
                    f"{path} exists with a different configuration; "
                    "refusing to overwrite an immutable manifest"
                )
            return
        _write_json(path, manifest)


# ---------------------------------------------------------------------------
# sample


def cmd_sample(runner: Runner, resume: bool) -> int:
    est = runner.strategy("mhlp")
    samples = est.samples_
    doc = {
        "theta0": est.theta0_.to_dict(),
        "steps": len(est.chain_),
        "acceptance_rate": est.acceptance_rate_,
        "indices": list(samples.indices),
        "samples": [theta.to_dict() for theta in samples.thetas],
    }
    _write_json(runner.run_dir / "samples.json", doc)
    runner.write_manifest("sample", ["chain/manifest.json", "chain/chain.jsonl", "samples.json"])
    print(
        f"sample: {len(est.chain_)} steps, kept {len(samples)} prompt samples "
        f"(acceptance rate {est.acceptance_rate_:.3f}) in {runner.run_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# predict


def cmd_predict(runner: Runner, resume: bool) -> int:
    est = runner.strategy("mhlp")
    m = runner.cfg.evaluation["m"]
    out_path = runner.run_dir / "predict" / "answers.jsonl"
    done: set[str] = set()
    if out_path.exists():
        if resume:
            for line in out_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    done.add(json.loads(line)["input_id"])
        else:
            out_path.unlink()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    written = 0
    with out_path.open("a", encoding="utf-8") as fh:
        for x in runner.dataset:
            if x.id in done:
                continue
            # rng defaults to a stream keyed by the input id, so output is
            # identical whether an input is answered now or after a resume
            aset = est.sample_answers(x, m=m)
            ca = cluster_answers(aset)
            fh.write(
                _jsonl_line(
                    {
                        "input_id": x.id,
                        "answers": list(aset.texts),
                        "theta_indices": [a.theta_index for a in aset.answers],
                        "modal_answer": ca.modal_label,
                        "confidence": max(ca.frequencies),
                        "extraction_failures": aset.extraction_failures,
                    }
                )
            )
            fh.flush()
            written += 1
    runner.write_manifest(
        "predict", ["chain/manifest.json", "chain/chain.jsonl", "predict/answers.jsonl"]
    )
    print(
        f"predict: {written} inputs answered ({len(done)} already present) "
        f"with m={m} in {runner.run_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _mean_se(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=float)
    se = float(arr.std(ddof=1) / math.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "se": se}


def _evaluate_strategy(runner: Runner, kind: str) -> dict:
    cfg = runner.cfg
    ev = cfg.evaluation
    est = runner.strategy(kind)
    judge = runner.backends.get("judge")
    semantic_modes = (ev["cluster_mode"], ev["judge_mode"])
    rows: list[list] = []
    per_run: dict[str, list[float | None]] = {"accuracy": [], "ece": [], "sece": [], "auc": []}
    pooled_exact = []
    pooled_semantic = []
    for r in range(1, ev["runs"] + 1):
        exact_records = []
        semantic_records = []
        for x in runner.dataset:
            rng = RngStream(cfg.seed, ("evaluate", kind, r, x.id))
            aset = est.sample_answers(x, m=ev["m"], rng=rng.child("answers"))
            ca = cluster_answers(aset)
            rec = make_calibration_record(aset, ca, x)
            if semantic_modes == ("exact", "exact"):
                sem = rec
            else:
                sca = cluster_answers(
                    aset, mode=ev["cluster_mode"], judge=judge,
                    question=x.input, rng=rng.child("cluster"),
                )
                sem = make_calibration_record(
                    aset, sca, x, mode=ev["judge_mode"], judge=judge, rng=rng.child("judge")
                )
            exact_records.append(rec)
            semantic_records.append(sem)
            rows.append(
                [
                    r,
                    x.id,
                    int(x.answerable),
                    f"{rec.confidence:.10g}",
                    int(rec.correct),
                    f"{sem.confidence:.10g}",
                    int(sem.correct),
                    ca.modal_label,
                ]
            )
        pooled_exact.extend(exact_records)
        pooled_semantic.extend(semantic_records)
        per_run["accuracy"].append(
            sum(1.0 for s in semantic_records if s.correct) / len(semantic_records)
        )
        per_run["ece"].append(ece(exact_records, ev["n_bins"]))
        per_run["sece"].append(ece(semantic_records, ev["n_bins"]))
        try:
            auc = roc_auc(
                [s.confidence for s in semantic_records],
                [s.answerable for s in semantic_records],
            )
        except UndefinedMetricError:
            auc = None
        per_run["auc"].append(auc)
    _write_csv(
        runner.run_dir / "evaluate" / f"records-{kind}.csv",
        [
            "run", "input_id", "answerable",
            "confidence_exact", "correct_exact",
            "confidence_semantic", "correct_semantic", "modal_answer",
        ],
        rows,
    )
    _write_csv(
        runner.run_dir / "evaluate" / f"reliability-{kind}.csv",
        ["bin", "upper", "count", "confidence", "accuracy"],
        [
            [
                b["bin"],
                f"{b['upper']:.10g}",
                b["count"],
                "" if b["confidence"] is None else f"{b['confidence']:.10g}",
                "" if b["accuracy"] is None else f"{b['accuracy']:.10g}",
            ]
            for b in reliability_bins(pooled_semantic, ev["n_bins"])
        ],
    )
    summary = {
        name: (None if any(v is None for v in vals) else _mean_se(vals))
        for name, vals in per_run.items()
    }
    summary["runs"] = ev["runs"]
    summary["m"] = ev["m"]
    summary["inputs"] = runner.dataset.n
    return summary


def cmd_evaluate(runner: Runner, resume: bool) -> int:
    strategies = runner.cfg.evaluation["strategies"]
    summary = {kind: _evaluate_strategy(runner, kind) for kind in strategies}
    _write_json(runner.run_dir / "evaluate" / "summary.json", summary)
    artifacts = ["evaluate/summary.json"]
    for kind in strategies:
        artifacts += [f"evaluate/records-{kind}.csv", f"evaluate/reliability-{kind}.csv"]
    if "mhlp" in strategies:
        artifacts += ["chain/manifest.json", "chain/chain.jsonl"]
    runner.write_manifest("evaluate", artifacts)
    for kind in strategies:
        s = summary[kind]
        parts = []
        for name in ("accuracy", "ece", "sece", "auc"):
            if s[name] is None:
                parts.append(f"{name}=n/a")
            else:
                parts.append(f"{name}={s[name]['mean']:.4f}+/-{s[name]['se']:.4f}")
        print(f"evaluate[{kind}]: " + " ".join(parts))
    return 0


# ---------------------------------------------------------------------------
# conformal


def cmd_conformal(runner: Runner, resume: bool) -> int:
    cfg = runner.cfg
    claims_path = cfg.conformal.get("claims")
    if not claims_path:
        raise ConfigError(
            "config key conformal.claims: the conformal subcommand needs a "
            "labeled claim-record JSONL file (see claims_to_jsonl)"
        )
    path = Path(claims_path)
    if not path.is_absolute():
        path = runner.base_dir / path
    if not path.exists():
        raise ConfigError(f"claims file not found: {path}")
    groups = claims_from_jsonl(path.read_text(encoding="utf-8"))
    unlabeled = sum(1 for g in groups for c in g if c.factual is None)
    if unlabeled:
        raise ConfigError(
            f"claims file {path} has {unlabeled} unlabeled claims; coverage "
            "evaluation needs factuality labels on every claim"
        )
    rows = coverage_eval(
        groups,
        cfg.conformal["alphas"],
        cfg.conformal["n_splits"],
        RngStream(cfg.seed, ("conformal",)),
        cal_size=cfg.conformal.get("cal_size"),
    )
    _write_csv(
        runner.run_dir / "conformal" / "coverage.csv",
        [
            "alpha", "empirical_factuality", "factuality_std",
            "removal_rate", "removal_std", "n_splits",
        ],
        [
            [
                f"{r.alpha:.10g}",
                f"{r.empirical_factuality:.10g}",
                f"{r.factuality_std:.10g}",
                f"{r.removal_rate:.10g}",
                f"{r.removal_std:.10g}",
                r.n_splits,
            ]
            for r in rows
        ],
    )
    export_report(runner.run_dir)
    runner.write_manifest(
        "conformal",
        [
            "conformal/coverage.csv",
            "conformal/alpha_vs_factuality.csv",
            "conformal/factuality_vs_removal.csv",
        ],
    )
    for r in rows:
        print(
            f"conformal[alpha={r.alpha:g}]: factuality "
            f"{r.empirical_factuality:.4f}+/-{r.factuality_std:.4f} "
            f"removal {r.removal_rate:.4f}+/-{r.removal_std:.4f}"
        )
    return 0


# ---------------------------------------------------------------------------
# report emission


def export_report(run_dir) -> list[str]:
    """Emit plot-data files from a run directory's persisted records.

    Conformal runs yield (target factuality, empirical factuality) and
    (empirical factuality, removal rate) series; evaluate runs already
    persist reliability bin data per strategy. Returns the files written.
    """
    run_dir = Path(run_dir)
    written: list[str] = []
    coverage = run_dir / "conformal" / "coverage.csv"
    if coverage.exists():
        with coverage.open(encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
        _write_csv(
            run_dir / "conformal" / "alpha_vs_factuality.csv",
            ["alpha", "target_factuality", "empirical_factuality", "factuality_std"],
            [
                [
                    r["alpha"],
                    f"{1.0 - float(r['alpha']):.10g}",
                    r["empirical_factuality"],
                    r["factuality_std"],
                ]
                for r in rows
            ],
        )
        _write_csv(
            run_dir / "conformal" / "factuality_vs_removal.csv",
            ["empirical_factuality", "removal_rate", "removal_std"],
            [[r["empirical_factuality"], r["removal_rate"], r["removal_std"]] for r in rows],
        )
        written += [
            "conformal/alpha_vs_factuality.csv",
            "conformal/factuality_vs_removal.csv",
        ]
    reliability = sorted((run_dir / "evaluate").glob("reliability-*.csv")) if (
        run_dir / "evaluate"
    ).exists() else []
    written += [str(p.relative_to(run_dir)) for p in reliability]
    if not written:
        raise ConfigError(f"run directory {run_dir} has no report-ready artifacts")
    return written


# ---------------------------------------------------------------------------
# entry point


def _default_run_dir(command: str) -> Path:
    base = Path("runs")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = base / f"{command}-{stamp}"
    n = 1
    while candidate.exists():
        n += 1
        candidate = base / f"{command}-{stamp}-{n}"
    return candidate


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptbayes",
        description="Bayesian inference over LLM prompts: sample, predict, evaluate, conformal.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("sample", "run or resume the posterior prompt chain"),
        ("predict", "posterior-predictive answers for every dataset input"),
        ("evaluate", "per-strategy metrics averaged over independent runs"),
        ("conformal", "coverage study over labeled claim records"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--run-dir", default=None, help="artifact directory (default: timestamped)")
        p.add_argument("--resume", action="store_true", help="reuse partial outputs if present")
    return parser


_DISPATCH = {
    "sample": cmd_sample,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "conformal": cmd_conformal,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        base_dir = Path(args.config).resolve().parent
        run_dir = Path(args.run_dir or cfg.run_dir or _default_run_dir(args.command))
        run_dir.mkdir(parents=True, exist_ok=True)
        runner = Runner(cfg, run_dir, base_dir)
        return _DISPATCH[args.command](runner, args.resume)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleError as exc:
        print(f"infeasible conformal settings: {exc}", file=sys.stderr)
        return 4
    except RetriableError as exc:
        # covers suspended chains: the run directory named in the message
        # already holds every completed step, so the same command resumes it
        print(f"backend outage: {exc}", file=sys.stderr)
        return 3
    except PromptBayesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
