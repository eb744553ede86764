"""Dataset loaders, config validation, and the command line workflow."""

import json
from pathlib import Path

import pytest
import yaml

from conftest import build_e2e_world
from promptbayes.cli import export_report, main
from promptbayes.conformal import ClaimRecord, claims_to_jsonl
from promptbayes.config import (
    build_backends,
    build_graph,
    build_strategy,
    load_config,
)
from promptbayes.datasets import load_dataset
from promptbayes.errors import ConfigError

# ---------------------------------------------------------------------------
# Dataset loaders.


def write_jsonl(path: Path, records) -> Path:
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    return path


class TestDatasets:
    def test_aime_coerces_integer_answers(self, tmp_path):
        p = write_jsonl(
            tmp_path / "d.jsonl",
            [
                {"question": "q1", "answer": 15},
                {"question": "q2", "answer": "042"},
            ],
        )
        ds = load_dataset(p, "aime")
        assert [e.target for e in ds] == ["15", "42"]
        assert [e.id for e in ds] == ["aime-1", "aime-2"]

    def test_aime_rejects_non_integer_answer(self, tmp_path):
        p = write_jsonl(tmp_path / "d.jsonl", [{"question": "q", "answer": "pi"}])
        with pytest.raises(ConfigError, match="not an integer"):
            load_dataset(p, "aime")

    def test_simpleqa_fields(self, tmp_path):
        p = write_jsonl(
            tmp_path / "d.jsonl", [{"id": "x1", "question": "who", "answer": "Ada"}]
        )
        ds = load_dataset(p, "simpleqa")
        assert ds[0].input == "who" and ds[0].target == "Ada" and ds[0].id == "x1"
        assert ds[0].answerable

    def test_qasper_fields(self, tmp_path):
        p = write_jsonl(
            tmp_path / "d.jsonl",
            [
                {"question": "q", "context": "c", "answer": "a", "answerable": True},
                {
                    "question": "q2",
                    "context": "wrong passage",
                    "answer": "",
                    "answerable": False,
                    "abstain_kind": "random_context",
                },
            ],
        )
        ds = load_dataset(p, "qasper")
        assert ds[0].context == "c" and ds[0].answerable
        assert not ds[1].answerable and ds[1].abstain_kind == "random_context"

    def test_missing_field_reports_line(self, tmp_path):
        p = write_jsonl(
            tmp_path / "d.jsonl",
            [{"question": "q", "answer": "a"}, {"question": "q2"}],
        )
        with pytest.raises(ConfigError, match=r":2: record lacks required field 'answer'"):
            load_dataset(p, "simpleqa")

    def test_invalid_json_reports_line(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text('{"question": "q", "answer": "a"}\nnot json\n', encoding="utf-8")
        with pytest.raises(ConfigError, match=":2: invalid JSON"):
            load_dataset(p, "simpleqa")

    def test_unknown_format_and_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown dataset format"):
            load_dataset(tmp_path / "d.jsonl", "csv")
        with pytest.raises(ConfigError, match="not found"):
            load_dataset(tmp_path / "d.jsonl", "aime")

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text("\n\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="empty"):
            load_dataset(p, "aime")

    def test_duplicate_ids_rejected(self, tmp_path):
        p = write_jsonl(
            tmp_path / "d.jsonl",
            [
                {"id": "a", "question": "q", "answer": "1"},
                {"id": "a", "question": "q2", "answer": "2"},
            ],
        )
        with pytest.raises(ConfigError, match="duplicate example id"):
            load_dataset(p, "simpleqa")

    def test_id_list_selects_in_file_order(self, tmp_path):
        p = write_jsonl(
            tmp_path / "d.jsonl",
            [{"id": f"x{i}", "question": f"q{i}", "answer": "a"} for i in range(5)],
        )
        ids = tmp_path / "ids.txt"
        ids.write_text("x3\nx0\n\nx4\n", encoding="utf-8")
        ds = load_dataset(p, "simpleqa", id_list=ids)
        assert [e.id for e in ds] == ["x3", "x0", "x4"]

    def test_id_list_unknown_id_rejected(self, tmp_path):
        p = write_jsonl(tmp_path / "d.jsonl", [{"id": "x", "question": "q", "answer": "a"}])
        ids = tmp_path / "ids.txt"
        ids.write_text("y\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="unknown ids.*'y'"):
            load_dataset(p, "simpleqa", id_list=ids)

    def test_limit(self, tmp_path):
        p = write_jsonl(
            tmp_path / "d.jsonl",
            [{"question": f"q{i}", "answer": "1"} for i in range(4)],
        )
        assert load_dataset(p, "aime", limit=2).n == 2
        with pytest.raises(ConfigError, match="limit"):
            load_dataset(p, "aime", limit=0)


# ---------------------------------------------------------------------------
# Config loading and validation.


def minimal_config(**overrides) -> dict:
    cfg = {
        "dataset": {"format": "simpleqa", "path": "data.jsonl"},
        "backends": {
            "generator": {
                "kind": "chat",
                "endpoint": "https://example.test/v1",
                "model": "m",
            },
            "surrogate": {
                "kind": "surrogate",
                "endpoint": "https://example.test/v1c",
                "model": "s",
            },
        },
        "prior": {"constraints": {"main": "Keep it short."}},
        "chain": {"steps": 20, "beta": 100, "burn_in": 2, "thin": 2},
    }
    cfg.update(overrides)
    return cfg


def write_config(tmp_path: Path, cfg: dict, name: str = "run.yaml") -> Path:
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return p


class TestLoadConfig:
    def test_defaults_applied(self, tmp_path):
        cfg = load_config(write_config(tmp_path, minimal_config()))
        assert cfg.seed == 0
        assert cfg.evaluation["m"] == 10 and cfg.evaluation["runs"] == 10
        assert cfg.evaluation["n_bins"] == 10
        assert cfg.conformal["alphas"] == [0.05, 0.1, 0.2, 0.3, 0.4]
        assert cfg.conformal["n_splits"] == 1000
        assert cfg.chain.num_samples == 10  # follows evaluation.m

    def test_unknown_top_level_key(self, tmp_path):
        p = write_config(tmp_path, minimal_config(extra_section=1))
        with pytest.raises(ConfigError, match="unknown config key: extra_section"):
            load_config(p)

    def test_unknown_nested_key_has_field_path(self, tmp_path):
        c = minimal_config()
        c["chain"]["stepz"] = 3
        with pytest.raises(ConfigError, match="unknown config key: chain.stepz"):
            load_config(write_config(tmp_path, c))

    def test_missing_required_key_has_field_path(self, tmp_path):
        c = minimal_config()
        del c["chain"]["steps"]
        with pytest.raises(ConfigError, match="missing required config key: chain.steps"):
            load_config(write_config(tmp_path, c))

    def test_type_errors_name_the_key(self, tmp_path):
        c = minimal_config()
        c["chain"]["steps"] = "sixty"
        with pytest.raises(ConfigError, match="chain.steps: expected int"):
            load_config(write_config(tmp_path, c))

    def test_bool_is_not_an_int(self, tmp_path):
        c = minimal_config()
        c["chain"]["steps"] = True
        with pytest.raises(ConfigError, match="chain.steps"):
            load_config(write_config(tmp_path, c))

    def test_schedule_invariant_enforced(self, tmp_path):
        # 10 samples need burn_in + 9 * thin = 20 steps; 19 cannot work
        c = minimal_config()
        c["chain"]["steps"] = 19
        with pytest.raises(ConfigError, match="cannot yield"):
            load_config(write_config(tmp_path, c))

    def test_m_must_match_kept_samples_for_mhlp(self, tmp_path):
        c = minimal_config()
        c["chain"]["num_samples"] = 5
        with pytest.raises(ConfigError, match="evaluation.m"):
            load_config(write_config(tmp_path, c))

    def test_unknown_strategy_rejected(self, tmp_path):
        c = minimal_config(evaluation={"strategies": ["zen"]})
        with pytest.raises(ConfigError, match="evaluation.strategies"):
            load_config(write_config(tmp_path, c))

    def test_llm_mode_requires_judge(self, tmp_path):
        c = minimal_config(evaluation={"cluster_mode": "llm"})
        with pytest.raises(ConfigError, match="needs backends.judge"):
            load_config(write_config(tmp_path, c))

    def test_alpha_range_checked(self, tmp_path):
        c = minimal_config(conformal={"alphas": [0.1, 1.5]})
        with pytest.raises(ConfigError, match=r"conformal.alphas\[1\]"):
            load_config(write_config(tmp_path, c))

    def test_backend_kind_requirements(self, tmp_path):
        c = minimal_config()
        c["backends"]["generator"] = {"kind": "mock"}
        with pytest.raises(ConfigError, match="backends.generator.table"):
            load_config(write_config(tmp_path, c))
        c["backends"]["generator"] = {"kind": "chat", "model": "m"}
        with pytest.raises(ConfigError, match="backends.generator.endpoint"):
            load_config(write_config(tmp_path, c))
        c["backends"]["generator"] = {"kind": "grpc", "endpoint": "e", "model": "m"}
        with pytest.raises(ConfigError, match="backends.generator.kind"):
            load_config(write_config(tmp_path, c))

    def test_missing_file_and_bad_yaml(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.yaml")
        p = tmp_path / "bad.yaml"
        p.write_text("chain: [unclosed", encoding="utf-8")
        with pytest.raises(ConfigError, match="invalid YAML"):
            load_config(p)

    def test_missing_api_key_env_fails_at_build_not_load(self, tmp_path, monkeypatch):
        monkeypatch.delenv("DEFINITELY_NOT_SET_KEY", raising=False)
        c = minimal_config()
        c["backends"]["generator"]["api_key_env"] = "DEFINITELY_NOT_SET_KEY"
        cfg = load_config(write_config(tmp_path, c))  # validation is offline
        with pytest.raises(ConfigError, match="DEFINITELY_NOT_SET_KEY"):
            build_backends(cfg, tmp_path)

    def test_surrogate_defaults_to_scoring_generator(self, tmp_path):
        w = build_e2e_world(n_questions=1)
        (tmp_path / "mock.json").write_text(json.dumps(w.table_json()), encoding="utf-8")
        c = minimal_config()
        c["backends"] = {"generator": {"kind": "mock", "table": "mock.json"}}
        cfg = load_config(write_config(tmp_path, c))
        backends = build_backends(cfg, tmp_path)
        assert backends["surrogate"] is backends["generator"]

    def test_generator_without_scoring_needs_surrogate(self, tmp_path):
        c = minimal_config()
        del c["backends"]["surrogate"]
        cfg = load_config(write_config(tmp_path, c))
        with pytest.raises(ConfigError, match="backends.surrogate is required"):
            build_backends(cfg, tmp_path)

    def test_pipeline_section_builds_graph(self, tmp_path):
        c = minimal_config(
            pipeline={
                "sites": [
                    {
                        "name": "main",
                        "final": True,
                        "template": [
                            ["system", "{{prompt}}"],
                            ["user", "Context:\n{{context}}\n\nQuestion: {{input}}"],
                        ],
                    }
                ]
            }
        )
        graph = build_graph(load_config(write_config(tmp_path, c)))
        assert graph.sites[0].template[1][1].startswith("Context:")

    def test_bad_pipeline_placeholder_fails_at_load(self, tmp_path):
        c = minimal_config(
            pipeline={"sites": [{"name": "main", "final": True,
                                 "template": [["user", "{{upstream:nope}}"]]}]}
        )
        with pytest.raises(ConfigError, match="unresolvable placeholder"):
            load_config(write_config(tmp_path, c))

    def test_init_prompt_mapping_validated(self, tmp_path):
        c = minimal_config(init_prompt={"main": ""})
        with pytest.raises(ConfigError, match="init_prompt.main"):
            load_config(write_config(tmp_path, c))


class TestShippedConfigs:
    CONFIGS = Path(__file__).resolve().parent.parent / "configs"

    def test_aime_values(self):
        cfg = load_config(self.CONFIGS / "aime.yaml")
        ch = cfg.chain
        assert (ch.steps, ch.beta, ch.burn_in, ch.thin) == (60, 10, 6, 6)
        assert cfg.evaluation["m"] == 10 and ch.num_samples == 10

    def test_simpleqa_values(self):
        ch = load_config(self.CONFIGS / "simpleqa.yaml").chain
        assert (ch.steps, ch.beta, ch.burn_in, ch.thin) == (60, 100, 6, 6)

    def test_qasper_values(self):
        ch = load_config(self.CONFIGS / "qasper.yaml").chain
        assert (ch.steps, ch.beta, ch.burn_in, ch.thin) == (20, 100, 2, 2)

    def test_factscore_values(self):
        cfg = load_config(self.CONFIGS / "factscore.yaml")
        ch = cfg.chain
        assert (ch.steps, ch.burn_in, ch.thin, ch.num_samples) == (20, 4, 4, 4)
        assert cfg.conformal["pool_size"] == 5
        assert cfg.conformal["cal_size"] == 50
        assert cfg.conformal["n_splits"] == 1000


# ---------------------------------------------------------------------------
# CLI workflow on the closed mock world.


N_QUESTIONS = 4
CHAIN_STEPS = 12


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    """A config directory whose mock backend covers every reachable call."""
    root = tmp_path_factory.mktemp("cliworld")
    world = build_e2e_world(n_questions=N_QUESTIONS)
    (root / "data.jsonl").write_text(world.dataset_jsonl(), encoding="utf-8")
    (root / "mock.json").write_text(json.dumps(world.table_json()), encoding="utf-8")
    config = {
        "seed": 5,
        "dataset": {"format": "simpleqa", "path": "data.jsonl"},
        "backends": {"generator": {"kind": "mock", "table": "mock.json"}},
        "prior": {"constraints": {"main": "Ask for step-by-step reasoning."}},
        "chain": {
            "steps": CHAIN_STEPS,
            "beta": 2.0,
            "burn_in": 2,
            "thin": 1,
            "num_samples": 10,
        },
        "init_prompt": "P0",
        "evaluation": {
            "m": 10,
            "runs": 3,
            "strategies": ["mhlp", "cot", "textgrad", "paraphrase", "system-message"],
        },
    }
    path = root / "run.yaml"
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return root, path, world


def artifact_bytes(run_dir: Path) -> dict[str, bytes]:
    """Every persisted file except manifests (which carry timestamps)."""
    return {
        str(p.relative_to(run_dir)): p.read_bytes()
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and not p.name.endswith("manifest.json")
    }


class TestSampleCommand:
    def test_sample_persists_chain_and_samples(self, cli_env, tmp_path, capsys):
        root, cfg_path, world = cli_env
        run_dir = tmp_path / "run"
        assert main(["sample", "--config", str(cfg_path), "--run-dir", str(run_dir)]) == 0
        chain_lines = (run_dir / "chain" / "chain.jsonl").read_text().splitlines()
        assert len(chain_lines) == CHAIN_STEPS
        doc = json.loads((run_dir / "samples.json").read_text())
        assert doc["indices"] == list(range(2, 12))
        assert len(doc["samples"]) == 10
        assert all(s["main"] in world.prompts for s in doc["samples"])
        assert doc["theta0"] == {"main": "P0"}
        manifest = json.loads((run_dir / "sample_manifest.json").read_text())
        assert "chain/chain.jsonl" in manifest["artifacts"]
        assert "kept 10 prompt samples" in capsys.readouterr().out

    def test_rerun_is_idempotent(self, cli_env, tmp_path):
        _, cfg_path, _ = cli_env
        run_dir = tmp_path / "run"
        main(["sample", "--config", str(cfg_path), "--run-dir", str(run_dir)])
        first = artifact_bytes(run_dir)
        assert main(["sample", "--config", str(cfg_path), "--run-dir", str(run_dir)]) == 0
        assert artifact_bytes(run_dir) == first

    def test_truncated_chain_resumes_to_identical_bytes(self, cli_env, tmp_path):
        _, cfg_path, _ = cli_env
        full = tmp_path / "full"
        main(["sample", "--config", str(cfg_path), "--run-dir", str(full)])
        crashed = tmp_path / "crashed"
        main(["sample", "--config", str(cfg_path), "--run-dir", str(crashed)])
        chain = crashed / "chain" / "chain.jsonl"
        lines = chain.read_text().splitlines()
        chain.write_text("\n".join(lines[:5]) + "\n", encoding="utf-8")
        assert main(["sample", "--config", str(cfg_path), "--run-dir", str(crashed)]) == 0
        assert (crashed / "chain" / "chain.jsonl").read_bytes() == (
            full / "chain" / "chain.jsonl"
        ).read_bytes()

    def test_changed_config_refuses_existing_run_dir(self, cli_env, tmp_path):
        root, cfg_path, _ = cli_env
        run_dir = tmp_path / "run"
        main(["sample", "--config", str(cfg_path), "--run-dir", str(run_dir)])
        changed = yaml.safe_load(cfg_path.read_text())
        changed["seed"] = 6
        other = root / "changed.yaml"
        other.write_text(yaml.safe_dump(changed), encoding="utf-8")
        assert main(["sample", "--config", str(other), "--run-dir", str(run_dir)]) == 2


class TestPredictCommand:
    def test_predict_writes_one_record_per_input(self, cli_env, tmp_path):
        _, cfg_path, world = cli_env
        run_dir = tmp_path / "run"
        assert main(["predict", "--config", str(cfg_path), "--run-dir", str(run_dir)]) == 0
        lines = (run_dir / "predict" / "answers.jsonl").read_text().splitlines()
        records = [json.loads(line) for line in lines]
        assert [r["input_id"] for r in records] == [e.id for e in world.dataset]
        for r in records:
            assert len(r["answers"]) == 10
            assert 0 < r["confidence"] <= 1
            assert r["modal_answer"] in r["answers"]

    def test_partial_predict_resumes_per_input(self, cli_env, tmp_path):
        _, cfg_path, _ = cli_env
        full = tmp_path / "full"
        main(["predict", "--config", str(cfg_path), "--run-dir", str(full)])
        out = full / "predict" / "answers.jsonl"
        complete = out.read_bytes()
        lines = out.read_text().splitlines()
        out.write_text("\n".join(lines[:2]) + "\n", encoding="utf-8")
        assert main(
            ["predict", "--config", str(cfg_path), "--run-dir", str(full), "--resume"]
        ) == 0
        assert out.read_bytes() == complete

    def test_rerun_without_resume_rewrites_identically(self, cli_env, tmp_path):
        _, cfg_path, _ = cli_env
        run_dir = tmp_path / "run"
        main(["predict", "--config", str(cfg_path), "--run-dir", str(run_dir)])
        first = artifact_bytes(run_dir)
        assert main(["predict", "--config", str(cfg_path), "--run-dir", str(run_dir)]) == 0
        assert artifact_bytes(run_dir) == first


@pytest.fixture(scope="module")
def evaluated(cli_env, tmp_path_factory):
    _, cfg_path, _ = cli_env
    run_dir = tmp_path_factory.mktemp("eval")
    code = main(["evaluate", "--config", str(cfg_path), "--run-dir", str(run_dir)])
    return code, run_dir


class TestEvaluateCommand:
    def test_summary_has_all_strategies_and_metrics(self, evaluated):
        code, run_dir = evaluated
        assert code == 0
        summary = json.loads((run_dir / "evaluate" / "summary.json").read_text())
        kinds = {"mhlp", "cot", "textgrad", "paraphrase", "system-message"}
        assert set(summary) == kinds
        for kind in kinds:
            s = summary[kind]
            assert s["runs"] == 3 and s["m"] == 10 and s["inputs"] == N_QUESTIONS
            for metric in ("accuracy", "ece", "sece"):
                assert 0.0 <= s[metric]["mean"] <= 1.0
                assert s[metric]["se"] >= 0.0
            assert s["auc"] is None  # every mock question is answerable

    def test_records_trace_every_number(self, evaluated):
        _, run_dir = evaluated
        import csv

        with (run_dir / "evaluate" / "records-mhlp.csv").open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3 * N_QUESTIONS
        summary = json.loads((run_dir / "evaluate" / "summary.json").read_text())
        run1 = [r for r in rows if r["run"] == "1"]
        acc_run1 = sum(int(r["correct_semantic"]) for r in run1) / len(run1)
        per_run = []
        for run in ("1", "2", "3"):
            rs = [r for r in rows if r["run"] == run]
            per_run.append(sum(int(r["correct_semantic"]) for r in rs) / len(rs))
        assert summary["mhlp"]["accuracy"]["mean"] == pytest.approx(
            sum(per_run) / 3, abs=1e-12
        )
        assert acc_run1 == pytest.approx(per_run[0])

    def test_reliability_bins_emitted(self, evaluated):
        _, run_dir = evaluated
        text = (run_dir / "evaluate" / "reliability-cot.csv").read_text()
        lines = text.strip().splitlines()
        assert lines[0] == "bin,upper,count,confidence,accuracy"
        assert len(lines) == 11  # header + 10 bins
        counts = [int(line.split(",")[2]) for line in lines[1:]]
        assert sum(counts) == 3 * N_QUESTIONS

    def test_rerun_in_fresh_dir_is_byte_identical(self, cli_env, evaluated, tmp_path):
        _, cfg_path, _ = cli_env
        _, first_dir = evaluated
        second = tmp_path / "again"
        assert main(["evaluate", "--config", str(cfg_path), "--run-dir", str(second)]) == 0
        assert artifact_bytes(second) == artifact_bytes(first_dir)

    def test_stdout_summarizes_each_strategy(self, cli_env, tmp_path, capsys):
        _, cfg_path, _ = cli_env
        run_dir = tmp_path / "run"
        main(["evaluate", "--config", str(cfg_path), "--run-dir", str(run_dir)])
        out = capsys.readouterr().out
        for kind in ("mhlp", "cot", "textgrad", "paraphrase", "system-message"):
            assert f"evaluate[{kind}]:" in out
        assert "auc=n/a" in out


# ---------------------------------------------------------------------------
# Conformal subcommand and exit codes.


def synthetic_claims(n_answers=60, seed=0) -> str:
    import random

    rnd = random.Random(seed)
    groups = []
    for i in range(n_answers):
        claims = [
            ClaimRecord(f"a{i}", "claim 0", rnd.uniform(0, 10), factual=False)
        ]
        for j in range(1, 4):
            claims.append(
                ClaimRecord(f"a{i}", f"claim {j}", rnd.uniform(0, 10), factual=rnd.random() < 0.5)
            )
        groups.append(claims)
    return claims_to_jsonl(groups)


def conformal_config(tmp_path: Path, **conformal) -> Path:
    (tmp_path / "claims.jsonl").write_text(synthetic_claims(), encoding="utf-8")
    cfg = minimal_config(
        conformal={"claims": "claims.jsonl", "n_splits": 40, **conformal}
    )
    return write_config(tmp_path, cfg)


class TestConformalCommand:
    def test_one_csv_row_per_alpha(self, tmp_path, capsys):
        cfg_path = conformal_config(tmp_path, alphas=[0.1, 0.2, 0.3])
        run_dir = tmp_path / "run"
        assert main(["conformal", "--config", str(cfg_path), "--run-dir", str(run_dir)]) == 0
        lines = (run_dir / "conformal" / "coverage.csv").read_text().strip().splitlines()
        assert len(lines) == 4
        assert lines[0].startswith("alpha,empirical_factuality")
        assert capsys.readouterr().out.count("conformal[alpha=") == 3

    def test_report_series_match_figure_axes(self, tmp_path):
        cfg_path = conformal_config(tmp_path, alphas=[0.1, 0.2])
        run_dir = tmp_path / "run"
        main(["conformal", "--config", str(cfg_path), "--run-dir", str(run_dir)])
        series_a = (run_dir / "conformal" / "alpha_vs_factuality.csv").read_text()
        assert series_a.splitlines()[0] == (
            "alpha,target_factuality,empirical_factuality,factuality_std"
        )
        assert series_a.splitlines()[1].split(",")[1] == "0.9"
        series_b = (run_dir / "conformal" / "factuality_vs_removal.csv").read_text()
        assert series_b.splitlines()[0] == "empirical_factuality,removal_rate,removal_std"

    def test_missing_claims_is_config_error(self, tmp_path):
        cfg_path = write_config(tmp_path, minimal_config())
        assert main(["conformal", "--config", str(cfg_path), "--run-dir", str(tmp_path / "r")]) == 2

    def test_unlabeled_claims_rejected(self, tmp_path):
        claims = claims_to_jsonl([[ClaimRecord("a", "c", 1.0, factual=None)]])
        (tmp_path / "claims.jsonl").write_text(claims, encoding="utf-8")
        cfg_path = write_config(
            tmp_path, minimal_config(conformal={"claims": "claims.jsonl"})
        )
        assert main(["conformal", "--config", str(cfg_path), "--run-dir", str(tmp_path / "r")]) == 2

    def test_infeasible_alpha_exits_4(self, tmp_path):
        # 50 calibration answers cannot support alpha=0.01: rank 51 > 50
        cfg_path = conformal_config(tmp_path, alphas=[0.01], cal_size=50)
        assert main(["conformal", "--config", str(cfg_path), "--run-dir", str(tmp_path / "r")]) == 4

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg_path = conformal_config(tmp_path, alphas=[0.1])
        a, b = tmp_path / "a", tmp_path / "b"
        main(["conformal", "--config", str(cfg_path), "--run-dir", str(a)])
        main(["conformal", "--config", str(cfg_path), "--run-dir", str(b)])
        assert artifact_bytes(a) == artifact_bytes(b)


class TestExitCodes:
    def test_config_error_exits_2(self, tmp_path):
        bad = write_config(tmp_path, minimal_config(extra=1))
        assert main(["sample", "--config", str(bad), "--run-dir", str(tmp_path / "r")]) == 2

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["sample", "--config", str(tmp_path / "no.yaml")]) == 2

    def test_backend_outage_exits_3(self, cli_env, tmp_path):
        root, _, _ = cli_env
        cfg = minimal_config()
        cfg["dataset"]["path"] = str(root / "data.jsonl")
        # nothing listens on this port, so every attempt is refused
        for spec in cfg["backends"].values():
            spec["endpoint"] = "http://127.0.0.1:9/v1"
        cfg["backends"]["generator"]["kind"] = "chat"
        cfg["prior"] = {"constraints": {"main": "Ask for step-by-step reasoning."}}
        cfg["init_prompt"] = "P0"
        cfg["chain"] = {"steps": 2, "beta": 2.0, "num_samples": 1}
        cfg["evaluation"] = {"m": 1, "runs": 1, "strategies": ["mhlp"]}
        cfg_path = write_config(tmp_path, cfg)
        assert main(["sample", "--config", str(cfg_path), "--run-dir", str(tmp_path / "r")]) == 3


class TestExportReport:
    def test_empty_run_dir_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="no report-ready artifacts"):
            export_report(tmp_path)

    def test_lists_written_files(self, tmp_path):
        cfg_path = conformal_config(tmp_path, alphas=[0.1])
        run_dir = tmp_path / "run"
        main(["conformal", "--config", str(cfg_path), "--run-dir", str(run_dir)])
        files = export_report(run_dir)
        assert "conformal/alpha_vs_factuality.csv" in files
        assert "conformal/factuality_vs_removal.csv" in files


class TestStrategyBuilder:
    def test_all_kinds_build_and_fit(self, cli_env):
        root, cfg_path, world = cli_env
        cfg = load_config(cfg_path)
        backends = build_backends(cfg, root)
        graph = build_graph(cfg)
        from promptbayes.config import build_prior, build_proposer

        prior_spec = build_prior(cfg, backends["surrogate"])
        proposer = build_proposer(cfg, prior_spec, backends["surrogate"])
        for kind in ("cot", "paraphrase", "system-message"):
            est = build_strategy(kind, cfg, graph, backends, prior_spec, proposer)
            est.fit()
            aset = est.sample_answers(world.dataset[0], m=3)
            assert aset.m == 3

    def test_textgrad_steps_default_to_chain_steps(self, cli_env):
        root, cfg_path, _ = cli_env
        cfg = load_config(cfg_path)
        backends = build_backends(cfg, root)
        graph = build_graph(cfg)
        from promptbayes.config import build_prior, build_proposer

        prior_spec = build_prior(cfg, backends["surrogate"])
        proposer = build_proposer(cfg, prior_spec, backends["surrogate"])
        est = build_strategy("textgrad", cfg, graph, backends, prior_spec, proposer)
        assert est.steps == CHAIN_STEPS
