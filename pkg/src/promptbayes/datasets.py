"""JSON-lines dataset loaders.

Three record shapes are supported:

* aime: {question, answer} with an integer-valued answer
* simpleqa: {question, answer} with a short free-form answer
* qasper: {question, context, answer, answerable} where unanswerable
  records may carry an abstain_kind tag

Records may carry an explicit id; otherwise ids are generated as
<format>-<line index>. Fixed evaluation subsets are expressed as id-list
files (one id per line) and applied in list order.
"""

from __future__ import annotations

import json
from pathlib import Path

from .core import Dataset, Example
from .errors import ConfigError

FORMATS = ("aime", "simpleqa", "qasper")


def _require(record: dict, field: str, path, lineno: int):
    if field not in record:
        raise ConfigError(f"{path}:{lineno}: record lacks required field {field!r}")
    return record[field]


def _parse_aime(record, path, lineno):
    answer = _require(record, "answer", path, lineno)
    try:
        target = str(int(answer))
    except (TypeError, ValueError):
        raise ConfigError(f"{path}:{lineno}: answer {answer!r} is not an integer")
    return dict(input=str(_require(record, "question", path, lineno)), target=target)


def _parse_simpleqa(record, path, lineno):
    return dict(
        input=str(_require(record, "question", path, lineno)),
        target=str(_require(record, "answer", path, lineno)),
    )


def _parse_qasper(record, path, lineno):
    answerable = bool(_require(record, "answerable", path, lineno))
    return dict(
        input=str(_require(record, "question", path, lineno)),
        target=str(record.get("answer", "")),
        context=str(_require(record, "context", path, lineno)),
        answerable=answerable,
        abstain_kind=str(record.get("abstain_kind", "")),
    )


_PARSERS = {"aime": _parse_aime, "simpleqa": _parse_simpleqa, "qasper": _parse_qasper}


def load_dataset(
    path,
    format: str,
    id_list: str | None = None,
    limit: int | None = None,
) -> Dataset:
    if format not in FORMATS:
        raise ConfigError(f"unknown dataset format {format!r}; one of {FORMATS}")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    parse = _PARSERS[format]
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise ConfigError(f"{path}:{lineno}: record must be a JSON object")
            fields = parse(record, path, lineno)
            fields["id"] = str(record.get("id", f"{format}-{lineno}"))
            examples.append(Example(**fields))
    if not examples:
        raise ConfigError(f"dataset file is empty: {path}")
    ids = [e.id for e in examples]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise ConfigError(f"{path}: duplicate example id {dup!r}")
    if id_list is not None:
        examples = subset_by_ids(examples, id_list)
    if limit is not None:
        if limit < 1:
            raise ConfigError("limit must be >= 1")
        examples = examples[:limit]
    return Dataset.of(examples)


def subset_by_ids(examples, id_list_path) -> list[Example]:
    """Select examples by an id-list file, in file order."""
    id_path = Path(id_list_path)
    if not id_path.exists():
        raise ConfigError(f"id list file not found: {id_path}")
    wanted = [line.strip() for line in id_path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not wanted:
        raise ConfigError(f"id list file is empty: {id_path}")
    by_id = {e.id: e for e in examples}
    missing = [i for i in wanted if i not in by_id]
    if missing:
        raise ConfigError(f"id list references unknown ids: {missing[:5]}")
    return [by_id[i] for i in wanted]
