"""Shared fixtures-in-code for the test suite: tiny datasets, test backends, config files."""

from __future__ import annotations

import json
import threading
from collections import Counter
from pathlib import Path

import yaml

from shotscan import Dataset, Exemplar, MockBackend, MockModelSpec, default_template
from shotscan.errors import BackendError

CLASSES = ("no", "yes")


def make_dataset(
    n_train: int = 30,
    n_eval: int = 10,
    classes: tuple[str, ...] = CLASSES,
    train_labels=None,
    eval_labels=None,
    name: str = "demo",
) -> Dataset:
    train = tuple(
        Exemplar(
            id=f"t{i}",
            fields={"sentence": f"sample text {i}"},
            label=train_labels[i] if train_labels else i % len(classes),
        )
        for i in range(n_train)
    )
    eval_split = tuple(
        Exemplar(
            id=f"q{i}",
            fields={"sentence": f"query text {i}"},
            label=eval_labels[i] if eval_labels else i % len(classes),
        )
        for i in range(n_eval)
    )
    return Dataset(name=name, classes=classes, train=train, eval=eval_split)


def make_template():
    return default_template(["sentence"])


def make_mock(dataset: Dataset, mode: str = "hash", label: int = 0) -> MockBackend:
    return MockBackend(
        MockModelSpec(mode=mode, label=label),
        labels_by_id={e.id: e.label for e in dataset.train},
        num_classes=len(dataset.classes),
    )


class CountingBackend:
    """Wraps a backend and tallies scored prompts by prefix length."""

    def __init__(self, inner):
        self.inner = inner
        self.digest = inner.digest
        self.preferred_batch = inner.preferred_batch
        self.by_prefix_len = Counter()
        self._lock = threading.Lock()

    @property
    def total_calls(self) -> int:
        return sum(self.by_prefix_len.values())

    def score_batch(self, prompts, classes):
        with self._lock:
            for prompt in prompts:
                self.by_prefix_len[len(prompt.prefix_ids)] += 1
        return self.inner.score_batch(prompts, classes)


class FlakyBackend:
    """Delegates to a mock until `fail_after` prompts have been scored, then errors."""

    def __init__(self, inner, fail_after: int):
        self.inner = inner
        self.fail_after = fail_after
        self.digest = inner.digest
        self.preferred_batch = inner.preferred_batch
        self.scored = 0
        self._lock = threading.Lock()

    def score_batch(self, prompts, classes):
        with self._lock:
            self.scored += len(prompts)
            if self.scored > self.fail_after:
                raise BackendError("synthetic backend failure")
        return self.inner.score_batch(prompts, classes)


class LastExemplarBackend:
    """Deterministic test backend whose correctness is driven by the most
    recently added exemplar: good ids are always right, bad ids always wrong,
    anything else (including the empty prefix) is right for even-indexed
    queries only. Per-exemplar averages therefore land exactly on
    {1.0, 0.0, 0.5}."""

    def __init__(self, good_ids, bad_ids, gold_by_query, num_classes: int):
        self.good = frozenset(good_ids)
        self.bad = frozenset(bad_ids)
        self.gold = dict(gold_by_query)
        self.num_classes = num_classes
        self.digest = "test:last-exemplar"
        self.preferred_batch = 1024

    def _predict(self, prefix_ids, query_id) -> int:
        gold = self.gold[query_id]
        if prefix_ids:
            last = prefix_ids[-1]
            if last in self.good:
                return gold
            if last in self.bad:
                return (gold + 1) % self.num_classes
        query_index = int(query_id.lstrip("q"))
        return gold if query_index % 2 == 0 else (gold + 1) % self.num_classes

    def score_batch(self, prompts, classes):
        rows = []
        for prompt in prompts:
            predicted = self._predict(prompt.prefix_ids, prompt.query_id)
            rows.append(tuple(1.0 if c == predicted else 0.0 for c in range(len(classes))))
        return rows


def write_corpus_files(
    directory: Path, n_train: int = 30, n_eval: int = 20, classes=CLASSES
) -> tuple[Path, Path]:
    train_path = directory / "train.jsonl"
    eval_path = directory / "eval.jsonl"
    with train_path.open("w", encoding="utf-8") as fh:
        for i in range(n_train):
            fh.write(
                json.dumps({"id": f"t{i}", "sentence": f"sample text {i}", "label": i % len(classes)})
                + "\n"
            )
    with eval_path.open("w", encoding="utf-8") as fh:
        for i in range(n_eval):
            fh.write(
                json.dumps({"id": f"q{i}", "sentence": f"query text {i}", "label": i % len(classes)})
                + "\n"
            )
    return train_path, eval_path


def base_config_dict(out_dir: str = "out") -> dict:
    return {
        "dataset": {
            "name": "demo",
            "format": "jsonl",
            "train_path": "train.jsonl",
            "eval_path": "eval.jsonl",
            "schema": {
                "fields": {"sentence": "sentence"},
                "label": "label",
                "id": "id",
                "classes": list(CLASSES),
            },
        },
        "run": {
            "k": 3,
            "permutations": 4,
            "trials": 2,
            "seed": 0,
            "eval_subsample": 20,
            "cache": True,
            "concurrency": 2,
        },
        "backend": {"kind": "mock", "mode": "hash", "label": 0},
        "analytics": {"mu_mode": "at-addition", "z_threshold": 1.0, "set_size": 6},
        "output": {"dir": out_dir},
    }


def write_config(directory: Path, config: dict, filename: str = "config.yaml") -> Path:
    path = directory / filename
    with path.open("w", encoding="utf-8") as fh:
        yaml.safe_dump(config, fh, sort_keys=True)
    return path


def engineered_selection_run(workspace: Path):
    """5-trial run whose per-exemplar averages land exactly on {1.0, 0.0, 0.5}.

    Returns (config_path, records_path, good_ids, bad_ids); the good/bad ids
    are the planted extremes the selection pipeline must recover.
    """
    from shotscan import run_experiment, write_records
    from shotscan.config import build_dataset, load_config

    write_corpus_files(workspace, n_train=30, n_eval=20)
    good = tuple(f"t{i}" for i in range(6))
    bad = tuple(f"t{i}" for i in range(6, 12))
    support = tuple(f"t{i}" for i in range(20))
    config_dict = base_config_dict(out_dir="out")
    config_dict["run"].update(
        {
            "k": 20,
            "permutations": 6,
            "trials": 5,
            "eval_subsample": 20,
            "fixed_support": list(support),
        }
    )
    config_path = write_config(workspace, config_dict, "select_config.yaml")
    config = load_config(config_path)
    dataset = build_dataset(config)
    backend = LastExemplarBackend(
        good, bad, {q.id: q.label for q in dataset.eval}, len(dataset.classes)
    )
    artifact = run_experiment(config.run, dataset, backend, config.resolved_template())
    records_path = workspace / "engineered.records.jsonl"
    write_records(records_path, artifact.records)
    return config_path, records_path, good, bad
