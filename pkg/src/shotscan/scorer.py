"""Scoring backends and the shared classification rule.

A backend turns a rendered prompt into one score per class; `classify`
applies the argmax with ties broken toward the lowest class index. Mock
backends are pure functions of (prefix ids, query id) and never touch I/O,
which makes them usable as enumeration targets for the brute-force oracle.
"""

from __future__ import annotations

import hashlib
import math
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

from .errors import ProtocolError
from .prompting import RenderedPrompt

MOCK_MODES = ("label-bias", "prefix-majority", "hash")


@dataclass(frozen=True)
class CandidateScore:
    """Score for one candidate class; higher is more preferred."""

    label: int
    score: float


@dataclass(frozen=True)
class MockModelSpec:
    """Deterministic stand-in model.

    label-bias always predicts `label`; prefix-majority predicts the majority
    label of the prefix (tie or empty prefix -> `label`); hash predicts a
    stable hash of (prefix ids, query id) mod the class count, which makes it
    maximally order-sensitive.
    """

    mode: str
    label: int = 0

    def __post_init__(self):
        if self.mode not in MOCK_MODES:
            raise ValueError(f"unknown mock mode {self.mode!r}; expected one of {MOCK_MODES}")
        if self.label < 0:
            raise ValueError("mock label must be >= 0")


class Backend(Protocol):
    """Anything that can score a batch of prompts against the class list."""

    digest: str
    preferred_batch: int

    def score_batch(
        self, prompts: Sequence[RenderedPrompt], classes: Sequence[str]
    ) -> list[tuple[float, ...]]: ...


def _stable_hash(prefix_ids: Sequence[str], query_id: str) -> int:
    payload = "\x1f".join(prefix_ids) + "\x1e" + query_id
    return int.from_bytes(hashlib.sha256(payload.encode("utf-8")).digest()[:8], "big")


def mock_classify(
    spec: MockModelSpec,
    prefix_ids: Sequence[str],
    query_id: str,
    labels_by_id: Mapping[str, int],
    num_classes: int,
) -> int:
    """Pure prediction rule shared by all mock modes."""
    if spec.mode == "label-bias":
        return spec.label
    if spec.mode == "prefix-majority":
        if not prefix_ids:
            return spec.label
        counts = Counter(labels_by_id[i] for i in prefix_ids)
        top = counts.most_common()
        if len(top) > 1 and top[0][1] == top[1][1]:
            return spec.label
        return top[0][0]
    return _stable_hash(prefix_ids, query_id) % num_classes


class MockBackend:
    """Deterministic in-process backend driven by a MockModelSpec.

    Thread-safe; `calls` counts scored prompts, which the tests use to verify
    cache-hit accounting.
    """

    def __init__(self, spec: MockModelSpec, labels_by_id: Mapping[str, int], num_classes: int):
        if num_classes < 2:
            raise ValueError("mock backend needs at least two classes")
        if spec.label >= num_classes:
            raise ValueError(f"mock label {spec.label} out of range for {num_classes} classes")
        self.spec = spec
        self._labels = dict(labels_by_id)
        self._num_classes = num_classes
        self._lock = threading.Lock()
        self.calls = 0
        self.digest = f"mock:{spec.mode}:{spec.label}"
        self.preferred_batch = 1024

    def predict(self, prefix_ids: Sequence[str], query_id: str) -> int:
        return mock_classify(self.spec, prefix_ids, query_id, self._labels, self._num_classes)

    def score_batch(
        self, prompts: Sequence[RenderedPrompt], classes: Sequence[str]
    ) -> list[tuple[float, ...]]:
        with self._lock:
            self.calls += len(prompts)
        rows = []
        for prompt in prompts:
            predicted = self.predict(prompt.prefix_ids, prompt.query_id)
            rows.append(tuple(1.0 if c == predicted else 0.0 for c in range(len(classes))))
        return rows


def _decide(
    scores: Sequence[float], classes: Sequence[str], query_id: str
) -> tuple[int, tuple[CandidateScore, ...]]:
    if len(scores) != len(classes):
        raise ProtocolError(
            f"backend returned {len(scores)} scores for {len(classes)} classes (query {query_id})"
        )
    for label, value in enumerate(scores):
        if not math.isfinite(value):
            raise ProtocolError(f"non-finite score {value!r} for class {label} (query {query_id})")
    best = 0
    for label, value in enumerate(scores):
        if value > scores[best]:
            best = label
    return best, tuple(CandidateScore(label, float(s)) for label, s in enumerate(scores))


def classify_batch(
    backend: Backend, prompts: Sequence[RenderedPrompt], classes: Sequence[str]
) -> list[tuple[int, tuple[CandidateScore, ...]]]:
    if len(classes) < 2:
        raise ValueError("classification needs at least two classes")
    rows = backend.score_batch(prompts, classes)
    if len(rows) != len(prompts):
        raise ProtocolError(f"backend returned {len(rows)} rows for {len(prompts)} prompts")
    return [_decide(row, classes, prompt.query_id) for row, prompt in zip(rows, prompts)]


def classify(
    backend: Backend, prompt: RenderedPrompt, classes: Sequence[str]
) -> tuple[int, tuple[CandidateScore, ...]]:
    """Predicted class plus one score per class; ties go to the lowest index."""
    return classify_batch(backend, [prompt], classes)[0]
