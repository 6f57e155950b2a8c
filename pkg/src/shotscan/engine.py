"""Incremental-prefix Monte Carlo evaluation.

Per trial: draw a support set, draw P independent permutations of it, and for
each permutation evaluate accuracy on the eval split after every prefix
length k = 0..K. Identical (prefix, query) pairs are deduplicated through a
prediction cache, so the P identical zero-shot cells cost one pass over the
eval split instead of P, and deeper prefixes shared between permutations are
scored once.

Accuracies are exact fractions end to end, which lets the brute-force oracle
assert zero error under full enumeration.
"""

from __future__ import annotations

import itertools
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Dataset, SupportSet, sample_support, subsample_eval
from .digests import digest_obj, sha256_hex
from .errors import BackendError, ConfigError, DatasetError, EngineAbort
from .prompting import (
    PromptTemplate,
    RenderedPrompt,
    assemble,
    render_exemplar_block,
    render_query_block,
    validate_template,
)
from .scorer import Backend, classify_batch
from .seeding import PERMUTATION, derive_rng

EXHAUSTIVE_GUARD = 8

# A unit is one (ordered prefix of exemplar ids, eval query id) evaluation.
Unit = tuple[tuple[str, ...], str]


@dataclass(frozen=True)
class RunConfig:
    """Parameters of one experiment run."""

    k: int = 20
    permutations: int = 20
    trials: int = 5
    seed: int = 0
    eval_subsample: int = 256
    cache: bool = True
    concurrency: int = 8
    exhaustive: bool = False
    fixed_support: tuple[str, ...] | None = None

    def validate(self) -> None:
        problems = []
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.permutations < 1:
            problems.append("permutations must be >= 1")
        if self.trials < 1:
            problems.append("trials must be >= 1")
        if self.seed < 0:
            problems.append("seed must be >= 0")
        if self.eval_subsample < 1:
            problems.append("eval_subsample must be >= 1")
        if self.concurrency < 1:
            problems.append("concurrency must be >= 1")
        if self.exhaustive and self.k > EXHAUSTIVE_GUARD:
            problems.append(f"exhaustive runs are limited to k <= {EXHAUSTIVE_GUARD}")
        if self.fixed_support is not None:
            if len(set(self.fixed_support)) != len(self.fixed_support):
                problems.append("fixed_support ids must be distinct")
            if len(self.fixed_support) != self.k:
                problems.append(
                    f"fixed_support lists {len(self.fixed_support)} ids but k={self.k}"
                )
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass(frozen=True)
class EvalRecord:
    """One measurement: accuracy of a k-prefix of one permutation on the eval split."""

    trial: int
    perm: int
    k: int
    correct: int
    total: int
    prefix_ids: tuple[str, ...]

    @property
    def accuracy(self) -> Fraction:
        return Fraction(self.correct, self.total)

    def to_json_obj(self) -> dict:
        return {
            "trial": self.trial,
            "perm": self.perm,
            "k": self.k,
            "correct": self.correct,
            "total": self.total,
            "accuracy": float(self.accuracy),
            "prefix_ids": list(self.prefix_ids),
        }

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "EvalRecord":
        return cls(
            trial=int(obj["trial"]),
            perm=int(obj["perm"]),
            k=int(obj["k"]),
            correct=int(obj["correct"]),
            total=int(obj["total"]),
            prefix_ids=tuple(obj["prefix_ids"]),
        )


@dataclass(frozen=True)
class RunArtifact:
    """All records of a run plus the provenance needed to reproduce it."""

    records: tuple[EvalRecord, ...]
    provenance: dict


def prefix_key(
    prefix_ids: Sequence[str], query_id: str, template_digest: str, backend_digest: str
) -> str:
    """Cache key: equal keys imply a byte-identical rendered prompt and backend."""
    return sha256_hex(
        json.dumps(
            [list(prefix_ids), query_id, template_digest, backend_digest],
            separators=(",", ":"),
            ensure_ascii=False,
        )
    )


@dataclass(frozen=True)
class CacheEntry:
    predicted: int
    scores: tuple[float, ...]


class PredictionCache:
    """(prefix, query) -> prediction map, optionally persisted as append-only JSONL.

    The first file line is a header carrying the dataset/template/backend
    digests; opening a file written for different digests fails rather than
    serving stale predictions. Lookups are concurrent; insertion is exclusive
    and idempotent.
    """

    def __init__(
        self,
        path: str | Path | None = None,
        *,
        dataset_digest: str = "",
        template_digest: str = "",
        backend_digest: str = "",
    ):
        self._mem: dict[str, CacheEntry] = {}
        self._lock = threading.Lock()
        self._fh = None
        self._header = {
            "kind": "prefix-cache",
            "dataset_digest": dataset_digest,
            "template_digest": template_digest,
            "backend_digest": backend_digest,
        }
        if path is None:
            return
        path = Path(path)
        if path.exists() and path.stat().st_size > 0:
            with path.open("r", encoding="utf-8") as fh:
                header = json.loads(fh.readline())
                if header != self._header:
                    raise ConfigError(
                        f"cache file {path} was written for a different "
                        "dataset/template/backend; delete it or change the output directory"
                    )
                for line in fh:
                    if not line.strip():
                        continue
                    obj = json.loads(line)
                    self._mem[obj["key"]] = CacheEntry(
                        predicted=int(obj["predicted"]), scores=tuple(obj["scores"])
                    )
            self._fh = path.open("a", encoding="utf-8")
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = path.open("w", encoding="utf-8")
            self._fh.write(json.dumps(self._header, sort_keys=True) + "\n")
            self._fh.flush()

    def __len__(self) -> int:
        return len(self._mem)

    def get(self, key: str) -> CacheEntry | None:
        with self._lock:
            return self._mem.get(key)

    def put_many(self, items: Iterable[tuple[str, CacheEntry]]) -> None:
        with self._lock:
            for key, entry in items:
                if key in self._mem:
                    continue
                self._mem[key] = entry
                if self._fh is not None:
                    self._fh.write(
                        json.dumps(
                            {"key": key, "predicted": entry.predicted, "scores": list(entry.scores)},
                            sort_keys=True,
                        )
                        + "\n"
                    )
            if self._fh is not None:
                self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def permute(support: SupportSet, perm_index: int, seed: int) -> tuple[str, ...]:
    """Unbiased shuffle of the support, keyed by (seed, trial, perm_index).

    Distinct permutation indices are independent draws from the k! space;
    repeats across indices are allowed.
    """
    rng = derive_rng(seed, PERMUTATION, support.trial, perm_index)
    order = rng.permutation(len(support.members))
    return tuple(support.members[i] for i in order)


def exhaustive_orderings(support: SupportSet) -> list[tuple[str, ...]]:
    """Every ordering of the support, in a canonical enumeration order."""
    if len(support.members) > EXHAUSTIVE_GUARD:
        raise ConfigError(f"exhaustive enumeration is limited to k <= {EXHAUSTIVE_GUARD}")
    return [tuple(p) for p in itertools.permutations(support.members)]


class PrefixEvaluator:
    """Resolves (prefix, query) predictions, with caching and batched dispatch.

    Exemplar and query blocks are rendered once; prompt texts are assembled
    per unit, so the first k blocks of any prefix are byte-identical to those
    of every extension. Aggregation happens outside, keyed by unit, so results
    are independent of dispatch order.
    """

    def __init__(
        self,
        dataset: Dataset,
        backend: Backend,
        template: PromptTemplate,
        cache: PredictionCache | None = None,
        concurrency: int = 1,
    ):
        self._dataset = dataset
        self._backend = backend
        self._template = template
        self._cache = cache
        self._concurrency = max(1, concurrency)
        self._template_digest = template.digest()
        self._train = dataset.train_by_id()
        self._blocks: dict[str, str] = {}
        self._query_blocks = {q.id: render_query_block(template, q) for q in dataset.eval}

    @property
    def dataset(self) -> Dataset:
        return self._dataset

    def _block(self, exemplar_id: str) -> str:
        block = self._blocks.get(exemplar_id)
        if block is None:
            exemplar = self._train.get(exemplar_id)
            if exemplar is None:
                raise DatasetError(f"prefix id {exemplar_id!r} does not resolve to a train exemplar")
            block = render_exemplar_block(self._template, exemplar, self._dataset.classes)
            self._blocks[exemplar_id] = block
        return block

    def _prompt(self, unit: Unit) -> RenderedPrompt:
        prefix_ids, query_id = unit
        text = assemble(
            self._template,
            [self._blocks[i] for i in prefix_ids],
            self._query_blocks[query_id],
        )
        return RenderedPrompt(text=text, prefix_ids=prefix_ids, query_id=query_id)

    def _key(self, unit: Unit) -> str:
        return prefix_key(unit[0], unit[1], self._template_digest, self._backend.digest)

    def _compute(self, units: Sequence[Unit]) -> dict[Unit, CacheEntry]:
        # Pre-render blocks serially; workers only read afterwards.
        for prefix_ids, _ in units:
            for exemplar_id in prefix_ids:
                self._block(exemplar_id)
        size = max(1, self._backend.preferred_batch)
        chunks = [units[i : i + size] for i in range(0, len(units), size)]

        def work(chunk: Sequence[Unit]) -> list[CacheEntry]:
            prompts = [self._prompt(u) for u in chunk]
            try:
                decided = classify_batch(self._backend, prompts, self._dataset.classes)
            except BackendError as exc:
                prefix_ids, query_id = chunk[0]
                raise BackendError(
                    f"scoring failed (prefix length {len(prefix_ids)}, query {query_id}): {exc}"
                ) from exc
            return [
                CacheEntry(predicted=pred, scores=tuple(s.score for s in scores))
                for pred, scores in decided
            ]

        if self._concurrency == 1 or len(chunks) <= 1:
            results = [work(chunk) for chunk in chunks]
        else:
            with ThreadPoolExecutor(max_workers=self._concurrency) as pool:
                results = list(pool.map(work, chunks))
        out: dict[Unit, CacheEntry] = {}
        for chunk, entries in zip(chunks, results):
            out.update(zip(chunk, entries))
        return out

    def predictions(self, units: Sequence[Unit]) -> dict[Unit, int]:
        """Predicted class per unit.

        With a cache, each distinct unit is computed at most once and stored;
        without one, every occurrence in `units` is computed afresh.
        """
        if self._cache is None:
            return {u: e.predicted for u, e in self._compute(units).items()}
        unique = list(dict.fromkeys(units))
        out: dict[Unit, int] = {}
        missing: list[Unit] = []
        for unit in unique:
            hit = self._cache.get(self._key(unit))
            if hit is None:
                missing.append(unit)
            else:
                out[unit] = hit.predicted
        if missing:
            computed = self._compute(missing)
            self._cache.put_many((self._key(u), computed[u]) for u in missing)
            out.update({u: computed[u].predicted for u in missing})
        return out


def evaluate_prefix(
    prefix_ids: Sequence[str],
    dataset: Dataset,
    backend: Backend,
    template: PromptTemplate,
    cache: PredictionCache | None = None,
    concurrency: int = 1,
) -> Fraction:
    """Fraction of eval instances classified correctly under the given prefix."""
    evaluator = PrefixEvaluator(dataset, backend, template, cache, concurrency)
    return _prefix_accuracy(evaluator, tuple(prefix_ids))


def _prefix_accuracy(evaluator: PrefixEvaluator, prefix_ids: tuple[str, ...]) -> Fraction:
    dataset = evaluator.dataset
    units = [(prefix_ids, q.id) for q in dataset.eval]
    predictions = evaluator.predictions(units)
    correct = sum(1 for q in dataset.eval if predictions[(prefix_ids, q.id)] == q.label)
    return Fraction(correct, len(dataset.eval))


def _trial_support(config: RunConfig, trial: int, dataset: Dataset) -> SupportSet:
    if config.fixed_support is None:
        return sample_support(dataset, config.k, trial, config.seed)
    known = dataset.train_by_id()
    missing = [i for i in config.fixed_support if i not in known]
    if missing:
        raise DatasetError(f"fixed_support id(s) not in train split: {', '.join(missing)}")
    return SupportSet(trial=trial, members=config.fixed_support, seed=config.seed)


def run_trial(
    config: RunConfig,
    trial: int,
    dataset: Dataset,
    backend: Backend,
    template: PromptTemplate,
    cache: PredictionCache | None = None,
    evaluator: PrefixEvaluator | None = None,
    support: SupportSet | None = None,
) -> list[EvalRecord]:
    """All P x (K+1) records of one trial.

    The eval split of `dataset` is used as-is; run_experiment handles
    subsampling. With the exhaustive hook, every k! ordering replaces the P
    sampled permutations.
    """
    config.validate()
    if not dataset.eval:
        raise DatasetError("dataset has an empty eval split")
    if support is None:
        support = _trial_support(config, trial, dataset)
    if config.exhaustive:
        orderings = exhaustive_orderings(support)
    else:
        orderings = [permute(support, p, config.seed) for p in range(config.permutations)]
    if evaluator is None:
        if cache is None and config.cache:
            cache = PredictionCache(
                None,
                dataset_digest=dataset.digest(),
                template_digest=template.digest(),
                backend_digest=backend.digest,
            )
        evaluator = PrefixEvaluator(dataset, backend, template, cache, config.concurrency)

    units: list[Unit] = []
    eval_ids = [q.id for q in dataset.eval]
    for ordering in orderings:
        for k in range(config.k + 1):
            prefix = ordering[:k]
            units.extend((prefix, qid) for qid in eval_ids)
    predictions = evaluator.predictions(units)

    gold = {q.id: q.label for q in dataset.eval}
    total = len(eval_ids)
    records = []
    for p, ordering in enumerate(orderings):
        for k in range(config.k + 1):
            prefix = ordering[:k]
            correct = sum(1 for qid in eval_ids if predictions[(prefix, qid)] == gold[qid])
            records.append(
                EvalRecord(
                    trial=trial, perm=p, k=k, correct=correct, total=total, prefix_ids=prefix
                )
            )
    return records


def run_experiment(
    config: RunConfig,
    dataset: Dataset,
    backend: Backend,
    template: PromptTemplate,
    *,
    cache_path: str | Path | None = None,
    extra_provenance: Mapping | None = None,
) -> RunArtifact:
    """Execute every trial and assemble the artifact.

    Trials draw independent support sets (overlap permitted) unless
    fixed_support pins them. A backend failure aborts the running trial and
    raises EngineAbort carrying the records of the trials already completed.
    """
    config.validate()
    validate_template(template, dataset.train[0].fields.keys() if dataset.train else ())
    if not dataset.eval:
        raise DatasetError("dataset has an empty eval split")
    eval_ds = subsample_eval(dataset, config.eval_subsample, config.seed)
    dataset_digest = eval_ds.digest()
    cache = None
    if config.cache:
        cache = PredictionCache(
            cache_path,
            dataset_digest=dataset_digest,
            template_digest=template.digest(),
            backend_digest=backend.digest,
        )
    evaluator = PrefixEvaluator(eval_ds, backend, template, cache, config.concurrency)

    records: list[EvalRecord] = []
    supports: dict[int, SupportSet] = {}
    try:
        for trial in range(config.trials):
            support = _trial_support(config, trial, eval_ds)
            supports[trial] = support
            records.extend(
                run_trial(
                    config, trial, eval_ds, backend, template, evaluator=evaluator, support=support
                )
            )
    except BackendError as exc:
        raise EngineAbort(str(exc), partial_records=records) from exc
    finally:
        if cache is not None:
            cache.close()

    provenance = {
        "run_config": _config_obj(config),
        "config_digest": digest_obj(_config_obj(config)),
        "dataset_name": eval_ds.name,
        "dataset_digest": dataset_digest,
        "backend": backend.digest,
        "template_digest": template.digest(),
        "eval_size": len(eval_ds.eval),
        "eval_ids": [q.id for q in eval_ds.eval],
        "support_sets": {str(t): list(s.members) for t, s in supports.items()},
        "record_count": len(records),
    }
    if extra_provenance:
        provenance.update(extra_provenance)
    return RunArtifact(records=tuple(records), provenance=provenance)


def _config_obj(config: RunConfig) -> dict:
    obj = asdict(config)
    if obj["fixed_support"] is not None:
        obj["fixed_support"] = list(obj["fixed_support"])
    return obj


def write_records(path: str | Path, records: Sequence[EvalRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json_obj(), sort_keys=True) + "\n")


def read_records(path: str | Path) -> tuple[EvalRecord, ...]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(EvalRecord.from_json_obj(json.loads(line)))
    return tuple(records)


def write_provenance(path: str | Path, provenance: Mapping) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(provenance, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_provenance(path: str | Path) -> dict:
    with Path(path).open("r", encoding="utf-8") as fh:
        return json.load(fh)
