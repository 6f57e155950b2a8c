"""Dataset loading, split management, and seeded sampling of eval and support sets."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .digests import digest_obj
from .errors import DatasetError
from .seeding import EVAL_SUBSAMPLE, SUPPORT_DRAW, derive_rng

FORMATS = ("jsonl", "csv")


@dataclass(frozen=True)
class Exemplar:
    """One labelled instance; `fields` maps field names to text segments."""

    id: str
    fields: Mapping[str, str]
    label: int


@dataclass(frozen=True)
class DatasetSchema:
    """How raw rows map onto exemplars.

    `fields` maps prompt field names to source keys/columns, `label` names the
    source key holding the integer class index, and `classes` lists the label
    verbalizations in class-index order. When `id` is None, ids are assigned
    from the row index with a split prefix.
    """

    fields: Mapping[str, str]
    label: str
    classes: Sequence[str]
    id: str | None = None

    def __post_init__(self):
        if not self.fields:
            raise DatasetError("schema must map at least one text field")
        if not self.label:
            raise DatasetError("schema must name a label field")
        if not self.classes:
            raise DatasetError("schema must list class verbalizations")
        if len(set(self.classes)) != len(self.classes):
            raise DatasetError("class verbalizations must be distinct")


@dataclass(frozen=True)
class SupportSet:
    """The ordered-capable subset of train exemplars drawn for one trial."""

    trial: int
    members: tuple[str, ...]
    seed: int

    def __post_init__(self):
        if len(set(self.members)) != len(self.members):
            raise DatasetError("support set members must be distinct")
        if not self.members:
            raise DatasetError("support set must not be empty")


@dataclass(frozen=True)
class Dataset:
    """A named classification dataset with id-disjoint train/eval splits."""

    name: str
    classes: tuple[str, ...]
    train: tuple[Exemplar, ...]
    eval: tuple[Exemplar, ...]

    def __post_init__(self):
        if not self.classes:
            raise DatasetError("dataset must declare at least one class")
        if len(set(self.classes)) != len(self.classes):
            raise DatasetError("class verbalizations must be distinct")
        seen: set[str] = set()
        for split, exemplars in (("train", self.train), ("eval", self.eval)):
            for ex in exemplars:
                if ex.id in seen:
                    raise DatasetError(f"duplicate exemplar id {ex.id!r}")
                seen.add(ex.id)
                if not (0 <= ex.label < len(self.classes)):
                    raise DatasetError(
                        f"exemplar {ex.id!r} has label {ex.label}, outside "
                        f"[0, {len(self.classes)}) declared by {split} schema"
                    )
                if not any(v.strip() for v in ex.fields.values()):
                    raise DatasetError(f"exemplar {ex.id!r} has no non-empty text field")

    def digest(self) -> str:
        return digest_obj(
            {
                "name": self.name,
                "classes": list(self.classes),
                "train": [[e.id, dict(e.fields), e.label] for e in self.train],
                "eval": [[e.id, dict(e.fields), e.label] for e in self.eval],
            }
        )

    def train_by_id(self) -> dict[str, Exemplar]:
        return {e.id: e for e in self.train}


def _iter_rows(path: Path, format: str) -> Iterable[tuple[int, Mapping[str, object]]]:
    if format == "jsonl":
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
                if not isinstance(obj, dict):
                    raise DatasetError(f"{path}:{lineno}: expected a JSON object")
                yield lineno, obj
    elif format == "csv":
        with path.open("r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                return
            for row in reader:
                yield reader.line_num, row
    else:
        raise DatasetError(f"unknown dataset format {format!r}; expected one of {FORMATS}")


def _get(row: Mapping[str, object], key: str, path: Path, lineno: int) -> object:
    if key not in row or row[key] is None:
        raise DatasetError(f"{path}:{lineno}: missing field {key!r}")
    return row[key]


def _parse_split(path: Path, format: str, schema: DatasetSchema, id_prefix: str) -> list[Exemplar]:
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    exemplars: list[Exemplar] = []
    for index, (lineno, row) in enumerate(_iter_rows(path, format)):
        fields = {}
        for name, key in schema.fields.items():
            value = _get(row, key, path, lineno)
            if not isinstance(value, str):
                raise DatasetError(f"{path}:{lineno}: field {key!r} must be a string")
            fields[name] = value
        raw_label = _get(row, schema.label, path, lineno)
        if isinstance(raw_label, bool) or (
            not isinstance(raw_label, int) and not str(raw_label).lstrip("-").isdigit()
        ):
            raise DatasetError(f"{path}:{lineno}: label {raw_label!r} is not an integer")
        label = int(raw_label)
        if schema.id is not None:
            ex_id = str(_get(row, schema.id, path, lineno))
        else:
            ex_id = f"{id_prefix}{index}"
        exemplars.append(Exemplar(id=ex_id, fields=fields, label=label))
    if not exemplars:
        raise DatasetError(f"{path}: no records")
    return exemplars


def load_dataset(
    train_path: str | Path,
    schema: DatasetSchema,
    *,
    format: str = "jsonl",
    eval_path: str | Path | None = None,
    name: str | None = None,
) -> Dataset:
    """Parse dataset files into a validated Dataset.

    Row order is preserved; ids come from the schema's id field when declared
    and from the (split-prefixed) row index otherwise. Raises DatasetError on
    malformed rows (naming the line), out-of-range labels (naming the id), or
    duplicate ids.
    """
    if format not in FORMATS:
        raise DatasetError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    train_path = Path(train_path)
    train = _parse_split(train_path, format, schema, "train-")
    eval_split: list[Exemplar] = []
    if eval_path is not None:
        eval_split = _parse_split(Path(eval_path), format, schema, "eval-")
    return Dataset(
        name=name or train_path.stem,
        classes=tuple(schema.classes),
        train=tuple(train),
        eval=tuple(eval_split),
    )


def subsample_eval(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Replace the eval split by n instances drawn uniformly without replacement.

    A pure function of (eval ids in order, n, seed). When n covers the whole
    split the dataset is returned unchanged, original order included.
    """
    if n < 1:
        raise ValueError("subsample size must be >= 1")
    if n >= len(dataset.eval):
        return dataset
    rng = derive_rng(seed, EVAL_SUBSAMPLE)
    chosen = sorted(rng.choice(len(dataset.eval), size=n, replace=False).tolist())
    return Dataset(
        name=dataset.name,
        classes=dataset.classes,
        train=dataset.train,
        eval=tuple(dataset.eval[i] for i in chosen),
    )


def sample_support(dataset: Dataset, k: int, trial: int, seed: int) -> SupportSet:
    """Draw k distinct train exemplars for one trial.

    The effective seed derives from (seed, trial), so trials are independent
    draws (overlap permitted) while reruns reproduce each trial exactly.
    """
    if k < 1:
        raise ValueError("support size must be >= 1")
    if k > len(dataset.train):
        raise DatasetError(f"support size {k} exceeds train split of {len(dataset.train)}")
    rng = derive_rng(seed, SUPPORT_DRAW, trial)
    idx = rng.choice(len(dataset.train), size=k, replace=False)
    return SupportSet(trial=trial, members=tuple(dataset.train[i].id for i in idx), seed=seed)
