"""Experiment configuration: one YAML file, validated before any side effect.

Unknown keys are rejected so typos fail loudly. Secrets never live in the
file; the remote backend reads its bearer token from the environment variable
named by `backend.token_env`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import yaml

from .analytics import DEFAULT_SET_SIZE, DEFAULT_Z_THRESHOLD, MU_MODES
from .corpus import Dataset, DatasetSchema, load_dataset
from .engine import RunConfig
from .errors import ConfigError, DatasetError, TemplateError
from .prompting import PromptTemplate, default_template, template_from_dict, validate_template
from .remote import RemoteBackend, RemoteConfig
from .scorer import MOCK_MODES, MockBackend, MockModelSpec


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    format: str
    train_path: Path
    eval_path: Path
    schema: DatasetSchema


@dataclass(frozen=True)
class MockBackendConfig:
    mode: str
    label: int = 0


@dataclass(frozen=True)
class AnalyticsConfig:
    mu_mode: str = "at-addition"
    z_threshold: float = DEFAULT_Z_THRESHOLD
    set_size: int = DEFAULT_SET_SIZE


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    template: PromptTemplate | None
    run: RunConfig
    backend_kind: str
    mock: MockBackendConfig | None
    remote: RemoteConfig | None
    analytics: AnalyticsConfig
    output_dir: Path

    def resolved_template(self) -> PromptTemplate:
        if self.template is not None:
            return self.template
        return default_template(list(self.dataset.schema.fields))

    def to_dict(self) -> dict:
        """Normalized round-trippable form, used to emit follow-up configs."""
        out: dict = {
            "dataset": {
                "name": self.dataset.name,
                "format": self.dataset.format,
                "train_path": str(self.dataset.train_path),
                "eval_path": str(self.dataset.eval_path),
                "schema": {
                    "fields": dict(self.dataset.schema.fields),
                    "label": self.dataset.schema.label,
                    "classes": list(self.dataset.schema.classes),
                    "id": self.dataset.schema.id,
                },
            },
            "run": {
                "k": self.run.k,
                "permutations": self.run.permutations,
                "trials": self.run.trials,
                "seed": self.run.seed,
                "eval_subsample": self.run.eval_subsample,
                "cache": self.run.cache,
                "concurrency": self.run.concurrency,
                "exhaustive": self.run.exhaustive,
                "fixed_support": list(self.run.fixed_support)
                if self.run.fixed_support is not None
                else None,
            },
            "backend": {"kind": self.backend_kind},
            "analytics": {
                "mu_mode": self.analytics.mu_mode,
                "z_threshold": self.analytics.z_threshold,
                "set_size": self.analytics.set_size,
            },
            "output": {"dir": str(self.output_dir)},
        }
        if self.template is not None:
            out["template"] = {
                "instruction": self.template.instruction,
                "exemplar_format": self.template.exemplar_format,
                "query_format": self.template.query_format,
                "separator": self.template.separator,
                "candidate_format": self.template.candidate_format,
            }
        if self.backend_kind == "mock":
            out["backend"].update({"mode": self.mock.mode, "label": self.mock.label})
        else:
            remote = self.remote
            out["backend"].update(
                {
                    "endpoint": remote.endpoint,
                    "model": remote.model,
                    "token_env": remote.token_env,
                    "timeout": remote.timeout,
                    "retries": remote.retries,
                    "backoff": remote.backoff,
                    "max_in_flight": remote.max_in_flight,
                    "batch_size": remote.batch_size,
                    "length_normalize": remote.length_normalize,
                    "max_prompt_chars": remote.max_prompt_chars,
                    "audit_log": remote.audit_log,
                }
            )
        return out


class _Check:
    """Collects field-path diagnostics so one load reports every problem."""

    def __init__(self):
        self.problems: list[str] = []

    def fail(self, path: str, message: str) -> None:
        self.problems.append(f"{path}: {message}")

    def mapping(self, obj, path: str) -> dict:
        if obj is None:
            return {}
        if not isinstance(obj, dict):
            self.fail(path, "must be a mapping")
            return {}
        return obj

    def known_keys(self, obj: Mapping, allowed: Sequence[str], path: str) -> None:
        unknown = sorted(set(obj) - set(allowed))
        if unknown:
            self.fail(path, f"unknown key(s): {', '.join(unknown)}")

    def typed(self, obj: Mapping, key: str, types, path: str, default=None, required=False):
        if key not in obj or obj[key] is None:
            if required:
                self.fail(f"{path}.{key}", "is required")
            return default
        value = obj[key]
        if types is int and isinstance(value, bool):
            self.fail(f"{path}.{key}", "must be an integer")
            return default
        if types is float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if not isinstance(value, types):
            name = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
            self.fail(f"{path}.{key}", f"must be of type {name}")
            return default
        return value

    def raise_if_failed(self) -> None:
        if self.problems:
            raise ConfigError("; ".join(self.problems))


_TOP_KEYS = ("dataset", "template", "run", "backend", "analytics", "output")
_DATASET_KEYS = ("name", "format", "train_path", "eval_path", "schema")
_SCHEMA_KEYS = ("fields", "label", "classes", "id")
_RUN_KEYS = (
    "k",
    "permutations",
    "trials",
    "seed",
    "eval_subsample",
    "cache",
    "concurrency",
    "exhaustive",
    "fixed_support",
)
_BACKEND_COMMON = ("kind",)
_BACKEND_MOCK = ("mode", "label")
_BACKEND_REMOTE = (
    "endpoint",
    "model",
    "token_env",
    "timeout",
    "retries",
    "backoff",
    "max_in_flight",
    "batch_size",
    "length_normalize",
    "max_prompt_chars",
    "audit_log",
)
_ANALYTICS_KEYS = ("mu_mode", "z_threshold", "set_size")
_OUTPUT_KEYS = ("dir",)


def parse_config(obj: Mapping, base_dir: Path) -> ExperimentConfig:
    check = _Check()
    top = check.mapping(obj, "config")
    check.known_keys(top, _TOP_KEYS, "config")

    dataset_obj = check.mapping(top.get("dataset"), "dataset")
    if not dataset_obj:
        check.fail("dataset", "is required")
    check.known_keys(dataset_obj, _DATASET_KEYS, "dataset")
    fmt = check.typed(dataset_obj, "format", str, "dataset", default="jsonl")
    if fmt not in ("jsonl", "csv"):
        check.fail("dataset.format", "must be 'jsonl' or 'csv'")
    train_path = check.typed(dataset_obj, "train_path", str, "dataset", required=True)
    eval_path = check.typed(dataset_obj, "eval_path", str, "dataset", required=True)

    schema_obj = check.mapping(dataset_obj.get("schema"), "dataset.schema")
    if not schema_obj:
        check.fail("dataset.schema", "is required")
    check.known_keys(schema_obj, _SCHEMA_KEYS, "dataset.schema")
    fields = check.mapping(schema_obj.get("fields"), "dataset.schema.fields")
    if not fields:
        check.fail("dataset.schema.fields", "must map at least one text field")
    label_key = check.typed(schema_obj, "label", str, "dataset.schema", required=True)
    classes = schema_obj.get("classes")
    if not isinstance(classes, list) or not classes or not all(isinstance(c, str) for c in classes):
        check.fail("dataset.schema.classes", "must be a non-empty list of strings")
        classes = ["0", "1"]
    id_key = check.typed(schema_obj, "id", str, "dataset.schema")

    template = None
    if top.get("template") is not None:
        template_obj = check.mapping(top.get("template"), "template")
        check.known_keys(
            template_obj,
            ("instruction", "exemplar_format", "query_format", "separator", "candidate_format"),
            "template",
        )
        try:
            template = template_from_dict(template_obj)
        except TemplateError as exc:
            check.fail("template", str(exc))

    run_obj = check.mapping(top.get("run"), "run")
    check.known_keys(run_obj, _RUN_KEYS, "run")
    fixed_support = run_obj.get("fixed_support")
    if fixed_support is not None and (
        not isinstance(fixed_support, list) or not all(isinstance(i, str) for i in fixed_support)
    ):
        check.fail("run.fixed_support", "must be a list of exemplar ids")
        fixed_support = None
    run = RunConfig(
        k=check.typed(run_obj, "k", int, "run", default=20),
        permutations=check.typed(run_obj, "permutations", int, "run", default=20),
        trials=check.typed(run_obj, "trials", int, "run", default=5),
        seed=check.typed(run_obj, "seed", int, "run", default=0),
        eval_subsample=check.typed(run_obj, "eval_subsample", int, "run", default=256),
        cache=check.typed(run_obj, "cache", bool, "run", default=True),
        concurrency=check.typed(run_obj, "concurrency", int, "run", default=8),
        exhaustive=check.typed(run_obj, "exhaustive", bool, "run", default=False),
        fixed_support=tuple(fixed_support) if fixed_support is not None else None,
    )

    backend_obj = check.mapping(top.get("backend"), "backend")
    if not backend_obj:
        check.fail("backend", "is required")
    kind = check.typed(backend_obj, "kind", str, "backend", default="")
    mock = None
    remote = None
    if kind == "mock":
        check.known_keys(backend_obj, _BACKEND_COMMON + _BACKEND_MOCK, "backend")
        mode = check.typed(backend_obj, "mode", str, "backend", required=True)
        if mode is not None and mode not in MOCK_MODES:
            check.fail("backend.mode", f"must be one of {', '.join(MOCK_MODES)}")
        mock = MockBackendConfig(
            mode=mode or "hash", label=check.typed(backend_obj, "label", int, "backend", default=0)
        )
    elif kind == "remote":
        check.known_keys(backend_obj, _BACKEND_COMMON + _BACKEND_REMOTE, "backend")
        endpoint = check.typed(backend_obj, "endpoint", str, "backend", required=True)
        audit_log = check.typed(backend_obj, "audit_log", str, "backend")
        if endpoint:
            remote = RemoteConfig(
                endpoint=endpoint,
                model=check.typed(backend_obj, "model", str, "backend"),
                token_env=check.typed(backend_obj, "token_env", str, "backend"),
                timeout=check.typed(backend_obj, "timeout", float, "backend", default=60.0),
                retries=check.typed(backend_obj, "retries", int, "backend", default=3),
                backoff=check.typed(backend_obj, "backoff", float, "backend", default=0.5),
                max_in_flight=check.typed(backend_obj, "max_in_flight", int, "backend", default=8),
                batch_size=check.typed(backend_obj, "batch_size", int, "backend", default=64),
                length_normalize=check.typed(
                    backend_obj, "length_normalize", bool, "backend", default=False
                ),
                max_prompt_chars=check.typed(backend_obj, "max_prompt_chars", int, "backend"),
                audit_log=str(base_dir / audit_log) if audit_log else None,
            )
    else:
        check.fail("backend.kind", "must be 'mock' or 'remote'")

    analytics_obj = check.mapping(top.get("analytics"), "analytics")
    check.known_keys(analytics_obj, _ANALYTICS_KEYS, "analytics")
    mu_mode = check.typed(analytics_obj, "mu_mode", str, "analytics", default="at-addition")
    if mu_mode not in MU_MODES:
        check.fail("analytics.mu_mode", f"must be one of {', '.join(MU_MODES)}")
    analytics = AnalyticsConfig(
        mu_mode=mu_mode,
        z_threshold=check.typed(
            analytics_obj, "z_threshold", float, "analytics", default=DEFAULT_Z_THRESHOLD
        ),
        set_size=check.typed(analytics_obj, "set_size", int, "analytics", default=DEFAULT_SET_SIZE),
    )
    if analytics.set_size < 1:
        check.fail("analytics.set_size", "must be >= 1")

    output_obj = check.mapping(top.get("output"), "output")
    check.known_keys(output_obj, _OUTPUT_KEYS, "output")
    out_dir = check.typed(output_obj, "dir", str, "output", default="out")

    check.raise_if_failed()

    try:
        schema = DatasetSchema(
            fields={str(k): str(v) for k, v in fields.items()},
            label=label_key,
            classes=tuple(classes),
            id=id_key,
        )
    except DatasetError as exc:
        raise ConfigError(f"dataset.schema: {exc}") from exc
    try:
        run.validate()
    except ConfigError as exc:
        raise ConfigError(f"run: {exc}") from exc
    if template is not None:
        try:
            validate_template(template, schema.fields)
        except TemplateError as exc:
            raise ConfigError(f"template: {exc}") from exc

    return ExperimentConfig(
        dataset=DatasetConfig(
            name=dataset_obj.get("name") or Path(train_path).stem,
            format=fmt,
            train_path=(base_dir / train_path),
            eval_path=(base_dir / eval_path),
            schema=schema,
        ),
        template=template,
        run=run,
        backend_kind=kind,
        mock=mock,
        remote=remote,
        analytics=analytics,
        output_dir=base_dir / out_dir,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a config file; paths resolve relative to it."""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            obj = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return parse_config(obj, path.parent.resolve())


def build_dataset(config: ExperimentConfig) -> Dataset:
    return load_dataset(
        config.dataset.train_path,
        config.dataset.schema,
        format=config.dataset.format,
        eval_path=config.dataset.eval_path,
        name=config.dataset.name,
    )


def build_backend(config: ExperimentConfig, dataset: Dataset, template: PromptTemplate):
    if config.backend_kind == "mock":
        try:
            spec = MockModelSpec(mode=config.mock.mode, label=config.mock.label)
            return MockBackend(
                spec,
                labels_by_id={e.id: e.label for e in dataset.train},
                num_classes=len(dataset.classes),
            )
        except ValueError as exc:
            raise ConfigError(f"backend: {exc}") from exc
    remote = config.remote
    if remote.candidate_format != template.candidate_format:
        remote = dataclasses.replace(remote, candidate_format=template.candidate_format)
    return RemoteBackend(remote)


def followup_config_dict(base: ExperimentConfig, ids: Sequence[str], subdir: str) -> dict:
    """A run config that evaluates exactly the given exemplars as the support."""
    obj = base.to_dict()
    obj["run"]["fixed_support"] = list(ids)
    obj["run"]["k"] = len(ids)
    obj["run"]["trials"] = 1
    obj["output"]["dir"] = str(Path(base.output_dir) / subdir)
    return obj


def dump_config(obj: Mapping, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        yaml.safe_dump(dict(obj), fh, sort_keys=True, default_flow_style=False)
