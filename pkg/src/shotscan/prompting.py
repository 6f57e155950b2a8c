"""Prompt rendering: instruction, ordered exemplar blocks, then the query block.

Templates use `{field}` placeholders for dataset text fields plus `{label}`
for the verbalized class. Rendering is byte-exact: no whitespace
normalization, no escaping of field text. Downstream caching keys on exemplar
ids rather than rendered text, so separator collisions inside field text
cannot corrupt results.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from .corpus import Dataset, Exemplar
from .digests import digest_obj
from .errors import TemplateError

_FORMATTER = string.Formatter()


def _placeholders(fmt: str) -> list[str]:
    try:
        return [name for _, name, _, _ in _FORMATTER.parse(fmt) if name is not None]
    except ValueError as exc:
        raise TemplateError(f"malformed format string {fmt!r}: {exc}") from exc


class _StrictMap(dict):
    def __missing__(self, key):
        raise TemplateError(f"unresolvable placeholder {{{key}}}")


def _fill(fmt: str, values: Mapping[str, str]) -> str:
    try:
        return fmt.format_map(_StrictMap(values))
    except ValueError as exc:
        raise TemplateError(f"malformed format string {fmt!r}: {exc}") from exc


@dataclass(frozen=True)
class PromptTemplate:
    """Building blocks of a rendered prompt.

    `exemplar_format` must reference `{label}` exactly once; `query_format`
    must not reference it. `candidate_format` renders a class verbalization
    into the continuation that scorers append after the query block.
    """

    instruction: str = ""
    exemplar_format: str = ""
    query_format: str = ""
    separator: str = "\n\n"
    candidate_format: str = " {label}"

    def __post_init__(self):
        if _placeholders(self.exemplar_format).count("label") != 1:
            raise TemplateError("exemplar_format must reference {label} exactly once")
        if "label" in _placeholders(self.query_format):
            raise TemplateError("query_format must not reference {label}")
        if "label" not in _placeholders(self.candidate_format):
            raise TemplateError("candidate_format must reference {label}")

    def field_placeholders(self) -> set[str]:
        names = set(_placeholders(self.exemplar_format)) | set(_placeholders(self.query_format))
        names.discard("label")
        return names

    def digest(self) -> str:
        return digest_obj(
            {
                "instruction": self.instruction,
                "exemplar_format": self.exemplar_format,
                "query_format": self.query_format,
                "separator": self.separator,
                "candidate_format": self.candidate_format,
            }
        )


@dataclass(frozen=True)
class RenderedPrompt:
    """A rendered prompt plus the identities that produced it."""

    text: str
    prefix_ids: tuple[str, ...]
    query_id: str


def validate_template(template: PromptTemplate, field_names: Iterable[str]) -> None:
    """Check that every field placeholder exists in the dataset schema."""
    known = set(field_names)
    unknown = sorted(template.field_placeholders() - known)
    if unknown:
        raise TemplateError(
            f"template references unknown field(s) {', '.join(unknown)}; "
            f"schema declares {sorted(known)}"
        )


def verbalize(dataset: Dataset, label: int) -> str:
    """Class index -> verbalization, range-checked."""
    if not (0 <= label < len(dataset.classes)):
        raise ValueError(f"label {label} out of range for {len(dataset.classes)} classes")
    return dataset.classes[label]


def render_exemplar_block(template: PromptTemplate, exemplar: Exemplar, classes: Sequence[str]) -> str:
    if not (0 <= exemplar.label < len(classes)):
        raise ValueError(f"label {exemplar.label} out of range for {len(classes)} classes")
    values = dict(exemplar.fields)
    values["label"] = classes[exemplar.label]
    return _fill(template.exemplar_format, values)

def render_query_block(template: PromptTemplate, query: Exemplar) -> str:
    return _fill(template.query_format, dict(query.fields))


def assemble(template: PromptTemplate, exemplar_blocks: Sequence[str], query_block: str) -> str:
    parts = ([template.instruction] if template.instruction else []) + list(exemplar_blocks)
    parts.append(query_block)
    return template.separator.join(parts)


def render(
    template: PromptTemplate,
    prefix: Sequence[Exemplar],
    query: Exemplar,
    classes: Sequence[str],
) -> RenderedPrompt:
    """Concatenate the instruction, the ordered prefix, and the query.

    An empty prefix yields the zero-shot prompt. Output is byte-identical for
    identical inputs, and the first k blocks are shared with every longer
    prefix that extends the same ordering.
    """
    blocks = [render_exemplar_block(template, e, classes) for e in prefix]
    text = assemble(template, blocks, render_query_block(template, query))
    return RenderedPrompt(
        text=text,
        prefix_ids=tuple(e.id for e in prefix),
        query_id=query.id,
    )


def candidate_text(template: PromptTemplate, verbalization: str) -> str:
    """The continuation a scorer appends for one candidate class."""
    return _fill(template.candidate_format, {"label": verbalization})


def default_template(field_names: Sequence[str], instruction: str = "") -> PromptTemplate:
    """A generic template for single-text or text-pair tasks.

    One `Name: {name}` line per field, then a label line; blocks separated by
    a blank line.
    """
    lines = [f"{name.capitalize()}: {{{name}}}" for name in field_names]
    return PromptTemplate(
        instruction=instruction,
        exemplar_format="\n".join(lines + ["Label: {label}"]),
        query_format="\n".join(lines + ["Label:"]),
        separator="\n\n",
    )


_TEMPLATE_KEYS = {"instruction", "exemplar_format", "query_format", "separator", "candidate_format"}


def template_from_dict(obj: Mapping[str, object]) -> PromptTemplate:
    unknown = sorted(set(obj) - _TEMPLATE_KEYS)
    if unknown:
        raise TemplateError(f"unknown template key(s): {', '.join(unknown)}")
    values = {k: v for k, v in obj.items() if v is not None}
    bad = [k for k, v in values.items() if not isinstance(v, str)]
    if bad:
        raise TemplateError(f"template key(s) must be strings: {', '.join(sorted(bad))}")
    return PromptTemplate(**values)


def load_template(path: str | Path) -> PromptTemplate:
    with Path(path).open("r", encoding="utf-8") as fh:
        obj = yaml.safe_load(fh)
    if not isinstance(obj, dict):
        raise TemplateError(f"{path}: template file must hold a mapping")
    return template_from_dict(obj)
