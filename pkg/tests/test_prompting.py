from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shotscan import Exemplar, PromptTemplate, default_template, load_template, render, verbalize
from shotscan.errors import TemplateError
from shotscan.prompting import candidate_text, template_from_dict

from helpers import make_dataset

REVIEW = PromptTemplate(
    instruction="",
    exemplar_format="Review: {sentence}\nSentiment: {label}",
    query_format="Review: {sentence}\nSentiment:",
    separator="\n\n",
)

CLASSES = ("negative", "positive")


def _ex(i, text, label=0):
    return Exemplar(id=f"e{i}", fields={"sentence": text}, label=label)


def test_zero_shot_identity():
    out = render(REVIEW, [], _ex(0, "good movie"), CLASSES)
    assert out.text == "Review: good movie\nSentiment:"
    assert out.prefix_ids == ()


def test_order_changes_text():
    e1, e2 = _ex(1, "alpha", 0), _ex(2, "beta", 1)
    q = _ex(9, "query")
    assert render(REVIEW, [e1, e2], q, CLASSES).text != render(REVIEW, [e2, e1], q, CLASSES).text


def test_verbalizer_substitution_in_block():
    out = render(REVIEW, [_ex(1, "alpha", 1)], _ex(9, "query"), CLASSES)
    assert "Sentiment: positive" in out.text


def test_instruction_prepended_once():
    template = PromptTemplate(
        instruction="Classify the review.",
        exemplar_format="{sentence} -> {label}",
        query_format="{sentence} ->",
        separator="\n",
    )
    out = render(template, [_ex(1, "alpha", 0)], _ex(9, "query"), CLASSES)
    assert out.text == "Classify the review.\nalpha -> negative\nquery ->"


def test_verbalize_lookup_and_range():
    ds = make_dataset(classes=("entailment", "neutral", "contradiction"))
    assert verbalize(ds, 0) == "entailment"
    with pytest.raises(ValueError):
        verbalize(ds, 3)


def test_unresolvable_placeholder_names_it():
    template = PromptTemplate(
        exemplar_format="{missing} {label}", query_format="{sentence}", separator="\n"
    )
    with pytest.raises(TemplateError, match="missing"):
        render(template, [_ex(1, "alpha")], _ex(9, "query"), CLASSES)


def test_exemplar_format_requires_one_label():
    with pytest.raises(TemplateError, match="label"):
        PromptTemplate(exemplar_format="{sentence}", query_format="{sentence}")
    with pytest.raises(TemplateError, match="label"):
        PromptTemplate(exemplar_format="{label} {label}", query_format="{sentence}")


def test_prefix_blocks_shared_with_extensions():
    exemplars = [_ex(i, f"text {i}", i % 2) for i in range(4)]
    q = _ex(9, "query")
    full = render(REVIEW, exemplars, q, CLASSES).text
    for k in range(4):
        partial = render(REVIEW, exemplars[:k], q, CLASSES).text
        shared = partial.rsplit(REVIEW.separator, 1)[0] if k else ""
        assert full.startswith(shared)


def test_candidate_text_default_leading_space():
    assert candidate_text(REVIEW, "positive") == " positive"


def test_default_template_single_and_pair():
    single = default_template(["sentence"])
    assert "{sentence}" in single.query_format
    pair = default_template(["premise", "hypothesis"])
    out = render(
        pair,
        [],
        Exemplar(id="q", fields={"premise": "p", "hypothesis": "h"}, label=0),
        CLASSES,
    )
    assert "Premise: p" in out.text and "Hypothesis: h" in out.text


def test_template_file_roundtrip(tmp_path):
    path = tmp_path / "template.yaml"
    path.write_text(
        "instruction: ''\n"
        "exemplar_format: '{sentence} => {label}'\n"
        "query_format: '{sentence} =>'\n"
        "separator: \"\\n\"\n"
    )
    template = load_template(path)
    assert template.exemplar_format == "{sentence} => {label}"


def test_template_unknown_key_rejected():
    with pytest.raises(TemplateError, match="bogus"):
        template_from_dict({"exemplar_format": "{label}", "query_format": "", "bogus": "x"})


_SAFE_TEXT = st.text(
    alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd"), min_codepoint=32),
    min_size=1,
    max_size=12,
)


@settings(max_examples=50, deadline=None)
@given(texts=st.lists(_SAFE_TEXT, min_size=2, max_size=4, unique=True))
def test_injective_on_orderings_without_separator_collisions(texts):
    # Fields never contain the separator, so distinct orderings cannot collide.
    import itertools

    exemplars = [_ex(i, t, i % 2) for i, t in enumerate(texts)]
    q = _ex(99, "query")
    rendered = [
        render(REVIEW, list(order), q, CLASSES).text
        for order in itertools.permutations(exemplars)
    ]
    assert len(set(rendered)) == len(rendered)


def test_render_is_deterministic():
    exemplars = [_ex(i, f"text {i}", i % 2) for i in range(3)]
    q = _ex(9, "query")
    assert render(REVIEW, exemplars, q, CLASSES) == render(REVIEW, exemplars, q, CLASSES)
