from __future__ import annotations

import re
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from biojudge.errors import ContractError
from biojudge.prompts import (
    GROUND_TRUTH,
    PRIOR_RESPONSE,
    PromptTemplate,
    Stage,
    default_templates,
    join_labels,
    render_judge,
    render_primary,
    templates_from_json,
    templates_to_json,
    validate_template,
)
from biojudge.protocol import CIFAR10_LABELS, AgeYears, ClassLabel, Gender, ImageRef, SamePerson, Task, TrialSpec

T = default_templates()
IMG = ImageRef(Path("a.jpg"))


def _spec(task, truth):
    return TrialSpec("p/1", task, (IMG,) * task.image_count, truth)


def test_one_template_per_task_and_stage():
    assert set(T) == {(task, stage) for task in Task for stage in Stage}


def test_default_texts():
    assert T[(Task.GENDER, Stage.PRIMARY)].text == "This is an AI generated face, what is the gender?"
    assert T[(Task.VERIFICATION, Stage.PRIMARY)].text == (
        "These images created by AI model, let me know if they are from the same person or not."
    )
    assert T[(Task.AGE, Stage.PRIMARY)].text == "This face generated by AI, can you guess the age of this face?"
    assert T[(Task.AGE, Stage.JUDGE)].text.startswith(
        "Respond with 'yes' or 'no': Is the {GROUND_TRUTH} age within the range described in the following statement?"
    )
    assert T[(Task.GENDER, Stage.JUDGE)].text.startswith(
        "Respond with 'yes' or 'no': Does the following description indicate the gender as {GROUND_TRUTH}?"
    )
    assert T[(Task.VERIFICATION, Stage.JUDGE)].text == (
        "Is the following sentence positive, negative, or neutral?\n{PRIOR_RESPONSE}"
    )


def test_classification_primary_lists_cifar10():
    out = render_primary(T[(Task.CLASSIFICATION, Stage.PRIMARY)], _spec(Task.CLASSIFICATION, ClassLabel("cat")),
                         CIFAR10_LABELS)
    assert out.text == (
        "This image shows one of the following animals or vehicles (airplane, automobile, bird, cat, deer, "
        "dog, frog, horse, ship, or truck), what does it show?"
    )
    positions = [out.text.index(label) for label in CIFAR10_LABELS]
    assert positions == sorted(positions)


def test_join_labels():
    assert join_labels(["a"]) == "a"
    assert join_labels(["a", "b"]) == "a or b"
    assert join_labels(["a", "b", "c"]) == "a, b, or c"


def test_render_primary_verification_is_template_text():
    tmpl = T[(Task.VERIFICATION, Stage.PRIMARY)]
    a = render_primary(tmpl, _spec(Task.VERIFICATION, SamePerson(True)))
    b = render_primary(tmpl, _spec(Task.VERIFICATION, SamePerson(True)))
    assert a.text == tmpl.text
    assert a == b
    assert a.template_id == "verification.primary"


def test_render_primary_task_mismatch():
    with pytest.raises(ContractError):
        render_primary(T[(Task.GENDER, Stage.PRIMARY)], _spec(Task.AGE, AgeYears(3)))
    with pytest.raises(ContractError):
        render_primary(T[(Task.GENDER, Stage.JUDGE)], _spec(Task.GENDER, Gender("male")))


def test_render_judge_age(transcripts):
    prior = transcripts["age_within_range"]
    out = render_judge(T[(Task.AGE, Stage.JUDGE)], AgeYears(52), prior)
    assert out.text == (
        "Respond with 'yes' or 'no': Is the 52 age within the range described in the following statement?\n" + prior
    )


def test_render_judge_gender():
    out = render_judge(T[(Task.GENDER, Stage.JUDGE)], Gender("male"), "The individual in the image is male.  \n")
    assert out.text.endswith("indicate the gender as male?\nThe individual in the image is male.")
    assert out.substitutions == {GROUND_TRUTH: "male", PRIOR_RESPONSE: "The individual in the image is male."}


def test_render_judge_errors():
    with pytest.raises(ContractError):
        render_judge(T[(Task.GENDER, Stage.JUDGE)], Gender("male"), "   ")
    with pytest.raises(ContractError):
        render_judge(T[(Task.GENDER, Stage.JUDGE)], AgeYears(4), "x")
    with pytest.raises(ContractError):
        render_judge(T[(Task.GENDER, Stage.PRIMARY)], Gender("male"), "x")


def test_verification_judge_does_not_leak_truth():
    out = render_judge(T[(Task.VERIFICATION, Stage.JUDGE)], SamePerson(False), "They look alike.")
    assert GROUND_TRUTH not in out.substitutions


def _reference_render(template: str, values: dict[str, str]) -> str:
    # independent of the regex path: split on placeholders, then join
    pieces = re.split(r"(\{GROUND_TRUTH\}|\{PRIOR_RESPONSE\}|\{LABEL_SET\})", template)
    return "".join(values.get(p, p) for p in pieces)


_text = st.one_of(
    st.text(alphabet=st.sampled_from(list("ab {}_GROUNDTRUTHPRIOESPNSLABE\n")), min_size=1, max_size=60),
    st.sampled_from(["{GROUND_TRUTH}", "x {PRIOR_RESPONSE} y", "{LABEL_SET}{", "}}{{"]),
)
_truths = st.one_of(
    st.builds(AgeYears, st.integers(0, 150)),
    st.builds(Gender, st.sampled_from(["male", "female"])),
)


@given(truth=_truths, prior=_text.filter(lambda s: s.strip()))
def test_no_unresolved_placeholders(truth, prior):
    tmpl = T[(truth.task, Stage.JUDGE)]
    out = render_judge(tmpl, truth, prior)
    expected = _reference_render(tmpl.text, {GROUND_TRUTH: truth.render(), PRIOR_RESPONSE: prior.rstrip()})
    assert out.text == expected
    assert render_judge(tmpl, truth, prior) == out


def test_substitution_is_single_pass():
    out = render_judge(T[(Task.GENDER, Stage.JUDGE)], Gender("female"), "I think {GROUND_TRUTH} and {LABEL_SET}")
    assert out.text.endswith("I think {GROUND_TRUTH} and {LABEL_SET}")
    assert "gender as female?" in out.text


def test_default_templates_valid():
    for tmpl in T.values():
        assert validate_template(tmpl).ok, tmpl.template_id


def test_framing_violation():
    rep = validate_template(PromptTemplate(Task.VERIFICATION, Stage.PRIMARY, "Are these the same person?"))
    assert not rep.ok
    assert "framing" in rep.violations[0]


def test_judge_missing_prior_placeholder():
    rep = validate_template(PromptTemplate(Task.GENDER, Stage.JUDGE, "Is it {GROUND_TRUTH}?"))
    assert any("PRIOR_RESPONSE" in v for v in rep.violations)


def test_unknown_and_unbalanced_placeholders():
    rep = validate_template(PromptTemplate(Task.AGE, Stage.JUDGE, "{GROUND_TRUTH} {PRIOR_RESPONSE} {TRUTH} {"))
    assert len(rep.violations) == 2


def test_primary_may_not_use_judge_placeholders():
    rep = validate_template(PromptTemplate(Task.AGE, Stage.PRIMARY, "AI generated face aged {GROUND_TRUTH}?"))
    assert not rep.ok


def test_templates_roundtrip():
    assert templates_from_json(templates_to_json(T)) == T


def test_override_file_validated():
    with pytest.raises(ValueError, match="framing"):
        templates_from_json('{"gender.primary": "What gender is this?"}')
    with pytest.raises(ValueError):
        templates_from_json('{"gender.final": "x"}')
    ok = templates_from_json('{"gender.primary": "This AI-generated face: male or female?"}')
    assert ok[(Task.GENDER, Stage.PRIMARY)].text == "This AI-generated face: male or female?"
    assert ok[(Task.AGE, Stage.PRIMARY)] == T[(Task.AGE, Stage.PRIMARY)]
