"""Verdicts and outcomes from free-text model answers.

Two judge routes exist. The ``llm`` route parses the judge model's reply
(sentiment for verification, yes/no for gender and age, a class name for
classification). The ``offline`` route reads the primary answer directly
with deterministic keyword and range rules, which keeps tests and replays
free of provider calls.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from biojudge.errors import ContractError
from biojudge.protocol import MAX_AGE, AgeYears, ClassLabel, Gender, GroundTruth, SamePerson, Task

DEFAULT_REFUSAL_PATTERNS = (
    "cannot help with that",
    "can't assist",
    "unable to assist",
    "I consciously steer clear",
)
DEFAULT_DENIAL_PATTERNS = (
    "too blurry",
    "very blurry",
    "low resolution",
    "difficult to provide a definitive answer",
)
# (offset of lo, offset of hi) from the decade start
DEFAULT_DECADE_TABLE: Mapping[str, tuple[int, int]] = {
    "early": (0, 3),
    "mid": (4, 6),
    "late": (7, 9),
    "": (0, 9),
}


class VerdictKind(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    NEUTRAL = "neutral"
    YES = "yes"
    NO = "no"
    PREDICTED_LABEL = "predicted_label"
    REFUSAL = "refusal"
    LOW_RES_DENIAL = "low_res_denial"
    UNPARSEABLE = "unparseable"


class Outcome(str, enum.Enum):
    CORRECT = "correct"
    INCORRECT = "incorrect"
    INCONCLUSIVE = "inconclusive"
    EXCLUDED_REFUSAL = "excluded_refusal"
    EXCLUDED_LOW_RES = "excluded_low_res"
    PROVIDER_FAILURE = "provider_failure"


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind
    evidence: str = ""
    label: str | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "evidence": self.evidence, "label": self.label}

    @classmethod
    def from_dict(cls, data: Mapping) -> Verdict:
        return cls(VerdictKind(data["kind"]), data.get("evidence", ""), data.get("label"))


UNPARSEABLE = Verdict(VerdictKind.UNPARSEABLE)

_LEGAL: dict[Task, frozenset[VerdictKind]] = {
    Task.VERIFICATION: frozenset({VerdictKind.POSITIVE, VerdictKind.NEGATIVE, VerdictKind.NEUTRAL}),
    Task.GENDER: frozenset({VerdictKind.YES, VerdictKind.NO}),
    Task.AGE: frozenset({VerdictKind.YES, VerdictKind.NO}),
    Task.CLASSIFICATION: frozenset({VerdictKind.PREDICTED_LABEL, VerdictKind.LOW_RES_DENIAL}),
}
_ANY_TASK = frozenset({VerdictKind.REFUSAL, VerdictKind.UNPARSEABLE})


def legal_verdicts(task: Task) -> frozenset[VerdictKind]:
    return _LEGAL[task] | _ANY_TASK


@dataclass(frozen=True)
class AgeRange:
    lo: int
    hi: int

    def __post_init__(self) -> None:
        if not 0 <= self.lo <= self.hi <= MAX_AGE:
            raise ValueError(f"invalid age range [{self.lo}, {self.hi}]")

    def __contains__(self, age: int) -> bool:
        return self.lo <= age <= self.hi


@dataclass(frozen=True)
class GradingRules:
    refusal_patterns: tuple[str, ...] = DEFAULT_REFUSAL_PATTERNS
    denial_patterns: tuple[str, ...] = DEFAULT_DENIAL_PATTERNS
    decade_table: Mapping[str, tuple[int, int]] = field(default_factory=lambda: dict(DEFAULT_DECADE_TABLE))

    def to_dict(self) -> dict:
        return {
            "refusal_patterns": list(self.refusal_patterns),
            "denial_patterns": list(self.denial_patterns),
            "decade_table": {k: list(v) for k, v in sorted(self.decade_table.items())},
        }


DEFAULT_RULES = GradingRules()


def _find_pattern(text: str, patterns: Sequence[str]) -> re.Match | None:
    best = None
    for p in patterns:
        m = re.search(re.escape(p), text, re.IGNORECASE)
        if m and (best is None or m.start() < best.start()):
            best = m
    return best


def detect_refusal(primary_text: str, patterns: Sequence[str] = DEFAULT_REFUSAL_PATTERNS) -> bool:
    return _find_pattern(primary_text, patterns) is not None


def refusal_verdict(primary_text: str, patterns: Sequence[str] = DEFAULT_REFUSAL_PATTERNS) -> Verdict | None:
    m = _find_pattern(primary_text, patterns)
    return Verdict(VerdictKind.REFUSAL, m.group(0)) if m else None


# --------------------------------------------------------------------------
# llm judge replies

_TOKEN = re.compile(r"[A-Za-z]+(?:['’][A-Za-z]+)*")
_SENTIMENT = {"positive": VerdictKind.POSITIVE, "negative": VerdictKind.NEGATIVE, "neutral": VerdictKind.NEUTRAL}
NEGATION_WINDOW = 3


def _is_negator(token: str) -> bool:
    t = token.lower().replace("’", "'")
    return t == "not" or t.endswith("n't")


def parse_judge_sentiment(judge_text: str) -> Verdict:
    """Positive / Negative / Neutral from a sentiment judge reply.

    A keyword with "not"/"n't" among its three preceding tokens is
    suppressed, except that a negated "positive" reads as Negative. When
    several kinds survive, the earliest wins.
    """
    tokens = list(_TOKEN.finditer(judge_text))
    for idx, tok in enumerate(tokens):
        kind = _SENTIMENT.get(tok.group(0).lower())
        if kind is None:
            continue
        window = tokens[max(0, idx - NEGATION_WINDOW):idx]
        negators = [w for w in window if _is_negator(w.group(0))]
        if not negators:
            return Verdict(kind, tok.group(0))
        if kind is VerdictKind.POSITIVE:
            return Verdict(VerdictKind.NEGATIVE, judge_text[negators[-1].start():tok.end()])
    return UNPARSEABLE


_YES_NO = {"yes": VerdictKind.YES, "no": VerdictKind.NO}


def parse_judge_yesno(judge_text: str) -> Verdict:
    head = re.match(r"[^A-Za-z]*([A-Za-z]+)", judge_text)
    if head and head.group(1).lower() in _YES_NO:
        return Verdict(_YES_NO[head.group(1).lower()], head.group(1))
    found: dict[VerdictKind, str] = {}
    for m in re.finditer(r"\b(yes|no)\b", judge_text, re.IGNORECASE):
        found.setdefault(_YES_NO[m.group(1).lower()], m.group(0))
    if len(found) == 1:
        kind, evidence = next(iter(found.items()))
        return Verdict(kind, evidence)
    return UNPARSEABLE


def parse_class_label(text: str, label_set: Sequence[str],
                      denial_patterns: Sequence[str] = DEFAULT_DENIAL_PATTERNS) -> Verdict:
    """PredictedLabel when exactly one label appears; LowResDenial when a denial
    phrase appears without a single committed label; Unparseable otherwise."""
    if not label_set:
        raise ContractError("label set must be non-empty")
    hits: dict[str, re.Match] = {}
    for label in label_set:
        m = re.search(rf"\b{re.escape(label)}s?\b", text, re.IGNORECASE)
        if m:
            hits[label] = m
    if len(hits) == 1:
        label, m = next(iter(hits.items()))
        return Verdict(VerdictKind.PREDICTED_LABEL, m.group(0), label)
    denial = _find_pattern(text, denial_patterns)
    if denial is not None:
        return Verdict(VerdictKind.LOW_RES_DENIAL, denial.group(0))
    return UNPARSEABLE


# --------------------------------------------------------------------------
# offline judges

_SAME = re.compile(
    r"\b(?:the\s+)?same\s+(?:person|individual|identity|man|woman|subject)\b", re.IGNORECASE
)
_NOT_SAME = re.compile(
    r"(?:\bnot|n['’]t|\bnever)\s+(?:\w+\s+){0,3}?(?:the\s+)?same\s+(?:person|individual|identity|man|woman|subject)\b"
    r"|\bdifferent\s+(?:people|persons|person|individuals|individual|identities|subjects)\b",
    re.IGNORECASE,
)
_HEDGE = re.compile(
    r"\b(?:cannot|can't|unable to|impossible to|not possible to)\s+(?:\w+\s+){0,2}?(?:determine|tell|say|confirm|conclude)\b",
    re.IGNORECASE,
)


def offline_verification_judge(primary_text: str) -> Verdict:
    """Same-person vs different-people phrasing in a verification answer.

    Only the affirmative side present -> Positive, only the negative side ->
    Negative, both -> Neutral. With neither, an explicit "cannot determine"
    style hedge gives Neutral and anything else is Unparseable.
    """
    negative = _NOT_SAME.search(primary_text)
    negative_spans = [m.span() for m in _NOT_SAME.finditer(primary_text)]
    positive = next(
        (m for m in _SAME.finditer(primary_text)
         if not any(s <= m.start() and m.end() <= e for s, e in negative_spans)),
        None,
    )
    if positive and negative:
        first = positive if positive.start() < negative.start() else negative
        return Verdict(VerdictKind.NEUTRAL, first.group(0))
    if positive:
        return Verdict(VerdictKind.POSITIVE, positive.group(0))
    if negative:
        return Verdict(VerdictKind.NEGATIVE, negative.group(0))
    hedge = _HEDGE.search(primary_text)
    if hedge:
        return Verdict(VerdictKind.NEUTRAL, hedge.group(0))
    return UNPARSEABLE


_MALE = re.compile(r"\b(?:male|man|boy)\b", re.IGNORECASE)
_FEMALE = re.compile(r"\b(?:female|woman|girl)\b", re.IGNORECASE)


def offline_gender_judge(primary_text: str, truth: Gender) -> Verdict:
    male = _MALE.search(primary_text)
    female = _FEMALE.search(primary_text)
    if bool(male) == bool(female):
        return UNPARSEABLE
    said, m = ("male", male) if male else ("female", female)
    return Verdict(VerdictKind.YES if said == truth.label else VerdictKind.NO, m.group(0))


_QUAL = r"(early|mid|late)"
_DECADE = rf"(?:{_QUAL}[\s-]*)?(\d)0['’]?s\b"
_NUM = r"(\d{1,3})(?![\d'’]|\s*s\b)"
_ENDPOINT = rf"(?:{_DECADE}|{_NUM})"
_CONNECTOR = r"\s*(?:to|-|–|—|and)\s*"
_NOT_SPAN = rf"(?!{_CONNECTOR}\d)"
_AGE_RE = re.compile(
    rf"(?P<span>{_ENDPOINT}{_CONNECTOR}{_ENDPOINT})"
    rf"|(?P<decade>{_DECADE})"
    rf"|(?P<approx>\b(?:around|about|approximately|roughly|aged?)\s+{_NUM}{_NOT_SPAN})"
    rf"|(?P<aged>{_NUM}\s*(?:-|\s)?\s*years?[\s-]*old)",
    re.IGNORECASE,
)


def _decade_bounds(qual: str | None, digit: str, table: Mapping[str, tuple[int, int]]) -> tuple[int, int]:
    base = int(digit) * 10
    lo_off, hi_off = table[(qual or "").lower()]
    return base + lo_off, base + hi_off


def extract_age_range(text: str, decade_table: Mapping[str, tuple[int, int]] = DEFAULT_DECADE_TABLE,
                      ) -> tuple[AgeRange, str] | None:
    """First age range stated in ``text`` and the substring it came from.

    Spans ("6 to 8", "late 40s to early 50s") win over single decade
    phrases, which win over single ages ("around 7" -> [6, 8]).
    """
    for m in _AGE_RE.finditer(text):
        g = m.groups()
        if m.group("span"):
            # groups: q1, d1, n1, q2, d2, n2
            q1, d1, n1, q2, d2, n2 = g[1:7]
            lo = _decade_bounds(q1, d1, decade_table)[0] if d1 else int(n1)
            hi = _decade_bounds(q2, d2, decade_table)[1] if d2 else int(n2)
        elif m.group("decade"):
            lo, hi = _decade_bounds(g[8], g[9], decade_table)
        else:
            age = int(g[11] if m.group("approx") else g[13])
            lo, hi = max(0, age - 1), age + 1
        lo, hi = min(lo, hi), max(lo, hi)
        if hi > MAX_AGE:
            continue
        return AgeRange(lo, hi), m.group(0)
    return None


def offline_age_judge(primary_text: str, truth: AgeYears,
                      decade_table: Mapping[str, tuple[int, int]] = DEFAULT_DECADE_TABLE) -> Verdict:
    found = extract_age_range(primary_text, decade_table)
    if found is None:
        return UNPARSEABLE
    rng, evidence = found
    return Verdict(VerdictKind.YES if truth.years in rng else VerdictKind.NO, evidence)


def offline_verdict(task: Task, primary_text: str, truth: GroundTruth, label_set: Sequence[str] | None = None,
                    rules: GradingRules = DEFAULT_RULES) -> Verdict:
    if task is Task.VERIFICATION:
        return offline_verification_judge(primary_text)
    if task is Task.GENDER:
        return offline_gender_judge(primary_text, truth)
    if task is Task.AGE:
        return offline_age_judge(primary_text, truth, rules.decade_table)
    return parse_class_label(primary_text, label_set or (), rules.denial_patterns)


def judge_reply_verdict(task: Task, judge_text: str, label_set: Sequence[str] | None = None,
                        rules: GradingRules = DEFAULT_RULES) -> Verdict:
    if task is Task.VERIFICATION:
        return parse_judge_sentiment(judge_text)
    if task in (Task.GENDER, Task.AGE):
        return parse_judge_yesno(judge_text)
    return parse_class_label(judge_text, label_set or (), rules.denial_patterns)


# --------------------------------------------------------------------------
# outcome


def decide_outcome(task: Task, truth: GroundTruth, refusal: bool, verdict: Verdict,
                   provider_failure: bool = False) -> Outcome:
    if provider_failure:
        return Outcome.PROVIDER_FAILURE
    if refusal:
        return Outcome.EXCLUDED_REFUSAL
    if verdict.kind not in legal_verdicts(task):
        raise ContractError(f"verdict {verdict.kind.value} is not legal for task {task.value}")
    if truth.task is not task:
        raise ContractError(f"truth {type(truth).__name__} does not match task {task.value}")
    kind = verdict.kind
    if kind is VerdictKind.REFUSAL:
        return Outcome.EXCLUDED_REFUSAL
    if kind is VerdictKind.UNPARSEABLE or kind is VerdictKind.NEUTRAL:
        return Outcome.INCONCLUSIVE
    if task is Task.VERIFICATION:
        said_same = kind is VerdictKind.POSITIVE
        assert isinstance(truth, SamePerson)
        return Outcome.CORRECT if said_same == truth.same else Outcome.INCORRECT
    if task in (Task.GENDER, Task.AGE):
        return Outcome.CORRECT if kind is VerdictKind.YES else Outcome.INCORRECT
    if kind is VerdictKind.LOW_RES_DENIAL:
        return Outcome.EXCLUDED_LOW_RES
    assert isinstance(truth, ClassLabel)
    return Outcome.CORRECT if verdict.label == truth.label else Outcome.INCORRECT


@dataclass(frozen=True)
class TrialRecord:
    spec_id: str
    task: Task
    primary_prompt_id: str
    primary_response: str
    judge_mode: str
    judge_response: str | None
    verdict: Verdict
    outcome: Outcome
    error: str | None = None
    timing: Mapping = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "spec_id": self.spec_id,
            "task": self.task.value,
            "primary_prompt_id": self.primary_prompt_id,
            "primary_response": self.primary_response,
            "judge_mode": self.judge_mode,
            "judge_response": self.judge_response,
            "verdict": self.verdict.to_dict(),
            "outcome": self.outcome.value,
            "error": self.error,
            "timing": dict(self.timing),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> TrialRecord:
        return cls(
            spec_id=data["spec_id"],
            task=Task(data["task"]),
            primary_prompt_id=data["primary_prompt_id"],
            primary_response=data["primary_response"],
            judge_mode=data["judge_mode"],
            judge_response=data.get("judge_response"),
            verdict=Verdict.from_dict(data["verdict"]),
            outcome=Outcome(data["outcome"]),
            error=data.get("error"),
            timing=data.get("timing") or {},
        )
