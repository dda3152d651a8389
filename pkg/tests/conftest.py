from __future__ import annotations

import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

_criteria: dict[str, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion this test gates")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    label = getattr(report, "criterion", None)
    if label is None:
        return
    ok = report.passed
    prev = _criteria.get(label)
    _criteria[label] = (label, ok and (prev is None or prev[1]))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        rep.criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_criteria, key=lambda s: int(s.split(".")[0]) if s.split(".")[0].isdigit() else 99):
        _, ok = _criteria[label]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}")


@pytest.fixture(scope="session")
def transcripts() -> dict[str, str]:
    return json.loads((FIXTURES / "transcripts.json").read_text(encoding="utf-8"))["answers"]


def make_lfw_tree(root: Path, names_and_indices) -> None:
    """Create tiny placeholder images ``root/name/name_NNNN.jpg``."""
    for name, idx in names_and_indices:
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{name}_{idx:04d}.jpg").write_bytes(f"fake-jpeg {name} {idx}".encode())


def synthetic_lfw(folds: int, per_fold: int, n_people: int = 40) -> tuple[str, list[tuple[str, int]]]:
    """pairs.txt text with ``folds`` blocks of genuine then imposter lines.

    Identities cycle over ``n_people`` names with image indices 1..5, so the
    image tree stays small however many lines are written.
    """
    names = [f"Person_{i:03d}" for i in range(n_people)]
    lines = [f"{folds}\t{per_fold}"]
    used: set[tuple[str, int]] = set()
    k = 0
    for _ in range(folds):
        for _ in range(per_fold):
            name = names[k % n_people]
            i, j = k % 5 + 1, (k + 1) % 5 + 1
            lines.append(f"{name}\t{i}\t{j}")
            used |= {(name, i), (name, j)}
            k += 1
        for _ in range(per_fold):
            a, b = names[k % n_people], names[(k + 7) % n_people]
            i, j = k % 5 + 1, (k + 3) % 5 + 1
            lines.append(f"{a}\t{i}\t{b}\t{j}")
            used |= {(a, i), (b, j)}
            k += 1
    return "\n".join(lines) + "\n", sorted(used)


# (answer key, task, truth, expected outcome) for the quoted model answers
TRANSCRIPT_CASES = [
    ("refusal", "verification", True, "excluded_refusal"),
    ("verification_true_positive", "verification", True, "correct"),
    ("verification_false_positive", "verification", False, "incorrect"),
    ("gender_real_male", "gender", "male", "correct"),
    ("gender_real_female", "gender", "female", "correct"),
    ("gender_synthetic_female", "gender", "female", "correct"),
    ("age_within_range", "age", 52, "correct"),
    ("age_child_miss", "age", 12, "incorrect"),
    ("age_adult_miss", "age", 42, "incorrect"),
    ("bird_low_res", "classification", "bird", "excluded_low_res"),
    ("bird_as_airplane", "classification", "bird", "incorrect"),
]


def grade_answer(task: str, truth, text: str, judge_mode: str = "offline", judge_reply: str | None = None,
                 tmp_dir: Path | None = None):
    """Grade one primary answer through ``TrialRunner.grade``.

    In ``llm`` mode the judge call goes to a mock that answers ``judge_reply``.
    Returns ``(judge_response, verdict, outcome, error, mock)``.
    """
    from biojudge.gateway import Gateway, MockProvider, ProviderConfig
    from biojudge.protocol import CIFAR10_LABELS, AgeYears, ClassLabel, Gender, ImageRef, Protocol, SamePerson, Task, TrialSpec
    from biojudge.runner import RunConfig, TrialRunner

    t = Task(task)
    truth_obj = {Task.VERIFICATION: SamePerson, Task.GENDER: Gender, Task.AGE: AgeYears,
                 Task.CLASSIFICATION: ClassLabel}[t](truth)
    images = tuple(ImageRef(f"img{i}.jpg") for i in range(t.image_count))
    spec = TrialSpec("t-000001", t, images, truth_obj)
    labels = CIFAR10_LABELS if t is Task.CLASSIFICATION else None
    protocol = Protocol("transcripts", t, (spec,), labels)
    config = RunConfig(run_dir=tmp_dir or Path("."), judge_mode=judge_mode)
    mock = MockProvider() if judge_reply is None else MockProvider(default=judge_reply)
    gateway = Gateway(mock, ProviderConfig(), sleep=lambda s: None)
    runner = TrialRunner(protocol, config, gateway)
    return (*runner.grade(spec, text, judge_mode), mock)
