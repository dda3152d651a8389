from __future__ import annotations

import json
from collections import Counter
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from biojudge.errors import (
    EmptyProtocolError,
    MissingFilesError,
    ProtocolIntegrityError,
    ProtocolParseError,
)
from biojudge.protocol import (
    CIFAR10_LABELS,
    AgeYears,
    ClassLabel,
    Gender,
    ImageRef,
    Protocol,
    ProtocolWarning,
    SamePerson,
    Task,
    TrialSpec,
    decade_bucket,
    parse_label_manifest,
    parse_lfw_pairs,
    parse_pair_list,
    parse_utkface_dir,
    subsample,
    write_lfw_pairs,
)

from conftest import make_lfw_tree, synthetic_lfw


def _check_trial_invariants(protocol: Protocol) -> None:
    for t in protocol.trials:
        assert len(t.images) == t.task.image_count
        assert t.truth.task is t.task is protocol.task
    ids = [t.id for t in protocol.trials]
    assert len(ids) == len(set(ids))


# ---------------------------------------------------------------- LFW


def test_lfw_single_genuine_line(tmp_path):
    p = parse_lfw_pairs("1 1\nAaron_Peirsol 1 2\nAbel_Pacheco 1 Zydrunas_Ilgauskas 3\n", tmp_path, check_files=False)
    genuine, imposter = p.trials
    assert genuine.images[0].path == tmp_path / "Aaron_Peirsol" / "Aaron_Peirsol_0001.jpg"
    assert genuine.images[1].path == tmp_path / "Aaron_Peirsol" / "Aaron_Peirsol_0002.jpg"
    assert genuine.truth == SamePerson(True)
    assert imposter.truth == SamePerson(False)
    assert imposter.images[0].path.parent.name == "Abel_Pacheco"
    assert imposter.images[1].path.parent.name == "Zydrunas_Ilgauskas"
    assert imposter.images[1].path.name == "Zydrunas_Ilgauskas_0003.jpg"


def test_lfw_ten_folds(tmp_path):
    text, used = synthetic_lfw(10, 300)
    make_lfw_tree(tmp_path, used)
    p = parse_lfw_pairs(text, tmp_path)
    assert len(p) == 6000
    assert p.category_counts == {"genuine": 3000, "imposter": 3000}
    # order oracle: the file's line kinds in order
    kinds = [len(line.split()) == 3 for line in text.splitlines()[1:]]
    assert [t.truth.same for t in p.trials] == kinds
    _check_trial_invariants(p)


def test_lfw_single_count_header(tmp_path):
    p = parse_lfw_pairs("2\nA 1 2\nB 1 3\nA 1 B 1\nB 2 A 2\n", tmp_path, check_files=False)
    assert p.category_counts == {"genuine": 2, "imposter": 2}


def test_lfw_trial_ids_are_ordinals(tmp_path):
    p = parse_lfw_pairs("1 1\nA 1 2\nA 1 B 1\n", tmp_path, name="lfw", check_files=False)
    assert [t.id for t in p.trials] == ["lfw/000001", "lfw/000002"]


@pytest.mark.parametrize(
    "text, line",
    [
        ("1 1\nA 1\nA 1 B 1\n", 2),
        ("1 1\nA 1 2\nA 1 B x\n", 3),
        ("1 1\nA one 2\nA 1 B 1\n", 2),
        ("1 1\nA 1 2 3 4 5\nA 1 B 1\n", 2),
    ],
)
def test_lfw_malformed_line_reports_line_number(tmp_path, text, line):
    with pytest.raises(ProtocolParseError) as exc:
        parse_lfw_pairs(text, tmp_path, check_files=False)
    assert exc.value.line == line


def test_lfw_bad_header(tmp_path):
    with pytest.raises(ProtocolParseError):
        parse_lfw_pairs("ten folds\nA 1 2\n", tmp_path, check_files=False)


def test_lfw_header_total_mismatch(tmp_path):
    with pytest.raises(ProtocolIntegrityError):
        parse_lfw_pairs("1 2\nA 1 2\nA 1 B 1\n", tmp_path, check_files=False)


def test_lfw_missing_files_lists_all(tmp_path):
    make_lfw_tree(tmp_path, [("A", 1)])
    with pytest.raises(MissingFilesError) as exc:
        parse_lfw_pairs("1 1\nA 1 2\nA 1 B 7\n", tmp_path)
    missing = sorted(Path(m).name for m in exc.value.missing)
    assert missing == ["A_0002.jpg", "B_0007.jpg"]


_names = st.from_regex(r"[A-Z][a-z]{1,6}(_[A-Z][a-z]{1,6})?", fullmatch=True)


@st.composite
def verification_protocols(draw):
    per = draw(st.integers(1, 6))
    folds = draw(st.integers(1, 3))
    lines = [f"{folds} {per}"]
    for _ in range(folds):
        for _ in range(per):
            lines.append(f"{draw(_names)} {draw(st.integers(1, 9999))} {draw(st.integers(1, 9999))}")
        for _ in range(per):
            lines.append(f"{draw(_names)} {draw(st.integers(1, 9999))} {draw(_names)} {draw(st.integers(1, 9999))}")
    return folds, "\n".join(lines) + "\n"


@settings(max_examples=60, deadline=None)
@given(verification_protocols())
def test_lfw_roundtrip(case):
    folds, text = case
    root = Path("/data/lfw")
    p = parse_lfw_pairs(text, root, check_files=False)
    _check_trial_invariants(p)
    again = parse_lfw_pairs(write_lfw_pairs(p, folds), root, check_files=False)
    assert again == p


# ---------------------------------------------------------------- pair lists


def test_pair_list_labels(tmp_path):
    p = parse_pair_list("# comment\na.jpg,b.jpg,1\na.jpg,c.jpg,0\nx.jpg,y.jpg,genuine\nx.jpg,z.jpg,imposter\n",
                        tmp_path, name="agedb")
    assert [t.truth.same for t in p.trials] == [True, False, True, False]
    assert p.trials[0].images[0].path == tmp_path / "a.jpg"


def test_pair_list_unknown_label(tmp_path):
    with pytest.raises(ProtocolParseError) as exc:
        parse_pair_list("a.jpg,b.jpg,1\na.jpg,b.jpg,maybe\n", tmp_path)
    assert exc.value.line == 2


def test_pair_list_duplicate_warns_and_keeps(tmp_path):
    with pytest.warns(ProtocolWarning):
        p = parse_pair_list("a.jpg,b.jpg,1\na.jpg,b.jpg,1\n", tmp_path)
    assert len(p) == 2


def test_pair_list_700_rows_in_order(tmp_path):
    rows = [f"img{i}_a.jpg,img{i}_b.jpg,{i % 2}" for i in range(700)]
    text = "\n".join(rows) + "\n"
    p = parse_pair_list(text, tmp_path)
    assert len(p) == text.count("\n")  # independent line-count oracle
    assert [t.images[0].path.name for t in p.trials] == [r.split(",")[0] for r in rows]


# ---------------------------------------------------------------- UTKFace


def test_utkface_names():
    listing = ["52_1_0_20170117.jpg", "12_0_0_20170110.jpg", "readme.txt", "200_0_0_1.jpg"]
    p, skipped = parse_utkface_dir(listing, "/data/utk")
    assert [t.truth for t in p.trials] == [AgeYears(52), AgeYears(12)]
    assert skipped == ["readme.txt", "200_0_0_1.jpg"]
    assert p.task is Task.AGE


def test_utkface_empty():
    with pytest.raises(EmptyProtocolError):
        parse_utkface_dir(["notes.md"], "/data")


# ---------------------------------------------------------------- manifests


def test_gender_manifest_balanced():
    rows = [f"m{i}.jpg,male" for i in range(2700)] + [f"f{i}.jpg,female" for i in range(2700)]
    p = parse_label_manifest("\n".join(rows), Task.GENDER)
    assert len(p) == 5400
    assert p.category_counts == {"male": 2700, "female": 2700}


def test_cifar_manifest():
    p = parse_label_manifest("img1.png,frog\n", Task.CLASSIFICATION, CIFAR10_LABELS)
    assert p.trials[0].truth == ClassLabel("frog")
    assert p.label_set == CIFAR10_LABELS
    with pytest.raises(ProtocolParseError) as exc:
        parse_label_manifest("img1.png,frog\nimg2.png,zebra\n", Task.CLASSIFICATION, CIFAR10_LABELS)
    assert "img2.png" in str(exc.value)


def test_gender_manifest_rejects_other_labels():
    with pytest.raises(ProtocolParseError):
        parse_label_manifest("a.jpg,unknown\n", Task.GENDER)


def test_age_manifest():
    p = parse_label_manifest("a.jpg,52\nb.jpg,7\n", Task.AGE)
    assert [t.truth.years for t in p.trials] == [52, 7]
    with pytest.raises(ProtocolParseError):
        parse_label_manifest("a.jpg,151\n", Task.AGE)


# ---------------------------------------------------------------- types


def test_trial_invariants_enforced():
    img = ImageRef(Path("a.jpg"))
    with pytest.raises(ProtocolIntegrityError):
        TrialSpec("x", Task.VERIFICATION, (img,), SamePerson(True))
    with pytest.raises(ProtocolIntegrityError):
        TrialSpec("x", Task.GENDER, (img,), AgeYears(3))
    with pytest.raises(ValueError):
        AgeYears(151)
    with pytest.raises(ValueError):
        Gender("other")


def test_duplicate_ids_rejected():
    t = TrialSpec("p/1", Task.AGE, (ImageRef(Path("a.jpg")),), AgeYears(3))
    with pytest.raises(ProtocolIntegrityError):
        Protocol("p", Task.AGE, (t, t))


def test_image_digest_stable(tmp_path):
    f = tmp_path / "x.jpg"
    f.write_bytes(b"abc")
    ref = ImageRef(f)
    assert ref.content_digest == ref.content_digest == (
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    )


def test_protocol_json_roundtrip(tmp_path):
    p = parse_label_manifest("a.png,cat\nb.png,dog\n", Task.CLASSIFICATION, CIFAR10_LABELS, tmp_path, "cifar")
    data = json.loads(p.to_json())
    assert sorted(data) == ["label_set", "name", "task", "trials"]
    assert Protocol.from_json(p.to_json()) == p
    assert Protocol.from_json(p.to_json()).digest() == p.digest()


# ---------------------------------------------------------------- subsample


def _lfw(tmp_path, folds=10, per=300):
    text, _ = synthetic_lfw(folds, per)
    return parse_lfw_pairs(text, tmp_path, check_files=False)


def test_subsample_identity(tmp_path):
    p = _lfw(tmp_path, 1, 5)
    assert subsample(p, len(p), seed=1) == p


def test_subsample_deterministic(tmp_path):
    p = _lfw(tmp_path)
    assert subsample(p, 100, seed=7) == subsample(p, 100, seed=7)
    assert subsample(p, 100, seed=7) != subsample(p, 100, seed=8)


def test_subsample_stratified_lfw(tmp_path):
    s = subsample(_lfw(tmp_path), 100, seed=3, stratify=True)
    assert Counter(t.truth.category for t in s.trials) == {"genuine": 50, "imposter": 50}


def test_subsample_too_many(tmp_path):
    with pytest.raises(ValueError):
        subsample(_lfw(tmp_path, 1, 2), 5, seed=0)


def test_age_decades():
    assert [decade_bucket(a) for a in (0, 9, 10, 52, 79, 80, 101)] == [
        "0-9", "0-9", "10-19", "50-59", "70-79", "80+", "80+"
    ]


@settings(max_examples=80, deadline=None)
@given(
    ages=st.lists(st.integers(0, 120), min_size=1, max_size=200),
    frac=st.floats(0.01, 1.0),
    seed=st.integers(0, 2**63 - 1),
)
def test_subsample_stratified_proportions(ages, frac, seed):
    rows = "\n".join(f"f{i}.jpg,{a}" for i, a in enumerate(ages))
    p = parse_label_manifest(rows, Task.AGE)
    n = max(1, int(len(p) * frac))
    s = subsample(p, n, seed, stratify=True)
    assert len(s) == n
    full = Counter(t.truth.category for t in p.trials)
    got = Counter(t.truth.category for t in s.trials)
    for cat, size in full.items():
        assert abs(got[cat] - n * size / len(p)) < 1 + 1e-9
    # original relative order
    order = {t.id: i for i, t in enumerate(p.trials)}
    assert [order[t.id] for t in s.trials] == sorted(order[t.id] for t in s.trials)
    assert s == subsample(p, n, seed, stratify=True)
