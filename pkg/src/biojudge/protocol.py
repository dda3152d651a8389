"""Dataset layouts -> task-typed trial protocols.

Every parser returns a :class:`Protocol`, an ordered, validated list of
:class:`TrialSpec`. Trial ids are ``<protocol-name>/<ordinal>`` so they stay
stable across reruns and never depend on file paths.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import random
import re
import threading
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

from biojudge.errors import (
    EmptyProtocolError,
    MissingFilesError,
    ProtocolIntegrityError,
    ProtocolParseError,
)

log = logging.getLogger(__name__)

MAX_AGE = 150

CIFAR10_LABELS = (
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
)


class Task(str, enum.Enum):
    VERIFICATION = "verification"
    GENDER = "gender"
    AGE = "age"
    CLASSIFICATION = "classification"

    @property
    def image_count(self) -> int:
        return 2 if self is Task.VERIFICATION else 1


class ProtocolWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# images

_digest_lock = threading.Lock()
_digest_memo: dict[tuple[str, int, int], str] = {}


def file_digest(path: str | os.PathLike) -> str:
    """SHA-256 hex digest of a file, memoized on (path, mtime, size)."""
    st = os.stat(path)
    memo_key = (os.fspath(path), st.st_mtime_ns, st.st_size)
    with _digest_lock:
        hit = _digest_memo.get(memo_key)
    if hit is not None:
        return hit
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    digest = h.hexdigest()
    with _digest_lock:
        _digest_memo[memo_key] = digest
    return digest


@dataclass(frozen=True)
class ImageRef:
    path: Path

    def __post_init__(self) -> None:
        if not os.fspath(self.path):
            raise ValueError("image path must be non-empty")
        if not isinstance(self.path, Path):
            object.__setattr__(self, "path", Path(self.path))

    @property
    def content_digest(self) -> str:
        return file_digest(self.path)

    def read_bytes(self) -> bytes:
        return self.path.read_bytes()

    def exists(self) -> bool:
        return self.path.is_file()


# --------------------------------------------------------------------------
# ground truth


@dataclass(frozen=True)
class SamePerson:
    same: bool
    task = Task.VERIFICATION

    @property
    def category(self) -> str:
        return "genuine" if self.same else "imposter"

    def to_json(self) -> bool:
        return self.same

    def render(self) -> str:
        return "same person" if self.same else "different people"


@dataclass(frozen=True)
class Gender:
    label: str
    task = Task.GENDER

    def __post_init__(self) -> None:
        if self.label not in ("male", "female"):
            raise ValueError(f"gender must be 'male' or 'female', got {self.label!r}")

    @property
    def category(self) -> str:
        return self.label

    def to_json(self) -> str:
        return self.label

    def render(self) -> str:
        return self.label


@dataclass(frozen=True)
class AgeYears:
    years: int
    task = Task.AGE

    def __post_init__(self) -> None:
        if isinstance(self.years, bool) or not isinstance(self.years, int):
            raise ValueError(f"age must be an integer, got {self.years!r}")
        if not 0 <= self.years <= MAX_AGE:
            raise ValueError(f"age must be within 0..{MAX_AGE}, got {self.years}")

    @property
    def category(self) -> str:
        return decade_bucket(self.years)

    def to_json(self) -> int:
        return self.years

    def render(self) -> str:
        return str(self.years)


@dataclass(frozen=True)
class ClassLabel:
    label: str
    task = Task.CLASSIFICATION

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("class label must be non-empty")

    @property
    def category(self) -> str:
        return self.label

    def to_json(self) -> str:
        return self.label

    def render(self) -> str:
        return self.label


GroundTruth = Union[SamePerson, Gender, AgeYears, ClassLabel]


def decade_bucket(years: int) -> str:
    if years >= 80:
        return "80+"
    lo = years // 10 * 10
    return f"{lo}-{lo + 9}"


def truth_from_json(task: Task, value) -> GroundTruth:
    if task is Task.VERIFICATION:
        if not isinstance(value, bool):
            raise ValueError(f"verification truth must be a boolean, got {value!r}")
        return SamePerson(value)
    if task is Task.GENDER:
        return Gender(value)
    if task is Task.AGE:
        return AgeYears(value)
    return ClassLabel(value)


# --------------------------------------------------------------------------
# trials and protocols


@dataclass(frozen=True)
class TrialSpec:
    id: str
    task: Task
    images: tuple[ImageRef, ...]
    truth: GroundTruth

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        if len(self.images) != self.task.image_count:
            raise ProtocolIntegrityError(
                f"trial {self.id}: {self.task.value} needs {self.task.image_count} image(s), "
                f"got {len(self.images)}"
            )
        if self.truth.task is not self.task:
            raise ProtocolIntegrityError(
                f"trial {self.id}: truth {type(self.truth).__name__} does not match task {self.task.value}"
            )


@dataclass(frozen=True)
class Protocol:
    name: str
    task: Task
    trials: tuple[TrialSpec, ...]
    label_set: tuple[str, ...] | None = None
    category_counts: dict[str, int] = field(init=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "trials", tuple(self.trials))
        if self.label_set is not None:
            object.__setattr__(self, "label_set", tuple(self.label_set))
        if self.task is Task.CLASSIFICATION and not self.label_set:
            raise ProtocolIntegrityError("classification protocol needs a label set")
        seen: set[str] = set()
        for t in self.trials:
            if t.id in seen:
                raise ProtocolIntegrityError(f"duplicate trial id {t.id}")
            seen.add(t.id)
            if t.task is not self.task:
                raise ProtocolIntegrityError(f"trial {t.id} has task {t.task.value}, protocol is {self.task.value}")
            if self.label_set is not None and isinstance(t.truth, ClassLabel) and t.truth.label not in self.label_set:
                raise ProtocolIntegrityError(f"trial {t.id}: label {t.truth.label!r} not in label set")
        counts = Counter(t.truth.category for t in self.trials)
        if self.task is Task.VERIFICATION:
            counts.setdefault("genuine", 0)
            counts.setdefault("imposter", 0)
        object.__setattr__(self, "category_counts", dict(counts))

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def by_id(self) -> dict[str, TrialSpec]:
        return {t.id: t for t in self.trials}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "task": self.task.value,
            "label_set": list(self.label_set) if self.label_set is not None else None,
            "trials": [
                {
                    "id": t.id,
                    "images": [os.fspath(i.path) for i in t.images],
                    "truth": t.truth.to_json(),
                }
                for t in self.trials
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False, indent=1) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> Protocol:
        task = Task(data["task"])
        trials = [
            TrialSpec(
                id=row["id"],
                task=task,
                images=tuple(ImageRef(Path(p)) for p in row["images"]),
                truth=truth_from_json(task, row["truth"]),
            )
            for row in data["trials"]
        ]
        label_set = data.get("label_set")
        return cls(data["name"], task, tuple(trials), tuple(label_set) if label_set is not None else None)

    @classmethod
    def from_json(cls, text: str) -> Protocol:
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        """Content identity used by the run ledger header."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def trial_id(name: str, ordinal: int, total: int) -> str:
    width = max(6, len(str(total)))
    return f"{name}/{ordinal:0{width}d}"


def _build(name: str, task: Task, rows: Sequence[tuple[tuple[ImageRef, ...], GroundTruth]],
           label_set: Sequence[str] | None = None) -> Protocol:
    n = len(rows)
    trials = tuple(
        TrialSpec(trial_id(name, i, n), task, images, truth) for i, (images, truth) in enumerate(rows, start=1)
    )
    return Protocol(name, task, trials, tuple(label_set) if label_set is not None else None)


def _data_lines(text: str) -> Iterable[tuple[int, str]]:
    """Yield (1-based line number, stripped line), skipping blanks and # comments."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield lineno, line


# --------------------------------------------------------------------------
# LFW pairs.txt


def lfw_image_path(image_root: str | os.PathLike, name: str, index: int) -> Path:
    return Path(image_root) / name / f"{name}_{index:04d}.jpg"


def _lfw_index(token: str, lineno: int) -> int:
    if not token.isdigit():
        raise ProtocolParseError(f"non-numeric image index {token!r}", lineno)
    return int(token)


def parse_lfw_pairs(pairs_text: str, image_root: str | os.PathLike, name: str = "lfw",
                    check_files: bool = True) -> Protocol:
    """Parse an LFW-style ``pairs.txt``.

    The header is ``<folds> <pairs-per-fold>`` (or a single per-set count);
    each fold holds that many genuine lines ``name i j`` and as many imposter
    lines ``name1 i name2 j``.
    """
    lines = iter(_data_lines(pairs_text))
    try:
        header_no, header = next(lines)
    except StopIteration:
        raise ProtocolParseError("empty pairs file") from None
    head = header.split()
    if not 1 <= len(head) <= 2 or not all(tok.isdigit() for tok in head):
        raise ProtocolParseError(f"bad header {header!r}, expected '<folds> <pairs-per-fold>'", header_no)
    folds, per_fold = (1, int(head[0])) if len(head) == 1 else (int(head[0]), int(head[1]))

    rows = []
    for lineno, line in lines:
        tok = line.split()
        if len(tok) == 3:
            person, i, j = tok[0], _lfw_index(tok[1], lineno), _lfw_index(tok[2], lineno)
            images = (ImageRef(lfw_image_path(image_root, person, i)), ImageRef(lfw_image_path(image_root, person, j)))
            rows.append((images, SamePerson(True)))
        elif len(tok) == 4:
            a, i, b, j = tok[0], _lfw_index(tok[1], lineno), tok[2], _lfw_index(tok[3], lineno)
            images = (ImageRef(lfw_image_path(image_root, a, i)), ImageRef(lfw_image_path(image_root, b, j)))
            rows.append((images, SamePerson(False)))
        else:
            raise ProtocolParseError(f"expected 3 or 4 tokens, got {len(tok)}", lineno)

    genuine = sum(1 for _, truth in rows if truth.same)
    imposter = len(rows) - genuine
    expected = folds * per_fold
    if genuine != expected or imposter != expected:
        raise ProtocolIntegrityError(
            f"header declares {folds}x{per_fold} genuine and imposter pairs "
            f"({expected} each), file has {genuine} genuine and {imposter} imposter"
        )
    if check_files:
        _check_files(img for images, _ in rows for img in images)
    return _build(name, Task.VERIFICATION, rows)


def _check_files(images: Iterable[ImageRef]) -> None:
    missing: list[str] = []
    seen: set[Path] = set()
    for img in images:
        if img.path in seen:
            continue
        seen.add(img.path)
        if not img.exists():
            missing.append(os.fspath(img.path))
    if missing:
        raise MissingFilesError(missing)


def _lfw_parts(path: Path) -> tuple[str, int]:
    m = re.fullmatch(r"(.+)_(\d{4,})\.jpg", path.name)
    if m is None or m.group(1) != path.parent.name:
        raise ValueError(f"{path} does not follow the <name>/<name>_NNNN.jpg layout")
    return m.group(1), int(m.group(2))


def write_lfw_pairs(protocol: Protocol, folds: int = 1) -> str:
    """Serialize a verification protocol back to ``pairs.txt`` form.

    Trials are written in protocol order, so the protocol must already be
    arranged as ``folds`` blocks of genuine-then-imposter pairs.
    """
    if protocol.task is not Task.VERIFICATION:
        raise ValueError("only verification protocols have a pairs.txt form")
    genuine = protocol.category_counts["genuine"]
    imposter = protocol.category_counts["imposter"]
    if genuine != imposter or genuine % folds:
        raise ValueError(f"cannot split {genuine} genuine / {imposter} imposter pairs into {folds} folds")
    out = [f"{folds}\t{genuine // folds}"]
    for t in protocol.trials:
        (a, i), (b, j) = (_lfw_parts(img.path) for img in t.images)
        if t.truth.same:
            if a != b:
                raise ValueError(f"trial {t.id}: genuine pair spans identities {a} and {b}")
            out.append(f"{a}\t{i}\t{j}")
        else:
            out.append(f"{a}\t{i}\t{b}\t{j}")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# generic CSV carriers

_PAIR_LABELS = {"1": True, "genuine": True, "0": False, "imposter": False}


def _csv_fields(line: str, expected: int, lineno: int) -> list[str]:
    fields = [f.strip() for f in line.split(",")]
    if len(fields) != expected:
        raise ProtocolParseError(f"expected {expected} comma-separated fields, got {len(fields)}", lineno)
    if any(not f for f in fields):
        raise ProtocolParseError("empty field", lineno)
    return fields


def parse_pair_list(csv_text: str, image_root: str | os.PathLike, name: str = "pairs") -> Protocol:
    """Rows ``pathA,pathB,label`` with label in {1, 0, genuine, imposter}."""
    rows = []
    seen: set[tuple[str, str, bool]] = set()
    root = Path(image_root)
    for lineno, line in _data_lines(csv_text):
        a, b, label = _csv_fields(line, 3, lineno)
        same = _PAIR_LABELS.get(label.lower())
        if same is None:
            raise ProtocolParseError(f"unknown pair label {label!r}", lineno)
        if (a, b, same) in seen:
            warnings.warn(f"line {lineno}: duplicate pair row {a},{b},{label}", ProtocolWarning, stacklevel=2)
        seen.add((a, b, same))
        rows.append(((ImageRef(root / a), ImageRef(root / b)), SamePerson(same)))
    if not rows:
        raise EmptyProtocolError("pair list contains no rows")
    return _build(name, Task.VERIFICATION, rows)


_UTK_NAME = re.compile(r"(\d{1,3})_([01])_(\d+)_(\d+)\.jpg")


def parse_utkface_dir(dir_listing: Sequence[str], image_root: str | os.PathLike,
                      name: str = "utkface") -> tuple[Protocol, list[str]]:
    """Age protocol from ``[age]_[gender]_[race]_[timestamp].jpg`` names.

    Returns the protocol and the list of skipped filenames.
    """
    root = Path(image_root)
    rows = []
    skipped: list[str] = []
    for fname in dir_listing:
        m = _UTK_NAME.fullmatch(fname)
        if m is None or int(m.group(1)) > MAX_AGE:
            skipped.append(fname)
            continue
        rows.append(((ImageRef(root / fname),), AgeYears(int(m.group(1)))))
    if skipped:
        log.warning("skipped %d file(s) not matching the UTKFace name grammar", len(skipped))
    if not rows:
        raise EmptyProtocolError(f"no parseable UTKFace filenames among {len(dir_listing)} entries")
    return _build(name, Task.AGE, rows), skipped


def parse_label_manifest(csv_text: str, task: Task, label_set: Sequence[str] | None = None,
                         image_root: str | os.PathLike = ".", name: str | None = None) -> Protocol:
    """Rows ``path,label`` for single-image tasks (gender, age, classification)."""
    task = Task(task)
    if task is Task.VERIFICATION:
        raise ValueError("verification protocols are pair lists, use parse_pair_list")
    if task is Task.CLASSIFICATION and not label_set:
        raise ValueError("classification manifests need a label set")
    root = Path(image_root)
    rows = []
    for lineno, line in _data_lines(csv_text):
        path, label = _csv_fields(line, 2, lineno)
        try:
            if task is Task.GENDER:
                truth: GroundTruth = Gender(label.lower())
            elif task is Task.AGE:
                if not label.isdigit():
                    raise ValueError(f"age {label!r} is not a non-negative integer")
                truth = AgeYears(int(label))
            else:
                if label not in label_set:
                    raise ValueError(f"label {label!r} not in label set")
                truth = ClassLabel(label)
        except ValueError as exc:
            raise ProtocolParseError(f"row {path!r}: {exc}", lineno) from None
        rows.append(((ImageRef(root / path),), truth))
    if not rows:
        raise EmptyProtocolError("manifest contains no rows")
    return _build(name or task.value, task, rows, label_set if task is Task.CLASSIFICATION else None)


# --------------------------------------------------------------------------
# subsampling


def _allocate(sizes: dict[str, int], n: int) -> dict[str, int]:
    """Largest-remainder apportionment of ``n`` over strata of the given sizes."""
    total = sum(sizes.values())
    quotas = {k: n * s / total for k, s in sizes.items()}
    alloc = {k: min(int(q), sizes[k]) for k, q in quotas.items()}
    # remainder order: biggest fractional part first, ties by stratum order
    order = sorted(sizes, key=lambda k: -(quotas[k] - int(quotas[k])))
    short = n - sum(alloc.values())
    for k in order:
        if short == 0:
            break
        if alloc[k] < sizes[k]:
            alloc[k] += 1
            short -= 1
    return alloc


def subsample(protocol: Protocol, n: int, seed: int, stratify: bool = False) -> Protocol:
    """Deterministic subset of ``n`` trials, kept in original relative order.

    With ``stratify`` each truth category (genuine/imposter, gender, class,
    or age decade) keeps its share to within one trial.
    """
    total = len(protocol.trials)
    if n <= 0:
        raise ValueError("n must be positive")
    if n > total:
        raise ValueError(f"cannot sample {n} trials from a protocol of {total}")
    if n == total:
        return protocol
    rng = random.Random(seed)
    if stratify:
        strata: dict[str, list[int]] = {}
        for idx, t in enumerate(protocol.trials):
            strata.setdefault(t.truth.category, []).append(idx)
        alloc = _allocate({k: len(v) for k, v in strata.items()}, n)
        picked = [i for k, members in strata.items() for i in rng.sample(members, alloc[k])]
    else:
        picked = rng.sample(range(total), n)
    trials = tuple(protocol.trials[i] for i in sorted(picked))
    return Protocol(protocol.name, protocol.task, trials, protocol.label_set)
