"""Run engine: config, append-only ledger, plan / execute / regrade / report.

Run directory layout::

    <run_dir>/
      ledger.jsonl               header line + one record per trial
      ledger.regrade-<mode>.jsonl  re-graded copies (never rewrites history)
      protocol.json              the protocol the ledger refers to
      reports/<protocol>.<fmt>
      cache/                     response cache unless overridden
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

from biojudge import grading
from biojudge.errors import AuthError, ContractError, LedgerError, ProviderError
from biojudge.gateway import (
    ROUTES,
    ChatRequest,
    Decoding,
    Gateway,
    HttpProvider,
    ImagePart,
    MockProvider,
    ProviderConfig,
    ResponseCache,
    TextPart,
)
from biojudge.grading import GradingRules, Outcome, TrialRecord, Verdict
from biojudge.metrics import MetricsReport, aggregate
from biojudge.prompts import PromptTemplate, Stage, load_templates, render_judge, render_primary, templates_to_json
from biojudge.protocol import (
    CIFAR10_LABELS,
    Protocol,
    Task,
    TrialSpec,
    parse_label_manifest,
    parse_lfw_pairs,
    parse_pair_list,
    parse_utkface_dir,
    subsample,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

JUDGE_MODES = ("llm", "offline")
LEDGER_NAME = "ledger.jsonl"
LEDGER_VERSION = 1


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ProtocolSource:
    name: str
    parser: str
    source: str
    image_root: str = "."
    task: str | None = None
    label_set: tuple[str, ...] | None = None
    subsample_n: int | None = None
    stratify: bool = False
    check_files: bool = True

    def load(self, seed: int = 0) -> Protocol:
        protocol = load_protocol(self)
        if self.subsample_n is not None and self.subsample_n < len(protocol):
            protocol = subsample(protocol, self.subsample_n, seed, self.stratify)
        return protocol


PARSERS = ("lfw_pairs", "pair_list", "utkface_dir", "label_manifest", "protocol_json")


def load_protocol(src: ProtocolSource) -> Protocol:
    if src.parser == "lfw_pairs":
        return parse_lfw_pairs(_read(src.source), src.image_root, src.name, check_files=src.check_files)
    if src.parser == "pair_list":
        return parse_pair_list(_read(src.source), src.image_root, src.name)
    if src.parser == "utkface_dir":
        listing = sorted(p.name for p in Path(src.source).iterdir() if p.is_file())
        protocol, skipped = parse_utkface_dir(listing, src.source, src.name)
        for fname in skipped:
            log.info("skipped %s", fname)
        return protocol
    if src.parser == "label_manifest":
        if src.task is None:
            raise ContractError("label_manifest protocols need a task")
        return parse_label_manifest(_read(src.source), Task(src.task), src.label_set, src.image_root, src.name)
    if src.parser == "protocol_json":
        return Protocol.from_json(_read(src.source))
    raise ContractError(f"unknown parser {src.parser!r}; expected one of {', '.join(PARSERS)}")


def _read(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


@dataclass(frozen=True)
class RunConfig:
    run_dir: Path
    protocols: Mapping[str, ProtocolSource] = field(default_factory=dict)
    model_id: str = "gpt-4o"
    decoding: Decoding = Decoding()
    provider_kind: str = "http"
    provider: ProviderConfig = ProviderConfig()
    mock_script: str | None = None
    judge_mode: str = "llm"
    templates_path: str | None = None
    parallelism: int = 1
    cache_dir: Path | None = None
    seed: int = 0
    rules: GradingRules = GradingRules()
    baselines: str | None = None

    def __post_init__(self) -> None:
        if self.parallelism < 1:
            raise ContractError("parallelism must be >= 1")
        if self.judge_mode not in JUDGE_MODES:
            raise ContractError(f"judge mode must be one of {JUDGE_MODES}, got {self.judge_mode!r}")

    @property
    def effective_cache_dir(self) -> Path:
        return self.cache_dir or self.run_dir / "cache"

    def protocol_run_dir(self, name: str) -> Path:
        return self.run_dir / name

    def templates(self) -> dict[tuple[Task, Stage], PromptTemplate]:
        return load_templates(self.templates_path)

    def digest(self) -> str:
        """Identity of every setting that can change a trial's outcome."""
        payload = {
            "model_id": self.model_id,
            "temperature": self.decoding.temperature,
            "max_tokens": self.decoding.max_tokens,
            "judge_mode": self.judge_mode,
            "templates": json.loads(templates_to_json(self.templates())),
            "rules": self.rules.to_dict(),
        }
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def check_templates(self, task: Task) -> None:
        templates = self.templates()
        if (task, Stage.PRIMARY) not in templates:
            raise ContractError(f"no primary template for {task.value}")
        if self.judge_mode == "llm" and (task, Stage.JUDGE) not in templates:
            raise ContractError(f"judge mode llm needs a judge template for {task.value}")


def _resolve(base: Path, value: str | None) -> str | None:
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def load_config(path: str | os.PathLike, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read a TOML run config; relative paths resolve against the file's directory.

    Top-level keys: ``run_dir``, ``judge_mode``, ``parallelism``, ``seed``,
    ``cache_dir``, ``templates``, ``baselines``. Tables: ``[model]``
    (``id``, ``temperature``, ``max_tokens``), ``[provider]`` (``kind`` =
    http|mock, ``endpoint_url``, ``credential_env``, ``max_retries``,
    ``backoff_base_ms``, ``requests_per_minute``, ``timeout_s``,
    ``max_image_bytes``, ``script``), ``[grading]`` (``refusal_patterns``,
    ``denial_patterns``, ``decade_table``) and ``[protocols.<name>]``
    (``parser``, ``source``, ``image_root``, ``task``, ``label_set``,
    ``subsample``, ``stratify``, ``check_files``).
    """
    path = Path(path)
    data = tomllib.loads(path.read_text(encoding="utf-8"))
    base = path.parent
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    protocols = {}
    for name, p in (data.get("protocols") or {}).items():
        label_set = p.get("label_set")
        if label_set == "cifar10":
            label_set = CIFAR10_LABELS
        protocols[name] = ProtocolSource(
            name=name,
            parser=p["parser"],
            source=_resolve(base, p["source"]),
            image_root=_resolve(base, p.get("image_root", ".")),
            task=p.get("task"),
            label_set=tuple(label_set) if label_set else None,
            subsample_n=p.get("subsample"),
            stratify=bool(p.get("stratify", False)),
            check_files=bool(p.get("check_files", True)),
        )

    model = data.get("model") or {}
    prov = data.get("provider") or {}
    grade = data.get("grading") or {}
    rules = GradingRules(
        refusal_patterns=tuple(grade.get("refusal_patterns", grading.DEFAULT_REFUSAL_PATTERNS)),
        denial_patterns=tuple(grade.get("denial_patterns", grading.DEFAULT_DENIAL_PATTERNS)),
        decade_table={
            k: tuple(v) for k, v in grade.get("decade_table", grading.DEFAULT_DECADE_TABLE).items()
        },
    )
    provider_fields = {k: prov[k] for k in (
        "endpoint_url", "credential_env", "max_retries", "backoff_base_ms", "requests_per_minute",
        "timeout_s", "max_image_bytes") if k in prov}

    run_dir = Path(overrides.get("run_dir") or _resolve(base, data.get("run_dir", "runs")))
    cache_dir = overrides.get("cache_dir") or _resolve(base, data.get("cache_dir"))
    return RunConfig(
        run_dir=run_dir,
        protocols=protocols,
        model_id=overrides.get("model_id") or model.get("id", "gpt-4o"),
        decoding=Decoding(float(model.get("temperature", 0.0)), int(model.get("max_tokens", 512))),
        provider_kind=prov.get("kind", "http"),
        provider=ProviderConfig(**provider_fields),
        mock_script=_resolve(base, prov.get("script")),
        judge_mode=overrides.get("judge_mode") or data.get("judge_mode", "llm"),
        templates_path=_resolve(base, data.get("templates")),
        parallelism=int(overrides.get("parallelism") or data.get("parallelism", 1)),
        cache_dir=Path(cache_dir) if cache_dir else None,
        seed=int(data.get("seed", 0)),
        rules=rules,
        baselines=_resolve(base, data.get("baselines")),
    )


def load_mock_script(path: str) -> MockProvider:
    """Mock script file: ``{"route": "cache_key"|"images", "default": text|null,
    "responses": {key: text|[items]}}``."""
    data = json.loads(_read(path))
    kwargs = {}
    if data.get("default") is not None:
        kwargs["default"] = data["default"]
    route = data.get("route", "cache_key")
    if route not in ROUTES:
        raise ContractError(f"unknown mock route {route!r}; expected one of {', '.join(ROUTES)}")
    return MockProvider(data.get("responses") or {}, route=ROUTES[route], **kwargs)


def build_gateway(config: RunConfig) -> Gateway:
    if config.provider_kind == "mock":
        provider = load_mock_script(config.mock_script) if config.mock_script else MockProvider(default="")
    elif config.provider_kind == "http":
        provider = HttpProvider(config.provider)
    else:
        raise ContractError(f"unknown provider kind {config.provider_kind!r}")
    return Gateway(provider, config.provider, cache=ResponseCache(config.effective_cache_dir))


# --------------------------------------------------------------------------
# ledger


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="milliseconds")


class RunLedger:
    """Append-only JSONL file: a header line, then one record per trial.

    Each append is a single write of one complete line followed by fsync;
    on any write error the file is truncated back to its previous size, so
    the ledger always ends on a record boundary. A torn trailing line left
    by a hard kill is dropped on load.
    """

    def __init__(self, path: str | os.PathLike) -> None:
        self.path = Path(path)
        self.header: dict | None = None
        self.records: dict[str, TrialRecord] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        raw = self.path.read_bytes()
        lines = raw.split(b"\n")
        complete, tail = lines[:-1], lines[-1]
        if tail:
            log.warning("dropping torn trailing ledger line (%d bytes)", len(tail))
            self._truncate(len(raw) - len(tail))
        for n, line in enumerate(complete, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError:
                raise LedgerError(f"{self.path}:{n}: corrupt ledger line") from None
            if obj.get("type") == "header":
                if self.header is not None:
                    raise LedgerError(f"{self.path}:{n}: second header")
                self.header = obj
            else:
                rec = TrialRecord.from_dict(obj["record"])
                if rec.spec_id in self.records:
                    raise LedgerError(f"{self.path}:{n}: duplicate record for {rec.spec_id}")
                self.records[rec.spec_id] = rec

    def _truncate(self, size: int) -> None:
        with open(self.path, "r+b") as fh:
            fh.truncate(size)

    def _append_line(self, obj: dict) -> None:
        data = (json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")) + "\n").encode("utf-8")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            before = os.fstat(fd).st_size
            try:
                written = os.write(fd, data)
                if written != len(data):
                    raise OSError(f"short write ({written} of {len(data)} bytes)")
                os.fsync(fd)
            except OSError as exc:
                os.ftruncate(fd, before)
                raise LedgerError(f"ledger append failed, ledger left at {before} bytes: {exc}") from exc
        finally:
            os.close(fd)

    def start(self, config_digest: str, protocol_digest: str, protocol_name: str) -> None:
        header = {
            "type": "header",
            "version": LEDGER_VERSION,
            "config_digest": config_digest,
            "protocol_digest": protocol_digest,
            "protocol": protocol_name,
        }
        with self._lock:
            if self.header is None:
                self._append_line(header)
                self.header = header

    def append(self, record: TrialRecord) -> None:
        with self._lock:
            if record.spec_id in self.records:
                raise LedgerError(f"record for {record.spec_id} already in ledger")
            self._append_line({"type": "record", "record": record.to_dict()})
            self.records[record.spec_id] = record

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TrialRecord]:
        return iter(self.records.values())


def open_ledger(run_dir: Path, protocol: Protocol, config: RunConfig, force_new: bool = False) -> RunLedger:
    path = run_dir / LEDGER_NAME
    ledger = RunLedger(path)
    if ledger.header is not None or ledger.records:
        mismatch = []
        header = ledger.header or {}
        if header.get("protocol_digest") != protocol.digest():
            mismatch.append("protocol")
        if header.get("config_digest") != config.digest():
            mismatch.append("config")
        if mismatch:
            if not force_new:
                raise LedgerError(
                    f"{path} was written for a different {' and '.join(mismatch)}; "
                    "refusing to resume (pass --force-new to start a fresh ledger)"
                )
            n = 1
            while path.with_name(f"{LEDGER_NAME}.{n}.bak").exists():
                n += 1
            path.rename(path.with_name(f"{LEDGER_NAME}.{n}.bak"))
            log.warning("moved old ledger to %s", path.with_name(f"{LEDGER_NAME}.{n}.bak"))
            ledger = RunLedger(path)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "protocol.json").write_text(protocol.to_json(), encoding="utf-8")
    ledger.start(config.digest(), protocol.digest(), protocol.name)
    return ledger


# --------------------------------------------------------------------------
# plan / execute


def plan(protocol: Protocol, ledger: RunLedger) -> list[TrialSpec]:
    header = ledger.header
    if header is not None and header.get("protocol_digest") != protocol.digest():
        raise LedgerError("ledger belongs to a different protocol; refusing to resume")
    return [t for t in protocol.trials if t.id not in ledger.records]


@dataclass
class TrialRunner:
    """Runs the two-stage pipeline for single trials."""

    protocol: Protocol
    config: RunConfig
    gateway: Gateway
    templates: Mapping[tuple[Task, Stage], PromptTemplate] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.templates:
            self.templates = self.config.templates()

    def primary_request(self, spec: TrialSpec) -> tuple[ChatRequest, str]:
        prompt = render_primary(self.templates[(spec.task, Stage.PRIMARY)], spec, self.protocol.label_set)
        parts = [TextPart(prompt.text), *(ImagePart.from_path(img.path) for img in spec.images)]
        return ChatRequest(self.config.model_id, tuple(parts), self.config.decoding), prompt.template_id

    def judge_request(self, spec: TrialSpec, primary_text: str) -> ChatRequest:
        prompt = render_judge(self.templates[(spec.task, Stage.JUDGE)], spec.truth, primary_text,
                              self.protocol.label_set)
        return ChatRequest(self.config.model_id, (TextPart(prompt.text),), self.config.decoding)

    def grade(self, spec: TrialSpec, primary_text: str, judge_mode: str,
              ) -> tuple[str | None, Verdict, Outcome, str | None]:
        """(judge_response, verdict, outcome, error) for a known primary answer."""
        rules = self.config.rules
        if not primary_text.strip():
            return None, grading.UNPARSEABLE, Outcome.PROVIDER_FAILURE, "empty primary response"
        refusal = grading.refusal_verdict(primary_text, rules.refusal_patterns)
        if refusal is not None:
            return None, refusal, Outcome.EXCLUDED_REFUSAL, None
        if judge_mode == "offline":
            verdict = grading.offline_verdict(spec.task, primary_text, spec.truth, self.protocol.label_set, rules)
            return None, verdict, grading.decide_outcome(spec.task, spec.truth, False, verdict), None
        try:
            reply = self.gateway.send_cached(self.judge_request(spec, primary_text))
        except AuthError:
            raise
        except ProviderError as exc:
            return None, grading.UNPARSEABLE, Outcome.PROVIDER_FAILURE, f"judge call failed: {exc}"
        if not reply.text.strip():
            return reply.text, grading.UNPARSEABLE, Outcome.PROVIDER_FAILURE, "empty judge response"
        verdict = grading.judge_reply_verdict(spec.task, reply.text, self.protocol.label_set, rules)
        return reply.text, verdict, grading.decide_outcome(spec.task, spec.truth, False, verdict), None

    def run(self, spec: TrialSpec) -> TrialRecord:
        started = _now()
        prompt_id = f"{spec.task.value}.{Stage.PRIMARY.value}"
        timing: dict[str, Any] = {"started_at": started}
        try:
            request, prompt_id = self.primary_request(spec)
            reply = self.gateway.send_cached(request)
        except AuthError:
            raise
        except (ProviderError, OSError, ValueError) as exc:
            timing["finished_at"] = _now()
            return TrialRecord(spec.id, spec.task, prompt_id, "", self.config.judge_mode, None,
                               grading.UNPARSEABLE, Outcome.PROVIDER_FAILURE, f"primary call failed: {exc}", timing)
        timing.update(latency_ms=reply.latency_ms, from_cache=reply.from_cache)
        judge_response, verdict, outcome, error = self.grade(spec, reply.text, self.config.judge_mode)
        timing["finished_at"] = _now()
        return TrialRecord(spec.id, spec.task, prompt_id, reply.text, self.config.judge_mode, judge_response,
                           verdict, outcome, error, timing)


def execute(pending: Sequence[TrialSpec], runner: TrialRunner, ledger: RunLedger,
            parallelism: int | None = None,
            on_record: Callable[[TrialRecord], None] | None = None) -> RunLedger:
    """Run ``pending`` trials, appending each record to ``ledger`` in plan order.

    Up to ``parallelism`` trials are in flight at once; only the calling
    thread writes to the ledger. Per-trial provider failures are recorded;
    an auth failure or a ledger write failure stops the run after cancelling
    work not yet started.
    """
    parallelism = parallelism or runner.config.parallelism
    if not pending:
        return ledger
    pool = ThreadPoolExecutor(max_workers=parallelism, thread_name_prefix="trial")
    try:
        futures = [pool.submit(runner.run, spec) for spec in pending]
        for fut in futures:
            record = fut.result()
            ledger.append(record)
            if on_record is not None:
                on_record(record)
    finally:
        pool.shutdown(wait=True, cancel_futures=True)
    return ledger


@dataclass
class RunSummary:
    protocol: str
    total: int
    pending_before: int
    executed: int
    ledger_path: Path


def run_protocol(config: RunConfig, protocol: Protocol, gateway: Gateway | None = None,
                 force_new: bool = False, on_record: Callable[[TrialRecord], None] | None = None) -> RunSummary:
    config.check_templates(protocol.task)
    run_dir = config.protocol_run_dir(protocol.name)
    ledger = open_ledger(run_dir, protocol, config, force_new=force_new)
    pending = plan(protocol, ledger)
    log.info("%s: %d of %d trials pending", protocol.name, len(pending), len(protocol))
    before = len(ledger)
    gateway = gateway or build_gateway(config)
    runner = TrialRunner(protocol, config, gateway)
    try:
        execute(pending, runner, ledger, config.parallelism, on_record)
    finally:
        executed = len(ledger) - before
    return RunSummary(protocol.name, len(protocol), len(pending), executed, ledger.path)


# --------------------------------------------------------------------------
# regrade / report


def read_ledger_records(path: Path) -> list[TrialRecord]:
    return list(RunLedger(path))


def regrade(run_dir: Path, config: RunConfig, judge_mode: str, gateway: Gateway | None = None) -> Path:
    """Re-judge ledgered primary responses into ``ledger.regrade-<mode>.jsonl``.

    No primary call is ever repeated; offline mode makes no provider call
    at all. The original ledger is left untouched.
    """
    if judge_mode not in JUDGE_MODES:
        raise ContractError(f"judge mode must be one of {JUDGE_MODES}")
    protocol = Protocol.from_json(_read(str(run_dir / "protocol.json")))
    source = RunLedger(run_dir / LEDGER_NAME)
    cfg = replace(config, judge_mode=judge_mode)
    if judge_mode == "llm":
        cfg.check_templates(protocol.task)
        gateway = gateway or build_gateway(cfg)
    runner = TrialRunner(protocol, cfg, gateway)  # type: ignore[arg-type]
    trials = protocol.by_id()
    out_path = run_dir / f"ledger.regrade-{judge_mode}.jsonl"
    tmp = out_path.with_suffix(".jsonl.tmp")
    if tmp.exists():
        tmp.unlink()
    out = RunLedger(tmp)
    out.start(cfg.digest(), protocol.digest(), protocol.name)
    for rec in source:
        spec = trials[rec.spec_id]
        if rec.outcome is Outcome.PROVIDER_FAILURE and rec.error and rec.error.startswith("primary"):
            new = replace(rec, judge_mode=judge_mode)
        else:
            judge_response, verdict, outcome, error = runner.grade(spec, rec.primary_response, judge_mode)
            new = replace(rec, judge_mode=judge_mode, judge_response=judge_response, verdict=verdict,
                          outcome=outcome, error=error)
        out.append(new)
    os.replace(tmp, out_path)
    return out_path


def report_for(run_dir: Path, ledger_name: str = LEDGER_NAME) -> MetricsReport:
    protocol = Protocol.from_json(_read(str(run_dir / "protocol.json")))
    return aggregate(RunLedger(run_dir / ledger_name), protocol)


def strip_timing(ledger_text: str) -> str:
    """Ledger text with per-record timing removed, for equivalence checks."""
    out = []
    for line in ledger_text.splitlines():
        obj = json.loads(line)
        if obj.get("type") == "record":
            obj["record"].pop("timing", None)
        out.append(json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")))
    return "\n".join(out) + "\n"
