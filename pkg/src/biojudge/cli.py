"""Command line: ``biojudge {ingest,run,grade,report,validate}``.

Exit codes: 0 success, 1 usage error, 2 run failure.
"""

from __future__ import annotations

import argparse
import difflib
import logging
import sys
import warnings
from pathlib import Path
from typing import Sequence

from biojudge.errors import BiojudgeError
from biojudge.metrics import comparison_table, parse_baselines, per_class_csv, render
from biojudge.prompts import DEFAULT_FRAMING_PATTERNS, default_templates, templates_from_json, validate_template
from biojudge.protocol import CIFAR10_LABELS, Task
from biojudge.runner import (
    JUDGE_MODES,
    LEDGER_NAME,
    PARSERS,
    ProtocolSource,
    RunConfig,
    load_config,
    load_protocol,
    regrade,
    report_for,
    run_protocol,
)

log = logging.getLogger("biojudge")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2
FORMATS = ("markdown", "csv", "json")
_EXT = {"markdown": "md", "csv": "csv", "json": "json"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit(2); usage errors are 1 here
        if "unrecognized arguments" in message:
            flags = [a for a in message.split(":", 1)[1].split() if a.startswith("-")]
            known = self._all_flags()
            hints = []
            for flag in flags:
                close = difflib.get_close_matches(flag.split("=")[0], known, n=1)
                if close:
                    hints.append(f"{flag} -> did you mean {close[0]}?")
            if hints:
                message += " (" + "; ".join(hints) + ")"
        raise UsageError(f"{self.prog}: error: {message}")

    def _all_flags(self) -> list[str]:
        flags = []
        for action in self._actions:
            flags.extend(action.option_strings)
            if isinstance(action, argparse._SubParsersAction):
                for sub in action.choices.values():
                    flags.extend(s for a in sub._actions for s in a.option_strings)
        return sorted(set(flags))


def _add_config_args(p: argparse.ArgumentParser, protocol_required: bool = False) -> None:
    p.add_argument("--config", required=True, help="TOML run config")
    p.add_argument("--protocol", action="append", required=protocol_required,
                   help="protocol name from the config (repeatable; default: all)")
    p.add_argument("--run-dir", help="override run_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="biojudge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="parse, validate and serialize a protocol")
    p.add_argument("--config", help="take the protocol definition from this config")
    p.add_argument("--protocol", help="protocol name in the config")
    p.add_argument("--parser", choices=PARSERS)
    p.add_argument("--source", help="pairs file, CSV, manifest or UTKFace directory")
    p.add_argument("--image-root", default=".")
    p.add_argument("--name")
    p.add_argument("--task", choices=[t.value for t in Task])
    p.add_argument("--label-set", help="comma-separated labels, or 'cifar10'")
    p.add_argument("--no-check-files", action="store_true")
    p.add_argument("--out", help="write protocol JSON here (default: stdout)")

    p = sub.add_parser("run", help="plan and execute pending trials")
    _add_config_args(p)
    p.add_argument("--judge", choices=JUDGE_MODES)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--cache-dir")
    p.add_argument("--model")
    p.add_argument("--force-new", action="store_true", help="start a fresh ledger if the old one does not match")

    p = sub.add_parser("grade", help="re-grade ledgered responses with another judge mode")
    _add_config_args(p)
    p.add_argument("--judge", choices=JUDGE_MODES, required=True)

    p = sub.add_parser("report", help="aggregate ledgers and write reports")
    _add_config_args(p)
    p.add_argument("--format", choices=FORMATS, action="append")
    p.add_argument("--judge", choices=JUDGE_MODES, help="report a regraded ledger instead of the original")
    p.add_argument("--baselines", help="baseline CSV (method,protocol,accuracy_percent)")
    p.add_argument("--method-name", help="row name for harness results (default: model id)")
    p.add_argument("--metric", choices=("strict", "adjusted", "exclusion_adjusted"), default="strict")

    p = sub.add_parser("validate", help="check templates and config")
    p.add_argument("--config")
    p.add_argument("--templates", help="template override JSON")
    return parser


def _label_set(value: str | None) -> tuple[str, ...] | None:
    if value is None:
        return None
    if value.lower() == "cifar10":
        return CIFAR10_LABELS
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _config(args: argparse.Namespace, **overrides) -> RunConfig:
    return load_config(args.config, {"run_dir": getattr(args, "run_dir", None), **overrides})


def _selected(config: RunConfig, names: Sequence[str] | None) -> list[ProtocolSource]:
    if not names:
        if not config.protocols:
            raise UsageError("config defines no [protocols.<name>] tables")
        return list(config.protocols.values())
    missing = [n for n in names if n not in config.protocols]
    if missing:
        hint = difflib.get_close_matches(missing[0], list(config.protocols), n=1)
        raise UsageError(f"unknown protocol {missing[0]!r}" + (f"; did you mean {hint[0]!r}?" if hint else ""))
    return [config.protocols[n] for n in names]


def cmd_ingest(args: argparse.Namespace) -> int:
    if args.config:
        if not args.protocol:
            raise UsageError("--protocol is required with --config")
        config = load_config(args.config)
        src = _selected(config, [args.protocol])[0]
        protocol = src.load(config.seed)
    else:
        if not (args.parser and args.source):
            raise UsageError("ingest needs --parser and --source (or --config/--protocol)")
        src = ProtocolSource(
            name=args.name or Path(args.source).stem,
            parser=args.parser,
            source=args.source,
            image_root=args.image_root,
            task=args.task,
            label_set=_label_set(args.label_set),
            check_files=not args.no_check_files,
        )
        protocol = load_protocol(src)
    text = protocol.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    counts = ", ".join(f"{k}={v}" for k, v in sorted(protocol.category_counts.items()))
    print(f"{protocol.name}: {len(protocol)} {protocol.task.value} trials ({counts})", file=sys.stderr)
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = _config(args, judge_mode=args.judge, parallelism=args.parallelism, cache_dir=args.cache_dir,
                     model_id=args.model)
    for src in _selected(config, args.protocol):
        protocol = src.load(config.seed)
        summary = run_protocol(config, protocol, force_new=args.force_new)
        print(f"{summary.protocol}: {summary.pending_before} pending, {summary.executed} executed, "
              f"{summary.total} total -> {summary.ledger_path}")
    return EXIT_OK


def cmd_grade(args: argparse.Namespace) -> int:
    config = _config(args)
    for src in _selected(config, args.protocol):
        path = regrade(config.protocol_run_dir(src.name), config, args.judge)
        report = report_for(path.parent, path.name)
        print(f"{src.name}: regraded with {args.judge} judge -> {path}")
        sys.stdout.write(render(report, "markdown"))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    config = _config(args)
    formats = args.format or ["markdown"]
    ledger_name = f"ledger.regrade-{args.judge}.jsonl" if args.judge else LEDGER_NAME
    out_dir = config.run_dir / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for src in _selected(config, args.protocol):
        run_dir = config.protocol_run_dir(src.name)
        if not (run_dir / ledger_name).exists():
            raise BiojudgeError(f"no ledger at {run_dir / ledger_name}; run the protocol first")
        report = report_for(run_dir, ledger_name)
        reports.append(report)
        for fmt in formats:
            path = out_dir / f"{report.protocol_name}.{_EXT[fmt]}"
            path.write_text(render(report, fmt), encoding="utf-8")
            print(path)
        if report.per_class:
            path = out_dir / f"{report.protocol_name}.per_class.csv"
            path.write_text(per_class_csv(report), encoding="utf-8")
            print(path)
    baselines_path = args.baselines or config.baselines
    if baselines_path or len(reports) > 1:
        baselines = parse_baselines(Path(baselines_path).read_text(encoding="utf-8")) if baselines_path else []
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            table = comparison_table(reports, baselines, args.method_name or config.model_id, args.metric)
        for w in caught:
            log.warning("%s", w.message)
        for fmt in formats:
            path = out_dir / f"comparison.{_EXT[fmt]}"
            path.write_text(render(table, fmt), encoding="utf-8")
            print(path)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    templates = default_templates()
    problems: list[str] = []
    if args.config:
        config = load_config(args.config)
        templates = config.templates()
        for src in config.protocols.values():
            if src.parser not in PARSERS:
                problems.append(f"protocol {src.name}: unknown parser {src.parser!r}")
            if not Path(src.source).exists():
                problems.append(f"protocol {src.name}: source {src.source} does not exist")
            if src.task is not None and src.task not in {t.value for t in Task}:
                problems.append(f"protocol {src.name}: unknown task {src.task!r}")
        if config.provider_kind == "mock" and config.mock_script and not Path(config.mock_script).exists():
            problems.append(f"mock script {config.mock_script} does not exist")
    if args.templates:
        try:
            templates = templates_from_json(Path(args.templates).read_text(encoding="utf-8"), base=templates)
        except ValueError as exc:
            problems.append(str(exc))
    for tmpl in templates.values():
        rep = validate_template(tmpl, DEFAULT_FRAMING_PATTERNS)
        problems.extend(f"{rep.template_id}: {v}" for v in rep.violations)
    for p in problems:
        print(p)
    if problems:
        return EXIT_FAILURE
    print(f"ok: {len(templates)} templates valid")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "run": cmd_run,
    "grade": cmd_grade,
    "report": cmd_report,
    "validate": cmd_validate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"biojudge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BiojudgeError, OSError, ValueError) as exc:
        print(f"biojudge: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
