"""The ``hw`` command: init, run, rules, observe, eval, config."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Callable, Sequence, TextIO

from . import __version__
from . import evaluation as ev
from .memory import UnknownTopic
from .observe import (
    SCHEMA_VERSION,
    render_preferences,
    render_report,
    render_weights,
    revoke_preference_topic,
    show_preferences,
    show_report,
    show_weights,
)
from .rules import EmptyRule, compile_rule, confirm_and_persist
from .session import (
    AdapterFailure,
    CommandNotFound,
    RemoteAgentAdapter,
    ScriptedAgentAdapter,
    ScriptedResponder,
    TerminalResponder,
    VerificationCommandMissing,
    run_session,
)
from .workspace import NotInitialized, Workspace

EXIT_OK = 0
EXIT_BLOCKED = 2
EXIT_VERIFICATION_FAILED = 3
EXIT_ABORTED = 4
EXIT_USAGE = 64
EXIT_CONFIG = 78


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; ``hw`` reserves 2 for blocked sessions."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(out: TextIO, fmt: str, text: str, data: Any) -> None:
    if fmt == "machine":
        if isinstance(data, dict) and "schema" not in data:
            data = {"schema": SCHEMA_VERSION, **data}
        out.write(json.dumps(data, indent=2, sort_keys=True) + "\n")
    else:
        out.write(text + "\n")


def _format_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("text", "machine"), default="text",
                   help="plain text, or a versioned JSON document")


# -- commands ------------------------------------------------------------------


def cmd_init(args: argparse.Namespace, ws: Workspace, out: TextIO) -> int:
    created = ws.init()
    if created:
        out.write(f"initialized {ws.state_dir}\n")
    else:
        out.write(f"{ws.state_dir} already initialized; existing state kept\n")
    return EXIT_OK


_STRING_KEYS = {"verification_command", "mode"}


def _coerce(key: str, value: str) -> Any:
    """Parse numbers and booleans as JSON; command strings stay verbatim."""
    if key in _STRING_KEYS:
        return None if value in ("", "null") else value
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def cmd_config(args: argparse.Namespace, ws: Workspace, out: TextIO) -> int:
    config = ws.read_config()
    if args.key is None:
        _emit(out, args.format, "\n".join(f"{k} = {json.dumps(v)}" for k, v in sorted(config.items())),
              {"config": config})
        return EXIT_OK
    if args.value is None:
        if args.key not in config:
            raise UsageError(f"unknown config key {args.key!r}")
        _emit(out, args.format, json.dumps(config[args.key]), {args.key: config[args.key]})
        return EXIT_OK
    if args.key == "repo_id":
        raise UsageError("repo_id is derived from the repository path and cannot be set")
    with ws.lock():
        config[args.key] = _coerce(args.key, args.value)
        try:
            ws.write_config(config)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    out.write(f"{args.key} = {json.dumps(config[args.key])}\n")
    return EXIT_OK


def _spec_digest(path: str | None) -> str | None:
    if not path:
        return None
    text = Path(path).read_text(encoding="utf-8").strip()
    return text if len(text) <= 600 else text[:597].rstrip() + "..."


def cmd_run(args: argparse.Namespace, ws: Workspace, out: TextIO) -> int:
    task = args.task
    if args.adapter.startswith("scripted:"):
        fixture = args.adapter.split(":", 1)[1]
        doc = ev.read_fixture(fixture)
        adapter: Any = ScriptedAgentAdapter(doc["actions"], task=doc.get("task", ""))
        task = task or adapter.task
    elif args.adapter == "remote":
        endpoint = args.endpoint or os.environ.get("HW_REMOTE_ENDPOINT")
        if not endpoint:
            raise UsageError("remote adapter needs --endpoint or HW_REMOTE_ENDPOINT")
        adapter = RemoteAgentAdapter(endpoint, model=args.model or "",
                                     api_key=os.environ.get("HW_REMOTE_API_KEY"))
    else:
        raise UsageError(f"unknown adapter {args.adapter!r}; use scripted:<fixture> or remote")
    if not task:
        raise UsageError("a task description is required")
    # machine mode keeps stdout for the JSON summary; prompts and prose go to stderr
    prose = sys.stderr if args.format == "machine" else out
    if args.respond:
        doc = ev.read_fixture(args.respond)
        responder: Any = ScriptedResponder(doc["answers"] if isinstance(doc, dict) else doc, echo=prose)
    else:
        responder = TerminalResponder(stdout=prose)
    with ws.lock():
        stores = ws.open()
        try:
            summary = run_session(task, adapter, stores, responder, out=prose,
                                  spec_digest=_spec_digest(args.spec))
        except (VerificationCommandMissing, CommandNotFound) as exc:
            sys.stderr.write(f"hw: {exc}\n")
            return EXIT_CONFIG
        except AdapterFailure as exc:
            sys.stderr.write(f"hw: {exc}\n")
            return EXIT_ABORTED
    if args.format == "machine":
        _emit(out, "machine", "", summary.to_dict())
    return summary.exit_code()


def _confirm(prompt: str, stdin: TextIO, out: TextIO) -> bool:
    out.write(prompt)
    out.flush()
    return stdin.readline().strip().lower() in ("y", "yes")


def cmd_rules(args: argparse.Namespace, ws: Workspace, out: TextIO, stdin: TextIO) -> int:
    if args.rules_cmd == "add":
        try:
            interp = compile_rule(args.text)
        except EmptyRule as exc:
            raise UsageError(str(exc)) from None
        out.write(f"interpreted as {interp.rendering}\n")
        confirmed = args.yes or _confirm("persist this rule? [y/N] ", stdin, out)
        with ws.lock():
            stores = ws.open()
            rule_id = confirm_and_persist(interp, confirmed, stores.rules, stores.traces,
                                          stores.guidance)
        out.write(f"stored as {rule_id}\n" if rule_id else "discarded\n")
        return EXIT_OK
    if args.rules_cmd == "list":
        records = ws.open().rules.records
        lines = [f"{r['id']}  [{r['classification']}]  {r['source_text']}" for r in records]
        _emit(out, args.format, "\n".join(lines) or "(no rules)", {"rules": records})
        return EXIT_OK
    if args.rules_cmd == "remove":
        with ws.lock():
            removed = ws.open().rules.remove(args.rule_id)
        if not removed:
            raise UsageError(f"no rule with id {args.rule_id!r}")
        out.write(f"removed {args.rule_id}\n")
        return EXIT_OK
    raise UsageError("rules needs a subcommand: add, list, remove")


def cmd_observe(args: argparse.Namespace, ws: Workspace, out: TextIO) -> int:
    what = args.observe_cmd
    if what == "preferences":
        stores = ws.open()
        view = show_preferences(stores.preferences, stores.thresholds)
        _emit(out, args.format, render_preferences(view), view)
    elif what == "weights":
        view = show_weights(ws.open().policy)
        _emit(out, args.format, render_weights(view), view)
    elif what == "report":
        report = show_report(ws.open().traces, args.session)
        _emit(out, args.format, render_report(report), report.to_dict())
    elif what == "preferences-revoke":
        with ws.lock():
            stores = ws.open()
            try:
                message = revoke_preference_topic(args.topic, stores.preferences, stores.traces)
            except UnknownTopic as exc:
                raise UsageError(str(exc)) from None
        _emit(out, args.format, message, {"revoked": args.topic, "message": message})
    else:
        raise UsageError("observe needs a subcommand: preferences, weights, report, preferences-revoke")
    return EXIT_OK


def _fmt_rate(v: float | None) -> str:
    return "---" if v is None else f"{v:.2f}"


def cmd_eval(args: argparse.Namespace, ws: Workspace, out: TextIO) -> int:
    what = args.eval_cmd
    if what == "seed":
        with ws.lock():
            stores = ws.open()
            _, prefs = ev.seed_repo(ev.persona(args.persona), stores, args.seed)
        names = [p.name.value for p in prefs]
        _emit(out, args.format,
              f"seeded {args.persona}: {ev.REPLAY_FACTOR * 20} decisions; "
              f"preferences inferred: {', '.join(names) or 'none'}",
              {"persona": args.persona, "seed": args.seed, "preferences": names})
    elif what == "preseed":
        with ws.lock():
            n = ev.seed_history(ws.open(), args.fixture)
        out.write(f"recorded {n} prior decisions\n")
    elif what == "replay":
        tasks = ev.load_fixture(args.fixture)
        with ws.lock():
            routes = ev.replay_fixture_tasks(ws.open(), tasks)
        lines = [
            f"{r.task_id} op {r.proposal_id:>2}: {r.route.value}"
            + ("" if r.score is None else f" ({r.score:.3f})")
            for r in routes
        ]
        data = {"routes": [
            {"task": r.task_id, "op": r.proposal_id, "route": r.route.value,
             "initiator": r.initiator.value, "score": r.score}
            for r in routes
        ]}
        _emit(out, args.format, "\n".join(lines), data)
    elif what == "table1":
        rows = ev.run_table1(args.seed, ev.load_fixture(args.fixture))
        lines = [f"{'run':<6}{'chk':>5}{'ratio':>8}{'recall':>8}{'prec':>8}"]
        for row in rows:
            s = row.score
            lines.append(f"{row.run:<6}{s.checkins:>5}{s.ratio:>8.2f}"
                         f"{_fmt_rate(s.recall):>8}{_fmt_rate(s.precision):>8}")
        data = {"rows": [{"run": r.run, "persona": r.persona, **r.score.to_dict(),
                          "preferences": r.preferences} for r in rows]}
        _emit(out, args.format, "\n".join(lines), data)
    elif what == "personas":
        table = ev.coefficient_deviation_study(args.seed)
        names = list(table)
        lines = [f"{'feature':<24}" + "".join(f"{n:>12}" for n in names)]
        for feature in ev.DEVIATION_FEATURES:
            lines.append(f"{feature:<24}" + "".join(f"{table[n][feature]:>+12.4f}" for n in names))
        _emit(out, args.format, "\n".join(lines), {"deltas": table})
    else:
        raise UsageError("eval needs a subcommand: seed, preseed, replay, table1, personas")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hw", description="Governed coding-agent sessions with a learned check-in policy.")
    parser.add_argument("--version", action="version", version=f"hw {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("init", help="create .hedwig/ with default config and warm-started policy")

    p = sub.add_parser("config", help="show or set configuration values")
    p.add_argument("key", nargs="?")
    p.add_argument("value", nargs="?", help="JSON literal or bare string")
    _format_flag(p)

    p = sub.add_parser("run", help="run one governed agent session")
    p.add_argument("task", nargs="?", help="task description (scripted fixtures may supply one)")
    p.add_argument("--adapter", default="remote", help="scripted:<fixture> or remote")
    p.add_argument("--respond", help="fixture of scripted developer answers")
    p.add_argument("--endpoint", help="chat-completion URL for the remote adapter")
    p.add_argument("--model", help="model name for the remote adapter")
    p.add_argument("--spec", help="task specification file; a digest goes into the agent context")
    _format_flag(p)

    p = sub.add_parser("rules", help="manage natural-language rules")
    rsub = p.add_subparsers(dest="rules_cmd", parser_class=_Parser)
    a = rsub.add_parser("add", help="classify a rule, confirm, and store it")
    a.add_argument("text")
    a.add_argument("--yes", action="store_true", help="skip the confirmation prompt")
    ls = rsub.add_parser("list", help="list stored rules")
    _format_flag(ls)
    rm = rsub.add_parser("remove", help="delete a rule by id")
    rm.add_argument("rule_id")

    p = sub.add_parser("observe", help="inspect preferences, weights, and the governance report")
    osub = p.add_subparsers(dest="observe_cmd", parser_class=_Parser)
    for name, help_text in (("preferences", "active preferences, revoked topics, scoring bands"),
                            ("weights", "learned coefficients against warm-start priors")):
        _format_flag(osub.add_parser(name, help=help_text))
    r = osub.add_parser("report", help="check-ins by initiator, approvals, verification")
    r.add_argument("--session", help="restrict to one session id")
    _format_flag(r)
    r = osub.add_parser("preferences-revoke", help="force check-ins for a change category")
    r.add_argument("--topic", required=True)
    _format_flag(r)

    p = sub.add_parser("eval", help="persona seeding, fixture replay, and oracle metrics")
    esub = p.add_subparsers(dest="eval_cmd", parser_class=_Parser)
    e = esub.add_parser("seed", help="seed the trust database with a synthetic persona")
    e.add_argument("--persona", required=True, choices=[x.value for x in ev.Persona])
    e.add_argument("--seed", type=int, default=0)
    _format_flag(e)
    e = esub.add_parser("preseed", help="record the bundled walkthrough decision history")
    e.add_argument("--fixture", help="history fixture (defaults to the bundled one)")
    e = esub.add_parser("replay", help="replay fixture tasks with an auto-approving developer")
    e.add_argument("--fixture", help="task fixture (defaults to the bundled T1+T2 set)")
    _format_flag(e)
    for name, help_text in (("table1", "cautious vs permissive check-ins against oracle labels"),
                            ("personas", "coefficient shifts per persona")):
        e = esub.add_parser(name, help=help_text)
        e.add_argument("--seed", type=int, default=0)
        if name == "table1":
            e.add_argument("--fixture", help="task fixture (defaults to the bundled T1+T2 set)")
        _format_flag(e)
    return parser


_NEEDS_INIT = {"config", "run", "rules", "observe"}
_EVAL_NEEDS_INIT = {"seed", "preseed", "replay"}


def main(argv: Sequence[str] | None = None, *, stdout: TextIO | None = None,
         stdin: TextIO | None = None, cwd: Path | None = None) -> int:
    out = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    ws = Workspace.discover(cwd)
    handlers: dict[str, Callable[[], int]] = {
        "init": lambda: cmd_init(args, ws, out),
        "config": lambda: cmd_config(args, ws, out),
        "run": lambda: cmd_run(args, ws, out),
        "rules": lambda: cmd_rules(args, ws, out, stdin or sys.stdin),
        "observe": lambda: cmd_observe(args, ws, out),
        "eval": lambda: cmd_eval(args, ws, out),
    }
    try:
        if args.command in _NEEDS_INIT or (
            args.command == "eval" and getattr(args, "eval_cmd", None) in _EVAL_NEEDS_INIT
        ):
            ws.require()
        return handlers[args.command]()
    except NotInitialized as exc:
        sys.stderr.write(f"hw: {exc}\n")
        return EXIT_CONFIG
    except UsageError as exc:
        sys.stderr.write(f"hw: {exc}\n")
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        sys.stderr.write(f"hw: {exc}\n")
        return EXIT_CONFIG
    except RuntimeError as exc:  # lock held by another writer
        sys.stderr.write(f"hw: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
