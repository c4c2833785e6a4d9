"""Command-line entry point: ``agentgate <command> ...``.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import random
import sys

import httpx

from . import fpets, she
from .eval_harness import (
    MODEL_CALLS_PER_TASK,
    EvalReport,
    binomial_interval,
    gen_tasks,
    render_report,
    run_eval,
)
from .llm_client import LiveBackend, MockBackend, parse_mock_spec
from .sandbox import ProfileError, load_profile, run_attack_corpus
from .tasks import builtin_corpus, load_tasks

MODE_FLAGS = {"cipher": ("ciphertext",), "plain": ("plaintext",), "both": ("ciphertext", "plaintext")}

# Mock behaviors that answer a family correctly when they do not fail.
CORRECT_FOR = {"slicing": ("slicer", "scripted"), "ssn": ("slicer", "scripted"), "fhe": ("arithmetic", "scripted")}


class UsageError(Exception):
    pass


def _out(text: str, newline: bool = True) -> None:
    sys.stdout.write(text + ("\n" if newline else ""))
    sys.stdout.flush()


def _backend(args):
    if getattr(args, "live", False):
        return LiveBackend.from_env()
    try:
        return parse_mock_spec(args.mock)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def eval_thresholds(report: EvalReport, backend) -> list[tuple[str, bool, str]]:
    """Acceptance checks for a mock run; empty when the backend has none."""
    if not isinstance(backend, MockBackend):
        return []
    checks = []
    for row in report.rows:
        if backend.behavior not in CORRECT_FOR.get(row.family, ()):
            continue
        label = f"{row.family}/{row.mode}"
        if backend.failure_rate == 0:
            checks.append((label, row.n_ok == row.n, f"Succ={row.succ:.2f}, want 1.00"))
        else:
            p = (1 - backend.failure_rate) ** MODEL_CALLS_PER_TASK[row.family]
            lo, hi = binomial_interval(row.n, p)
            checks.append((label, lo <= row.n_ok <= hi, f"N'={row.n_ok}, want [{lo}, {hi}]"))
    return checks


def cmd_eval_run(args) -> int:
    backend = _backend(args)
    if args.tasks:
        tasks = load_tasks(args.tasks)
    else:
        tasks = gen_tasks(args.family, args.n, args.seed)
    report = EvalReport()
    for mode in MODE_FLAGS[args.mode]:
        report.merge(run_eval(tasks, backend, mode, seed=args.seed))
    _out(render_report(report, "table2"))
    if args.results:
        report.write_results(args.results)
    ok = True
    for label, passed, detail in eval_thresholds(report, backend):
        _out(f"{'PASS' if passed else 'FAIL'} {label}: {detail}")
        ok &= passed
    return 0 if ok else 1


def cmd_corpus_run(args) -> int:
    backend = _backend(args)
    profile = load_profile(args.profile, fs_root=".")
    corpus = load_tasks(args.corpus) if args.corpus else builtin_corpus()
    table = run_attack_corpus(profile, corpus, backend, dry_run_availability=not args.live_availability)
    _out(render_report(EvalReport(attack=table), "table1"))
    return 0


def _fpets_input(args) -> str:
    if args.stdin:
        return sys.stdin.read()
    if args.text is None:
        raise UsageError("one of --text or --stdin is required")
    return args.text


def cmd_fpets(args) -> int:
    try:
        key = fpets.FpetsKey.from_hex(args.key_hex)
    except ValueError as exc:
        raise UsageError(f"--key-hex: {exc}") from None
    fn = fpets.encrypt if args.fpets_cmd == "encrypt" else fpets.decrypt
    _out(fn(key, _fpets_input(args), offset=args.offset), newline=False)
    return 0


def _read_key(path: str) -> she.SheKey:
    with open(path, encoding="utf-8") as fh:
        return she.key_from_json(fh.read())


def cmd_she(args) -> int:
    op = args.she_cmd
    if op == "keygen":
        params = she.SheParams(t=args.t, eta=args.eta, rho=args.rho, gamma=args.gamma)
        text = she.key_to_json(she.keygen(params, seed=args.seed))
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        else:
            _out(text)
    elif op == "encrypt":
        key = _read_key(args.key)
        rng = None if args.seed is None else random.Random(args.seed)
        _out(she.encrypt(key, args.value, rng).serialize())
    elif op == "decrypt":
        key = _read_key(args.key)
        _out(str(she.decrypt(key, she.SheCiphertext.parse(args.token))))
    else:
        a, b = she.SheCiphertext.parse(args.a), she.SheCiphertext.parse(args.b)
        _out((she.add if op == "add" else she.mul)(a, b).serialize())
    return 0


def _client(args) -> httpx.Client:
    headers = {"Authorization": f"Bearer {args.token}"} if args.token else {}
    return httpx.Client(base_url=args.url, headers=headers, timeout=10.0)


def cmd_session(args) -> int:
    with _client(args) as client:
        if args.session_cmd == "list":
            resp = client.get("/sessions")
            resp.raise_for_status()
            for sid in resp.json()["sessions"]:
                _out(sid)
        else:
            resp = client.delete(f"/sessions/{args.session_id}")
            if resp.status_code == 404:
                print(f"unknown session {args.session_id}", file=sys.stderr)
                return 1
            resp.raise_for_status()
            _out("archived")
    return 0


def cmd_serve(args) -> int:
    from .gateway import load_config, serve

    cfg = load_config(args.config) if args.config else None
    if cfg is None:
        from .gateway import GatewayConfig

        cfg = GatewayConfig()
    if args.listen:
        cfg.listen = args.listen
    serve(cfg)
    return 0


def _add_backend_flags(p: argparse.ArgumentParser, default_mock: str) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--mock", default=default_mock, metavar="KIND[:SEED]",
                   help="mock backend: slicer, arithmetic, complier, refuser, scripted or flaky(f)[/kind]")
    g.add_argument("--live", action="store_true", help="use the HTTP backend configured from the environment")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentgate", description="Privacy-shielded, sandboxed agent gateway.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--listen", help="host:port, overrides the config")
    p.set_defaults(func=cmd_serve)

    ev = sub.add_parser("eval", help="round-trip task evaluation").add_subparsers(dest="eval_cmd", required=True)
    p = ev.add_parser("run", help="run one task family and print the Succ table")
    p.add_argument("--family", choices=sorted(CORRECT_FOR), default="slicing")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=sorted(MODE_FLAGS), default="both")
    p.add_argument("--tasks", help="NDJSON task file instead of generated tasks")
    p.add_argument("--results", help="write per-task outcomes as NDJSON")
    _add_backend_flags(p, "scripted")
    p.set_defaults(func=cmd_eval_run)

    co = sub.add_parser("corpus", help="sandbox attack corpus").add_subparsers(dest="corpus_cmd", required=True)
    p = co.add_parser("run", help="run the attack corpus and print the attack table")
    p.add_argument("--profile", default="secure", help="plain, secure or a profile file")
    p.add_argument("--corpus", help="NDJSON corpus file (default: bundled corpus)")
    p.add_argument("--live-availability", action="store_true",
                   help="really execute availability attacks instead of dry-running them")
    _add_backend_flags(p, "complier")
    p.set_defaults(func=cmd_corpus_run)

    fp = sub.add_parser("fpets", help="slice-preserving text cipher").add_subparsers(dest="fpets_cmd", required=True)
    for name in ("encrypt", "decrypt"):
        p = fp.add_parser(name)
        p.add_argument("--key-hex", required=True, help="32 hex characters")
        src = p.add_mutually_exclusive_group()
        src.add_argument("--text")
        src.add_argument("--stdin", action="store_true")
        p.add_argument("--offset", type=int, default=None, help="tweaked mode: absolute position of the first char")
        p.set_defaults(func=cmd_fpets)

    sh = sub.add_parser("she", help="integer homomorphic encryption").add_subparsers(dest="she_cmd", required=True)
    p = sh.add_parser("keygen")
    defaults = she.SheParams()
    p.add_argument("--t", type=int, default=defaults.t)
    p.add_argument("--eta", type=int, default=defaults.eta)
    p.add_argument("--rho", type=int, default=defaults.rho)
    p.add_argument("--gamma", type=int, default=defaults.gamma)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="write the key JSON here instead of stdout")
    p.set_defaults(func=cmd_she)
    p = sh.add_parser("encrypt")
    p.add_argument("--key", required=True, help="key JSON file")
    p.add_argument("--value", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_she)
    p = sh.add_parser("decrypt")
    p.add_argument("--key", required=True)
    p.add_argument("token")
    p.set_defaults(func=cmd_she)
    for name in ("add", "mul"):
        p = sh.add_parser(name)
        p.add_argument("a")
        p.add_argument("b")
        p.set_defaults(func=cmd_she)

    se = sub.add_parser("session", help="manage sessions on a running service").add_subparsers(
        dest="session_cmd", required=True)
    for name in ("list", "close"):
        p = se.add_parser(name)
        p.add_argument("--url", default="http://127.0.0.1:8080")
        p.add_argument("--token", help="bearer token")
        if name == "close":
            p.add_argument("session_id")
        p.set_defaults(func=cmd_session)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"agentgate: error: {exc}", file=sys.stderr)
        return 2
    except (ProfileError, she.SheError, ValueError, OSError, httpx.HTTPError, RuntimeError) as exc:
        print(f"agentgate: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
