"""Run allowed commands as supervised child processes confined to fs_root."""

from __future__ import annotations

import os
import resource
import signal
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import psutil

from .policy import Limits, SandboxProfile, evaluate, parse_command

POLL_INTERVAL = 0.01
_SAFE_PATH = "/usr/local/bin:/usr/bin:/bin"


class DeniedByPolicy(PermissionError):
    def __init__(self, command: str, rule_id: str, category: str):
        super().__init__(f"denied by rule {rule_id} ({category}): {command!r}")
        self.rule_id = rule_id
        self.category = category


class SpawnFailure(OSError):
    pass


@dataclass
class ResourceUsage:
    cpu_seconds: float = 0.0
    wall_seconds: float = 0.0
    peak_memory: int = 0  # bytes


@dataclass
class ExecutionResult:
    exit_status: Optional[int]
    stdout: str
    stderr: str
    resources_used: ResourceUsage = field(default_factory=ResourceUsage)
    limit_breached: Optional[str] = None
    truncated: bool = False
    simulated: bool = False

    @property
    def ok(self) -> bool:
        return self.exit_status == 0 and self.limit_breached is None


class _CappedReader(threading.Thread):
    def __init__(self, stream, cap: Optional[int]):
        super().__init__(daemon=True)
        self.stream = stream
        self.cap = cap
        self.buf = bytearray()
        self.total = 0

    def run(self) -> None:
        while True:
            chunk = self.stream.read1(65536) if hasattr(self.stream, "read1") else self.stream.read(65536)
            if not chunk:
                break
            self.total += len(chunk)
            room = len(chunk) if self.cap is None else max(0, self.cap - len(self.buf))
            self.buf += chunk[:room]
        self.stream.close()

    def text(self) -> str:
        # 'ignore' keeps the decoded text within the byte cap.
        return self.buf.decode("utf-8", errors="ignore")

    @property
    def truncated(self) -> bool:
        return self.cap is not None and self.total > self.cap


def _preexec(limits: Limits):
    def setup() -> None:
        resource.setrlimit(resource.RLIMIT_CORE, (0, 0))
        if limits.cpu_seconds is not None:
            sec = max(1, int(limits.cpu_seconds + 0.999))
            resource.setrlimit(resource.RLIMIT_CPU, (sec, sec + 1))
        if limits.memory_bytes is not None:
            resource.setrlimit(resource.RLIMIT_AS, (limits.memory_bytes, limits.memory_bytes))

    return setup


def _tree(pid: int) -> list[psutil.Process]:
    try:
        root = psutil.Process(pid)
        return [root] + root.children(recursive=True)
    except psutil.Error:
        return []


def _kill_group(pgid: int) -> None:
    try:
        os.killpg(pgid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass


def execute(profile: SandboxProfile, command: str, *, dry_run: bool = False, effect: str | None = None) -> ExecutionResult:
    """Run ``command`` under ``profile``.

    The supervisor kills the whole process group on the first breached
    limit.  With ``dry_run`` nothing is spawned; the result reports which
    limit would stop an attack exhausting ``effect`` (a limit name), or
    none when the profile leaves that resource unlimited.
    """
    verdict = evaluate(profile, command)
    if not verdict.allowed:
        raise DeniedByPolicy(command, verdict.rule_id, verdict.category)
    limits = profile.limits
    if dry_run:
        breached = effect if effect is not None and getattr(limits, effect, None) is not None else None
        return ExecutionResult(None, "", "", limit_breached=breached, simulated=True)

    root = profile.fs_root
    root.mkdir(parents=True, exist_ok=True)
    if profile.shell:
        argv = ["/bin/bash", "-c", command]
    else:
        parsed = parse_command(command)
        if len(parsed.segments) != 1 or parsed.operators:
            raise DeniedByPolicy(command, "executor:argv", "integrity")
        argv = list(parsed.segments[0])
    env = {"PATH": _SAFE_PATH, "HOME": str(root), "LANG": "C.UTF-8", "PWD": str(root)}

    start = time.monotonic()
    try:
        proc = subprocess.Popen(
            argv,
            cwd=root,
            env=env,
            stdin=subprocess.DEVNULL,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,
            preexec_fn=_preexec(limits),
        )
    except OSError as exc:
        raise SpawnFailure(f"cannot spawn {argv[0]!r}: {exc}") from exc

    readers = [_CappedReader(proc.stdout, limits.max_output_bytes), _CappedReader(proc.stderr, limits.max_output_bytes)]
    for r in readers:
        r.start()

    breached = None
    peak_rss = 0
    status = None
    rusage = None
    while True:
        pid, raw_status, rusage = os.wait4(proc.pid, os.WNOHANG)
        if pid == proc.pid:
            status = os.waitstatus_to_exitcode(raw_status)
            break
        elapsed = time.monotonic() - start
        procs = _tree(proc.pid)
        rss = 0
        for p in procs:
            try:
                rss += p.memory_info().rss
            except psutil.Error:
                pass
        peak_rss = max(peak_rss, rss)
        if limits.wall_seconds is not None and elapsed > limits.wall_seconds:
            breached = "wall_seconds"
        elif limits.max_processes is not None and len(procs) > limits.max_processes:
            breached = "max_processes"
        elif limits.memory_bytes is not None and rss > limits.memory_bytes:
            breached = "memory_bytes"
        if breached:
            _kill_group(proc.pid)
            _, raw_status, rusage = os.wait4(proc.pid, 0)
            status = os.waitstatus_to_exitcode(raw_status)
            break
        time.sleep(POLL_INTERVAL)
    proc.returncode = status
    # Background children may still hold the pipes open.
    _kill_group(proc.pid)
    for r in readers:
        r.join(timeout=2.0)

    cpu = rusage.ru_utime + rusage.ru_stime if rusage else 0.0
    peak = max(peak_rss, (rusage.ru_maxrss * 1024) if rusage else 0)
    if breached is None and status is not None and status < 0 and -status in (signal.SIGXCPU, signal.SIGKILL):
        if limits.cpu_seconds is not None and cpu >= limits.cpu_seconds * 0.9:
            breached = "cpu_seconds"
    if breached is None and limits.memory_bytes is not None and status != 0:
        err = readers[1].text()
        if "MemoryError" in err or "Cannot allocate memory" in err or "memory exhausted" in err:
            breached = "memory_bytes"
    usage = ResourceUsage(cpu, time.monotonic() - start, peak)
    return ExecutionResult(
        status,
        readers[0].text(),
        readers[1].text(),
        usage,
        breached,
        truncated=any(r.truncated for r in readers),
    )
