"""Sandbox for agent actions: policy evaluation, confined execution, remote-access control."""

from .corpus import AttackCounts, AttackTable, run_attack_corpus
from .executor import DeniedByPolicy, ExecutionResult, SpawnFailure, execute
from .network import Decision, NetworkPolicy, TokenBucket, check_remote
from .policy import (
    Limits,
    ParseError,
    PolicyRule,
    PolicyVerdict,
    ProfileError,
    SandboxProfile,
    evaluate,
    load_profile,
    parse_command,
    parse_profile,
)

__all__ = [
    "AttackCounts",
    "AttackTable",
    "Decision",
    "DeniedByPolicy",
    "ExecutionResult",
    "Limits",
    "NetworkPolicy",
    "ParseError",
    "PolicyRule",
    "PolicyVerdict",
    "ProfileError",
    "SandboxProfile",
    "SpawnFailure",
    "TokenBucket",
    "check_remote",
    "evaluate",
    "execute",
    "load_profile",
    "parse_command",
    "parse_profile",
    "run_attack_corpus",
]
