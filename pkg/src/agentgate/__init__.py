"""Secure gateway runtime for LLM-backed agents.

Subsystems: composable state steps (``state_core``), per-user sessions
(``session``), slice-preserving and homomorphic ciphers (``fpets``, ``she``),
the privacy shield, the sandbox policy engine, model backends, the agent
loop, the evaluation harness, and the HTTP/CLI gateway.
"""

__version__ = "0.1.0"
