"""HTTP service exposing session-scoped agent turns.

Routes::

    POST   /sessions                 -> {"session_id"}
    POST   /sessions/{id}/messages   {"text"} -> {"answer", "steps_used"}
    DELETE /sessions/{id}            -> {"archived": true}
    GET    /sessions                 -> {"sessions": [...]}
    GET    /healthz                  -> {"status": "ok"}

Every message passes through the privacy shield on the way in and out and
every shell action through the sandbox profile.
"""

from __future__ import annotations

import logging
import tempfile
import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from fastapi import Depends, FastAPI, Header, HTTPException
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .actions import MalformedAction
from .agent_runtime import Agent, StepBudgetExhausted
from .llm_client import BackendUnavailable, LiveBackend, MalformedResponse, parse_mock_spec
from .privacy_shield import DEFAULT_DETECTORS, AuditLog, BlockedContent, ShieldPolicy, load_rules
from .sandbox import load_profile
from .session import CapacityExceeded, EpisodicStore, SessionClosed, SessionManager, UnknownSession
from .state_core import StepFailed

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class GatewayConfig:
    listen: str = "127.0.0.1:8080"
    capacity: int = 1024
    idle_timeout: float = 1800.0
    reap_interval: float = 30.0
    profile: str = "secure"
    fs_root: str = ""
    rules: str = ""
    shield_mode: str = "fpets"
    credential_pool_size: int = 1
    backend: str = "mock:scripted"
    auth_token: str = ""
    archive: str = ""
    audit_log: str = ""
    max_steps: int = 8

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)


_FIELD_TYPES = {f.name: f.type for f in fields(GatewayConfig)}


def load_config(path: str | Path) -> GatewayConfig:
    """Parse a ``key = value`` file; errors name the offending line."""
    cfg = GatewayConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        where = f"{path}:{lineno}"
        if not sep:
            raise ConfigError(f"{where}: expected 'key = value'")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{where}: unknown key {key!r}")
        kind = _FIELD_TYPES[key]
        try:
            if kind in ("int", int):
                setattr(cfg, key, int(value))
            elif kind in ("float", float):
                setattr(cfg, key, float(value))
            else:
                setattr(cfg, key, value)
        except ValueError:
            raise ConfigError(f"{where}: {key} needs a {kind} value, got {value!r}") from None
    validate_config(cfg, str(path))
    return cfg


def validate_config(cfg: GatewayConfig, source: str = "<config>") -> None:
    try:
        cfg.host_port
    except ValueError:
        raise ConfigError(f"{source}: listen must be host:port, got {cfg.listen!r}") from None
    if cfg.capacity < 1 or cfg.credential_pool_size < 1 or cfg.max_steps < 1:
        raise ConfigError(f"{source}: capacity, credential_pool_size and max_steps must be positive")
    if cfg.profile not in ("plain", "secure") and not Path(cfg.profile).is_file():
        raise ConfigError(f"{source}: profile file {cfg.profile!r} does not exist")
    if cfg.rules and not Path(cfg.rules).is_file():
        raise ConfigError(f"{source}: rules file {cfg.rules!r} does not exist")
    if not (cfg.backend == "live" or cfg.backend.startswith("mock:")):
        raise ConfigError(f"{source}: backend must be 'live' or 'mock:<kind>[:seed]'")
    try:
        ShieldPolicy(mode=cfg.shield_mode)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


class MessageIn(BaseModel):
    text: str


@dataclass
class Gateway:
    config: GatewayConfig
    sessions: SessionManager
    agent: Agent
    _stop: threading.Event = field(default_factory=threading.Event)

    def shutdown(self) -> int:
        self._stop.set()
        return len(self.sessions.close_all())

    def start_reaper(self) -> threading.Thread:
        def loop() -> None:
            while not self._stop.wait(self.config.reap_interval):
                for sid in self.sessions.reap_idle():
                    logger.info("[session:%s] reaped after idle timeout", sid)

        t = threading.Thread(target=loop, name="session-reaper", daemon=True)
        t.start()
        return t


def build_gateway(config: GatewayConfig, backend=None) -> Gateway:
    validate_config(config)
    archive = EpisodicStore(config.archive or None)
    sessions = SessionManager(config.capacity, config.idle_timeout, config.credential_pool_size, archive)
    fs_root = config.fs_root or tempfile.mkdtemp(prefix="agentgate-jail-")
    profile = load_profile(config.profile, fs_root=fs_root)
    detectors = tuple(load_rules(config.rules)) if config.rules else DEFAULT_DETECTORS
    policy = ShieldPolicy(mode=config.shield_mode, detectors=detectors)
    if backend is None:
        backend = LiveBackend.from_env() if config.backend == "live" else parse_mock_spec(config.backend[len("mock:"):])
    audit = AuditLog(config.audit_log) if config.audit_log else None
    agent = Agent(sessions, backend, policy=policy, profile=profile, max_steps=config.max_steps, audit_log=audit)
    return Gateway(config, sessions, agent)


def create_app(config: GatewayConfig, backend=None, gateway: Gateway | None = None) -> FastAPI:
    gw = gateway if gateway is not None else build_gateway(config, backend)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        gw.start_reaper()
        yield
        archived = gw.shutdown()
        logger.info("shutdown: archived %d open sessions", archived)

    app = FastAPI(title="agentgate", lifespan=lifespan)
    app.state.gateway = gw

    def authorize(authorization: Optional[str] = Header(default=None)) -> None:
        token = gw.config.auth_token
        if token and authorization != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or bad bearer token")

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    @app.post("/sessions", dependencies=[Depends(authorize)])
    def open_session() -> dict:
        try:
            sid = gw.sessions.open_session()
        except CapacityExceeded as exc:
            raise HTTPException(status_code=429, detail=str(exc)) from None
        return {"session_id": sid}

    @app.get("/sessions", dependencies=[Depends(authorize)])
    def list_sessions() -> dict:
        return {"sessions": gw.sessions.open_ids()}

    @app.post("/sessions/{sid}/messages", dependencies=[Depends(authorize)])
    def post_message(sid: str, body: MessageIn):
        try:
            try:
                result = gw.agent.run_turn(sid, body.text)
            except StepFailed as exc:
                # blocked tool feedback surfaces wrapped by the step runner
                if isinstance(exc.cause, BlockedContent):
                    raise exc.cause from None
                raise
        except (UnknownSession, SessionClosed):
            raise HTTPException(status_code=404, detail="unknown session") from None
        except BlockedContent as exc:
            logger.info("[session:%s] blocked by detector %s", sid, exc.detector)
            return JSONResponse(status_code=422, content={"error": "blocked", "detector": exc.detector})
        except StepBudgetExhausted as exc:
            raise HTTPException(status_code=503, detail=str(exc)) from None
        except (MalformedAction, StepFailed, BackendUnavailable, MalformedResponse) as exc:
            logger.warning("[session:%s] turn failed: %s", sid, type(exc).__name__)
            raise HTTPException(status_code=502, detail=f"turn failed: {type(exc).__name__}") from None
        return {"answer": result.text, "steps_used": result.steps_used}

    @app.delete("/sessions/{sid}", dependencies=[Depends(authorize)])
    def delete_session(sid: str) -> dict:
        try:
            gw.sessions.close_session(sid)
        except UnknownSession:
            raise HTTPException(status_code=404, detail="unknown session") from None
        return {"archived": True}

    return app


def serve(config: GatewayConfig, backend=None) -> None:
    import uvicorn

    host, port = config.host_port
    app = create_app(config, backend)
    try:
        uvicorn.run(app, host=host, port=port, log_level="info")
    except OSError as exc:
        raise OSError(f"cannot bind {config.listen}: {exc}") from exc
