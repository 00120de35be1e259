import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

# Load .env from repo root for local/dev runs (no-op if missing)
# Avoid loading .env in production so platform env vars are authoritative.
_ENV_PATH = Path(__file__).resolve().parents[2] / ".env"
_ENVIRONMENT = os.environ.get("ENVIRONMENT", "").strip().lower()
if _ENVIRONMENT not in {"production", "prod"}:
    load_dotenv(_ENV_PATH, override=False)


@dataclass
class ApiPaths:
    events: str
    syncing: str
    produce_block: str
    beacon_block: str
    committees: str
    genesis: str


@dataclass
class ClientConfig:
    request_timeout_ms: int
    max_retries: int
    backoff_base_ms: int
    backoff_cap_ms: int


@dataclass
class LoggingConfig:
    path: str
    level: str
    json: bool


class Settings:
    def __init__(self) -> None:
        def _env_int(name: str, default: int) -> int:
            try:
                return int(os.environ.get(name, str(default)))
            except Exception:
                return default

        def _env_bool(name: str, default: bool = False) -> bool:
            raw = os.environ.get(name)
            if raw is None:
                return default
            return raw.strip().lower() in {"1", "true", "yes", "on"}

        # Record logs land here unless a path is given explicitly.
        self.log_dir = os.environ.get("SW_LOG_DIR", "runs")

        self.logging = LoggingConfig(
            path=os.environ.get("SW_LOG_PATH", ""),
            level=os.environ.get("SW_LOG_LEVEL", "INFO").strip().upper() or "INFO",
            json=_env_bool("SW_LOG_JSON", default=False),
        )

        self.client = ClientConfig(
            request_timeout_ms=max(1, _env_int("SW_REQUEST_TIMEOUT_MS", 4000)),
            max_retries=max(0, _env_int("SW_MAX_RETRIES", 8)),
            backoff_base_ms=max(1, _env_int("SW_BACKOFF_BASE_MS", 500)),
            backoff_cap_ms=max(1, _env_int("SW_BACKOFF_CAP_MS", 30000)),
        )

        # Events stamped this far before their slot start are clamped; further out they are rejected.
        self.clock_tolerance_ms = max(0, _env_int("SW_CLOCK_TOLERANCE_MS", 500))

        self.base_reward = max(1, _env_int("SW_BASE_REWARD", 64))

        # Prefixes mirror the standard beacon API.
        self.api = ApiPaths(
            events=os.environ.get("SW_EVENTS_PATH", "/eth/v1/events"),
            syncing=os.environ.get("SW_SYNCING_PATH", "/eth/v1/node/syncing"),
            produce_block=os.environ.get("SW_BLOCKS_PATH", "/eth/v2/validator/blocks"),
            beacon_block=os.environ.get("SW_BEACON_BLOCKS_PATH", "/eth/v2/beacon/blocks"),
            committees=os.environ.get("SW_COMMITTEES_PATH", "/eth/v1/beacon/states/head/committees"),
            genesis=os.environ.get("SW_GENESIS_PATH", "/eth/v1/beacon/genesis"),
        )


settings = Settings()
