import logging
import os

from pythonjsonlogger import jsonlogger

from .config import Settings, settings as default_settings

_PLAIN_FORMAT = "%(asctime)s %(levelname)s %(message)s"
_JSON_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"
_configured = False


def configure_logging(settings: Settings | None = None, force: bool = False) -> None:
    """Install the root handler once: file when SW_LOG_PATH is set, stderr otherwise."""
    global _configured
    if _configured and not force:
        return
    cfg = (settings or default_settings).logging

    formatter: logging.Formatter
    if cfg.json:
        formatter = jsonlogger.JsonFormatter(_JSON_FORMAT)
    else:
        formatter = logging.Formatter(_PLAIN_FORMAT)

    handler: logging.Handler
    fallback_reason = None
    if cfg.path:
        try:
            log_dir = os.path.dirname(os.path.abspath(cfg.path))
            if log_dir:
                os.makedirs(log_dir, exist_ok=True)
            handler = logging.FileHandler(cfg.path)
        except OSError as exc:
            handler = logging.StreamHandler()
            fallback_reason = str(exc)
    else:
        handler = logging.StreamHandler()
    handler.setFormatter(formatter)

    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(getattr(logging, cfg.level, logging.INFO))
    _configured = True

    if fallback_reason:
        logging.getLogger(__name__).warning("Failed to initialize file logging at %s: %s", cfg.path, fallback_reason)
