import json
import logging
import os
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from dotenv import load_dotenv
from pydantic import ValidationError

from app.errors import ConfigError
from app.schemas import RunConfig

load_dotenv()

RUNS_DIR = Path(os.getenv("LOCALINR_RUNS_DIR", "./runs"))
SERVICE_CHECKPOINT = os.getenv("LOCALINR_CHECKPOINT")
DEFAULT_PRECISION = int(os.getenv("LOCALINR_PRECISION", "32"))
LOG_LEVEL = os.getenv("LOCALINR_LOG_LEVEL", "INFO")

RESOLVED_CONFIG_NAME = "resolved_config.json"

logger = logging.getLogger(__name__)


def _set_dotted(tree: dict, dotted: str, value: Any) -> None:
    node = tree
    parts = dotted.split(".")
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(dotted, f"'{part}' is not a section")
        node = child
    node[parts[-1]] = value


def _error_key(exc: ValidationError) -> str:
    first = exc.errors()[0]
    return ".".join(str(p) for p in first.get("loc", ())) or "config"


def parse_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Load a JSON run configuration, apply dotted-key overrides and validate.

    A missing path or an empty file yields the defaults.  Precedence, lowest
    first: field defaults, LOCALINR_PRECISION, the file, ``overrides``.
    Every failure is raised as :class:`ConfigError` naming the key.
    """
    tree: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError("config", f"file not found: {path}")
        text = path.read_text(encoding="utf-8").strip()
        if text:
            try:
                tree = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError("config", f"invalid JSON: {exc}") from None
            if not isinstance(tree, dict):
                raise ConfigError("config", "top level must be an object")
    tree.setdefault("precision", DEFAULT_PRECISION)
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(tree, key, value)
    try:
        cfg = RunConfig.model_validate(tree)
    except ValidationError as exc:
        key = _error_key(exc)
        raise ConfigError(key, exc.errors()[0]["msg"]) from None
    logger.debug("resolved configuration: %s", cfg.model_dump_json())
    return cfg


def write_resolved_config(cfg: RunConfig, run_dir: Union[str, Path]) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    target = run_dir / RESOLVED_CONFIG_NAME
    target.write_text(cfg.model_dump_json(indent=2), encoding="utf-8")
    return target
