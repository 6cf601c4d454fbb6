# app/service.py - the model served over HTTP, loaded once on first use
import logging
import os
import threading
from typing import Optional

from app.errors import CheckpointError
from app.generator import Generator
from app.training import load_models

logger = logging.getLogger(__name__)

_lock = threading.Lock()
_model: Optional[Generator] = None


def checkpoint_path() -> Optional[str]:
    # read at call time so `cli serve --checkpoint` can set it before startup
    return os.getenv("LOCALINR_CHECKPOINT")


def loaded_model() -> Optional[Generator]:
    return _model


def set_model(model: Optional[Generator]) -> None:
    global _model
    with _lock:
        _model = model


def get_model() -> Generator:
    """FastAPI dependency: the generator of LOCALINR_CHECKPOINT."""
    global _model
    with _lock:
        if _model is None:
            path = checkpoint_path()
            if not path:
                raise CheckpointError("no model configured, set LOCALINR_CHECKPOINT")
            _model, _, _ = load_models(path)
            logger.info("serving %s (grid %s, %d parameters)", path, _model.grid.label, _model.parameter_count)
        return _model
