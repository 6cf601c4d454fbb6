import json
import logging
from pathlib import Path
from typing import List

from fastapi import APIRouter, HTTPException

from app.config import RESOLVED_CONFIG_NAME, RUNS_DIR
from app.schemas import RunHistory, RunSummary
from app.training import CHECKPOINT_NAME, HISTORY_NAME, read_history

logger = logging.getLogger(__name__)

router = APIRouter(
    tags=["🗂 Runs"]
)


def _run_dir(run_id: str) -> Path:
    run_dir = (RUNS_DIR / run_id).resolve()
    if run_dir.parent != RUNS_DIR.resolve() or not run_dir.is_dir():
        raise HTTPException(
            status_code=404,
            detail=f"Запуск '{run_id}' не найден",
            headers={"X-Error-Type": "run_not_found"},
        )
    return run_dir


def _summary(run_dir: Path) -> RunSummary:
    config = None
    config_path = run_dir / RESOLVED_CONFIG_NAME
    if config_path.is_file():
        try:
            config = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            logger.warning("unreadable %s in %s", RESOLVED_CONFIG_NAME, run_dir)
    epochs = 0
    if (run_dir / HISTORY_NAME).is_file():
        epochs = len(read_history(run_dir / HISTORY_NAME).records)
    return RunSummary(
        run_id=run_dir.name,
        has_checkpoint=(run_dir / CHECKPOINT_NAME).is_file(),
        epochs_completed=epochs,
        config=config,
    )


@router.get("",
    response_model=List[RunSummary],
    summary="Список запусков",
    description="""
    Все каталоги внутри `LOCALINR_RUNS_DIR`, отсортированные по имени.

    Для запуска без `history.csv` возвращается `epochs_completed = 0`.
    """
)
def list_runs():
    if not RUNS_DIR.is_dir():
        return []
    return [_summary(path) for path in sorted(RUNS_DIR.iterdir()) if path.is_dir()]


@router.get("/{run_id}",
    response_model=RunSummary,
    summary="Описание запуска",
    description="""
    Итоговая конфигурация, наличие чекпоинта и число завершенных эпох.

    **Возможные ошибки:**
    - `404`: каталог запуска не найден
    """
)
def get_run(run_id: str):
    return _summary(_run_dir(run_id))


@router.get("/{run_id}/history",
    response_model=RunHistory,
    summary="История запуска по эпохам",
    description="""
    Строки `history.csv`: потери, MSE/SSIM/PSNR на валидации, шаг обучения, sigma шума,
    контрольное значение цели и время.

    **Возможные ошибки:**
    - `404`: запуск не найден или еще не завершил ни одной эпохи
    """
)
def get_history(run_id: str):
    path = _run_dir(run_id) / HISTORY_NAME
    if not path.is_file():
        raise HTTPException(
            status_code=404,
            detail=f"У запуска '{run_id}' пока нет истории",
            headers={"X-Error-Type": "history_not_found"},
        )
    return read_history(path)
